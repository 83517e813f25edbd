//! Deterministic multi-process simulation.
//!
//! Processes are scripted state machines over abstract socket syscalls,
//! stepped one at a time by a seeded scheduler. Each step either enters a
//! syscall, completes one that can complete, or takes a compute step; every
//! syscall goes through the same [`Session`] a live tracer feeds.
//!
//! The kernel model is small: TCP buffers are unbounded, a connect completes
//! only once the listener's owner is waiting in `accept` (so the accept entry
//! always precedes the connect exit), and a process's descriptors close
//! silently when it exits.

mod config;
mod enumerate;
pub mod script;

use std::collections::BTreeMap;
use std::net::Ipv4Addr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use config::{
    load_config, parse_config, parse_op, preset, redis_like_config, write_truncation_rules, ConfigError, SeedPolicy,
    SimConfig, PRESETS, SERVER_ADDR,
};
pub use enumerate::{enumerate_all_schedules, Enumeration};

use crate::errno::Errno;
use crate::event::{ArgsDigest, Outcome, Phase, SyscallKind, Termination, ThreadId, Trace, TraceMeta};
use crate::fault::{self, FaultEngine, FaultError, FaultRule, Incoming, Injection, Mutator, PauseLength};
use crate::library::{Follower, RunLibrary};
use crate::session::{Session, SessionError};
use crate::stream::{Endpoint, StreamTracker};
use script::{serve, take_frame, Op, Script, ServerMode};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("quiescent with runnable work: {0}")]
    QuiescenceWithRunnableWork(String),
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error(transparent)]
    Fault(#[from] FaultError),
    #[error("schedule has no choice {index} (of {options}) at step {step}")]
    ScheduleMismatch { step: usize, index: usize, options: usize },
    #[error("more than {0} events")]
    BoundExceeded(usize),
}

/// Source of scheduling decisions.
pub trait Chooser {
    /// Picks one of `options` (always at least two).
    fn choose(&mut self, options: usize) -> usize;
}

pub struct SeededChooser(ChaCha8Rng);

impl SeededChooser {
    pub fn new(seed: u64) -> Self {
        SeededChooser(ChaCha8Rng::seed_from_u64(seed))
    }
}

impl Chooser for SeededChooser {
    fn choose(&mut self, options: usize) -> usize {
        self.0.gen_range(0..options)
    }
}

/// Replays a recorded choice sequence.
pub struct ReplayChooser {
    choices: Vec<usize>,
    next: usize,
    error: Option<(usize, usize)>,
}

impl ReplayChooser {
    pub fn new(choices: Vec<usize>) -> Self {
        ReplayChooser { choices, next: 0, error: None }
    }
}

impl Chooser for ReplayChooser {
    fn choose(&mut self, options: usize) -> usize {
        let i = self.next;
        self.next += 1;
        match self.choices.get(i) {
            Some(&c) if c < options => c,
            other => {
                self.error.get_or_insert((other.copied().unwrap_or(usize::MAX), options));
                0
            }
        }
    }
}

/// A finished simulated execution.
#[derive(Clone, Debug)]
pub struct SimRun {
    /// Finalized trace.
    pub trace: Trace,
    pub follower: Follower,
    /// Every choice made with two or more options, in order.
    pub schedule: Vec<usize>,
    pub injections: Vec<(usize, Injection)>,
    /// Whole frames each process received.
    pub frames: Vec<Vec<Vec<u8>>>,
    pub steps: u64,
}

impl SimRun {
    pub fn termination(&self) -> Termination {
        self.trace.meta().termination
    }
}

/// Runs one execution under the seeded scheduler.
///
/// `faults` are matched before the config's own rules. With a `library`, the
/// execution follows its runs as it goes.
pub fn run_simulation(
    config: &SimConfig,
    seed: u64,
    faults: &[FaultRule],
    library: Option<&RunLibrary>,
) -> Result<SimRun, SimError> {
    run_with(config, seed, faults, library, &mut SeededChooser::new(seed))
}

/// Re-executes a recorded schedule.
pub fn replay_schedule(
    config: &SimConfig,
    seed: u64,
    schedule: &[usize],
    faults: &[FaultRule],
    library: Option<&RunLibrary>,
) -> Result<SimRun, SimError> {
    let mut chooser = ReplayChooser::new(schedule.to_vec());
    let run = run_with(config, seed, faults, library, &mut chooser)?;
    if let Some((index, options)) = chooser.error {
        return Err(SimError::ScheduleMismatch { step: chooser.next, index, options });
    }
    Ok(run)
}

pub fn run_with(
    config: &SimConfig,
    seed: u64,
    faults: &[FaultRule],
    library: Option<&RunLibrary>,
    chooser: &mut dyn Chooser,
) -> Result<SimRun, SimError> {
    config.validate()?;
    let meta = TraceMeta { config: config.name.clone(), seed: Some(seed), ..Default::default() };
    let mut rules = faults.to_vec();
    rules.extend(config.faults.iter().cloned());
    let mut sim = Sim::new(config, meta, FaultEngine::new(rules, seed), library);
    let termination = loop {
        if sim.session.trace().len() >= config.max_events {
            break Termination::Partial;
        }
        match sim.decide()? {
            Decision::Finished(t) => break t,
            Decision::Choose(options) => {
                let i = if options.len() > 1 { sim.record_choice(chooser.choose(options.len())) } else { 0 };
                let (p, n) = options[i];
                let o = if n > 1 { sim.record_choice(chooser.choose(n)) } else { 0 };
                sim.step(p, o)?;
            }
        }
    };
    Ok(sim.finish(termination))
}

// ---------------------------------------------------------------------------
// Kernel model

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
enum Side {
    Client,
    Server,
}

impl Side {
    fn index(self) -> usize {
        self as usize
    }

    fn other(self) -> Side {
        match self {
            Side::Client => Side::Server,
            Side::Server => Side::Client,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
enum SockState {
    Fresh,
    Bound(Endpoint),
    Listening(Endpoint),
    Connected { conn: usize, side: Side },
    Closed,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
struct Sock {
    owner: u32,
    state: SockState,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
struct Conn {
    client: Endpoint,
    server: Endpoint,
    /// Bytes in flight towards each side, indexed by the receiving side.
    inbound: [Vec<u8>; 2],
    /// Whether each side has closed its end.
    closed: [bool; 2],
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
struct PendingAccept {
    listener: usize,
    owner: u32,
    claimed: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
struct Kernel {
    socks: Vec<Sock>,
    conns: Vec<Conn>,
    accepts: Vec<PendingAccept>,
}

impl Kernel {
    fn listener(&self, addr: Endpoint) -> Option<usize> {
        self.socks.iter().position(|s| s.state == SockState::Listening(addr))
    }

    fn addr_in_use(&self, addr: Endpoint) -> bool {
        self.socks.iter().any(|s| matches!(s.state, SockState::Bound(a) | SockState::Listening(a) if a == addr))
    }

    fn close(&mut self, sock: usize) {
        match self.socks[sock].state {
            SockState::Connected { conn, side } => self.conns[conn].closed[side.index()] = true,
            SockState::Listening(_) => self.accepts.retain(|a| a.listener != sock),
            _ => {}
        }
        self.socks[sock].state = SockState::Closed;
    }
}

// ---------------------------------------------------------------------------
// Processes

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
enum Paused {
    No,
    Until(u64),
    Forever,
}

/// What a poll-loop server does once the syscall in flight returns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
enum Purpose {
    Script,
    Setup,
    Accept,
    Read,
    Write,
    Close,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
struct Call {
    syscall: SyscallKind,
    fd: Option<i32>,
    addr: Option<Endpoint>,
    count: u64,
    purpose: Purpose,
    forced: Option<Errno>,
    drop: bool,
}

impl Call {
    fn new(syscall: SyscallKind, fd: Option<i32>, purpose: Purpose) -> Self {
        Call { syscall, fd, addr: None, count: 0, purpose, forced: None, drop: false }
    }

    fn entry_args(&self) -> ArgsDigest {
        let bytes = matches!(self.syscall, SyscallKind::Read | SyscallKind::Write).then_some(self.count);
        ArgsDigest { fd: self.fd, addr: self.addr, bytes, ..Default::default() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
struct ConnLocal {
    inbuf: Vec<u8>,
    outbuf: Vec<u8>,
    reads: u32,
    closing: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
struct ServerState {
    setup: u8,
    listen_fd: Option<i32>,
    accepted: u32,
    conns: BTreeMap<i32, ConnLocal>,
    store: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
struct Proc {
    script: Arc<Script>,
    fds: BTreeMap<i32, usize>,
    next_fd: i32,
    exited: bool,
    launched: bool,
    paused: Paused,
    call: Option<Call>,
    connects: u16,
    // Straight-line programs.
    pc: usize,
    sock: Option<i32>,
    conn: Option<i32>,
    sent: usize,
    received: Vec<u8>,
    frames: Vec<Vec<u8>>,
    // Poll servers.
    server: ServerState,
}

impl Proc {
    fn new(script: Script) -> Self {
        Proc {
            script: Arc::new(script),
            fds: BTreeMap::new(),
            next_fd: 3,
            exited: false,
            launched: false,
            paused: Paused::No,
            call: None,
            connects: 0,
            pc: 0,
            sock: None,
            conn: None,
            sent: 0,
            received: Vec::new(),
            frames: Vec::new(),
            server: ServerState::default(),
        }
    }

    fn data_fd(&self) -> Option<i32> {
        self.conn.or(self.sock)
    }

    fn is_paused(&self, clock: u64) -> bool {
        match self.paused {
            Paused::No => false,
            Paused::Until(t) => clock < t,
            Paused::Forever => true,
        }
    }
}

enum Next {
    Enter(Call),
    Compute,
}

pub(crate) enum Decision {
    Finished(Termination),
    /// Runnable processes with the number of options each has.
    Choose(Vec<(u32, usize)>),
}

/// Mutation surface handed to the fault engine.
struct Effects<'a> {
    procs: &'a mut [Proc],
    clock: u64,
    steps_per_ms: u64,
}

impl Effects<'_> {
    fn call(&mut self, thread: ThreadId) -> Result<&mut Call, FaultError> {
        self.procs
            .get_mut(thread.process as usize)
            .and_then(|p| p.call.as_mut())
            .ok_or(FaultError::BackendUnsupported("mutate a thread outside a syscall"))
    }
}

impl Mutator for Effects<'_> {
    fn fail_syscall(&mut self, thread: ThreadId, _: SyscallKind, code: Errno) -> Result<(), FaultError> {
        self.call(thread)?.forced = Some(code);
        Ok(())
    }

    fn pause(&mut self, process: u32, length: PauseLength) -> Result<(), FaultError> {
        let p = &mut self.procs[process as usize];
        p.paused = match length {
            PauseLength::Millis(ms) => Paused::Until(self.clock + ms.saturating_mul(self.steps_per_ms)),
            PauseLength::Indefinite => Paused::Forever,
        };
        Ok(())
    }

    fn set_write_count(&mut self, thread: ThreadId, count: u64) -> Result<(), FaultError> {
        self.call(thread)?.count = count;
        Ok(())
    }

    fn drop_write(&mut self, thread: ThreadId) -> Result<(), FaultError> {
        self.call(thread)?.drop = true;
        Ok(())
    }
}

/// Everything that determines an execution's future, for memoization.
#[derive(Clone, PartialEq, Eq, Hash)]
pub(crate) struct StateKey {
    procs: Vec<Proc>,
    kernel: Kernel,
    clock: Option<u64>,
    trace: Trace,
    tracker: StreamTracker,
}

#[derive(Clone)]
pub(crate) struct Sim<'lib> {
    steps_per_ms: u64,
    session: Session<'lib>,
    engine: FaultEngine,
    procs: Vec<Proc>,
    kernel: Kernel,
    clock: u64,
    schedule: Vec<usize>,
}

impl<'lib> Sim<'lib> {
    pub(crate) fn new(config: &SimConfig, meta: TraceMeta, engine: FaultEngine, library: Option<&'lib RunLibrary>) -> Self {
        let session = match library {
            Some(lib) => Session::following(meta, lib),
            None => Session::new(meta),
        };
        Sim {
            steps_per_ms: config.steps_per_ms.max(1),
            session,
            engine,
            procs: config.processes.iter().cloned().map(Proc::new).collect(),
            kernel: Kernel::default(),
            clock: 0,
            schedule: Vec::new(),
        }
    }

    pub(crate) fn key(&self) -> StateKey {
        let timed = self.procs.iter().any(|p| matches!(p.paused, Paused::Until(_)));
        StateKey {
            procs: self.procs.clone(),
            kernel: self.kernel.clone(),
            clock: timed.then_some(self.clock),
            trace: self.session.trace().clone(),
            tracker: self.session.tracker().clone(),
        }
    }

    pub(crate) fn trace(&self) -> &Trace {
        self.session.trace()
    }

    fn record_choice(&mut self, c: usize) -> usize {
        self.schedule.push(c);
        c
    }

    pub(crate) fn finish(self, termination: Termination) -> SimRun {
        let frames = self.procs.iter().map(|p| p.frames.clone()).collect();
        let injections = self.engine.log().to_vec();
        let (mut trace, follower) = self.session.finish(termination);
        trace.meta_mut().wall_time_ms = Some(self.clock / self.steps_per_ms);
        trace.finalize();
        SimRun { trace, follower, schedule: self.schedule, injections, frames, steps: self.clock }
    }

    // -- scheduling -------------------------------------------------------

    /// Runnable processes and their option counts, or how the execution ends.
    /// Fast-forwards the clock over timed pauses when nothing else can run.
    pub(crate) fn decide(&mut self) -> Result<Decision, SimError> {
        loop {
            let mut ready = Vec::new();
            for p in 0..self.procs.len() as u32 {
                let n = self.options(p);
                if n > 0 {
                    ready.push((p, n));
                }
            }
            if !ready.is_empty() {
                return Ok(Decision::Choose(ready));
            }
            let live = || self.procs.iter().filter(|p| !p.exited);
            if live().next().is_none() {
                return Ok(Decision::Finished(Termination::Completed));
            }
            let wake = live()
                .filter_map(|p| match p.paused {
                    Paused::Until(t) if t > self.clock => Some(t),
                    _ => None,
                })
                .min();
            match wake {
                Some(t) => self.clock = t,
                None => return Ok(Decision::Finished(Termination::Quiescent)),
            }
        }
    }

    /// How many distinct steps process `p` could take now (0 = cannot run).
    fn options(&self, p: u32) -> usize {
        let proc = &self.procs[p as usize];
        if proc.exited || proc.is_paused(self.clock) {
            return 0;
        }
        if let Some(call) = &proc.call {
            return usize::from(self.can_complete(p, call));
        }
        if !proc.launched {
            if let Some(dest) = proc.script.connect_address() {
                if self.kernel.listener(dest).is_none() {
                    return 0;
                }
            }
        }
        self.next_actions(p).len()
    }

    fn can_complete(&self, p: u32, call: &Call) -> bool {
        if call.forced.is_some() {
            return true;
        }
        let proc = &self.procs[p as usize];
        match call.syscall {
            SyscallKind::Connect => {
                let Some(listener) = call.addr.and_then(|a| self.kernel.listener(a)) else {
                    return true;
                };
                self.claimable_accept(listener).is_some()
            }
            SyscallKind::Accept => self.kernel.accepts.iter().any(|a| a.owner == p && a.claimed.is_some()),
            SyscallKind::Read => match call.fd.and_then(|fd| proc.fds.get(&fd)).map(|&s| &self.kernel.socks[s].state) {
                Some(SockState::Connected { conn, side }) => {
                    let c = &self.kernel.conns[*conn];
                    !c.inbound[side.index()].is_empty() || c.closed[side.other().index()]
                }
                _ => true,
            },
            _ => true,
        }
    }

    /// Oldest accept waiting on `listener` whose process is free to take it.
    fn claimable_accept(&self, listener: usize) -> Option<usize> {
        self.kernel
            .accepts
            .iter()
            .position(|a| a.listener == listener && a.claimed.is_none() && !self.procs[a.owner as usize].is_paused(self.clock))
    }

    fn connect_waiting(&self, listen: Endpoint) -> bool {
        self.procs.iter().any(|q| {
            !q.exited
                && !q.is_paused(self.clock)
                && q.call.as_ref().is_some_and(|c| {
                    c.syscall == SyscallKind::Connect && c.forced.is_none() && c.addr == Some(listen)
                })
        })
    }

    fn next_actions(&self, p: u32) -> Vec<Next> {
        let proc = &self.procs[p as usize];
        match &*proc.script {
            Script::Ops(ops) => match ops.get(proc.pc) {
                None => Vec::new(),
                Some(op) => vec![self.op_action(proc, op)],
            },
            Script::PollServer { listen, clients, mode } => self.server_actions(proc, *listen, *clients, mode),
        }
    }

    fn op_action(&self, proc: &Proc, op: &Op) -> Next {
        use SyscallKind as K;
        let call = |k, fd| Call::new(k, fd, Purpose::Script);
        Next::Enter(match op {
            Op::Socket => call(K::Socket, None),
            Op::Bind(a) => Call { addr: Some(*a), ..call(K::Bind, proc.sock) },
            Op::Listen => call(K::Listen, proc.sock),
            Op::Accept => call(K::Accept, proc.sock),
            Op::Connect(a) => Call { addr: Some(*a), ..call(K::Connect, proc.sock) },
            Op::Send(buf) => Call { count: (buf.len() - proc.sent) as u64, ..call(K::Write, proc.data_fd()) },
            Op::Recv { max } => Call { count: *max, ..call(K::Read, proc.data_fd()) },
            Op::RecvFrame => Call { count: 4096, ..call(K::Read, proc.data_fd()) },
            Op::SendReceived if proc.received.is_empty() => return Next::Compute,
            Op::SendReceived => {
                Call { count: (proc.received.len() - proc.sent) as u64, ..call(K::Write, proc.data_fd()) }
            }
            Op::Close => call(K::Close, proc.data_fd()),
            Op::Compute => return Next::Compute,
        })
    }

    fn server_actions(&self, proc: &Proc, listen: Endpoint, clients: u32, mode: &ServerMode) -> Vec<Next> {
        use SyscallKind as K;
        let st = &proc.server;
        let fd = st.listen_fd;
        match st.setup {
            0 => return vec![Next::Enter(Call::new(K::Socket, None, Purpose::Setup))],
            1 => return vec![Next::Enter(Call { addr: Some(listen), ..Call::new(K::Bind, fd, Purpose::Setup) })],
            2 => return vec![Next::Enter(Call::new(K::Listen, fd, Purpose::Setup))],
            _ => {}
        }
        // Pending output and closes go before polling again.
        if let Some((&cfd, c)) = st.conns.iter().find(|(_, c)| !c.outbuf.is_empty()) {
            let count = c.outbuf.len() as u64;
            return vec![Next::Enter(Call { count, ..Call::new(K::Write, Some(cfd), Purpose::Write) })];
        }
        if let Some((&cfd, _)) = st.conns.iter().find(|(_, c)| c.closing) {
            return vec![Next::Enter(Call::new(K::Close, Some(cfd), Purpose::Close))];
        }
        let mut ready = Vec::new();
        if st.accepted < clients && self.connect_waiting(listen) {
            ready.push(Next::Enter(Call::new(K::Accept, fd, Purpose::Accept)));
        }
        for (&cfd, c) in &st.conns {
            if let ServerMode::Sink { reads } = mode {
                if c.reads >= *reads {
                    continue;
                }
            }
            let readable = match proc.fds.get(&cfd).map(|&s| &self.kernel.socks[s].state) {
                Some(SockState::Connected { conn, side }) => {
                    let k = &self.kernel.conns[*conn];
                    !k.inbound[side.index()].is_empty() || k.closed[side.other().index()]
                }
                _ => false,
            };
            if readable {
                ready.push(Next::Enter(Call { count: 4096, ..Call::new(K::Read, Some(cfd), Purpose::Read) }));
            }
        }
        ready
    }

    fn server_done(&self, proc: &Proc) -> bool {
        let Script::PollServer { clients, mode, .. } = &*proc.script else {
            return false;
        };
        let st = &proc.server;
        if st.setup < 3 || st.accepted < *clients {
            return false;
        }
        match mode {
            ServerMode::Kv => st.conns.is_empty(),
            ServerMode::Sink { reads } => st.conns.values().all(|c| c.reads >= *reads),
        }
    }

    // -- stepping ---------------------------------------------------------

    fn peer_of(&self, p: u32, call: &Call) -> Option<u32> {
        let tracker = self.session.tracker();
        match call.syscall {
            SyscallKind::Connect => call.addr.and_then(|a| tracker.listener_owner(a)),
            SyscallKind::Read | SyscallKind::Write | SyscallKind::Close => {
                call.fd.and_then(|fd| tracker.peer_process(p, fd))
            }
            _ => None,
        }
    }

    /// Consults the fault engine about the next event of `p` and applies
    /// everything except pauses, which take effect once the event is recorded.
    fn inject(&mut self, p: u32, phase: Phase) -> Result<Option<PauseLength>, SimError> {
        let call = self.procs[p as usize].call.clone().expect("syscall in flight");
        let incoming = Incoming {
            thread: ThreadId::main(p),
            syscall: call.syscall,
            phase,
            peer_process: self.peer_of(p, &call),
            follower: self.session.follower(),
        };
        let Some(injection) = self.engine.on_event(&incoming) else {
            return Ok(None);
        };
        if let Injection::Pause(len) = injection {
            return Ok(Some(len));
        }
        let mut effects = Effects { procs: &mut self.procs, clock: self.clock, steps_per_ms: self.steps_per_ms };
        fault::apply(&mut effects, &incoming, injection, Some(call.count))?;
        Ok(None)
    }

    fn pause(&mut self, p: u32, len: Option<PauseLength>) -> Result<(), SimError> {
        if let Some(len) = len {
            let mut effects = Effects { procs: &mut self.procs, clock: self.clock, steps_per_ms: self.steps_per_ms };
            fault::apply_pause(&mut effects, p, len)?;
        }
        Ok(())
    }

    pub(crate) fn step(&mut self, p: u32, option: usize) -> Result<(), SimError> {
        self.clock += 1;
        let proc = &mut self.procs[p as usize];
        proc.launched = true;
        if proc.call.is_some() {
            self.complete(p)?;
        } else {
            let mut actions = self.next_actions(p);
            if option >= actions.len() {
                return Err(SimError::QuiescenceWithRunnableWork(format!("process {p} has no option {option}")));
            }
            match actions.swap_remove(option) {
                Next::Compute => self.procs[p as usize].pc += 1,
                Next::Enter(call) => self.enter(p, call)?,
            }
        }
        self.settle(p);
        Ok(())
    }

    fn enter(&mut self, p: u32, call: Call) -> Result<(), SimError> {
        self.procs[p as usize].call = Some(call);
        let pause = self.inject(p, Phase::Entry)?;
        let call = self.procs[p as usize].call.clone().unwrap();
        self.session.entry(ThreadId::main(p), call.syscall, call.entry_args())?;
        if call.syscall == SyscallKind::Accept && call.forced.is_none() {
            if let Some(&listener) = call.fd.and_then(|fd| self.procs[p as usize].fds.get(&fd)) {
                self.kernel.accepts.push(PendingAccept { listener, owner: p, claimed: None });
            }
        }
        self.pause(p, pause)
    }

    fn alloc_fd(&mut self, p: u32, sock: usize) -> i32 {
        let proc = &mut self.procs[p as usize];
        let fd = proc.next_fd;
        proc.next_fd += 1;
        proc.fds.insert(fd, sock);
        fd
    }

    fn complete(&mut self, p: u32) -> Result<(), SimError> {
        use SyscallKind as K;
        let pause = self.inject(p, Phase::Exit)?;
        let call = self.procs[p as usize].call.take().unwrap();
        let thread = ThreadId::main(p);
        let sock = call.fd.and_then(|fd| self.procs[p as usize].fds.get(&fd).copied());
        let mut args = ArgsDigest { fd: call.fd, addr: call.addr, ..Default::default() };
        let mut data = Vec::new();
        let mut delivered = true;

        let outcome = if let Some(code) = call.forced {
            if call.syscall == K::Accept {
                self.kernel.accepts.retain(|a| !(a.owner == p && a.claimed.is_none()));
            }
            Outcome::Error(code)
        } else {
            match (call.syscall, sock) {
                (K::Socket, _) => {
                    self.kernel.socks.push(Sock { owner: p, state: SockState::Fresh });
                    let fd = self.alloc_fd(p, self.kernel.socks.len() - 1);
                    args.ret_fd = Some(fd);
                    Outcome::Success
                }
                (K::Bind, Some(s)) => {
                    let addr = call.addr.unwrap();
                    if self.kernel.addr_in_use(addr) {
                        Outcome::Error(Errno::EADDRINUSE)
                    } else {
                        self.kernel.socks[s].state = SockState::Bound(addr);
                        Outcome::Success
                    }
                }
                (K::Listen, Some(s)) => match self.kernel.socks[s].state {
                    SockState::Bound(a) => {
                        self.kernel.socks[s].state = SockState::Listening(a);
                        Outcome::Success
                    }
                    _ => Outcome::Error(Errno::EINVAL),
                },
                (K::Connect, Some(s)) => {
                    let dest = call.addr.unwrap();
                    match self.kernel.listener(dest).and_then(|l| self.claimable_accept(l)) {
                        None => Outcome::Error(Errno::ECONNREFUSED),
                        Some(a) => {
                            let proc = &mut self.procs[p as usize];
                            let port = 40000 + (p as u16) * 100 + proc.connects;
                            proc.connects += 1;
                            let client = Endpoint::new(Ipv4Addr::LOCALHOST, port);
                            self.kernel.conns.push(Conn {
                                client,
                                server: dest,
                                inbound: [Vec::new(), Vec::new()],
                                closed: [false, false],
                            });
                            let conn = self.kernel.conns.len() - 1;
                            self.kernel.socks[s].state = SockState::Connected { conn, side: Side::Client };
                            self.kernel.accepts[a].claimed = Some(conn);
                            args.local = Some(client);
                            args.peer = Some(dest);
                            Outcome::Success
                        }
                    }
                }
                (K::Accept, Some(_)) => {
                    let i = self
                        .kernel
                        .accepts
                        .iter()
                        .position(|a| a.owner == p && a.claimed.is_some())
                        .ok_or_else(|| SimError::QuiescenceWithRunnableWork(format!("accept of {p} unclaimed")))?;
                    let conn = self.kernel.accepts.remove(i).claimed.unwrap();
                    self.kernel.socks.push(Sock { owner: p, state: SockState::Connected { conn, side: Side::Server } });
                    let fd = self.alloc_fd(p, self.kernel.socks.len() - 1);
                    let c = &self.kernel.conns[conn];
                    args.ret_fd = Some(fd);
                    args.peer = Some(c.client);
                    args.local = Some(c.server);
                    Outcome::Success
                }
                (K::Write, Some(s)) => match self.kernel.socks[s].state {
                    SockState::Connected { conn, side } if !self.kernel.conns[conn].closed[side.other().index()] => {
                        let payload = self.outgoing(p, &call);
                        if call.drop {
                            delivered = false;
                        } else {
                            self.kernel.conns[conn].inbound[side.other().index()].extend_from_slice(&payload);
                        }
                        args.bytes = Some(call.count);
                        Outcome::Success
                    }
                    SockState::Connected { .. } => Outcome::Error(Errno::EPIPE),
                    _ => Outcome::Error(Errno::ENOTCONN),
                },
                (K::Read, Some(s)) => match self.kernel.socks[s].state {
                    SockState::Connected { conn, side } => {
                        let buf = &mut self.kernel.conns[conn].inbound[side.index()];
                        let n = buf.len().min(call.count as usize);
                        data = buf.drain(..n).collect();
                        args.bytes = Some(n as u64);
                        Outcome::Success
                    }
                    _ => Outcome::Error(Errno::ENOTCONN),
                },
                (K::Close, Some(s)) => {
                    self.kernel.close(s);
                    self.procs[p as usize].fds.remove(&call.fd.unwrap());
                    Outcome::Success
                }
                _ => Outcome::Error(Errno::EBADF),
            }
        };

        if delivered {
            self.session.exit(thread, call.syscall, outcome, args.clone())?;
        } else {
            self.session.exit_undelivered_write(thread, args.clone())?;
        }
        self.continue_program(p, &call, outcome, &args, data);
        self.pause(p, pause)
    }

    /// Bytes a write sends: the unsent tail of the current buffer, cut to the
    /// (possibly truncated) count.
    fn outgoing(&self, p: u32, call: &Call) -> Vec<u8> {
        let proc = &self.procs[p as usize];
        let n = call.count as usize;
        let buf: &[u8] = match (&*proc.script, call.purpose) {
            (Script::Ops(ops), Purpose::Script) => match &ops[proc.pc] {
                Op::Send(b) => &b[proc.sent..],
                _ => &proc.received[proc.sent..],
            },
            _ => &proc.server.conns[&call.fd.unwrap()].outbuf,
        };
        buf[..n.min(buf.len())].to_vec()
    }

    fn continue_program(&mut self, p: u32, call: &Call, outcome: Outcome, args: &ArgsDigest, data: Vec<u8>) {
        let proc = &mut self.procs[p as usize];
        let ok = outcome.is_success();
        let bytes = args.bytes.unwrap_or(0) as usize;
        let script = Arc::clone(&proc.script);
        match (&*script, call.purpose) {
            (Script::Ops(ops), _) => {
                if !ok {
                    self.exit(p);
                    return;
                }
                match &ops[proc.pc] {
                    Op::Socket => proc.sock = args.ret_fd,
                    Op::Accept => proc.conn = args.ret_fd,
                    Op::Send(b) => {
                        proc.sent += bytes;
                        if proc.sent < b.len() {
                            return;
                        }
                        proc.sent = 0;
                    }
                    Op::SendReceived => {
                        proc.sent += bytes;
                        if proc.sent < proc.received.len() {
                            return;
                        }
                        proc.sent = 0;
                        proc.received.clear();
                    }
                    Op::Recv { .. } => proc.received.extend(data),
                    Op::RecvFrame => {
                        let eof = bytes == 0;
                        proc.received.extend(data);
                        match take_frame(&mut proc.received) {
                            Some(f) => proc.frames.push(f),
                            None if eof => {
                                self.exit(p);
                                return;
                            }
                            None => return,
                        }
                    }
                    Op::Close => {
                        if proc.conn == call.fd {
                            proc.conn = None;
                        } else {
                            proc.sock = None;
                        }
                    }
                    _ => {}
                }
                proc.pc += 1;
            }
            (Script::PollServer { .. }, purpose) => {
                let st = &mut proc.server;
                let fd = call.fd;
                match purpose {
                    Purpose::Setup if !ok => {
                        self.exit(p);
                    }
                    Purpose::Setup => {
                        if st.setup == 0 {
                            st.listen_fd = args.ret_fd;
                        }
                        st.setup += 1;
                    }
                    Purpose::Accept => {
                        if let (true, Some(new_fd)) = (ok, args.ret_fd) {
                            st.accepted += 1;
                            st.conns.insert(new_fd, ConnLocal::default());
                        }
                    }
                    Purpose::Read => {
                        let c = st.conns.get_mut(&fd.unwrap()).unwrap();
                        c.reads += 1;
                        match &*script {
                            Script::PollServer { mode: ServerMode::Kv, .. } => {
                                if !ok || bytes == 0 {
                                    c.closing = true;
                                } else {
                                    c.inbuf.extend(data);
                                    while let Some(req) = take_frame(&mut c.inbuf) {
                                        let reply = serve(&mut st.store, &req);
                                        c.outbuf.extend(reply);
                                    }
                                }
                            }
                            Script::PollServer { mode: ServerMode::Sink { reads }, .. } => {
                                if !ok || bytes == 0 {
                                    c.reads = *reads;
                                }
                                c.inbuf.extend(data);
                            }
                            Script::Ops(_) => unreachable!(),
                        }
                    }
                    Purpose::Write => {
                        let c = st.conns.get_mut(&fd.unwrap()).unwrap();
                        if ok {
                            c.outbuf.drain(..bytes.min(c.outbuf.len()));
                        } else {
                            c.outbuf.clear();
                            c.closing = true;
                        }
                    }
                    Purpose::Close => {
                        st.conns.remove(&fd.unwrap());
                    }
                    Purpose::Script => unreachable!(),
                }
            }
        }
    }

    /// Ends `p` if its program is done.
    fn settle(&mut self, p: u32) {
        let proc = &self.procs[p as usize];
        if proc.exited || proc.call.is_some() {
            return;
        }
        let done = match &*proc.script {
            Script::Ops(ops) => proc.pc >= ops.len(),
            Script::PollServer { .. } => self.server_done(proc),
        };
        if done {
            self.exit(p);
        }
    }

    /// Process exit: every descriptor closes without a traced syscall.
    fn exit(&mut self, p: u32) {
        let proc = &mut self.procs[p as usize];
        proc.exited = true;
        proc.call = None;
        let socks: Vec<usize> = std::mem::take(&mut proc.fds).into_values().collect();
        for s in socks {
            self.kernel.close(s);
        }
        self.kernel.accepts.retain(|a| a.owner != p);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::causality::CausalGraph;
    use crate::event::EventCoord;
    use crate::fault::parse_fault_spec;

    fn run(name: &str, seed: u64) -> SimRun {
        run_simulation(&preset(name).unwrap(), seed, &[], None).unwrap()
    }

    fn events_of(t: &Trace, p: u32) -> Vec<(SyscallKind, Phase)> {
        t.thread_log(ThreadId::main(p)).iter().map(|e| (e.syscall, e.phase)).collect()
    }

    #[test]
    fn single_get_round_trip() {
        let r = run("1cl", 7);
        assert_eq!(r.termination(), Termination::Completed);
        assert_eq!(r.frames[1], vec![b"NIL".to_vec()]);
        let t = &r.trace;
        let client = t.thread_log(ThreadId::main(1));
        let read_exit = client
            .iter()
            .find(|e| e.syscall == SyscallKind::Read && e.phase == Phase::Exit)
            .unwrap();
        let parent = *read_exit.parents.iter().next().unwrap();
        let pe = t.event(parent).unwrap();
        assert_eq!((parent.process, pe.syscall, pe.phase), (0, SyscallKind::Write, Phase::Exit));
    }

    #[test]
    fn same_seed_same_trace() {
        for seed in 0..5 {
            let a = run("2cl-mc", seed);
            let b = run("2cl-mc", seed);
            assert_eq!(crate::format::serialize(&a.trace).unwrap(), crate::format::serialize(&b.trace).unwrap());
        }
    }

    #[test]
    fn many_seeds_many_runs() {
        let ids: std::collections::BTreeSet<_> = (0..60).map(|s| run("2cl", s).trace.run_id().unwrap().clone()).collect();
        assert!(ids.len() > 3, "{}", ids.len());
    }

    #[test]
    fn replay_reproduces_schedule() {
        let config = preset("2cl").unwrap();
        let a = run_simulation(&config, 11, &[], None).unwrap();
        let b = replay_schedule(&config, 11, &a.schedule, &[], None).unwrap();
        assert_eq!(a.trace, b.trace);
        assert!(matches!(
            replay_schedule(&config, 11, &[9, 9, 9], &[], None),
            Err(SimError::ScheduleMismatch { .. })
        ));
    }

    #[test]
    fn accept_entry_precedes_connect_exit() {
        for seed in 0..20 {
            let r = run("4cl", seed);
            let g = CausalGraph::new(&r.trace);
            for st in r.session_streams() {
                let (a, c) = (st.0.unwrap(), st.1.unwrap());
                assert!(g.happens_before(a, c).unwrap());
            }
        }
    }

    impl SimRun {
        /// (accept entry, connect exit) per paired edge, read back from the trace.
        fn session_streams(&self) -> Vec<(Option<EventCoord>, Option<EventCoord>)> {
            self.trace
                .events()
                .filter(|e| e.syscall == SyscallKind::Connect && e.phase == Phase::Exit && e.outcome == Some(Outcome::Success))
                .map(|e| {
                    let cross = e.parents.iter().copied().find(|p| p.process != e.coord.process);
                    (cross, Some(e.coord))
                })
                .collect()
        }
    }

    #[test]
    fn echo_shape() {
        let r = run("echo", 3);
        assert_eq!(r.termination(), Termination::Completed);
        use SyscallKind as K;
        let pairs = |ks: &[K]| ks.iter().flat_map(|k| [(*k, Phase::Entry), (*k, Phase::Exit)]).collect::<Vec<_>>();
        assert_eq!(events_of(&r.trace, 1), pairs(&[K::Socket, K::Connect, K::Write, K::Read, K::Close]));
        assert_eq!(
            events_of(&r.trace, 0),
            pairs(&[K::Socket, K::Bind, K::Listen, K::Accept, K::Read, K::Write, K::Close])
        );
        assert_eq!(r.trace.edges().len(), 3);
    }

    #[test]
    fn connect_errno_leaves_no_stream() {
        let faults = parse_fault_spec(
            "[[rule]]\ntarget = { process = 1, syscall = \"connect\" }\naction = { errno = \"ECONNREFUSED\" }\n",
            None,
        )
        .unwrap();
        let r = run_simulation(&preset("2cl").unwrap(), 5, &faults, None).unwrap();
        let log = r.trace.thread_log(ThreadId::main(1));
        let exit = log.iter().find(|e| e.syscall == SyscallKind::Connect && e.phase == Phase::Exit).unwrap();
        assert_eq!(exit.outcome, Some(Outcome::Error(Errno::ECONNREFUSED)));
        assert!(exit.parents.is_empty());
        assert!(r.trace.edges().iter().all(|(a, b)| a.process != 1 && b.process != 1));
        // The server keeps waiting for its second client.
        assert_eq!(r.termination(), Termination::Quiescent);
    }

    #[test]
    fn indefinite_server_pause_quiesces() {
        let faults = parse_fault_spec(
            "[[rule]]\ntarget = { process = 0, syscall = \"listen\", phase = \"exit\" }\naction = { pause = \"indefinite\" }\n",
            None,
        )
        .unwrap();
        let r = run_simulation(&preset("2cl").unwrap(), 5, &faults, None).unwrap();
        assert_eq!(r.termination(), Termination::Quiescent);
        assert!(r.trace.edges().is_empty());
        for c in [1, 2] {
            let log = events_of(&r.trace, c);
            assert_eq!(log.last(), Some(&(SyscallKind::Connect, Phase::Entry)));
        }
    }

    #[test]
    fn timed_pause_delays_then_completes() {
        let faults = parse_fault_spec(
            "[[rule]]\ntarget = { process = 0, syscall = \"listen\", phase = \"exit\" }\naction = { pause = 50 }\n",
            None,
        )
        .unwrap();
        let base = run("1cl", 2);
        let r = run_simulation(&preset("1cl").unwrap(), 2, &faults, None).unwrap();
        assert_eq!(r.termination(), Termination::Completed);
        assert!(r.steps > 50 && base.steps < r.steps, "{} vs {}", r.steps, base.steps);
    }

    #[test]
    fn truncated_writes_are_retried() {
        let r = run("2cl-wt", 4);
        assert_eq!(r.termination(), Termination::Completed);
        assert!(!r.injections.is_empty());
        assert_eq!(r.frames[1], vec![b"NIL".to_vec()]);
        assert_eq!(r.frames[2], vec![b"NIL".to_vec()]);
    }

    #[test]
    fn dropped_writes_never_arrive() {
        let faults =
            parse_fault_spec("[[rule]]\ntarget = { process = 1, syscall = \"write\" }\naction = { drop = true }\n", None)
                .unwrap();
        let r = run_simulation(&preset("1cl").unwrap(), 1, &faults, None).unwrap();
        assert_eq!(r.termination(), Termination::Quiescent);
        let log = r.trace.thread_log(ThreadId::main(1));
        let w = log.iter().find(|e| e.syscall == SyscallKind::Write && e.phase == Phase::Exit).unwrap();
        assert_eq!(w.outcome, Some(Outcome::Success));
        assert!(r.frames[1].is_empty());
    }
}
