//! Live event source: real processes traced with ptrace (Linux, x86_64).
//!
//! Each command is launched as a tracee that stops at every syscall entry and
//! exit. Socket-family syscalls on IPv4 TCP sockets are decoded and fed to the
//! shared [`Session`]; everything else passes through unrecorded. One tracer
//! loop handles every stop in full before resuming the thread.
//!
//! Endpoints that the syscall arguments do not reveal (a connecting socket's
//! source port, an accepted socket's peer) are obtained by making the tracee
//! itself run `getsockname`/`getpeername`: at the exit stop the instruction
//! pointer is moved back onto the `syscall` instruction with new registers,
//! the injected call is stepped through, and all registers and the scratch
//! stack memory are restored.
//!
//! Faults use the same registers: an errno replaces the descriptor argument
//! with -1 at entry and the return value with `-errno` at exit; truncation
//! rewrites the count argument; a dropped write becomes a zero-byte write
//! whose return value is restored to the requested count; a pause leaves the
//! tracee stopped.

mod regs;

use std::collections::BTreeMap;
use std::os::unix::process::CommandExt;
use std::process::Command;
use std::time::{Duration, Instant};

use nix::libc::user_regs_struct;
use nix::sys::ptrace::{self, Options};
use nix::sys::signal::{kill, Signal};
use nix::sys::wait::{waitpid, WaitPidFlag, WaitStatus};
use nix::unistd::Pid;

use crate::errno::Errno;
use crate::event::{ArgsDigest, Outcome, Phase, SyscallKind, Termination, ThreadId, Trace, TraceMeta};
use crate::fault::{self, FaultEngine, FaultError, FaultRule, Incoming, Injection, Mutator, PauseLength};
use crate::library::{Follower, RunLibrary};
use crate::session::{Session, SessionError};
use crate::stream::{Direction, Endpoint};
pub use regs::{decode_sockaddr_in, SYS};

#[derive(Debug, thiserror::Error)]
pub enum LiveError {
    #[error("cannot trace `{command}`: {reason}")]
    AttachDenied { command: String, reason: String },
    #[error("tracee {0} died unexpectedly")]
    TraceeDiedUnexpectedly(i32),
    #[error("endpoint query in tracee {pid} failed: {reason}")]
    InjectionFailed { pid: i32, reason: String },
    #[error("ptrace: {0}")]
    Ptrace(#[from] nix::Error),
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error(transparent)]
    Fault(#[from] FaultError),
    #[error("no commands to trace")]
    NoCommands,
}

#[derive(Clone, Debug)]
pub struct LiveConfig {
    pub name: String,
    /// One command line per traced process, launched in order.
    pub commands: Vec<Vec<String>>,
    /// The next command starts once some tracee has entered `accept`, or
    /// after this long.
    pub launch_delay: Duration,
    /// With no syscall activity for this long the execution is declared
    /// quiescent and the tracees are killed.
    pub idle_timeout: Duration,
    pub faults: Vec<FaultRule>,
}

impl LiveConfig {
    pub fn new(commands: Vec<Vec<String>>) -> Self {
        LiveConfig {
            name: "live".into(),
            commands,
            launch_delay: Duration::from_millis(500),
            idle_timeout: Duration::from_secs(10),
            faults: Vec::new(),
        }
    }
}

#[derive(Debug)]
pub struct LiveRun {
    /// Finalized trace.
    pub trace: Trace,
    pub follower: Follower,
    pub warnings: Vec<String>,
    pub injections: Vec<(usize, Injection)>,
}

#[derive(Clone, Debug)]
struct Pending {
    kind: SyscallKind,
    fd: Option<i32>,
    addr: Option<Endpoint>,
    count: u64,
    forced: Option<Errno>,
    dropped: bool,
}

#[derive(Debug)]
struct Tracee {
    thread: ThreadId,
    in_syscall: bool,
    /// Tracked syscall in flight (None for syscalls that are not recorded).
    pending: Option<Pending>,
    paused: Option<Option<Instant>>,
    /// Signal to deliver on the next resume.
    signal: Option<Signal>,
}

struct Effects<'a> {
    regs: &'a mut user_regs_struct,
    pending: &'a mut Pending,
    pause: &'a mut Option<PauseLength>,
}

impl Mutator for Effects<'_> {
    fn fail_syscall(&mut self, _: ThreadId, _: SyscallKind, code: Errno) -> Result<(), FaultError> {
        // The kernel sees an invalid descriptor and fails without side effects.
        self.regs.rdi = u64::MAX;
        self.pending.forced = Some(code);
        Ok(())
    }

    fn pause(&mut self, _: u32, length: PauseLength) -> Result<(), FaultError> {
        *self.pause = Some(length);
        Ok(())
    }

    fn set_write_count(&mut self, _: ThreadId, count: u64) -> Result<(), FaultError> {
        self.regs.rdx = count;
        self.pending.count = count;
        Ok(())
    }

    fn drop_write(&mut self, _: ThreadId) -> Result<(), FaultError> {
        self.regs.rdx = 0;
        self.pending.dropped = true;
        Ok(())
    }
}

/// Why a syscall stop was left unfinished.
#[derive(Debug)]
enum Stop {
    Failed(LiveError),
    /// Retry after other tracees have made progress.
    Deferred,
}
use Stop::Deferred;

impl<E: Into<LiveError>> From<E> for Stop {
    fn from(e: E) -> Self {
        Stop::Failed(e.into())
    }
}

struct Tracer<'lib> {
    session: Session<'lib>,
    engine: FaultEngine,
    tracees: BTreeMap<Pid, Tracee>,
    /// Threads whose creation event has not been seen yet, stopped at birth.
    unborn: Vec<Pid>,
    processes: u32,
    threads_of: BTreeMap<u32, u32>,
    warnings: Vec<String>,
    died: bool,
    accepting: usize,
}

fn word_at(pid: Pid, addr: u64) -> nix::Result<u64> {
    ptrace::read(pid, addr as ptrace::AddressType).map(|w| w as u64)
}

fn read_bytes(pid: Pid, addr: u64, len: usize) -> nix::Result<Vec<u8>> {
    let mut out = Vec::with_capacity(len + 8);
    let mut a = addr;
    while out.len() < len {
        out.extend_from_slice(&word_at(pid, a)?.to_le_bytes());
        a += 8;
    }
    out.truncate(len);
    Ok(out)
}

fn wait_syscall_stop(pid: Pid, deferred: &mut Option<Signal>) -> Result<user_regs_struct, String> {
    loop {
        ptrace::syscall(pid, None).map_err(|e| e.to_string())?;
        match waitpid(pid, Some(WaitPidFlag::__WALL)).map_err(|e| e.to_string())? {
            WaitStatus::PtraceSyscall(_) => return ptrace::getregs(pid).map_err(|e| e.to_string()),
            WaitStatus::Stopped(_, sig) => {
                deferred.get_or_insert(sig);
                // The signal stop interrupted before the syscall; retry.
                continue;
            }
            WaitStatus::Exited(..) | WaitStatus::Signaled(..) => return Err("tracee exited".into()),
            other => return Err(format!("unexpected stop {other:?}")),
        }
    }
}

/// Runs `getsockname` (or `getpeername`) on `fd` inside a tracee stopped at
/// a syscall exit, then restores its registers and stack.
pub fn query_endpoint(pid: Pid, at_exit: &user_regs_struct, nr: u64, fd: i32) -> Result<Endpoint, LiveError> {
    let fail = |reason: String| LiveError::InjectionFailed { pid: pid.as_raw(), reason };
    let insn = at_exit.rip.wrapping_sub(2);
    let code = word_at(pid, insn).map_err(|e| fail(e.to_string()))?;
    if code & 0xffff != 0x050f {
        return Err(fail(format!("no syscall instruction at {insn:#x}")));
    }
    // Below the red zone, 16-byte aligned: sockaddr_in then socklen_t.
    let scratch = (at_exit.rsp - 128 - 64) & !0xf;
    let saved = [word_at(pid, scratch), word_at(pid, scratch + 8), word_at(pid, scratch + 16)];
    let saved: Vec<u64> = saved.into_iter().collect::<Result<_, _>>().map_err(|e| fail(e.to_string()))?;
    let restore = |pid| -> nix::Result<()> {
        for (i, w) in saved.iter().enumerate() {
            ptrace::write(pid, (scratch + 8 * i as u64) as ptrace::AddressType, *w as i64)?;
        }
        ptrace::setregs(pid, *at_exit)
    };
    let result = (|| {
        ptrace::write(pid, (scratch + 16) as ptrace::AddressType, ((saved[2] & !0xffff_ffff) | 16) as i64)
            .map_err(|e| fail(e.to_string()))?;
        let mut r = *at_exit;
        r.rax = nr;
        r.orig_rax = nr;
        r.rdi = fd as u64;
        r.rsi = scratch;
        r.rdx = scratch + 16;
        r.rip = insn;
        ptrace::setregs(pid, r).map_err(|e| fail(e.to_string()))?;
        let mut deferred = None;
        wait_syscall_stop(pid, &mut deferred).map_err(fail)?;
        let done = wait_syscall_stop(pid, &mut deferred).map_err(fail)?;
        if done.rax != 0 {
            return Err(fail(format!("returned {}", done.rax as i64)));
        }
        let raw = read_bytes(pid, scratch, 16).map_err(|e| fail(e.to_string()))?;
        decode_sockaddr_in(&raw).ok_or_else(|| fail("not an IPv4 address".into()))
    })();
    restore(pid).map_err(|e| fail(e.to_string()))?;
    result
}

impl<'lib> Tracer<'lib> {
    fn add_process(&mut self, pid: Pid) {
        let p = self.processes;
        self.processes += 1;
        self.threads_of.insert(p, 1);
        self.tracees.insert(
            pid,
            Tracee { thread: ThreadId::main(p), in_syscall: false, pending: None, paused: None, signal: None },
        );
    }

    fn add_thread(&mut self, parent: Pid, child: Pid, same_process: bool) {
        if !same_process {
            self.add_process(child);
        } else {
            let p = self.tracees[&parent].thread.process;
            let t = self.threads_of.entry(p).or_insert(1);
            let thread = ThreadId::new(p, *t);
            *t += 1;
            self.tracees.insert(child, Tracee { thread, in_syscall: false, pending: None, paused: None, signal: None });
        }
        if let Some(i) = self.unborn.iter().position(|u| *u == child) {
            self.unborn.remove(i);
            self.resume(child);
        }
    }

    fn resume(&mut self, pid: Pid) {
        let sig = self.tracees.get_mut(&pid).and_then(|t| t.signal.take());
        if ptrace::syscall(pid, sig).is_err() {
            // Already gone; its exit status arrives separately.
        }
    }

    fn known_socket(&self, process: u32, fd: i32) -> bool {
        self.session.tracker().socket(process, fd).is_some()
    }

    /// Decodes a syscall entry into a tracked call, or None to ignore it.
    fn decode_entry(&self, pid: Pid, process: u32, r: &user_regs_struct) -> Option<Pending> {
        let fd = r.rdi as i32;
        let mut call = Pending { kind: SyscallKind::Socket, fd: Some(fd), addr: None, count: 0, forced: None, dropped: false };
        let sockaddr = |ptr: u64, len: u64| {
            if len < 16 {
                return None;
            }
            read_bytes(pid, ptr, 16).ok().and_then(|b| decode_sockaddr_in(&b))
        };
        call.kind = match r.orig_rax {
            SYS::SOCKET => {
                // AF_INET, SOCK_STREAM (flags such as SOCK_CLOEXEC aside).
                if r.rdi != 2 || r.rsi & 0xf != 1 {
                    return None;
                }
                call.fd = None;
                SyscallKind::Socket
            }
            nr => {
                if !self.known_socket(process, fd) {
                    return None;
                }
                match nr {
                    SYS::BIND => {
                        call.addr = Some(sockaddr(r.rsi, r.rdx)?);
                        SyscallKind::Bind
                    }
                    SYS::LISTEN => SyscallKind::Listen,
                    SYS::CONNECT => {
                        call.addr = Some(sockaddr(r.rsi, r.rdx)?);
                        SyscallKind::Connect
                    }
                    SYS::ACCEPT | SYS::ACCEPT4 => SyscallKind::Accept,
                    SYS::READ | SYS::RECVFROM => {
                        call.count = r.rdx;
                        SyscallKind::Read
                    }
                    SYS::WRITE | SYS::SENDTO => {
                        call.count = r.rdx;
                        SyscallKind::Write
                    }
                    SYS::CLOSE => SyscallKind::Close,
                    _ => return None,
                }
            }
        };
        Some(call)
    }

    fn incoming(&self, thread: ThreadId, call: &Pending, phase: Phase) -> (ThreadId, SyscallKind, Phase, Option<u32>) {
        let tracker = self.session.tracker();
        let peer = match call.kind {
            SyscallKind::Connect => call.addr.and_then(|a| tracker.listener_owner(a)),
            SyscallKind::Read | SyscallKind::Write | SyscallKind::Close => {
                call.fd.and_then(|fd| tracker.peer_process(thread.process, fd))
            }
            _ => None,
        };
        (thread, call.kind, phase, peer)
    }

    fn consult(
        &mut self,
        thread: ThreadId,
        call: &mut Pending,
        phase: Phase,
        regs: &mut user_regs_struct,
    ) -> Result<Option<PauseLength>, LiveError> {
        let (thread, syscall, phase, peer_process) = self.incoming(thread, call, phase);
        let incoming = Incoming { thread, syscall, phase, peer_process, follower: self.session.follower() };
        let mut pause = None;
        if let Some(inj) = self.engine.on_event(&incoming) {
            let requested = call.count;
            let mut fx = Effects { regs, pending: call, pause: &mut pause };
            fault::apply(&mut fx, &incoming, inj, Some(requested))?;
        }
        Ok(pause)
    }

    /// Whether every byte a read returned has a recorded write exit. The
    /// kernel can complete a read before the tracer has seen the writer's
    /// exit stop; such a read waits, stopped, until it has.
    fn read_covered(&self, process: u32, fd: i32, count: u64) -> bool {
        let tracker = self.session.tracker();
        let Some((sid, dir)) = tracker.socket_stream(process, fd) else {
            return true;
        };
        let Some(st) = tracker.stream(sid) else {
            return true;
        };
        let dir = dir.opposite();
        let writer = match dir {
            Direction::ClientToServer => st.client_socket,
            Direction::ServerToClient => st.server_socket,
        };
        writer.is_none() || st.channel(dir).buffered() >= count
    }

    fn on_syscall_stop(&mut self, pid: Pid) -> Result<Option<PauseLength>, Stop> {
        let mut r = ptrace::getregs(pid)?;
        let tracee = self.tracees.get_mut(&pid).expect("registered");
        tracee.in_syscall = !tracee.in_syscall;
        let thread = tracee.thread;
        if tracee.in_syscall {
            let Some(mut call) = self.decode_entry(pid, thread.process, &r) else {
                return Ok(None);
            };
            let before = r;
            let pause = self.consult(thread, &mut call, Phase::Entry, &mut r)?;
            let args = ArgsDigest {
                fd: call.fd,
                addr: call.addr,
                bytes: matches!(call.kind, SyscallKind::Read | SyscallKind::Write).then_some(call.count),
                ..Default::default()
            };
            self.session.entry(thread, call.kind, args)?;
            if call.kind == SyscallKind::Accept {
                self.accepting += 1;
            }
            if r != before {
                ptrace::setregs(pid, r)?;
            }
            self.tracees.get_mut(&pid).unwrap().pending = Some(call);
            return Ok(pause);
        }

        let Some(mut call) = self.tracees.get_mut(&pid).unwrap().pending.take() else {
            return Ok(None);
        };
        if call.kind == SyscallKind::Read
            && call.forced.is_none()
            && (r.rax as i64) > 0
            && !self.read_covered(thread.process, call.fd.unwrap_or(-1), r.rax)
        {
            let t = self.tracees.get_mut(&pid).unwrap();
            t.in_syscall = true;
            t.pending = Some(call);
            return Err(Deferred);
        }
        let pause = self.consult(thread, &mut call, Phase::Exit, &mut r)?;
        let ret = r.rax as i64;
        let mut args = ArgsDigest { fd: call.fd, addr: call.addr, ..Default::default() };
        let outcome = match call.forced {
            Some(code) => {
                r.rax = (-(code.0 as i64)) as u64;
                ptrace::setregs(pid, r)?;
                Outcome::Error(code)
            }
            None if ret < 0 => Outcome::Error(Errno(-ret as i32)),
            None => Outcome::Success,
        };
        if outcome.is_success() {
            match call.kind {
                SyscallKind::Socket | SyscallKind::Accept => args.ret_fd = Some(ret as i32),
                SyscallKind::Read | SyscallKind::Write => args.bytes = Some(ret as u64),
                _ => {}
            }
            if call.dropped {
                r.rax = call.count;
                ptrace::setregs(pid, r)?;
                args.bytes = Some(call.count);
            }
            let fd = call.fd.unwrap_or(-1);
            match call.kind {
                SyscallKind::Connect => match query_endpoint(pid, &r, SYS::GETSOCKNAME, fd) {
                    Ok(local) => {
                        args.local = Some(local);
                        args.peer = call.addr;
                    }
                    Err(e) => self.warnings.push(e.to_string()),
                },
                SyscallKind::Accept => {
                    let new_fd = ret as i32;
                    match query_endpoint(pid, &r, SYS::GETPEERNAME, new_fd) {
                        Ok(peer) => args.peer = Some(peer),
                        Err(e) => self.warnings.push(e.to_string()),
                    }
                    match query_endpoint(pid, &r, SYS::GETSOCKNAME, new_fd) {
                        Ok(local) => args.local = Some(local),
                        Err(e) => self.warnings.push(e.to_string()),
                    }
                }
                _ => {}
            }
        }
        if call.dropped {
            self.session.exit_undelivered_write(thread, args)?;
        } else {
            self.session.exit(thread, call.kind, outcome, args)?;
        }
        Ok(pause)
    }

    fn pause(&mut self, pid: Pid, length: PauseLength) {
        let process = self.tracees[&pid].thread.process;
        let until = match length {
            PauseLength::Millis(ms) => Some(Instant::now() + Duration::from_millis(ms)),
            PauseLength::Indefinite => None,
        };
        // A pause stops the whole process: this thread now, the others at
        // their next stop.
        for t in self.tracees.values_mut().filter(|t| t.thread.process == process) {
            t.paused = Some(until);
        }
    }

    fn kill_all(&mut self) {
        for pid in self.tracees.keys() {
            let _ = kill(*pid, Signal::SIGKILL);
        }
    }
}

fn spawn(command: &[String]) -> Result<Pid, LiveError> {
    let denied = |reason: String| LiveError::AttachDenied { command: command.join(" "), reason };
    let (prog, args) = command.split_first().ok_or_else(|| denied("empty command".into()))?;
    let mut cmd = Command::new(prog);
    cmd.args(args);
    // SAFETY: traceme is async-signal-safe (a single ptrace call).
    unsafe {
        cmd.pre_exec(|| ptrace::traceme().map_err(std::io::Error::from));
    }
    let child = cmd.spawn().map_err(|e| denied(e.to_string()))?;
    let pid = Pid::from_raw(child.id() as i32);
    match waitpid(pid, Some(WaitPidFlag::__WALL)).map_err(|e| denied(e.to_string()))? {
        WaitStatus::Stopped(_, Signal::SIGTRAP) => {}
        other => return Err(denied(format!("unexpected first stop {other:?}"))),
    }
    ptrace::setoptions(
        pid,
        Options::PTRACE_O_TRACESYSGOOD
            | Options::PTRACE_O_TRACECLONE
            | Options::PTRACE_O_TRACEFORK
            | Options::PTRACE_O_TRACEVFORK
            | Options::PTRACE_O_TRACEEXEC
            | Options::PTRACE_O_EXITKILL,
    )
    .map_err(|e| denied(e.to_string()))?;
    Ok(pid)
}

/// Traces `config.commands` to completion (or quiescence), following
/// `library` when given.
pub fn trace_commands(config: &LiveConfig, library: Option<&RunLibrary>) -> Result<LiveRun, LiveError> {
    if config.commands.is_empty() {
        return Err(LiveError::NoCommands);
    }
    let meta = TraceMeta { config: config.name.clone(), ..Default::default() };
    let session = match library {
        Some(lib) => Session::following(meta, lib),
        None => Session::new(meta),
    };
    let mut tr = Tracer {
        session,
        engine: FaultEngine::new(config.faults.clone(), 0),
        tracees: BTreeMap::new(),
        unborn: Vec::new(),
        processes: 0,
        threads_of: BTreeMap::new(),
        warnings: Vec::new(),
        died: false,
        accepting: 0,
    };
    let started = Instant::now();
    let mut launched = 0;
    let mut last_launch = Instant::now();
    let mut accepting_at_launch = 0;
    let mut last_activity = Instant::now();
    let mut quiescent = false;
    let mut deferred: Vec<Pid> = Vec::new();
    let result = (|| -> Result<(), LiveError> {
        loop {
            if launched < config.commands.len()
                && (launched == 0 || tr.accepting > accepting_at_launch || last_launch.elapsed() >= config.launch_delay)
            {
                let pid = spawn(&config.commands[launched])?;
                tr.add_process(pid);
                tr.resume(pid);
                launched += 1;
                last_launch = Instant::now();
                accepting_at_launch = tr.accepting;
                last_activity = Instant::now();
            }
            let now = Instant::now();
            let due: Vec<Pid> = tr
                .tracees
                .iter()
                .filter(|(_, t)| matches!(t.paused, Some(Some(until)) if until <= now))
                .map(|(p, _)| *p)
                .collect();
            for pid in due {
                tr.tracees.get_mut(&pid).unwrap().paused = None;
                tr.resume(pid);
            }
            if tr.tracees.is_empty() && launched == config.commands.len() {
                return Ok(());
            }
            let only_frozen = !tr.tracees.is_empty() && tr.tracees.values().all(|t| t.paused == Some(None));
            if launched == config.commands.len() && (only_frozen || last_activity.elapsed() >= config.idle_timeout) {
                quiescent = true;
                tr.kill_all();
                // Reap everything before finishing.
                while !tr.tracees.is_empty() {
                    match waitpid(Pid::from_raw(-1), Some(WaitPidFlag::__WALL)) {
                        Ok(WaitStatus::Exited(pid, _) | WaitStatus::Signaled(pid, _, _)) => {
                            tr.tracees.remove(&pid);
                        }
                        Ok(_) => {}
                        Err(_) => break,
                    }
                }
                return Ok(());
            }
            let status = match waitpid(Pid::from_raw(-1), Some(WaitPidFlag::__WALL | WaitPidFlag::WNOHANG)) {
                Ok(WaitStatus::StillAlive) => {
                    std::thread::sleep(Duration::from_micros(200));
                    continue;
                }
                Ok(s) => s,
                Err(nix::Error::ECHILD) => {
                    tr.tracees.clear();
                    continue;
                }
                Err(e) => return Err(e.into()),
            };
            last_activity = Instant::now();
            match status {
                WaitStatus::PtraceSyscall(pid) if tr.tracees.contains_key(&pid) => {
                    deferred.push(pid);
                }
                WaitStatus::PtraceEvent(pid, _, ev) => {
                    let same_process = ev == nix::libc::PTRACE_EVENT_CLONE;
                    if matches!(
                        ev,
                        nix::libc::PTRACE_EVENT_CLONE | nix::libc::PTRACE_EVENT_FORK | nix::libc::PTRACE_EVENT_VFORK
                    ) {
                        let child = Pid::from_raw(ptrace::getevent(pid)? as i32);
                        if !tr.tracees.contains_key(&child) {
                            tr.add_thread(pid, child, same_process);
                        }
                    }
                    tr.resume(pid);
                }
                WaitStatus::Stopped(pid, sig) => {
                    if !tr.tracees.contains_key(&pid) {
                        // A new thread's first stop, before its parent's event.
                        tr.unborn.push(pid);
                        continue;
                    }
                    if sig != Signal::SIGSTOP && sig != Signal::SIGTRAP {
                        tr.tracees.get_mut(&pid).unwrap().signal = Some(sig);
                    }
                    if tr.tracees[&pid].paused.is_none() {
                        tr.resume(pid);
                    }
                }
                WaitStatus::Exited(pid, _) => {
                    tr.tracees.remove(&pid);
                }
                WaitStatus::Signaled(pid, sig, _) => {
                    if tr.tracees.remove(&pid).is_some() {
                        tr.died = true;
                        tr.warnings.push(format!("{}: killed by {sig}", LiveError::TraceeDiedUnexpectedly(pid.as_raw())));
                    }
                }
                WaitStatus::PtraceSyscall(pid) => tr.resume(pid),
                _ => {}
            }
            // Handle queued stops until none of them can progress.
            loop {
                deferred.retain(|p| tr.tracees.contains_key(p));
                let before = deferred.len();
                for pid in std::mem::take(&mut deferred) {
                    match tr.on_syscall_stop(pid) {
                        Ok(pause) => {
                            if let Some(len) = pause {
                                tr.pause(pid, len);
                            }
                            if tr.tracees[&pid].paused.is_none() {
                                tr.resume(pid);
                            }
                        }
                        Err(Deferred) => deferred.push(pid),
                        Err(Stop::Failed(e)) => return Err(e),
                    }
                }
                if deferred.is_empty() || deferred.len() == before {
                    break;
                }
            }
            if started.elapsed() > Duration::from_secs(3600) {
                return Err(LiveError::InjectionFailed { pid: 0, reason: "tracing ran for an hour".into() });
            }
        }
    })();
    if let Err(e) = result {
        tr.kill_all();
        return Err(e);
    }
    let termination = if tr.died {
        Termination::Partial
    } else if quiescent {
        Termination::Quiescent
    } else {
        Termination::Completed
    };
    let injections = tr.engine.log().to_vec();
    let (mut trace, follower) = tr.session.finish(termination);
    trace.meta_mut().wall_time_ms = Some(started.elapsed().as_millis() as u64);
    trace.finalize();
    Ok(LiveRun { trace, follower, warnings: tr.warnings, injections })
}
