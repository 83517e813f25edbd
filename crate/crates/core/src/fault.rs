//! Fault specifications and their injection.
//!
//! A rule names an event, either by its coordinate in a stored run ("the fifth
//! event of thread 1.0 in run R") or by a predicate ("the third write entry of
//! process 0"), and an action: pause the process, fail the syscall with an
//! errno, shorten a write, or silently drop a write. Partitions expand into
//! drop/errno rules between two process groups, active between a start and a
//! heal trigger.
//!
//! The engine only decides; event sources carry the decision out through
//! [`Mutator`].

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use toml::Spanned;

use crate::errno::Errno;
use crate::event::{Phase, RunId, SyscallKind, ThreadId};
use crate::library::{Follower, RunLibrary};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FaultError {
    #[error("rule at line {line}: run {run} is not in the library")]
    UnknownRun { line: usize, run: RunId },
    #[error("rule at line {line}: errno injection is not supported on {syscall}")]
    UnsupportedSyscallForErrno { line: usize, syscall: SyscallKind },
    #[error("malformed rule at line {line}: {reason}")]
    MalformedRule { line: usize, reason: String },
    #[error("event source cannot {0}")]
    BackendUnsupported(&'static str),
}

/// Syscalls with a two-step errno recipe.
pub const ERRNO_SYSCALLS: [SyscallKind; 4] =
    [SyscallKind::Connect, SyscallKind::Read, SyscallKind::Write, SyscallKind::Accept];

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum FaultTarget {
    /// An event of a stored run, matched while that run is still followed.
    Coordinate { run: RunId, thread: ThreadId, index: u32, syscall: SyscallKind, phase: Phase },
    /// The `occurrence`-th matching event of a process (every one when `None`).
    /// `peer` restricts to events whose stream leads to that process.
    Predicate { process: u32, syscall: SyscallKind, phase: Phase, occurrence: Option<u32>, peer: Option<u32> },
}

impl FaultTarget {
    pub fn syscall(&self) -> SyscallKind {
        match self {
            FaultTarget::Coordinate { syscall, .. } | FaultTarget::Predicate { syscall, .. } => *syscall,
        }
    }

    pub fn phase(&self) -> Phase {
        match self {
            FaultTarget::Coordinate { phase, .. } | FaultTarget::Predicate { phase, .. } => *phase,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PauseLength {
    Millis(u64),
    Indefinite,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TruncateRule {
    Factor(f64),
    /// Uniform fraction in `(0, max_fraction]`, applied with `probability`.
    Random { max_fraction: f64, probability: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FaultAction {
    Pause(PauseLength),
    Errno(Errno),
    MutateWriteCount(TruncateRule),
    /// The write reports success but its bytes never arrive; a connect times out.
    DropConnectionMessages,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub start: Option<FaultTarget>,
    pub heal: Option<FaultTarget>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FaultRule {
    pub target: FaultTarget,
    pub action: FaultAction,
    pub window: Option<Window>,
    /// Source line, for diagnostics.
    pub line: usize,
}

/// What the engine decided for one event, with randomness already resolved.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Injection {
    Pause(PauseLength),
    Errno(Errno),
    Truncate(f64),
    Drop,
}

impl fmt::Display for Injection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Injection::Pause(PauseLength::Millis(ms)) => write!(f, "pause {ms}ms"),
            Injection::Pause(PauseLength::Indefinite) => f.write_str("pause indefinitely"),
            Injection::Errno(e) => write!(f, "errno {e}"),
            Injection::Truncate(x) => write!(f, "truncate x{x:.3}"),
            Injection::Drop => f.write_str("drop"),
        }
    }
}

// ---------------------------------------------------------------------------
// Parsing

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSpec {
    #[serde(default)]
    rule: Vec<Spanned<RawRule>>,
    #[serde(default)]
    partition: Vec<Spanned<RawPartition>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRule {
    target: RawTarget,
    action: RawAction,
}

#[derive(Deserialize, Clone)]
#[serde(deny_unknown_fields)]
struct RawTarget {
    run: Option<String>,
    process: u32,
    thread: Option<u32>,
    event: Option<u32>,
    syscall: Option<String>,
    phase: Option<String>,
    occurrence: Option<u32>,
    peer: Option<u32>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAction {
    pause: Option<toml::Value>,
    errno: Option<String>,
    truncate: Option<toml::Value>,
    max_fraction: Option<f64>,
    probability: Option<f64>,
    drop: Option<bool>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPartition {
    isolate: Vec<u32>,
    from: Vec<u32>,
    start: Option<RawTarget>,
    heal: Option<RawTarget>,
    errno: Option<String>,
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].bytes().filter(|b| *b == b'\n').count() + 1
}

fn malformed(line: usize, reason: impl ToString) -> FaultError {
    FaultError::MalformedRule { line, reason: reason.to_string() }
}

fn parse_target(raw: &RawTarget, line: usize, library: Option<&RunLibrary>) -> Result<FaultTarget, FaultError> {
    if let Some(run) = &raw.run {
        let run = RunId(run.clone());
        let (Some(thread), Some(index)) = (raw.thread, raw.event) else {
            return Err(malformed(line, "coordinate targets need `thread` and `event`"));
        };
        if raw.syscall.is_some() || raw.occurrence.is_some() || raw.peer.is_some() {
            return Err(malformed(line, "coordinate targets take only run, process, thread, event"));
        }
        let trace = library
            .and_then(|l| l.get(&run))
            .ok_or_else(|| FaultError::UnknownRun { line, run: run.clone() })?;
        let thread = ThreadId::new(raw.process, thread);
        let event = trace
            .event(thread.at(index))
            .ok_or_else(|| malformed(line, format!("run {} has no event {}", run.short(), thread.at(index))))?;
        return Ok(FaultTarget::Coordinate { run, thread, index, syscall: event.syscall, phase: event.phase });
    }
    let Some(name) = &raw.syscall else {
        return Err(malformed(line, "predicate targets need `syscall` (or use `run` for a coordinate)"));
    };
    let syscall = SyscallKind::from_name(name).ok_or_else(|| malformed(line, format!("unknown syscall `{name}`")))?;
    let phase = match raw.phase.as_deref() {
        None | Some("entry") => Phase::Entry,
        Some("exit") => Phase::Exit,
        Some(p) => return Err(malformed(line, format!("unknown phase `{p}`"))),
    };
    if raw.thread.is_some() || raw.event.is_some() {
        return Err(malformed(line, "`thread`/`event` need a `run`"));
    }
    if raw.occurrence == Some(0) {
        return Err(malformed(line, "occurrences count from 1"));
    }
    Ok(FaultTarget::Predicate { process: raw.process, syscall, phase, occurrence: raw.occurrence, peer: raw.peer })
}

fn parse_errno(name: &str, line: usize) -> Result<Errno, FaultError> {
    name.parse().map_err(|e| malformed(line, e))
}

fn parse_action(raw: &RawAction, line: usize) -> Result<FaultAction, FaultError> {
    let given = [raw.pause.is_some(), raw.errno.is_some(), raw.truncate.is_some(), raw.drop.is_some()];
    if given.iter().filter(|g| **g).count() != 1 {
        return Err(malformed(line, "action needs exactly one of pause, errno, truncate, drop"));
    }
    if raw.truncate.is_none() && (raw.max_fraction.is_some() || raw.probability.is_some()) {
        return Err(malformed(line, "max_fraction/probability only apply to truncate"));
    }
    if let Some(p) = &raw.pause {
        return match p {
            toml::Value::Integer(ms) if *ms >= 0 => Ok(FaultAction::Pause(PauseLength::Millis(*ms as u64))),
            toml::Value::String(s) if s == "indefinite" => Ok(FaultAction::Pause(PauseLength::Indefinite)),
            _ => Err(malformed(line, "pause is a millisecond count or \"indefinite\"")),
        };
    }
    if let Some(e) = &raw.errno {
        return Ok(FaultAction::Errno(parse_errno(e, line)?));
    }
    if let Some(t) = &raw.truncate {
        let in_range = |x: f64| x > 0.0 && x <= 0.5;
        return match t {
            toml::Value::Float(f) if in_range(*f) => Ok(FaultAction::MutateWriteCount(TruncateRule::Factor(*f))),
            toml::Value::String(s) if s == "random" => {
                let max_fraction = raw.max_fraction.unwrap_or(0.5);
                let probability = raw.probability.unwrap_or(1.0);
                if !in_range(max_fraction) || !(0.0..=1.0).contains(&probability) {
                    return Err(malformed(line, "max_fraction must be in (0, 0.5], probability in [0, 1]"));
                }
                Ok(FaultAction::MutateWriteCount(TruncateRule::Random { max_fraction, probability }))
            }
            _ => Err(malformed(line, "truncate is a factor in (0, 0.5] or \"random\"")),
        };
    }
    match raw.drop {
        Some(true) => Ok(FaultAction::DropConnectionMessages),
        _ => Err(malformed(line, "drop must be true")),
    }
}

fn validate(target: &FaultTarget, action: &FaultAction, line: usize) -> Result<(), FaultError> {
    let (syscall, phase) = (target.syscall(), target.phase());
    match action {
        FaultAction::Errno(_) => {
            if !ERRNO_SYSCALLS.contains(&syscall) {
                return Err(FaultError::UnsupportedSyscallForErrno { line, syscall });
            }
            if phase != Phase::Entry {
                return Err(malformed(line, "errno injection targets a syscall entry"));
            }
        }
        FaultAction::MutateWriteCount(_) => {
            if (syscall, phase) != (SyscallKind::Write, Phase::Entry) {
                return Err(malformed(line, "truncate targets a write entry"));
            }
        }
        FaultAction::DropConnectionMessages => {
            if !matches!(syscall, SyscallKind::Write | SyscallKind::Connect) || phase != Phase::Entry {
                return Err(malformed(line, "drop targets a write or connect entry"));
            }
        }
        FaultAction::Pause(_) => {}
    }
    Ok(())
}

/// Parses a fault specification. Coordinate targets are resolved against
/// `library`.
pub fn parse_fault_spec(text: &str, library: Option<&RunLibrary>) -> Result<Vec<FaultRule>, FaultError> {
    let spec: RawSpec = toml::from_str(text).map_err(|e| {
        let line = e.span().map_or(1, |s| line_of(text, s.start));
        malformed(line, e.message())
    })?;
    let mut rules = Vec::new();
    for raw in &spec.rule {
        let line = line_of(text, raw.span().start);
        let r = raw.get_ref();
        let target = parse_target(&r.target, line, library)?;
        let action = parse_action(&r.action, line)?;
        validate(&target, &action, line)?;
        rules.push(FaultRule { target, action, window: None, line });
    }
    for raw in &spec.partition {
        let line = line_of(text, raw.span().start);
        rules.extend(expand_partition(raw.get_ref(), line, library)?);
    }
    Ok(rules)
}

fn expand_partition(p: &RawPartition, line: usize, library: Option<&RunLibrary>) -> Result<Vec<FaultRule>, FaultError> {
    if p.isolate.is_empty() || p.from.is_empty() {
        return Err(malformed(line, "partition sides must be non-empty"));
    }
    if p.isolate.iter().any(|a| p.from.contains(a)) {
        return Err(malformed(line, "partition sides overlap"));
    }
    let window = Window {
        start: p.start.as_ref().map(|t| parse_target(t, line, library)).transpose()?,
        heal: p.heal.as_ref().map(|t| parse_target(t, line, library)).transpose()?,
    };
    let errno = p.errno.as_deref().map(|e| parse_errno(e, line)).transpose()?;
    let mut rules = Vec::new();
    let pairs = p
        .isolate
        .iter()
        .flat_map(|a| p.from.iter().map(move |b| (*a, *b)))
        .flat_map(|(a, b)| [(a, b), (b, a)]);
    for (process, peer) in pairs {
        for syscall in [SyscallKind::Connect, SyscallKind::Write] {
            let action = match (errno, syscall) {
                (Some(e), _) => FaultAction::Errno(e),
                (None, SyscallKind::Connect) => FaultAction::Errno(Errno::ETIMEDOUT),
                (None, _) => FaultAction::DropConnectionMessages,
            };
            rules.push(FaultRule {
                target: FaultTarget::Predicate { process, syscall, phase: Phase::Entry, occurrence: None, peer: Some(peer) },
                action,
                window: Some(window.clone()),
                line,
            });
        }
    }
    Ok(rules)
}

// ---------------------------------------------------------------------------
// Matching

/// An event about to be recorded, as the engine sees it.
#[derive(Clone, Copy, Debug)]
pub struct Incoming<'a> {
    pub thread: ThreadId,
    pub syscall: SyscallKind,
    pub phase: Phase,
    /// Process at the other end of the stream (or the listener, for connect).
    pub peer_process: Option<u32>,
    pub follower: &'a Follower,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Default)]
struct RuleState {
    seen: u32,
    fired: bool,
    start_seen: u32,
    heal_seen: u32,
    started: bool,
    healed: bool,
}

/// Per-execution matching state for an ordered rule list.
#[derive(Clone, Debug)]
pub struct FaultEngine {
    rules: Vec<FaultRule>,
    state: Vec<RuleState>,
    rng: ChaCha8Rng,
    log: Vec<(usize, Injection)>,
}

impl PartialEq for FaultEngine {
    fn eq(&self, other: &Self) -> bool {
        self.rules == other.rules && self.state == other.state && self.rng == other.rng && self.log == other.log
    }
}

impl std::hash::Hash for FaultEngine {
    fn hash<H: std::hash::Hasher>(&self, h: &mut H) {
        self.state.hash(h);
        self.log.len().hash(h);
    }
}

impl Eq for FaultEngine {}

/// Seed mixed into the engine's random stream so that truncation draws do
/// not correlate with scheduler draws of the same seed.
const RNG_DOMAIN: u64 = 0x6661_756c_7473;

enum Hit {
    No,
    Counted,
}

impl FaultEngine {
    pub fn new(rules: Vec<FaultRule>, seed: u64) -> Self {
        let state = vec![RuleState::default(); rules.len()];
        FaultEngine { rules, state, rng: ChaCha8Rng::seed_from_u64(seed ^ RNG_DOMAIN), log: Vec::new() }
    }

    pub fn empty() -> Self {
        Self::new(Vec::new(), 0)
    }

    pub fn rules(&self) -> &[FaultRule] {
        &self.rules
    }

    /// Injections performed so far, as `(rule index, injection)`.
    pub fn log(&self) -> &[(usize, Injection)] {
        &self.log
    }

    fn predicate_hit(target: &FaultTarget, ev: &Incoming<'_>, counter: &mut u32) -> Hit {
        match target {
            FaultTarget::Predicate { process, syscall, phase, occurrence, peer } => {
                let peer_ok = peer.is_none() || *peer == ev.peer_process;
                if *process != ev.thread.process || *syscall != ev.syscall || *phase != ev.phase || !peer_ok {
                    return Hit::No;
                }
                *counter += 1;
                match occurrence {
                    Some(n) if *counter != *n => Hit::No,
                    _ => Hit::Counted,
                }
            }
            FaultTarget::Coordinate { run, thread, index, syscall, phase } => {
                let at_target = *thread == ev.thread
                    && (*syscall, *phase) == (ev.syscall, ev.phase)
                    && ev
                        .follower
                        .cursor(run)
                        .is_some_and(|c| c.is_following() && c.position(*thread) == *index as usize);
                if at_target {
                    Hit::Counted
                } else {
                    Hit::No
                }
            }
        }
    }

    /// Decides whether the incoming event is faulted. At most one rule fires
    /// per event: the first matching one in spec order.
    pub fn on_event(&mut self, ev: &Incoming<'_>) -> Option<Injection> {
        let mut chosen = None;
        for (i, rule) in self.rules.iter().enumerate() {
            let st = &mut self.state[i];
            if let Some(w) = &rule.window {
                if !st.started {
                    st.started = match &w.start {
                        None => true,
                        Some(t) => matches!(Self::predicate_hit(t, ev, &mut st.start_seen), Hit::Counted),
                    };
                    // The trigger event itself is not faulted.
                    continue;
                }
                if !st.healed {
                    if let Some(t) = &w.heal {
                        st.healed = matches!(Self::predicate_hit(t, ev, &mut st.heal_seen), Hit::Counted);
                    }
                }
                if st.healed {
                    continue;
                }
            }
            let hit = matches!(Self::predicate_hit(&rule.target, ev, &mut st.seen), Hit::Counted);
            let once = matches!(rule.target, FaultTarget::Coordinate { .. });
            if hit && chosen.is_none() && !(once && st.fired) {
                st.fired = true;
                chosen = Some(i);
            }
        }
        let i = chosen?;
        let injection = match self.rules[i].action {
            FaultAction::Pause(len) => Injection::Pause(len),
            FaultAction::Errno(code) => Injection::Errno(code),
            FaultAction::DropConnectionMessages => match ev.syscall {
                SyscallKind::Connect => Injection::Errno(Errno::ETIMEDOUT),
                _ => Injection::Drop,
            },
            FaultAction::MutateWriteCount(TruncateRule::Factor(f)) => Injection::Truncate(f),
            FaultAction::MutateWriteCount(TruncateRule::Random { max_fraction, probability }) => {
                if self.rng.gen_bool(probability) {
                    // (0, max]: 1 - U[0,1) is in (0, 1].
                    Injection::Truncate(max_fraction * (1.0 - self.rng.gen::<f64>()))
                } else {
                    return None;
                }
            }
        };
        self.log.push((i, injection));
        Some(injection)
    }
}

/// Shortened byte count; never below one byte for a non-empty write.
pub fn truncated_count(requested: u64, fraction: f64) -> u64 {
    if requested == 0 {
        return 0;
    }
    ((requested as f64 * fraction).floor() as u64).clamp(1, requested)
}

// ---------------------------------------------------------------------------
// Application

/// The mutation surface an event source offers to the fault engine.
///
/// Live sources rewrite registers (invalidate the operative argument at entry,
/// overwrite the return value at exit); the simulator substitutes outcomes
/// directly. Both must record the same events.
pub trait Mutator {
    /// Fails the syscall `thread` is entering; its exit reports `-code`.
    fn fail_syscall(&mut self, thread: ThreadId, syscall: SyscallKind, code: Errno) -> Result<(), FaultError>;
    /// Stops scheduling/resuming `process` for `length`.
    fn pause(&mut self, process: u32, length: PauseLength) -> Result<(), FaultError>;
    /// Replaces the byte count of the write `thread` is entering.
    fn set_write_count(&mut self, thread: ThreadId, count: u64) -> Result<(), FaultError>;
    /// Makes the write `thread` is entering report success without sending.
    fn drop_write(&mut self, thread: ThreadId) -> Result<(), FaultError>;
}

pub fn apply_errno<M: Mutator + ?Sized>(m: &mut M, ev: &Incoming<'_>, code: Errno) -> Result<(), FaultError> {
    if ev.phase != Phase::Entry || !ERRNO_SYSCALLS.contains(&ev.syscall) {
        return Err(FaultError::BackendUnsupported("inject errno outside a supported syscall entry"));
    }
    m.fail_syscall(ev.thread, ev.syscall, code)
}

pub fn apply_pause<M: Mutator + ?Sized>(m: &mut M, process: u32, length: PauseLength) -> Result<(), FaultError> {
    m.pause(process, length)
}

pub fn apply_write_truncation<M: Mutator + ?Sized>(
    m: &mut M,
    thread: ThreadId,
    requested: u64,
    fraction: f64,
) -> Result<u64, FaultError> {
    let count = truncated_count(requested, fraction);
    m.set_write_count(thread, count)?;
    Ok(count)
}

/// Dispatches one injection. Returns the new write count for truncations.
pub fn apply<M: Mutator + ?Sized>(
    m: &mut M,
    ev: &Incoming<'_>,
    injection: Injection,
    requested: Option<u64>,
) -> Result<Option<u64>, FaultError> {
    match injection {
        Injection::Pause(len) => apply_pause(m, ev.thread.process, len).map(|_| None),
        Injection::Errno(code) => apply_errno(m, ev, code).map(|_| None),
        Injection::Truncate(f) => apply_write_truncation(m, ev.thread, requested.unwrap_or(0), f).map(Some),
        Injection::Drop => m.drop_write(ev.thread).map(|_| None),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event::{ArgsDigest, Outcome, Trace, TraceMeta};

    fn lib_with_run() -> (RunLibrary, RunId) {
        let mut lib = RunLibrary::in_memory("t");
        let mut t = Trace::new(TraceMeta::default());
        let th = ThreadId::main(1);
        for sys in [SyscallKind::Socket, SyscallKind::Connect] {
            t.append_event(th, sys, Phase::Entry, None, ArgsDigest::default()).unwrap();
            t.append_event(th, sys, Phase::Exit, Some(Outcome::Success), ArgsDigest::default()).unwrap();
        }
        t.append_event(th, SyscallKind::Write, Phase::Entry, None, ArgsDigest::default()).unwrap();
        let id = lib.record(t).unwrap().run_id().clone();
        (lib, id)
    }

    #[test]
    fn coordinate_errno_rule_parses() {
        let (lib, id) = lib_with_run();
        let text = format!(
            "[[rule]]\ntarget = {{ run = \"{id}\", process = 1, thread = 0, event = 2 }}\naction = {{ errno = \"ECONNREFUSED\" }}\n"
        );
        let rules = parse_fault_spec(&text, Some(&lib)).unwrap();
        assert_eq!(rules.len(), 1);
        assert_eq!(rules[0].action, FaultAction::Errno(Errno::ECONNREFUSED));
        assert!(matches!(
            &rules[0].target,
            FaultTarget::Coordinate { index: 2, syscall: SyscallKind::Connect, phase: Phase::Entry, .. }
        ));
    }

    #[test]
    fn indefinite_pause_on_predicate() {
        let text = r#"
[[rule]]
target = { process = 0, syscall = "write", phase = "entry", occurrence = 3 }
action = { pause = "indefinite" }
"#;
        let rules = parse_fault_spec(text, None).unwrap();
        assert_eq!(rules[0].action, FaultAction::Pause(PauseLength::Indefinite));
        assert_eq!(rules[0].line, 2);
    }

    #[test]
    fn errno_on_bind_is_rejected() {
        let text = "[[rule]]\ntarget = { process = 0, syscall = \"bind\" }\naction = { errno = \"EADDRINUSE\" }\n";
        assert_eq!(
            parse_fault_spec(text, None),
            Err(FaultError::UnsupportedSyscallForErrno { line: 1, syscall: SyscallKind::Bind })
        );
    }

    #[test]
    fn unknown_run() {
        let (lib, _) = lib_with_run();
        let text = "[[rule]]\ntarget = { run = \"abc\", process = 1, thread = 0, event = 0 }\naction = { pause = 5 }\n";
        assert!(matches!(parse_fault_spec(text, Some(&lib)), Err(FaultError::UnknownRun { .. })));
        assert!(matches!(parse_fault_spec(text, None), Err(FaultError::UnknownRun { .. })));
    }

    #[test]
    fn malformed_rules_report_lines() {
        let cases = [
            ("\n\n[[rule]]\ntarget = { process = 0 }\naction = { pause = 1 }\n", 3),
            ("[[rule]]\ntarget = { process = 0, syscall = \"write\" }\naction = { pause = 1, drop = true }\n", 1),
            ("[[rule]]\ntarget = { process = 0, syscall = \"write\" }\naction = { truncate = 0.9 }\n", 1),
            ("[[rule]]\ntarget = { process = 0, syscall = \"read\" }\naction = { truncate = 0.5 }\n", 1),
            ("[[rule]]\ntarget = { process = 0, syscall = \"connect\", phase = \"exit\" }\naction = { errno = \"ETIMEDOUT\" }\n", 1),
            ("[[rule]]\ntarget = { process = 0, syscall = \"nope\" }\naction = { pause = 1 }\n", 1),
            ("[[rule]]\ntarget = { process = 0, syscall = \"write\", bogus = 1 }\naction = { pause = 1 }\n", 2),
        ];
        for (text, line) in cases {
            match parse_fault_spec(text, None) {
                Err(FaultError::MalformedRule { line: l, .. }) => assert_eq!(l, line, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
    }

    fn incoming<'a>(f: &'a Follower, p: u32, sys: SyscallKind, phase: Phase) -> Incoming<'a> {
        Incoming { thread: ThreadId::main(p), syscall: sys, phase, peer_process: None, follower: f }
    }

    #[test]
    fn predicate_occurrence_counting() {
        let text = "[[rule]]\ntarget = { process = 0, syscall = \"write\", occurrence = 3 }\naction = { pause = 10 }\n";
        let mut e = FaultEngine::new(parse_fault_spec(text, None).unwrap(), 0);
        let f = Follower::default();
        let w = incoming(&f, 0, SyscallKind::Write, Phase::Entry);
        assert_eq!(e.on_event(&w), None);
        assert_eq!(e.on_event(&incoming(&f, 1, SyscallKind::Write, Phase::Entry)), None);
        assert_eq!(e.on_event(&incoming(&f, 0, SyscallKind::Write, Phase::Exit)), None);
        assert_eq!(e.on_event(&w), None);
        assert_eq!(e.on_event(&w), Some(Injection::Pause(PauseLength::Millis(10))));
        assert_eq!(e.on_event(&w), None);
    }

    #[test]
    fn coordinate_rule_needs_following_cursor_at_index() {
        let (lib, id) = lib_with_run();
        let text = format!(
            "[[rule]]\ntarget = {{ run = \"{id}\", process = 1, thread = 0, event = 0 }}\naction = {{ pause = 3 }}\n"
        );
        let rules = parse_fault_spec(&text, Some(&lib)).unwrap();
        let fresh = Follower::new(&lib);
        let mut e = FaultEngine::new(rules.clone(), 0);
        let ev = incoming(&fresh, 1, SyscallKind::Socket, Phase::Entry);
        assert_eq!(e.on_event(&ev), Some(Injection::Pause(PauseLength::Millis(3))));
        // At most once.
        assert_eq!(e.on_event(&ev), None);

        // Diverged run: no match.
        let mut diverged = Follower::new(&lib);
        let bogus = crate::event::Event {
            coord: crate::EventCoord::new(1, 0, 0),
            syscall: SyscallKind::Close,
            phase: Phase::Entry,
            outcome: None,
            args: ArgsDigest::default(),
            parents: Default::default(),
        };
        diverged.follow_step(&lib, &bogus);
        let mut e = FaultEngine::new(rules, 0);
        assert_eq!(e.on_event(&incoming(&diverged, 1, SyscallKind::Socket, Phase::Entry)), None);
    }

    #[test]
    fn first_rule_wins() {
        let text = r#"
[[rule]]
target = { process = 0, syscall = "connect" }
action = { errno = "ECONNREFUSED" }
[[rule]]
target = { process = 0, syscall = "connect" }
action = { pause = 1 }
"#;
        let mut e = FaultEngine::new(parse_fault_spec(text, None).unwrap(), 0);
        let f = Follower::default();
        let got = e.on_event(&incoming(&f, 0, SyscallKind::Connect, Phase::Entry));
        assert_eq!(got, Some(Injection::Errno(Errno::ECONNREFUSED)));
        assert_eq!(e.log().len(), 1);
    }

    #[test]
    fn truncation_counts() {
        assert_eq!(truncated_count(100, 0.5), 50);
        assert_eq!(truncated_count(1, 0.01), 1);
        assert_eq!(truncated_count(1, 0.5), 1);
        assert_eq!(truncated_count(0, 0.5), 0);
        assert_eq!(truncated_count(7, 0.5), 3);
    }

    #[test]
    fn random_truncation_is_seeded_and_bounded() {
        let text = "[[rule]]\ntarget = { process = 0, syscall = \"write\" }\naction = { truncate = \"random\", probability = 0.5 }\n";
        let rules = parse_fault_spec(text, None).unwrap();
        let f = Follower::default();
        let draw = |seed| {
            let mut e = FaultEngine::new(rules.clone(), seed);
            (0..200)
                .map(|_| e.on_event(&incoming(&f, 0, SyscallKind::Write, Phase::Entry)))
                .collect::<Vec<_>>()
        };
        let a = draw(1);
        assert_eq!(a, draw(1));
        assert_ne!(a, draw(2));
        let fired: Vec<f64> = a
            .iter()
            .flatten()
            .map(|i| match i {
                Injection::Truncate(x) => *x,
                other => panic!("{other:?}"),
            })
            .collect();
        assert!(fired.len() > 50 && fired.len() < 150, "{}", fired.len());
        assert!(fired.iter().all(|x| *x > 0.0 && *x <= 0.5));
    }

    #[test]
    fn partition_window_opens_and_heals() {
        let text = r#"
[[partition]]
isolate = [1]
from = [0]
start = { process = 1, syscall = "write", phase = "exit", occurrence = 1 }
heal = { process = 1, syscall = "read", phase = "exit", occurrence = 1 }
"#;
        let rules = parse_fault_spec(text, None).unwrap();
        assert_eq!(rules.len(), 4);
        let mut e = FaultEngine::new(rules, 0);
        let f = Follower::default();
        let write_to_0 = Incoming { peer_process: Some(0), ..incoming(&f, 1, SyscallKind::Write, Phase::Entry) };
        assert_eq!(e.on_event(&write_to_0), None);
        e.on_event(&incoming(&f, 1, SyscallKind::Write, Phase::Exit));
        assert_eq!(e.on_event(&write_to_0), Some(Injection::Drop));
        let write_to_2 = Incoming { peer_process: Some(2), ..write_to_0 };
        assert_eq!(e.on_event(&write_to_2), None);
        let connect_1 = Incoming { peer_process: Some(1), ..incoming(&f, 0, SyscallKind::Connect, Phase::Entry) };
        assert_eq!(e.on_event(&connect_1), Some(Injection::Errno(Errno::ETIMEDOUT)));
        e.on_event(&incoming(&f, 1, SyscallKind::Read, Phase::Exit));
        assert_eq!(e.on_event(&write_to_0), None);
    }

    struct Static;

    impl Mutator for Static {
        fn fail_syscall(&mut self, _: ThreadId, _: SyscallKind, _: Errno) -> Result<(), FaultError> {
            Err(FaultError::BackendUnsupported("mutate a recorded log"))
        }
        fn pause(&mut self, _: u32, _: PauseLength) -> Result<(), FaultError> {
            Err(FaultError::BackendUnsupported("mutate a recorded log"))
        }
        fn set_write_count(&mut self, _: ThreadId, _: u64) -> Result<(), FaultError> {
            Err(FaultError::BackendUnsupported("mutate a recorded log"))
        }
        fn drop_write(&mut self, _: ThreadId) -> Result<(), FaultError> {
            Err(FaultError::BackendUnsupported("mutate a recorded log"))
        }
    }

    #[test]
    fn static_backend_refuses() {
        let f = Follower::default();
        let ev = incoming(&f, 0, SyscallKind::Connect, Phase::Entry);
        assert!(matches!(apply_errno(&mut Static, &ev, Errno::ECONNREFUSED), Err(FaultError::BackendUnsupported(_))));
        assert!(matches!(
            apply_write_truncation(&mut Static, ThreadId::main(0), 100, 0.5),
            Err(FaultError::BackendUnsupported(_))
        ));
        // Errno outside a supported entry is refused before reaching the backend.
        let bind = incoming(&f, 0, SyscallKind::Bind, Phase::Entry);
        assert!(apply_errno(&mut Static, &bind, Errno::ECONNREFUSED).is_err());
    }
}
