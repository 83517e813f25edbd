//! Events, event coordinates and the per-thread trace they are recorded into.
//!
//! A [`Trace`] holds one ordered event log per traced thread. Same-thread order
//! is implicit in the log; cross-thread causality is carried by each event's
//! `parents` set. Together they form the happens-before partial order that the
//! rest of the crate reasons about.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::net::SocketAddrV4;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::causality;
use crate::errno::Errno;

/// A traced thread, numbered by process launch order and thread creation order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ThreadId {
    pub process: u32,
    pub thread: u32,
}

impl ThreadId {
    pub const fn new(process: u32, thread: u32) -> Self {
        ThreadId { process, thread }
    }

    pub const fn main(process: u32) -> Self {
        ThreadId { process, thread: 0 }
    }

    pub const fn at(self, index: u32) -> EventCoord {
        EventCoord { process: self.process, thread: self.thread, index }
    }
}

impl fmt::Display for ThreadId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.process, self.thread)
    }
}

/// Position of one event: `(process, thread, index into that thread's log)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EventCoord {
    pub process: u32,
    pub thread: u32,
    pub index: u32,
}

impl EventCoord {
    pub const fn new(process: u32, thread: u32, index: u32) -> Self {
        EventCoord { process, thread, index }
    }

    pub const fn thread_id(self) -> ThreadId {
        ThreadId { process: self.process, thread: self.thread }
    }
}

impl fmt::Display for EventCoord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}.{}", self.process, self.thread, self.index)
    }
}

#[derive(Debug, thiserror::Error)]
#[error("malformed event coordinate `{0}` (expected process.thread.index)")]
pub struct ParseCoordError(pub String);

impl FromStr for EventCoord {
    type Err = ParseCoordError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut it = s.trim().split('.').map(str::parse::<u32>);
        match (it.next(), it.next(), it.next(), it.next()) {
            (Some(Ok(p)), Some(Ok(t)), Some(Ok(i)), None) => Ok(EventCoord::new(p, t, i)),
            _ => Err(ParseCoordError(s.to_owned())),
        }
    }
}

impl Serialize for EventCoord {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for EventCoord {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// The socket syscall family tracked by the tracer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SyscallKind {
    Socket,
    Bind,
    Listen,
    Accept,
    Connect,
    Read,
    Write,
    Close,
}

impl SyscallKind {
    pub const ALL: [SyscallKind; 8] = [
        SyscallKind::Socket,
        SyscallKind::Bind,
        SyscallKind::Listen,
        SyscallKind::Accept,
        SyscallKind::Connect,
        SyscallKind::Read,
        SyscallKind::Write,
        SyscallKind::Close,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SyscallKind::Socket => "socket",
            SyscallKind::Bind => "bind",
            SyscallKind::Listen => "listen",
            SyscallKind::Accept => "accept",
            SyscallKind::Connect => "connect",
            SyscallKind::Read => "read",
            SyscallKind::Write => "write",
            SyscallKind::Close => "close",
        }
    }

    /// Resolves a syscall name, folding `send`, `recv` and `accept4` into
    /// their base kinds.
    pub fn from_name(name: &str) -> Option<SyscallKind> {
        Some(match name {
            "socket" => SyscallKind::Socket,
            "bind" => SyscallKind::Bind,
            "listen" => SyscallKind::Listen,
            "accept" | "accept4" => SyscallKind::Accept,
            "connect" => SyscallKind::Connect,
            "read" | "recv" => SyscallKind::Read,
            "write" | "send" => SyscallKind::Write,
            "close" => SyscallKind::Close,
            _ => return None,
        })
    }
}

impl fmt::Display for SyscallKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Entry,
    Exit,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Entry => "entry",
            Phase::Exit => "exit",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Result class of a syscall exit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Success,
    Error(Errno),
}

impl Outcome {
    pub fn is_success(self) -> bool {
        matches!(self, Outcome::Success)
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Outcome::Success => f.write_str("ok"),
            Outcome::Error(e) => write!(f, "err={e}"),
        }
    }
}

/// Identifier of a tracked TCP stream, assigned in order of first sighting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StreamId(pub u32);

impl fmt::Display for StreamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "s{}", self.0)
    }
}

/// Semantic summary of a syscall's arguments and result. Never holds payloads.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ArgsDigest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fd: Option<i32>,
    /// Bind address, connect destination.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub addr: Option<SocketAddrV4>,
    /// Remote endpoint of an accepted or connected socket.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub peer: Option<SocketAddrV4>,
    /// A socket's own endpoint: the connecting side's source, or an accepted
    /// socket's address when the listener is bound to the wildcard.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub local: Option<SocketAddrV4>,
    /// Descriptor returned by socket/accept.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ret_fd: Option<i32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stream: Option<StreamId>,
    /// Requested byte count on entry, transferred count on exit.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bytes: Option<u64>,
    /// A write that reported success but whose bytes were withheld by an
    /// injected fault.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub undelivered: bool,
}

/// One syscall entry or exit observed on one thread.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Event {
    pub coord: EventCoord,
    pub syscall: SyscallKind,
    pub phase: Phase,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outcome: Option<Outcome>,
    #[serde(default)]
    pub args: ArgsDigest,
    /// Cross-thread causal predecessors.
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub parents: BTreeSet<EventCoord>,
}

/// The part of an event compared when following runs and fingerprinting.
/// Byte counts, descriptors and endpoints are deliberately absent.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct MatchKey {
    pub syscall: SyscallKind,
    pub phase: Phase,
    pub outcome: Option<Outcome>,
}

impl Event {
    pub fn key(&self) -> MatchKey {
        MatchKey { syscall: self.syscall, phase: self.phase, outcome: self.outcome }
    }
}

impl fmt::Display for MatchKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.syscall, self.phase)?;
        if let Some(o) = self.outcome {
            write!(f, "/{o}")?;
        }
        Ok(())
    }
}

/// Content hash identifying a run up to partial-order equivalence.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RunId(pub String);

impl RunId {
    /// First twelve hex digits, for tables.
    pub fn short(&self) -> &str {
        &self.0[..self.0.len().min(12)]
    }
}

impl fmt::Display for RunId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// How an execution ended.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Termination {
    /// Every traced process exited.
    #[default]
    Completed,
    /// No process could make progress (blocked or indefinitely paused).
    Quiescent,
    /// A tracee vanished or the trace was cut short.
    Partial,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TraceMeta {
    pub config: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iteration: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time_ms: Option<u64>,
    #[serde(default)]
    pub termination: Termination,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TraceError {
    #[error("{syscall} exit on thread {thread} without a matching entry")]
    MismatchedPhase { thread: ThreadId, syscall: SyscallKind },
    #[error("entry events carry no outcome, exit events require one ({0})")]
    OutcomePhase(EventCoord),
    #[error("parent {parent} and child {child} are on the same thread")]
    SameThread { parent: EventCoord, child: EventCoord },
    #[error("edge {parent} -> {child} would create a cycle")]
    WouldCreateCycle { parent: EventCoord, child: EventCoord },
    #[error("unknown event coordinate {0}")]
    UnknownCoord(EventCoord),
    #[error("trace is finalized")]
    Finalized,
}

/// Per-thread event logs plus the cross-thread edges between them.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct Trace {
    meta: TraceMeta,
    logs: BTreeMap<ThreadId, Vec<Event>>,
    /// Reverse of the parent sets, for forward reachability.
    children: BTreeMap<EventCoord, BTreeSet<EventCoord>>,
    run_id: Option<RunId>,
}

impl Trace {
    pub fn new(meta: TraceMeta) -> Self {
        Trace { meta, ..Default::default() }
    }

    pub fn meta(&self) -> &TraceMeta {
        &self.meta
    }

    /// Metadata is not part of the run identity and stays editable after finalize.
    pub fn meta_mut(&mut self) -> &mut TraceMeta {
        &mut self.meta
    }

    pub fn logs(&self) -> &BTreeMap<ThreadId, Vec<Event>> {
        &self.logs
    }

    pub fn thread_log(&self, thread: ThreadId) -> &[Event] {
        self.logs.get(&thread).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn threads(&self) -> impl Iterator<Item = ThreadId> + '_ {
        self.logs.keys().copied()
    }

    /// All events, by thread then index.
    pub fn events(&self) -> impl Iterator<Item = &Event> + '_ {
        self.logs.values().flatten()
    }

    pub fn len(&self) -> usize {
        self.logs.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn event(&self, coord: EventCoord) -> Option<&Event> {
        self.logs.get(&coord.thread_id())?.get(coord.index as usize)
    }

    pub fn contains(&self, coord: EventCoord) -> bool {
        self.event(coord).is_some()
    }

    /// Coordinate the next event on `thread` will receive.
    pub fn next_coord(&self, thread: ThreadId) -> EventCoord {
        thread.at(self.thread_log(thread).len() as u32)
    }

    /// Every `(parent, child)` cross-thread edge.
    pub fn edges(&self) -> BTreeSet<(EventCoord, EventCoord)> {
        self.events()
            .flat_map(|e| e.parents.iter().map(move |p| (*p, e.coord)))
            .collect()
    }

    pub fn children_of(&self, coord: EventCoord) -> impl Iterator<Item = EventCoord> + '_ {
        self.children.get(&coord).into_iter().flatten().copied()
    }

    pub fn is_finalized(&self) -> bool {
        self.run_id.is_some()
    }

    pub fn run_id(&self) -> Option<&RunId> {
        self.run_id.as_ref()
    }

    /// Records one event at the end of `thread`'s log.
    pub fn append_event(
        &mut self,
        thread: ThreadId,
        syscall: SyscallKind,
        phase: Phase,
        outcome: Option<Outcome>,
        args: ArgsDigest,
    ) -> Result<EventCoord, TraceError> {
        if self.is_finalized() {
            return Err(TraceError::Finalized);
        }
        let log = self.logs.entry(thread).or_default();
        let coord = thread.at(log.len() as u32);
        if phase == Phase::Exit {
            match log.last() {
                Some(prev) if prev.phase == Phase::Entry && prev.syscall == syscall => {}
                _ => {
                    if log.is_empty() {
                        self.logs.remove(&thread);
                    }
                    return Err(TraceError::MismatchedPhase { thread, syscall });
                }
            }
        }
        if outcome.is_some() != (phase == Phase::Exit) {
            if log.is_empty() {
                self.logs.remove(&thread);
            }
            return Err(TraceError::OutcomePhase(coord));
        }
        log.push(Event { coord, syscall, phase, outcome, args, parents: BTreeSet::new() });
        Ok(coord)
    }

    /// Adds a cross-thread edge `parent -> child`. Returns `false` if the edge
    /// was already present.
    pub fn add_parent(&mut self, child: EventCoord, parent: EventCoord) -> Result<bool, TraceError> {
        if self.is_finalized() {
            return Err(TraceError::Finalized);
        }
        for c in [child, parent] {
            if !self.contains(c) {
                return Err(TraceError::UnknownCoord(c));
            }
        }
        if child.thread_id() == parent.thread_id() {
            return Err(TraceError::SameThread { parent, child });
        }
        if self.event(child).is_some_and(|e| e.parents.contains(&parent)) {
            return Ok(false);
        }
        if self.reaches(child, parent) {
            return Err(TraceError::WouldCreateCycle { parent, child });
        }
        self.logs.get_mut(&child.thread_id()).unwrap()[child.index as usize]
            .parents
            .insert(parent);
        self.children.entry(parent).or_default().insert(child);
        Ok(true)
    }

    /// Forward search along program order and cross-thread edges.
    pub(crate) fn reaches(&self, from: EventCoord, to: EventCoord) -> bool {
        let mut seen = BTreeSet::new();
        let mut stack = vec![from];
        while let Some(c) = stack.pop() {
            if c == to {
                return true;
            }
            if !seen.insert(c) {
                continue;
            }
            // Within a thread every later event is reachable; jump straight to
            // `to` when it sits further down the same log.
            if c.thread_id() == to.thread_id() && c.index < to.index {
                return true;
            }
            let next = EventCoord { index: c.index + 1, ..c };
            if self.contains(next) {
                stack.push(next);
            }
            stack.extend(self.children_of(c));
        }
        false
    }

    /// Seals the trace and assigns its run id from the canonical fingerprint.
    pub fn finalize(&mut self) -> &RunId {
        if self.run_id.is_none() {
            self.run_id = Some(causality::run_id(self));
        }
        self.run_id.as_ref().unwrap()
    }
}
