//! Happens-before reconstruction over syscall-level traces.
//!
//! Events are recorded per thread ([`event`]); socket bookkeeping in
//! [`stream`] turns connect/accept pairs and read/write byte ranges into
//! cross-thread edges; [`causality`] answers ordering queries and computes
//! the canonical fingerprint that identifies a run up to partial-order
//! equivalence; [`library`] deduplicates runs across repeated executions by
//! following stored runs thread by thread; [`fault`] injects pauses, errors
//! and argument mutations at chosen points of the partial order. [`sim`] is a
//! deterministic multi-process event source, and `live` (feature `live`)
//! drives real processes through ptrace.

pub mod causality;
pub mod errno;
pub mod experiment;
pub mod event;
pub mod fault;
pub mod format;
pub mod library;
#[cfg(all(feature = "live", target_os = "linux", target_arch = "x86_64"))]
pub mod live;
pub mod replay;
pub mod session;
pub mod sim;
pub mod stream;

pub use errno::Errno;
pub use event::{
    ArgsDigest, Event, EventCoord, MatchKey, Outcome, Phase, RunId, StreamId, SyscallKind,
    Termination, ThreadId, Trace, TraceError, TraceMeta,
};
