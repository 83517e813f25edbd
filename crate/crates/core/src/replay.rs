//! Re-feeding a recorded trace through the recording pipeline.
//!
//! The replay source presents a stored trace's events to a [`Session`] in any
//! order consistent with its happens-before relation, as if a tracer were
//! observing them again. Edges are re-derived from the recorded arguments, so
//! a replay both reproduces the run and exercises following under a different
//! witnessed schedule. A static log cannot be mutated, so fault injection
//! against it fails.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::errno::Errno;
use crate::event::{ArgsDigest, EventCoord, Phase, SyscallKind, ThreadId, Trace};
use crate::fault::{FaultError, Mutator, PauseLength};
use crate::library::{Follower, RunLibrary};
use crate::session::{Session, SessionError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ReplayError {
    #[error("{0} is not the next event of its thread")]
    OutOfProgramOrder(EventCoord),
    #[error("{child} replayed before its parent {parent}")]
    NotTopological { child: EventCoord, parent: EventCoord },
    #[error("{0} is not in the trace")]
    UnknownCoord(EventCoord),
    #[error(transparent)]
    Session(#[from] SessionError),
}

/// A linear extension of the trace's happens-before order. With a seed, each
/// step picks uniformly among the ready events; without, the lowest thread.
pub fn topological_order(trace: &Trace, seed: Option<u64>) -> Vec<EventCoord> {
    let mut rng = seed.map(ChaCha8Rng::seed_from_u64);
    let threads: Vec<ThreadId> = trace.threads().collect();
    let mut next = vec![0usize; threads.len()];
    let mut placed = BTreeSet::new();
    let mut order = Vec::with_capacity(trace.len());
    loop {
        let ready: Vec<usize> = (0..threads.len())
            .filter(|&i| {
                trace
                    .thread_log(threads[i])
                    .get(next[i])
                    .is_some_and(|e| e.parents.iter().all(|p| placed.contains(p)))
            })
            .collect();
        if ready.is_empty() {
            break;
        }
        let pick = match rng.as_mut() {
            Some(r) => ready[r.gen_range(0..ready.len())],
            None => ready[0],
        };
        let coord = trace.thread_log(threads[pick])[next[pick]].coord;
        next[pick] += 1;
        placed.insert(coord);
        order.push(coord);
    }
    debug_assert_eq!(order.len(), trace.len(), "finalized traces are acyclic");
    order
}

/// Replays `trace` in `order`, following `library` when given. Returns the
/// re-derived (unfinalized) trace and the follower.
pub fn replay(
    trace: &Trace,
    order: &[EventCoord],
    library: Option<&RunLibrary>,
) -> Result<(Trace, Follower), ReplayError> {
    let meta = trace.meta().clone();
    let mut session = match library {
        Some(lib) => Session::following(meta, lib),
        None => Session::new(meta),
    };
    let mut seen = BTreeSet::new();
    for &coord in order {
        let ev = trace.event(coord).ok_or(ReplayError::UnknownCoord(coord))?;
        let thread = coord.thread_id();
        if session.next_coord(thread) != coord {
            return Err(ReplayError::OutOfProgramOrder(coord));
        }
        if let Some(&parent) = ev.parents.iter().find(|p| !seen.contains(*p)) {
            return Err(ReplayError::NotTopological { child: coord, parent });
        }
        let args = ArgsDigest { stream: None, undelivered: false, ..ev.args.clone() };
        match (ev.phase, ev.outcome) {
            (Phase::Entry, _) => {
                session.entry(thread, ev.syscall, args)?;
            }
            (Phase::Exit, Some(outcome)) if ev.args.undelivered => {
                debug_assert!(outcome.is_success());
                session.exit_undelivered_write(thread, args)?;
            }
            (Phase::Exit, outcome) => {
                session.exit(thread, ev.syscall, outcome.unwrap_or(crate::Outcome::Success), args)?;
            }
        }
        seen.insert(coord);
    }
    Ok(session.finish(trace.meta().termination))
}

/// The mutation surface of a recorded log: there is none.
pub struct StaticLog;

impl Mutator for StaticLog {
    fn fail_syscall(&mut self, _: ThreadId, _: SyscallKind, _: Errno) -> Result<(), FaultError> {
        Err(FaultError::BackendUnsupported("fail a syscall in a recorded log"))
    }

    fn pause(&mut self, _: u32, _: PauseLength) -> Result<(), FaultError> {
        Err(FaultError::BackendUnsupported("pause a process in a recorded log"))
    }

    fn set_write_count(&mut self, _: ThreadId, _: u64) -> Result<(), FaultError> {
        Err(FaultError::BackendUnsupported("change a write in a recorded log"))
    }

    fn drop_write(&mut self, _: ThreadId) -> Result<(), FaultError> {
        Err(FaultError::BackendUnsupported("drop a write in a recorded log"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fault::{apply_pause, apply_write_truncation};
    use crate::sim::{preset, run_simulation};

    #[test]
    fn replay_in_any_order_reproduces_run() {
        let r = run_simulation(&preset("2cl-mc").unwrap(), 3, &[], None).unwrap();
        for seed in [None, Some(1), Some(2), Some(3)] {
            let order = topological_order(&r.trace, seed);
            let (mut t, _) = replay(&r.trace, &order, None).unwrap();
            assert_eq!(t.finalize(), r.trace.run_id().unwrap());
            assert_eq!(t.edges(), r.trace.edges());
        }
    }

    #[test]
    fn replay_with_dropped_write() {
        let faults = crate::fault::parse_fault_spec(
            "[[rule]]\ntarget = { process = 0, syscall = \"write\", occurrence = 1 }\naction = { drop = true }\n",
            None,
        )
        .unwrap();
        let r = run_simulation(&preset("1cl").unwrap(), 0, &faults, None).unwrap();
        assert!(r.trace.events().any(|e| e.args.undelivered));
        let (mut t, _) = replay(&r.trace, &topological_order(&r.trace, Some(9)), None).unwrap();
        assert_eq!(t.finalize(), r.trace.run_id().unwrap());
    }

    #[test]
    fn rejects_bad_orders() {
        let r = run_simulation(&preset("echo").unwrap(), 0, &[], None).unwrap();
        let mut order = topological_order(&r.trace, None);
        order.swap(0, 1);
        assert!(matches!(replay(&r.trace, &order, None), Err(ReplayError::OutOfProgramOrder(_))));
        // The whole server thread first: its read exit precedes the client's write.
        let mut server_first = r.trace.thread_log(ThreadId::main(0)).iter().map(|e| e.coord).collect::<Vec<_>>();
        server_first.extend(r.trace.thread_log(ThreadId::main(1)).iter().map(|e| e.coord));
        assert!(matches!(replay(&r.trace, &server_first, None), Err(ReplayError::NotTopological { .. })));
    }

    #[test]
    fn static_log_cannot_be_mutated() {
        assert!(matches!(apply_pause(&mut StaticLog, 0, PauseLength::Indefinite), Err(FaultError::BackendUnsupported(_))));
        assert!(matches!(
            apply_write_truncation(&mut StaticLog, ThreadId::main(0), 100, 0.5),
            Err(FaultError::BackendUnsupported(_))
        ));
    }
}
