//! Exhaustive schedule exploration for small systems.

use std::collections::HashMap;

use super::{Decision, Sim, SimConfig, SimError, StateKey};
use crate::event::{Trace, TraceMeta};
use crate::fault::FaultEngine;

#[derive(Clone, Debug)]
pub struct Enumeration {
    /// Every distinct complete trace, finalized, with one schedule producing
    /// it (replayable with [`super::replay_schedule`]).
    pub traces: Vec<(Trace, Vec<usize>)>,
    /// Number of distinct choice sequences that run to completion.
    pub schedules: u128,
    /// Distinct simulator states visited.
    pub states: usize,
}

struct Search {
    max_events: usize,
    memo: HashMap<StateKey, u128>,
    index: HashMap<Trace, usize>,
    traces: Vec<(Trace, Vec<usize>)>,
    path: Vec<usize>,
}

impl Search {
    fn explore(&mut self, mut sim: Sim<'_>) -> Result<u128, SimError> {
        if sim.trace().len() > self.max_events {
            return Err(SimError::BoundExceeded(self.max_events));
        }
        let key = sim.key();
        if let Some(&n) = self.memo.get(&key) {
            return Ok(n);
        }
        let count = match sim.decide()? {
            Decision::Finished(t) => {
                let mut trace = sim.finish(t).trace;
                trace.meta_mut().wall_time_ms = None;
                if !self.index.contains_key(&trace) {
                    self.index.insert(trace.clone(), self.traces.len());
                    self.traces.push((trace, self.path.clone()));
                }
                1
            }
            Decision::Choose(options) => {
                let mut total = 0;
                let many = options.len() > 1;
                for (i, &(p, n)) in options.iter().enumerate() {
                    for o in 0..n {
                        let mut child = sim.clone();
                        let mark = self.path.len();
                        if many {
                            self.path.push(i);
                        }
                        if n > 1 {
                            self.path.push(o);
                        }
                        child.step(p, o)?;
                        total += self.explore(child)?;
                        self.path.truncate(mark);
                    }
                }
                total
            }
        };
        self.memo.insert(key, count);
        Ok(count)
    }
}

/// Explores every scheduler choice sequence of `config` without faults.
///
/// Fails with `BoundExceeded` as soon as any execution records more than
/// `max_events` events.
pub fn enumerate_all_schedules(config: &SimConfig, max_events: usize) -> Result<Enumeration, SimError> {
    config.validate()?;
    let meta = TraceMeta { config: config.name.clone(), ..Default::default() };
    let sim = Sim::new(config, meta, FaultEngine::empty(), None);
    let mut search =
        Search { max_events, memo: HashMap::new(), index: HashMap::new(), traces: Vec::new(), path: Vec::new() };
    let schedules = search.explore(sim)?;
    Ok(Enumeration { traces: search.traces, schedules, states: search.memo.len() })
}
