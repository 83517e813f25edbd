//! Running a system many times and tracking which runs recur.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::event::{RunId, Termination};
use crate::fault::FaultRule;
use crate::library::{coverage_k, Finalized, LibraryError, RunLibrary};
use crate::sim::{run_simulation, SeedPolicy, SimConfig, SimError, SimRun};

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error("iterations must be at least 1")]
    NoIterations,
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Library(#[from] LibraryError),
}

#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub system: SimConfig,
    pub iterations: u64,
    pub seed_policy: SeedPolicy,
    pub base_seed: u64,
    /// Extra rules, matched before the system's own.
    pub faults: Vec<FaultRule>,
    /// Parallel workers; 1 runs every iteration in the calling thread.
    pub jobs: usize,
}

impl ExperimentConfig {
    pub fn new(system: SimConfig, iterations: u64) -> Self {
        let (seed_policy, base_seed) = (system.seed_policy, system.base_seed);
        ExperimentConfig { system, iterations, seed_policy, base_seed, faults: Vec::new(), jobs: 1 }
    }
}

/// Per-iteration seeds under `policy`.
pub fn seeds(policy: SeedPolicy, base: u64, iterations: u64) -> Vec<u64> {
    match policy {
        SeedPolicy::Fixed => vec![base; iterations as usize],
        SeedPolicy::Sequential => (0..iterations).map(|i| base.wrapping_add(i)).collect(),
        SeedPolicy::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(base);
            (0..iterations).map(|_| rng.gen()).collect()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IterationResult {
    pub iteration: u64,
    pub seed: u64,
    pub run_id: RunId,
    pub novel: bool,
    pub termination: Termination,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoopSummary {
    pub iterations: u64,
    pub novel: u64,
    /// Distinct runs in the library after the loop.
    pub distinct: usize,
    pub top_count: u64,
    pub k99: usize,
}

impl std::fmt::Display for LoopSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "iterations={} novel={} distinct={} top1={} k99={}",
            self.iterations, self.novel, self.distinct, self.top_count, self.k99
        )
    }
}

fn stamp(mut run: SimRun, iteration: u64) -> SimRun {
    run.trace.meta_mut().iteration = Some(iteration);
    run
}

/// Runs the experiment, recording every execution in `library`.
///
/// Sequential runs follow the library online. With several jobs, workers run
/// a batch against the library as it stood before the batch and the results
/// are merged in seed order, so the library ends up the same either way.
pub fn run_loop(
    config: &ExperimentConfig,
    library: &mut RunLibrary,
    mut on_iteration: impl FnMut(&IterationResult),
) -> Result<LoopSummary, ExperimentError> {
    if config.iterations == 0 {
        return Err(ExperimentError::NoIterations);
    }
    let seeds = seeds(config.seed_policy, config.base_seed, config.iterations);
    let mut novel = 0;
    let mut finish = |i: u64, seed: u64, outcome: Finalized, t: Termination| {
        novel += u64::from(outcome.is_novel());
        on_iteration(&IterationResult {
            iteration: i,
            seed,
            novel: outcome.is_novel(),
            run_id: outcome.run_id().clone(),
            termination: t,
        });
    };

    let jobs = config.jobs.max(1);
    if jobs == 1 {
        for (i, &seed) in seeds.iter().enumerate() {
            let run = stamp(run_simulation(&config.system, seed, &config.faults, Some(library))?, i as u64);
            let t = run.termination();
            let outcome = library.finalize_execution(&run.follower, run.trace)?;
            finish(i as u64, seed, outcome, t);
        }
    } else {
        let batch = 32 * jobs;
        for (b, chunk) in seeds.chunks(batch).enumerate() {
            let offset = (b * batch) as u64;
            let snapshot: &RunLibrary = library;
            let results: Vec<Result<SimRun, SimError>> = std::thread::scope(|s| {
                let workers: Vec<_> = (0..jobs)
                    .map(|w| {
                        s.spawn(move || {
                            chunk
                                .iter()
                                .enumerate()
                                .skip(w)
                                .step_by(jobs)
                                .map(|(k, &seed)| {
                                    let r = run_simulation(&config.system, seed, &config.faults, Some(snapshot));
                                    (k, r.map(|run| stamp(run, offset + k as u64)))
                                })
                                .collect::<Vec<_>>()
                        })
                    })
                    .collect();
                let mut slots: Vec<Option<Result<SimRun, SimError>>> = (0..chunk.len()).map(|_| None).collect();
                for w in workers {
                    for (k, r) in w.join().expect("worker panicked") {
                        slots[k] = Some(r);
                    }
                }
                slots.into_iter().map(|r| r.expect("every seed ran")).collect()
            });
            for (k, r) in results.into_iter().enumerate() {
                let run = r?;
                let t = run.termination();
                let outcome = library.record(run.trace)?;
                finish(offset + k as u64, chunk[k], outcome, t);
            }
        }
    }

    let report = library.distribution_report()?;
    Ok(LoopSummary {
        iterations: config.iterations,
        novel,
        distinct: library.len(),
        top_count: report.first().map_or(0, |r| r.count),
        k99: coverage_k(&report, 0.99),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::preset;

    #[test]
    fn seed_policies() {
        assert_eq!(seeds(SeedPolicy::Sequential, 10, 3), vec![10, 11, 12]);
        assert_eq!(seeds(SeedPolicy::Fixed, 10, 2), vec![10, 10]);
        let r = seeds(SeedPolicy::Random, 10, 5);
        assert_eq!(r, seeds(SeedPolicy::Random, 10, 5));
        assert_ne!(r[0], r[1]);
    }

    #[test]
    fn small_loop() {
        let mut lib = RunLibrary::in_memory("1cl");
        let cfg = ExperimentConfig::new(preset("1cl").unwrap(), 10);
        let mut seen = Vec::new();
        let s = run_loop(&cfg, &mut lib, |r| seen.push(r.novel)).unwrap();
        assert_eq!((s.iterations, s.novel, s.distinct, s.k99), (10, 1, 1, 1));
        assert_eq!(seen.iter().filter(|n| **n).count(), 1);
        assert_eq!(lib.total_iterations(), 10);
    }

    #[test]
    fn parallel_matches_sequential() {
        let mut a = RunLibrary::in_memory("2cl");
        let mut b = RunLibrary::in_memory("2cl");
        let mut cfg = ExperimentConfig::new(preset("2cl").unwrap(), 150);
        let mut ids_a = Vec::new();
        let sa = run_loop(&cfg, &mut a, |r| ids_a.push(r.run_id.clone())).unwrap();
        cfg.jobs = 3;
        let mut ids_b = Vec::new();
        let sb = run_loop(&cfg, &mut b, |r| ids_b.push(r.run_id.clone())).unwrap();
        assert_eq!(sa, sb);
        assert_eq!(ids_a, ids_b);
        assert_eq!(a.distribution_report().unwrap(), b.distribution_report().unwrap());
    }

    #[test]
    fn zero_iterations() {
        let mut lib = RunLibrary::in_memory("1cl");
        let cfg = ExperimentConfig::new(preset("1cl").unwrap(), 0);
        assert!(matches!(run_loop(&cfg, &mut lib, |_| {}), Err(ExperimentError::NoIterations)));
    }
}
