//! The run library: stored partial-order-distinct runs, online following of
//! those runs during a new execution, and the novelty decision at its end.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::event::{Event, EventCoord, RunId, ThreadId, Trace};
use crate::format::{self, FormatError, TRACE_EXTENSION};

pub const INDEX_FILE: &str = "index.tsv";
const INDEX_TAG: &str = "#hbtrace-index";
const INDEX_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum LibraryError {
    #[error("runs {0} and {1} are both fully followed")]
    AmbiguousFollow(RunId, RunId),
    #[error("follower and fingerprint disagree on run {0}")]
    FollowDisagreement(RunId),
    #[error("library is empty")]
    EmptyLibrary,
    #[error("library at {dir} belongs to config `{found}`, not `{expected}`")]
    ConfigMismatch { dir: PathBuf, found: String, expected: String },
    #[error("malformed index line {line}: {reason}")]
    MalformedIndex { line: usize, reason: String },
    #[error("{path}: {source}")]
    Trace { path: PathBuf, source: FormatError },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CursorStatus {
    Following,
    Diverged,
}

/// Progress of one loaded run against the execution in flight.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct FollowCursor {
    pub run: RunId,
    positions: BTreeMap<ThreadId, usize>,
    diverged: bool,
}

impl FollowCursor {
    pub fn status(&self) -> CursorStatus {
        if self.diverged {
            CursorStatus::Diverged
        } else {
            CursorStatus::Following
        }
    }

    pub fn is_following(&self) -> bool {
        !self.diverged
    }

    /// Index of the next unmatched event of `thread` in the loaded run.
    pub fn position(&self, thread: ThreadId) -> usize {
        self.positions.get(&thread).copied().unwrap_or(0)
    }

    fn step(&mut self, run: &Trace, event: &Event) {
        if self.diverged {
            return;
        }
        let thread = event.coord.thread_id();
        let pos = self.position(thread);
        let matched = run.thread_log(thread).get(pos).is_some_and(|expected| {
            expected.key() == event.key() && event.parents.is_subset(&expected.parents)
        });
        if matched {
            self.positions.insert(thread, pos + 1);
        } else {
            self.diverged = true;
        }
    }

    fn parent_added(&mut self, run: &Trace, child: EventCoord, parent: EventCoord) {
        if self.diverged || child.index as usize >= self.position(child.thread_id()) {
            return;
        }
        if !run.event(child).is_some_and(|e| e.parents.contains(&parent)) {
            self.diverged = true;
        }
    }

    /// Every thread of the loaded run consumed, with identical parent sets.
    fn fully_followed(&self, run: &Trace, new: &Trace) -> bool {
        !self.diverged
            && run.logs().iter().all(|(t, log)| self.position(*t) == log.len())
            && new.threads().all(|t| run.logs().contains_key(&t))
            && run.events().all(|e| new.event(e.coord).is_some_and(|n| n.parents == e.parents))
    }
}

/// Follows every loaded run through one execution.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct Follower {
    cursors: Vec<FollowCursor>,
}

impl Follower {
    pub fn new(library: &RunLibrary) -> Self {
        Follower {
            cursors: library
                .runs
                .keys()
                .map(|run| FollowCursor { run: run.clone(), positions: BTreeMap::new(), diverged: false })
                .collect(),
        }
    }

    pub fn cursors(&self) -> &[FollowCursor] {
        &self.cursors
    }

    pub fn cursor(&self, run: &RunId) -> Option<&FollowCursor> {
        self.cursors.iter().find(|c| &c.run == run)
    }

    pub fn following(&self) -> impl Iterator<Item = &FollowCursor> + '_ {
        self.cursors.iter().filter(|c| c.is_following())
    }

    /// Compares the event just recorded with the next event of the same
    /// thread in each loaded run. Other threads' progress is irrelevant.
    pub fn follow_step(&mut self, library: &RunLibrary, event: &Event) {
        for c in &mut self.cursors {
            if let Some(run) = library.runs.get(&c.run) {
                c.step(run, event);
            }
        }
    }

    /// A cross-thread edge was attached to an already-recorded event.
    pub fn parent_added(&mut self, library: &RunLibrary, child: EventCoord, parent: EventCoord) {
        for c in &mut self.cursors {
            if let Some(run) = library.runs.get(&c.run) {
                c.parent_added(run, child, parent);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Finalized {
    FollowedExisting(RunId),
    Novel(RunId),
}

impl Finalized {
    pub fn run_id(&self) -> &RunId {
        match self {
            Finalized::FollowedExisting(r) | Finalized::Novel(r) => r,
        }
    }

    pub fn is_novel(&self) -> bool {
        matches!(self, Finalized::Novel(_))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub rank: usize,
    pub run_id: RunId,
    pub count: u64,
    pub cumulative: f64,
}

/// Smallest number of top-ranked runs whose cumulative share reaches `fraction`.
pub fn coverage_k(report: &[ReportRow], fraction: f64) -> usize {
    report
        .iter()
        .position(|r| r.cumulative + 1e-12 >= fraction)
        .map_or(report.len(), |i| i + 1)
}

/// Distinct runs of one experiment config, with how often each occurred.
#[derive(Clone, Debug, Default)]
pub struct RunLibrary {
    config: String,
    dir: Option<PathBuf>,
    runs: BTreeMap<RunId, Trace>,
    counts: BTreeMap<RunId, u64>,
    /// First-seen order; ties in the report are broken by it.
    order: Vec<RunId>,
}

impl RunLibrary {
    pub fn in_memory(config: impl Into<String>) -> Self {
        RunLibrary { config: config.into(), ..Default::default() }
    }

    /// Loads (or creates) the library stored in `dir`.
    pub fn open(dir: impl AsRef<Path>, config: &str) -> Result<Self, LibraryError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        if !dir.join(INDEX_FILE).exists() {
            let lib = RunLibrary { config: config.to_owned(), dir: Some(dir.to_owned()), ..Default::default() };
            lib.save_index()?;
            return Ok(lib);
        }
        let lib = Self::load(dir)?;
        if lib.config != config {
            return Err(LibraryError::ConfigMismatch {
                dir: dir.to_owned(),
                found: lib.config,
                expected: config.to_owned(),
            });
        }
        Ok(lib)
    }

    /// Loads an existing library whatever its config.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self, LibraryError> {
        let dir = dir.as_ref();
        let index = fs::read_to_string(dir.join(INDEX_FILE))?;
        let mut lib = RunLibrary { dir: Some(dir.to_owned()), ..Default::default() };
        let bad = |line: usize, reason: &str| LibraryError::MalformedIndex { line, reason: reason.to_owned() };
        for (n, line) in index.lines().enumerate() {
            let line_no = n + 1;
            let fields: Vec<&str> = line.split('\t').collect();
            if n == 0 {
                match fields.as_slice() {
                    [INDEX_TAG, v, config] if v.parse() == Ok(INDEX_VERSION) => lib.config = (*config).to_owned(),
                    _ => return Err(bad(line_no, "bad header")),
                }
                continue;
            }
            if line.trim().is_empty() || line.starts_with("run_id\t") {
                continue;
            }
            let [id, count, file] = fields.as_slice() else {
                return Err(bad(line_no, "expected run_id, count, file"));
            };
            let count: u64 = count.parse().map_err(|_| bad(line_no, "count is not an integer"))?;
            let path = dir.join(file);
            let reader = BufReader::new(fs::File::open(&path)?);
            let trace = format::read_trace(reader).map_err(|source| LibraryError::Trace { path: path.clone(), source })?;
            let run_id = trace.run_id().cloned().expect("read_trace finalizes");
            if run_id.0 != *id {
                return Err(bad(line_no, "run id does not match the stored trace"));
            }
            lib.order.push(run_id.clone());
            lib.counts.insert(run_id.clone(), count);
            lib.runs.insert(run_id, trace);
        }
        Ok(lib)
    }

    pub fn config(&self) -> &str {
        &self.config
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn len(&self) -> usize {
        self.runs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.runs.is_empty()
    }

    pub fn get(&self, id: &RunId) -> Option<&Trace> {
        self.runs.get(id)
    }

    pub fn contains(&self, id: &RunId) -> bool {
        self.runs.contains_key(id)
    }

    /// Runs in first-seen order.
    pub fn runs(&self) -> impl Iterator<Item = &Trace> + '_ {
        self.order.iter().map(|id| &self.runs[id])
    }

    pub fn count(&self, id: &RunId) -> u64 {
        self.counts.get(id).copied().unwrap_or(0)
    }

    pub fn total_iterations(&self) -> u64 {
        self.counts.values().sum()
    }

    pub fn trace_path(&self, id: &RunId) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(format!("{id}.{TRACE_EXTENSION}")))
    }

    /// Decides whether the finished execution repeats a stored run.
    ///
    /// A run counts as followed only if every one of its threads was consumed
    /// completely; a prefix (an execution cut short) is a different run.
    pub fn finalize_execution(&mut self, follower: &Follower, mut trace: Trace) -> Result<Finalized, LibraryError> {
        let new_id = trace.finalize().clone();
        let mut full = follower
            .cursors
            .iter()
            .filter(|c| self.runs.get(&c.run).is_some_and(|run| c.fully_followed(run, &trace)));
        let followed = full.next().map(|c| c.run.clone());
        if let (Some(a), Some(b)) = (&followed, full.next()) {
            return Err(LibraryError::AmbiguousFollow(a.clone(), b.run.clone()));
        }
        match followed {
            Some(run) => {
                if run != new_id {
                    return Err(LibraryError::FollowDisagreement(run));
                }
                self.bump(&run)?;
                Ok(Finalized::FollowedExisting(run))
            }
            None => {
                if self.runs.contains_key(&new_id) {
                    return Err(LibraryError::FollowDisagreement(new_id));
                }
                self.insert(trace)?;
                Ok(Finalized::Novel(new_id))
            }
        }
    }

    /// Records a finished trace by fingerprint alone (used when merging
    /// executions that were followed against an older snapshot).
    pub fn record(&mut self, mut trace: Trace) -> Result<Finalized, LibraryError> {
        let id = trace.finalize().clone();
        if self.runs.contains_key(&id) {
            self.bump(&id)?;
            Ok(Finalized::FollowedExisting(id))
        } else {
            self.insert(trace)?;
            Ok(Finalized::Novel(id))
        }
    }

    fn bump(&mut self, id: &RunId) -> Result<(), LibraryError> {
        *self.counts.entry(id.clone()).or_default() += 1;
        self.save_index()
    }

    fn insert(&mut self, trace: Trace) -> Result<(), LibraryError> {
        let id = trace.run_id().cloned().expect("finalized");
        if let Some(path) = self.trace_path(&id) {
            let mut out = BufWriter::new(fs::File::create(&path)?);
            format::write_trace(&trace, &mut out).map_err(|source| LibraryError::Trace { path: path.clone(), source })?;
            out.flush()?;
        }
        self.order.push(id.clone());
        self.counts.insert(id.clone(), 1);
        self.runs.insert(id, trace);
        self.save_index()
    }

    fn save_index(&self) -> Result<(), LibraryError> {
        let Some(dir) = &self.dir else { return Ok(()) };
        let tmp = dir.join(format!("{INDEX_FILE}.tmp"));
        {
            let mut out = BufWriter::new(fs::File::create(&tmp)?);
            writeln!(out, "{INDEX_TAG}\t{INDEX_VERSION}\t{}", self.config)?;
            writeln!(out, "run_id\tcount\tfile")?;
            for id in &self.order {
                writeln!(out, "{id}\t{}\t{id}.{TRACE_EXTENSION}", self.counts[id])?;
            }
            out.flush()?;
        }
        fs::rename(tmp, dir.join(INDEX_FILE))?;
        Ok(())
    }

    /// Runs by descending count with cumulative share of all iterations.
    pub fn distribution_report(&self) -> Result<Vec<ReportRow>, LibraryError> {
        let total = self.total_iterations();
        if total == 0 {
            return Err(LibraryError::EmptyLibrary);
        }
        let mut ranked: Vec<(usize, &RunId)> = self.order.iter().enumerate().collect();
        ranked.sort_by_key(|(first_seen, id)| (std::cmp::Reverse(self.counts[*id]), *first_seen));
        let mut cumulative = 0u64;
        Ok(ranked
            .into_iter()
            .enumerate()
            .map(|(i, (_, id))| {
                let count = self.counts[id];
                cumulative += count;
                ReportRow { rank: i + 1, run_id: id.clone(), count, cumulative: cumulative as f64 / total as f64 }
            })
            .collect())
    }

    /// Run ids in the library, for checking distinctness in tests.
    pub fn run_ids(&self) -> BTreeSet<RunId> {
        self.runs.keys().cloned().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event::{ArgsDigest, Outcome, Phase, SyscallKind, TraceMeta};

    fn ok() -> Option<Outcome> {
        Some(Outcome::Success)
    }

    /// Replays `steps` through a follower the way a live session would.
    type Step<'a> = (u32, SyscallKind, Phase, Option<Outcome>, &'a [EventCoord]);

    fn replay(lib: &RunLibrary, steps: &[Step<'_>]) -> (Follower, Trace) {
        let mut f = Follower::new(lib);
        let mut t = Trace::new(TraceMeta::default());
        for (p, sys, ph, out, parents) in steps {
            let c = t.append_event(ThreadId::main(*p), *sys, *ph, *out, ArgsDigest::default()).unwrap();
            for parent in *parents {
                t.add_parent(c, *parent).unwrap();
            }
            f.follow_step(lib, t.event(c).unwrap());
        }
        (f, t)
    }

    const C: SyscallKind = SyscallKind::Connect;
    const A: SyscallKind = SyscallKind::Accept;
    const IN: Phase = Phase::Entry;
    const OUT: Phase = Phase::Exit;
    const ACCEPT_IN: EventCoord = EventCoord::new(0, 0, 0);

    fn base_steps() -> Vec<Step<'static>> {
        vec![
            (1, C, IN, None, &[]),
            (0, A, IN, None, &[]),
            (1, C, OUT, ok(), &[ACCEPT_IN]),
            (0, A, OUT, ok(), &[]),
        ]
    }

    fn seeded() -> (RunLibrary, RunId) {
        let mut lib = RunLibrary::in_memory("t");
        let (f, t) = replay(&lib, &base_steps());
        let r = lib.finalize_execution(&f, t).unwrap();
        assert!(r.is_novel());
        (lib, r.run_id().clone())
    }

    #[test]
    fn first_execution_is_novel() {
        let (lib, id) = seeded();
        assert_eq!(lib.len(), 1);
        assert_eq!(lib.count(&id), 1);
    }

    #[test]
    fn interleaving_across_threads_is_tolerated() {
        let (mut lib, id) = seeded();
        // Server's accept entry lands between the client's connect entry and exit
        // in the base run; here the server goes first.
        let mut steps = base_steps();
        steps.swap(0, 1);
        let (f, t) = replay(&lib, &steps);
        assert!(f.cursor(&id).unwrap().is_following());
        assert_eq!(lib.finalize_execution(&f, t).unwrap(), Finalized::FollowedExisting(id.clone()));
        assert_eq!(lib.count(&id), 2);
    }

    #[test]
    fn outcome_mismatch_diverges() {
        let (lib, id) = seeded();
        let steps = vec![
            (1, C, IN, None, &[][..]),
            (1, C, OUT, Some(Outcome::Error(crate::Errno::ECONNREFUSED)), &[][..]),
        ];
        let (f, _) = replay(&lib, &steps);
        assert_eq!(f.cursor(&id).unwrap().status(), CursorStatus::Diverged);
    }

    #[test]
    fn parent_mismatch_diverges() {
        let (lib, id) = seeded();
        let mut steps = base_steps();
        steps[2].4 = &[];
        let (mut f, mut t) = replay(&lib, &steps[..3]);
        // Parent still missing: following is provisional until finalize.
        assert!(f.cursor(&id).unwrap().is_following());
        // A late edge that the loaded run does have keeps it following ...
        t.add_parent(EventCoord::new(1, 0, 1), ACCEPT_IN).unwrap();
        f.parent_added(&lib, EventCoord::new(1, 0, 1), ACCEPT_IN);
        assert!(f.cursor(&id).unwrap().is_following());
        // ... one it does not have diverges.
        const WRONG: &[EventCoord] = &[EventCoord::new(1, 0, 0)];
        let mut steps = base_steps();
        steps[3].4 = WRONG;
        let (g, _) = replay(&lib, &steps);
        assert_eq!(g.cursor(&id).unwrap().status(), CursorStatus::Diverged);
    }

    #[test]
    fn prefix_is_novel() {
        let (mut lib, _) = seeded();
        let (f, t) = replay(&lib, &base_steps()[..3]);
        assert!(lib.finalize_execution(&f, t).unwrap().is_novel());
        assert_eq!(lib.len(), 2);
    }

    #[test]
    fn extra_events_are_novel() {
        let (mut lib, _) = seeded();
        let mut steps = base_steps();
        steps.push((1, SyscallKind::Close, IN, None, &[]));
        let (f, t) = replay(&lib, &steps);
        assert!(lib.finalize_execution(&f, t).unwrap().is_novel());
    }

    #[test]
    fn missing_parent_at_finalize_is_novel() {
        let (mut lib, _) = seeded();
        let mut steps = base_steps();
        steps[2].4 = &[];
        let (f, t) = replay(&lib, &steps);
        assert!(lib.finalize_execution(&f, t).unwrap().is_novel());
    }

    #[test]
    fn report_orders_by_count() {
        let (mut lib, a) = seeded();
        for _ in 0..2 {
            let (f, t) = replay(&lib, &base_steps());
            lib.finalize_execution(&f, t).unwrap();
        }
        let (f, t) = replay(&lib, &base_steps()[..2]);
        let b = lib.finalize_execution(&f, t).unwrap().run_id().clone();
        let rep = lib.distribution_report().unwrap();
        assert_eq!(rep.len(), 2);
        assert_eq!((rep[0].run_id.clone(), rep[0].count, rep[0].cumulative), (a, 3, 0.75));
        assert_eq!((rep[1].run_id.clone(), rep[1].count, rep[1].cumulative), (b, 1, 1.0));
        assert_eq!(coverage_k(&rep, 0.5), 1);
        assert_eq!(coverage_k(&rep, 0.99), 2);
    }

    #[test]
    fn single_run_report() {
        let (mut lib, a) = seeded();
        for _ in 0..4 {
            let (f, t) = replay(&lib, &base_steps());
            lib.finalize_execution(&f, t).unwrap();
        }
        let rep = lib.distribution_report().unwrap();
        assert_eq!(rep, vec![ReportRow { rank: 1, run_id: a, count: 5, cumulative: 1.0 }]);
    }

    #[test]
    fn empty_report_errors() {
        assert!(matches!(RunLibrary::in_memory("x").distribution_report(), Err(LibraryError::EmptyLibrary)));
    }

    #[test]
    fn persistence_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let id;
        {
            let mut lib = RunLibrary::open(dir.path(), "cfg").unwrap();
            let (f, t) = replay(&lib, &base_steps());
            id = lib.finalize_execution(&f, t).unwrap().run_id().clone();
            let (f, t) = replay(&lib, &base_steps());
            lib.finalize_execution(&f, t).unwrap();
            assert!(dir.path().join(format!("{id}.trace")).exists());
        }
        let lib = RunLibrary::open(dir.path(), "cfg").unwrap();
        assert_eq!(lib.len(), 1);
        assert_eq!(lib.count(&id), 2);
        assert!(matches!(RunLibrary::open(dir.path(), "other"), Err(LibraryError::ConfigMismatch { .. })));
        // Only one file per novel run.
        let traces = fs::read_dir(dir.path())
            .unwrap()
            .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "trace"))
            .count();
        assert_eq!(traces, 1);
    }

    #[test]
    fn record_dedups_by_fingerprint() {
        let mut lib = RunLibrary::in_memory("t");
        let (_, t) = replay(&lib, &base_steps());
        assert!(lib.record(t.clone()).unwrap().is_novel());
        assert!(!lib.record(t).unwrap().is_novel());
        assert_eq!(lib.total_iterations(), 2);
    }
}
