//! Happens-before queries, canonical fingerprints and graph export.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use fixedbitset::FixedBitSet;
use sha2::{Digest, Sha256};

use crate::event::{EventCoord, RunId, ThreadId, Trace};

const FINGERPRINT_TAG: &str = "hbtrace-po/1";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CausalityError {
    #[error("unknown event coordinate {0}")]
    UnknownCoord(EventCoord),
}

/// Reachability index over a finished trace.
///
/// Nodes are numbered in canonical order (thread, then index). Each node keeps
/// a bitset of its strict ancestors, so `happens_before` is a single bit test.
#[derive(Debug, Clone)]
pub struct CausalGraph {
    offsets: BTreeMap<ThreadId, (usize, usize)>,
    coords: Vec<EventCoord>,
    ancestors: Vec<FixedBitSet>,
}

impl CausalGraph {
    pub fn new(trace: &Trace) -> Self {
        let mut offsets = BTreeMap::new();
        let mut coords = Vec::with_capacity(trace.len());
        for (thread, log) in trace.logs() {
            offsets.insert(*thread, (coords.len(), log.len()));
            coords.extend(log.iter().map(|e| e.coord));
        }
        let n = coords.len();
        let index_of = |c: EventCoord| -> usize {
            let (base, _) = offsets[&c.thread_id()];
            base + c.index as usize
        };

        // Predecessor lists: program order plus parent edges.
        let mut preds: Vec<Vec<usize>> = vec![Vec::new(); n];
        let mut indegree = vec![0usize; n];
        let mut succs: Vec<Vec<usize>> = vec![Vec::new(); n];
        for e in trace.events() {
            let v = index_of(e.coord);
            if e.coord.index > 0 {
                preds[v].push(v - 1);
            }
            preds[v].extend(e.parents.iter().map(|p| index_of(*p)));
            indegree[v] = preds[v].len();
            for &p in &preds[v] {
                succs[p].push(v);
            }
        }

        // Kahn's algorithm; acyclicity is guaranteed by `Trace::add_parent`.
        let mut ancestors = vec![FixedBitSet::with_capacity(n); n];
        let mut ready: Vec<usize> = (0..n).filter(|v| indegree[*v] == 0).collect();
        let mut done = 0;
        while let Some(v) = ready.pop() {
            done += 1;
            let mut acc = FixedBitSet::with_capacity(n);
            for &p in &preds[v] {
                acc.union_with(&ancestors[p]);
                acc.insert(p);
            }
            ancestors[v] = acc;
            for &s in &succs[v] {
                indegree[s] -= 1;
                if indegree[s] == 0 {
                    ready.push(s);
                }
            }
        }
        assert_eq!(done, n, "trace edge relation is cyclic");

        CausalGraph { offsets, coords, ancestors }
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[EventCoord] {
        &self.coords
    }

    fn index(&self, c: EventCoord) -> Result<usize, CausalityError> {
        match self.offsets.get(&c.thread_id()) {
            Some(&(base, len)) if (c.index as usize) < len => Ok(base + c.index as usize),
            _ => Err(CausalityError::UnknownCoord(c)),
        }
    }

    /// Strict happens-before: a non-empty path from `a` to `b` exists.
    pub fn happens_before(&self, a: EventCoord, b: EventCoord) -> Result<bool, CausalityError> {
        let (ia, ib) = (self.index(a)?, self.index(b)?);
        Ok(self.ancestors[ib].contains(ia))
    }

    /// Neither event precedes the other and they are distinct.
    pub fn concurrent(&self, a: EventCoord, b: EventCoord) -> Result<bool, CausalityError> {
        Ok(a != b && !self.happens_before(a, b)? && !self.happens_before(b, a)?)
    }

    pub fn ancestors(&self, c: EventCoord) -> Result<Vec<EventCoord>, CausalityError> {
        let i = self.index(c)?;
        Ok(self.ancestors[i].ones().map(|j| self.coords[j]).collect())
    }
}

/// Happens-before on a trace that may still be growing, by forward search.
pub fn happens_before_online(trace: &Trace, a: EventCoord, b: EventCoord) -> Result<bool, CausalityError> {
    for c in [a, b] {
        if !trace.contains(c) {
            return Err(CausalityError::UnknownCoord(c));
        }
    }
    Ok(a != b && trace.reaches(a, b))
}

/// Canonical text form of a trace's partial order.
///
/// One line per thread in (process, thread) order; each event is written as
/// `syscall/phase[/outcome]` followed by its sorted parent coordinates in
/// angle brackets. Byte counts, descriptors, endpoints and metadata are left
/// out, so two executions that differ only in observation order or payload
/// sizes produce the same string.
pub fn fingerprint(trace: &Trace) -> String {
    let mut out = String::from(FINGERPRINT_TAG);
    out.push('\n');
    for (thread, log) in trace.logs() {
        let _ = write!(out, "{thread}:");
        for e in log {
            let _ = write!(out, " {}", e.key());
            if !e.parents.is_empty() {
                out.push('<');
                for (i, p) in e.parents.iter().enumerate() {
                    if i > 0 {
                        out.push(',');
                    }
                    let _ = write!(out, "{p}");
                }
                out.push('>');
            }
        }
        out.push('\n');
    }
    out
}

pub fn run_id(trace: &Trace) -> RunId {
    run_id_of_fingerprint(&fingerprint(trace))
}

pub fn run_id_of_fingerprint(fingerprint: &str) -> RunId {
    RunId(hex::encode(Sha256::digest(fingerprint.as_bytes())))
}

const PALETTE: &[&str] = &[
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

/// Graphviz digraph of the trace: solid program-order chains, dashed
/// cross-thread edges, one color per thread.
pub fn export_dot(trace: &Trace) -> String {
    let mut out = String::new();
    let name = trace.run_id().map(|r| r.short().to_owned()).unwrap_or_else(|| "trace".into());
    let _ = writeln!(out, "digraph \"{name}\" {{");
    out.push_str("  rankdir=TB;\n  node [shape=box, style=rounded, fontname=\"monospace\"];\n");
    for (n, (thread, log)) in trace.logs().iter().enumerate() {
        let color = PALETTE[n % PALETTE.len()];
        let _ = writeln!(out, "  subgraph \"cluster_{thread}\" {{");
        let _ = writeln!(out, "    label=\"thread {thread}\"; color=\"{color}\";");
        for e in log {
            let _ = write!(out, "    \"{}\" [label=\"{thread}: {}/{}", e.coord, e.syscall, e.phase);
            if let Some(o) = e.outcome.filter(|o| !o.is_success()) {
                let _ = write!(out, " {o}");
            }
            let _ = writeln!(out, "\", color=\"{color}\"];");
        }
        for pair in log.windows(2) {
            let _ = writeln!(out, "    \"{}\" -> \"{}\" [color=\"{color}\"];", pair[0].coord, pair[1].coord);
        }
        out.push_str("  }\n");
    }
    for (parent, child) in trace.edges() {
        let _ = writeln!(out, "  \"{parent}\" -> \"{child}\" [style=dashed];");
    }
    out.push_str("}\n");
    out
}
