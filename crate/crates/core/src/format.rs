//! Line-delimited trace file format.
//!
//! The first line is a header object carrying the format tag, version, run id,
//! event count and metadata. Each following line is one event, ordered by
//! thread and then by index, with its cross-thread parents inline. See
//! `docs/trace-format.md` for the full layout.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::event::{Event, RunId, Trace, TraceMeta};

pub const FORMAT_TAG: &str = "hbtrace-trace";
pub const FORMAT_VERSION: u32 = 1;
/// File extension used for stored runs.
pub const TRACE_EXTENSION: &str = "trace";

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("unsupported trace format version {found} (expected {FORMAT_VERSION})")]
    FormatVersionMismatch { found: u32 },
    #[error("corrupt record {index}: {reason}")]
    CorruptRecord { index: usize, reason: String },
    #[error("run id in header ({stored}) does not match recomputed id ({computed})")]
    RunIdMismatch { stored: RunId, computed: RunId },
    #[error("only finalized traces can be serialized")]
    NotFinalized,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    run_id: RunId,
    events: usize,
    meta: TraceMeta,
}

fn corrupt(index: usize, reason: impl ToString) -> FormatError {
    FormatError::CorruptRecord { index, reason: reason.to_string() }
}

pub fn write_trace<W: Write>(trace: &Trace, mut out: W) -> Result<(), FormatError> {
    let run_id = trace.run_id().ok_or(FormatError::NotFinalized)?;
    let header = Header {
        format: FORMAT_TAG.to_owned(),
        version: FORMAT_VERSION,
        run_id: run_id.clone(),
        events: trace.len(),
        meta: trace.meta().clone(),
    };
    serde_json::to_writer(&mut out, &header).map_err(std::io::Error::from)?;
    out.write_all(b"\n")?;
    for event in trace.events() {
        serde_json::to_writer(&mut out, event).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn serialize(trace: &Trace) -> Result<Vec<u8>, FormatError> {
    let mut buf = Vec::new();
    write_trace(trace, &mut buf)?;
    Ok(buf)
}

/// Parses and re-validates a trace. Record 0 is the header; events start at 1.
pub fn read_trace<R: BufRead>(input: R) -> Result<Trace, FormatError> {
    let mut lines = input.lines();
    let header_line = lines.next().ok_or_else(|| corrupt(0, "missing header"))??;
    let probe: serde_json::Value =
        serde_json::from_str(&header_line).map_err(|e| corrupt(0, e))?;
    if probe.get("format").and_then(|f| f.as_str()) != Some(FORMAT_TAG) {
        return Err(corrupt(0, "not a trace file"));
    }
    if let Some(found) = probe.get("version").and_then(|v| v.as_u64()) {
        if found != u64::from(FORMAT_VERSION) {
            return Err(FormatError::FormatVersionMismatch { found: found as u32 });
        }
    }
    let header: Header = serde_json::from_value(probe).map_err(|e| corrupt(0, e))?;

    let mut events: Vec<Event> = Vec::with_capacity(header.events);
    for (i, line) in lines.enumerate() {
        let index = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        if events.len() == header.events {
            return Err(corrupt(index, "more events than the header declares"));
        }
        events.push(serde_json::from_str(&line).map_err(|e| corrupt(index, e))?);
    }
    if events.len() < header.events {
        return Err(corrupt(
            events.len() + 1,
            format!("truncated: {} of {} events", events.len(), header.events),
        ));
    }

    let mut trace = Trace::new(header.meta);
    for (i, e) in events.iter().enumerate() {
        let expected = trace.next_coord(e.coord.thread_id());
        if e.coord != expected {
            return Err(corrupt(i + 1, format!("event {} out of order, expected {expected}", e.coord)));
        }
        trace
            .append_event(e.coord.thread_id(), e.syscall, e.phase, e.outcome, e.args.clone())
            .map_err(|err| corrupt(i + 1, err))?;
    }
    for (i, e) in events.iter().enumerate() {
        for p in &e.parents {
            trace.add_parent(e.coord, *p).map_err(|err| corrupt(i + 1, err))?;
        }
    }
    let computed = trace.finalize().clone();
    if computed != header.run_id {
        return Err(FormatError::RunIdMismatch { stored: header.run_id, computed });
    }
    Ok(trace)
}

pub fn deserialize(bytes: &[u8]) -> Result<Trace, FormatError> {
    read_trace(bytes)
}
