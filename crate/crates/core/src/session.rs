//! The recording pipeline shared by every event source.
//!
//! An event source reports syscall entries and exits; the session appends them
//! to the trace, feeds the stream tracker, turns its edges into parents and
//! advances the run follower, in that order, one event at a time.

use std::collections::BTreeSet;

use crate::event::{ArgsDigest, Event, EventCoord, Outcome, Phase, SyscallKind, Termination, ThreadId, Trace, TraceError, TraceMeta};
use crate::library::{Follower, RunLibrary};
use crate::stream::{Edge, StreamError, StreamTracker};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SessionError {
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Stream(#[from] StreamError),
}

#[derive(Clone, Debug)]
pub struct Session<'lib> {
    trace: Trace,
    tracker: StreamTracker,
    library: Option<&'lib RunLibrary>,
    follower: Follower,
}

impl<'lib> Session<'lib> {
    pub fn new(meta: TraceMeta) -> Self {
        Session { trace: Trace::new(meta), tracker: StreamTracker::new(), library: None, follower: Follower::default() }
    }

    /// A session that follows every run of `library` as events arrive.
    pub fn following(meta: TraceMeta, library: &'lib RunLibrary) -> Self {
        Session {
            trace: Trace::new(meta),
            tracker: StreamTracker::new(),
            library: Some(library),
            follower: Follower::new(library),
        }
    }

    pub fn trace(&self) -> &Trace {
        &self.trace
    }

    pub fn tracker(&self) -> &StreamTracker {
        &self.tracker
    }

    pub fn follower(&self) -> &Follower {
        &self.follower
    }

    pub fn library(&self) -> Option<&'lib RunLibrary> {
        self.library
    }

    pub fn next_coord(&self, thread: ThreadId) -> EventCoord {
        self.trace.next_coord(thread)
    }

    fn step_follower(&mut self, coord: EventCoord) {
        if let Some(lib) = self.library {
            let event: &Event = self.trace.event(coord).expect("just appended");
            self.follower.follow_step(lib, event);
        }
    }

    fn link(&mut self, edge: Edge) -> Result<(), SessionError> {
        if self.trace.add_parent(edge.child, edge.parent)? {
            if let Some(lib) = self.library {
                self.follower.parent_added(lib, edge.child, edge.parent);
            }
        }
        Ok(())
    }

    /// Records a syscall entry.
    pub fn entry(&mut self, thread: ThreadId, syscall: SyscallKind, mut args: ArgsDigest) -> Result<EventCoord, SessionError> {
        let coord = self.trace.next_coord(thread);
        if let (SyscallKind::Read | SyscallKind::Write, Some(fd)) = (syscall, args.fd) {
            args.stream = self.tracker.socket_stream(thread.process, fd).map(|(s, _)| s);
        }
        self.trace.append_event(thread, syscall, Phase::Entry, None, args.clone())?;
        if let (SyscallKind::Accept, Some(fd)) = (syscall, args.fd) {
            self.tracker.on_accept_entry(thread.process, fd, coord);
        }
        self.step_follower(coord);
        Ok(coord)
    }

    fn check_exit(&self, thread: ThreadId, syscall: SyscallKind) -> Result<EventCoord, SessionError> {
        match self.trace.thread_log(thread).last() {
            Some(e) if e.phase == Phase::Entry && e.syscall == syscall => Ok(e.coord),
            _ => Err(TraceError::MismatchedPhase { thread, syscall }.into()),
        }
    }

    /// Records a syscall exit and derives its cross-thread parents.
    ///
    /// `args` describes what the process observed: the returned descriptor,
    /// endpoints and the byte count actually transferred. A connect carries
    /// its destination in `addr` and its own endpoint in `local`.
    pub fn exit(
        &mut self,
        thread: ThreadId,
        syscall: SyscallKind,
        outcome: Outcome,
        args: ArgsDigest,
    ) -> Result<EventCoord, SessionError> {
        self.exit_inner(thread, syscall, outcome, args, true)
    }

    /// Records a successful write whose bytes never reached the peer.
    pub fn exit_undelivered_write(&mut self, thread: ThreadId, mut args: ArgsDigest) -> Result<EventCoord, SessionError> {
        args.undelivered = true;
        self.exit_inner(thread, SyscallKind::Write, Outcome::Success, args, false)
    }

    fn exit_inner(
        &mut self,
        thread: ThreadId,
        syscall: SyscallKind,
        outcome: Outcome,
        mut args: ArgsDigest,
        delivered: bool,
    ) -> Result<EventCoord, SessionError> {
        let entry = self.check_exit(thread, syscall)?;
        let coord = self.trace.next_coord(thread);
        let process = thread.process;
        let mut parents = BTreeSet::new();
        let mut late = Vec::new();
        let tr = &mut self.tracker;

        match (syscall, outcome, args.fd) {
            (SyscallKind::Socket, Outcome::Success, _) => {
                if let Some(fd) = args.ret_fd {
                    tr.on_socket(process, fd);
                }
            }
            (SyscallKind::Bind, Outcome::Success, Some(fd)) => {
                if let Some(addr) = args.addr {
                    tr.on_bind(process, fd, addr);
                }
            }
            (SyscallKind::Listen, Outcome::Success, Some(fd)) => tr.on_listen(process, fd),
            (SyscallKind::Accept, Outcome::Success, Some(fd)) => {
                if let (Some(new_fd), Some(peer)) = (args.ret_fd, args.peer) {
                    let (sid, edges) = tr.on_accept_exit(process, fd, new_fd, peer, args.local, entry, coord);
                    args.stream = Some(sid);
                    late.extend(edges);
                }
            }
            (SyscallKind::Accept, Outcome::Error(_), Some(fd)) => tr.on_accept_failed(process, fd, entry),
            (SyscallKind::Connect, _, Some(fd)) => {
                if let Some(dest) = args.addr {
                    let (sid, edges) = tr.on_connect_exit(process, fd, dest, args.local, outcome, entry, coord);
                    args.stream = sid;
                    for e in edges {
                        if e.child == coord {
                            parents.insert(e.parent);
                        } else {
                            late.push(e);
                        }
                    }
                }
            }
            (SyscallKind::Write, Outcome::Success, Some(fd)) => {
                if let Some((sid, dir)) = tr.socket_stream(process, fd) {
                    args.stream = Some(sid);
                    if delivered {
                        tr.on_write_exit(sid, dir, coord, args.bytes.unwrap_or(0))?;
                    }
                }
            }
            (SyscallKind::Read, Outcome::Success, Some(fd)) => {
                if let Some((sid, dir)) = tr.socket_stream(process, fd) {
                    args.stream = Some(sid);
                    parents = tr.on_read_exit(sid, dir.opposite(), coord, args.bytes.unwrap_or(0))?;
                }
            }
            (SyscallKind::Close, Outcome::Success, Some(fd)) => {
                tr.on_close(process, fd);
            }
            _ => {}
        }

        self.trace.append_event(thread, syscall, Phase::Exit, Some(outcome), args)?;
        for parent in parents {
            self.trace.add_parent(coord, parent)?;
        }
        self.step_follower(coord);
        for e in late {
            self.link(e)?;
        }
        Ok(coord)
    }

    /// Ends the execution; the trace is returned unfinalized.
    pub fn finish(mut self, termination: Termination) -> (Trace, Follower) {
        self.trace.meta_mut().termination = termination;
        (self.trace, self.follower)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ep(s: &str) -> std::net::SocketAddrV4 {
        s.parse().unwrap()
    }

    fn fd(n: i32) -> ArgsDigest {
        ArgsDigest { fd: Some(n), ..Default::default() }
    }

    /// Drives a one-request exchange through the session.
    fn exchange(s: &mut Session<'_>, request: &[u64]) {
        let srv = ThreadId::main(0);
        let cli = ThreadId::main(1);
        let server = ep("127.0.0.1:6379");
        let client = ep("127.0.0.1:40000");
        s.entry(srv, SyscallKind::Socket, ArgsDigest::default()).unwrap();
        s.exit(srv, SyscallKind::Socket, Outcome::Success, ArgsDigest { ret_fd: Some(3), ..Default::default() }).unwrap();
        s.entry(srv, SyscallKind::Bind, ArgsDigest { fd: Some(3), addr: Some(server), ..Default::default() }).unwrap();
        s.exit(srv, SyscallKind::Bind, Outcome::Success, ArgsDigest { fd: Some(3), addr: Some(server), ..Default::default() })
            .unwrap();
        s.entry(srv, SyscallKind::Listen, fd(3)).unwrap();
        s.exit(srv, SyscallKind::Listen, Outcome::Success, fd(3)).unwrap();
        s.entry(srv, SyscallKind::Accept, fd(3)).unwrap();
        s.entry(cli, SyscallKind::Connect, ArgsDigest { fd: Some(3), addr: Some(server), ..Default::default() }).unwrap();
        s.exit(cli, SyscallKind::Connect, Outcome::Success, ArgsDigest {
            fd: Some(3),
            addr: Some(server),
            local: Some(client),
            ..Default::default()
        })
        .unwrap();
        s.exit(srv, SyscallKind::Accept, Outcome::Success, ArgsDigest {
            fd: Some(3),
            ret_fd: Some(4),
            peer: Some(client),
            ..Default::default()
        })
        .unwrap();
        let total: u64 = request.iter().sum();
        for &n in request {
            s.entry(cli, SyscallKind::Write, ArgsDigest { bytes: Some(n), ..fd(3) }).unwrap();
            s.exit(cli, SyscallKind::Write, Outcome::Success, ArgsDigest { bytes: Some(n), ..fd(3) }).unwrap();
        }
        s.entry(srv, SyscallKind::Read, ArgsDigest { bytes: Some(total), ..fd(4) }).unwrap();
        s.exit(srv, SyscallKind::Read, Outcome::Success, ArgsDigest { bytes: Some(total), ..fd(4) }).unwrap();
    }

    #[test]
    fn pipeline_derives_connect_and_read_edges() {
        let mut s = Session::new(TraceMeta::default());
        exchange(&mut s, &[10]);
        let t = s.trace();
        let accept_in = EventCoord::new(0, 0, 6);
        let connect_out = EventCoord::new(1, 0, 1);
        let write_out = EventCoord::new(1, 0, 3);
        let read_out = EventCoord::new(0, 0, 9);
        assert_eq!(t.edges(), [(accept_in, connect_out), (write_out, read_out)].into());
        assert_eq!(t.event(read_out).unwrap().args.stream, Some(crate::StreamId(0)));
    }

    #[test]
    fn split_write_gives_read_two_parents() {
        let mut s = Session::new(TraceMeta::default());
        exchange(&mut s, &[5, 5]);
        let read_out = EventCoord::new(0, 0, 9);
        assert_eq!(s.trace().event(read_out).unwrap().parents.len(), 2);
    }

    #[test]
    fn exit_without_entry() {
        let mut s = Session::new(TraceMeta::default());
        let err = s.exit(ThreadId::main(0), SyscallKind::Read, Outcome::Success, fd(3)).unwrap_err();
        assert!(matches!(err, SessionError::Trace(TraceError::MismatchedPhase { .. })));
    }

    #[test]
    fn following_session_tracks_library() {
        let mut lib = RunLibrary::in_memory("t");
        let mut s = Session::new(TraceMeta::default());
        exchange(&mut s, &[10]);
        let (t, f) = s.finish(Termination::Completed);
        let first = lib.finalize_execution(&f, t).unwrap();
        assert!(first.is_novel());

        let mut s = Session::following(TraceMeta::default(), &lib);
        exchange(&mut s, &[10]);
        assert_eq!(s.follower().following().count(), 1);
        let (t, f) = s.finish(Termination::Completed);
        assert!(!lib.finalize_execution(&f, t).unwrap().is_novel());

        let mut s = Session::following(TraceMeta::default(), &lib);
        exchange(&mut s, &[4, 6]);
        assert_eq!(s.follower().following().count(), 0);
    }
}
