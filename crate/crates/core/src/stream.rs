//! Socket and TCP stream bookkeeping.
//!
//! The tracker keeps a per-process descriptor table, pairs the connecting and
//! accepting halves of each stream by their address 4-tuple, and records which
//! write produced each byte range of a stream so that a read can be mapped
//! back to the writes it consumed. Everything it learns about causality comes
//! out as [`Edge`]s for the caller to add to the trace.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::net::SocketAddrV4;
use std::ops::Range;

use crate::event::{EventCoord, Outcome, StreamId};

pub type Endpoint = SocketAddrV4;

/// A cross-thread `parent -> child` edge discovered by the tracker.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Edge {
    pub parent: EventCoord,
    pub child: EventCoord,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SocketRole {
    Unbound,
    Listening,
    Connecting,
    AcceptedChild,
    /// connect failed; the descriptor carries no stream.
    Failed,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SocketRecord {
    pub owner: u32,
    pub fd: i32,
    pub local: Option<Endpoint>,
    pub peer: Option<Endpoint>,
    pub role: SocketRole,
    pub stream: Option<StreamId>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Direction {
    ClientToServer,
    ServerToClient,
}

impl Direction {
    pub fn opposite(self) -> Direction {
        match self {
            Direction::ClientToServer => Direction::ServerToClient,
            Direction::ServerToClient => Direction::ClientToServer,
        }
    }

    fn slot(self) -> usize {
        match self {
            Direction::ClientToServer => 0,
            Direction::ServerToClient => 1,
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::ClientToServer => "c->s",
            Direction::ServerToClient => "s->c",
        })
    }
}

/// One write's share of a stream's sequence space.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct WriteRecord {
    pub event: EventCoord,
    pub range: Range<u64>,
    pub direction: Direction,
}

/// One direction of a stream.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct Channel {
    pub write_cursor: u64,
    pub read_cursor: u64,
    pub writes: Vec<WriteRecord>,
}

impl Channel {
    pub fn buffered(&self) -> u64 {
        self.write_cursor - self.read_cursor
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct StreamState {
    pub id: StreamId,
    pub client: Option<Endpoint>,
    pub server: Option<Endpoint>,
    /// `(process, fd)` of the connecting side, once seen.
    pub client_socket: Option<(u32, i32)>,
    /// `(process, fd)` of the accepted side, once seen.
    pub server_socket: Option<(u32, i32)>,
    pub accept_entry: Option<EventCoord>,
    pub connect_exit: Option<EventCoord>,
    paired: bool,
    channels: [Channel; 2],
}

impl StreamState {
    fn new(id: StreamId) -> Self {
        StreamState {
            id,
            client: None,
            server: None,
            client_socket: None,
            server_socket: None,
            accept_entry: None,
            connect_exit: None,
            paired: false,
            channels: Default::default(),
        }
    }

    pub fn channel(&self, direction: Direction) -> &Channel {
        &self.channels[direction.slot()]
    }

    fn writer_traced(&self, direction: Direction) -> bool {
        match direction {
            Direction::ClientToServer => self.client_socket.is_some(),
            Direction::ServerToClient => self.server_socket.is_some(),
        }
    }

    /// Edge from the accept entry to the connect exit, once both are known.
    fn try_pair(&mut self) -> Option<Edge> {
        match (self.paired, self.accept_entry, self.connect_exit) {
            (false, Some(parent), Some(child)) => {
                self.paired = true;
                Some(Edge { parent, child })
            }
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum StreamError {
    #[error("unknown stream {0}")]
    UnknownStream(StreamId),
    #[error("read of {requested} bytes on {stream} {direction} with only {available} written")]
    ReadAheadOfWrites { stream: StreamId, direction: Direction, requested: u64, available: u64 },
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct StreamTracker {
    sockets: Vec<SocketRecord>,
    /// Current descriptor -> socket slot, per process.
    table: BTreeMap<(u32, i32), usize>,
    streams: Vec<StreamState>,
    by_tuple: BTreeMap<(Endpoint, Endpoint), StreamId>,
    /// Accept entries still waiting for a connection, per listening socket.
    pending_accepts: BTreeMap<usize, VecDeque<EventCoord>>,
    warnings: Vec<String>,
}

impl StreamTracker {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn streams(&self) -> &[StreamState] {
        &self.streams
    }

    pub fn stream(&self, id: StreamId) -> Option<&StreamState> {
        self.streams.get(id.0 as usize)
    }

    pub fn socket(&self, process: u32, fd: i32) -> Option<&SocketRecord> {
        self.table.get(&(process, fd)).map(|&i| &self.sockets[i])
    }

    /// Stream and the direction this descriptor writes into.
    pub fn socket_stream(&self, process: u32, fd: i32) -> Option<(StreamId, Direction)> {
        let s = self.socket(process, fd)?;
        let dir = match s.role {
            SocketRole::Connecting => Direction::ClientToServer,
            SocketRole::AcceptedChild => Direction::ServerToClient,
            _ => return None,
        };
        Some((s.stream?, dir))
    }

    /// Process on the other end of this descriptor's stream, if traced.
    pub fn peer_process(&self, process: u32, fd: i32) -> Option<u32> {
        let (sid, dir) = self.socket_stream(process, fd)?;
        let st = self.stream(sid)?;
        let other = match dir {
            Direction::ClientToServer => st.server_socket,
            Direction::ServerToClient => st.client_socket,
        };
        other.map(|(p, _)| p)
    }

    /// Process owning the listener a connect to `destination` would reach.
    pub fn listener_owner(&self, destination: Endpoint) -> Option<u32> {
        self.listener_for(destination).map(|i| self.sockets[i].owner)
    }

    fn register(&mut self, process: u32, fd: i32, role: SocketRole) -> usize {
        let slot = self.sockets.len();
        self.sockets.push(SocketRecord { owner: process, fd, local: None, peer: None, role, stream: None });
        self.table.insert((process, fd), slot);
        slot
    }

    fn slot_or_register(&mut self, process: u32, fd: i32) -> usize {
        match self.table.get(&(process, fd)) {
            Some(&i) => i,
            None => self.register(process, fd, SocketRole::Unbound),
        }
    }

    /// A fresh socket descriptor; a reused number rebinds the slot.
    pub fn on_socket(&mut self, process: u32, fd: i32) {
        self.register(process, fd, SocketRole::Unbound);
    }

    pub fn on_bind(&mut self, process: u32, fd: i32, endpoint: Endpoint) {
        let i = self.slot_or_register(process, fd);
        self.sockets[i].local = Some(endpoint);
    }

    pub fn on_listen(&mut self, process: u32, fd: i32) {
        let i = self.slot_or_register(process, fd);
        if self.sockets[i].local.is_none() {
            self.warnings.push(format!("listen on unbound fd {fd} in process {process}"));
        }
        self.sockets[i].role = SocketRole::Listening;
    }

    /// Descriptor duplication: `new_fd` now names the same socket.
    pub fn on_dup(&mut self, process: u32, old_fd: i32, new_fd: i32) {
        if let Some(&i) = self.table.get(&(process, old_fd)) {
            self.table.insert((process, new_fd), i);
        }
    }

    /// Releases the descriptor; returns the stream it was attached to.
    pub fn on_close(&mut self, process: u32, fd: i32) -> Option<StreamId> {
        let i = self.table.remove(&(process, fd))?;
        self.pending_accepts.remove(&i);
        self.sockets[i].stream
    }

    pub fn on_accept_entry(&mut self, process: u32, listener_fd: i32, accept_entry: EventCoord) {
        let i = self.slot_or_register(process, listener_fd);
        self.pending_accepts.entry(i).or_default().push_back(accept_entry);
    }

    /// An accept that returned an error no longer waits for a connection.
    pub fn on_accept_failed(&mut self, process: u32, listener_fd: i32, accept_entry: EventCoord) {
        if let Some(&i) = self.table.get(&(process, listener_fd)) {
            if let Some(q) = self.pending_accepts.get_mut(&i) {
                q.retain(|c| *c != accept_entry);
            }
        }
    }

    fn listener_for(&self, destination: Endpoint) -> Option<usize> {
        self.table.values().copied().find(|&i| {
            let s = &self.sockets[i];
            s.role == SocketRole::Listening
                && s.local.is_some_and(|l| {
                    l.port() == destination.port() && (l.ip() == destination.ip() || l.ip().is_unspecified())
                })
        })
    }

    fn new_stream(&mut self) -> StreamId {
        let id = StreamId(self.streams.len() as u32);
        self.streams.push(StreamState::new(id));
        id
    }

    /// Connect returned. `source` is the connecting socket's own endpoint when
    /// the event source can resolve it; without it the stream is tracked
    /// one-sided.
    #[allow(clippy::too_many_arguments)]
    pub fn on_connect_exit(
        &mut self,
        process: u32,
        fd: i32,
        destination: Endpoint,
        source: Option<Endpoint>,
        outcome: Outcome,
        _connect_entry: EventCoord,
        connect_exit: EventCoord,
    ) -> (Option<StreamId>, Vec<Edge>) {
        let sock = self.slot_or_register(process, fd);
        self.sockets[sock].peer = Some(destination);
        if !outcome.is_success() {
            self.sockets[sock].role = SocketRole::Failed;
            return (None, Vec::new());
        }
        self.sockets[sock].role = SocketRole::Connecting;
        if source.is_some() {
            self.sockets[sock].local = source;
        }

        let existing = source.and_then(|src| self.by_tuple.get(&(src, destination)).copied());
        let id = match existing {
            Some(id) => id,
            None => {
                let id = self.new_stream();
                if let Some(src) = source {
                    self.by_tuple.insert((src, destination), id);
                }
                // The accept this connection will complete, when the server is
                // already waiting in one. Oldest waiter first.
                if let Some(listener) = self.listener_for(destination) {
                    let waiter = self.pending_accepts.get_mut(&listener).and_then(VecDeque::pop_front);
                    self.streams[id.0 as usize].accept_entry = waiter;
                }
                id
            }
        };
        let st = &mut self.streams[id.0 as usize];
        st.client = source;
        st.server = Some(destination);
        st.client_socket = Some((process, fd));
        st.connect_exit = Some(connect_exit);
        let edges = st.try_pair().into_iter().collect();
        self.sockets[sock].stream = Some(id);
        (Some(id), edges)
    }

    /// Accept returned `new_fd` connected to `peer`. `local` overrides the
    /// listener's bound address (e.g. when bound to the wildcard address).
    #[allow(clippy::too_many_arguments)]
    pub fn on_accept_exit(
        &mut self,
        process: u32,
        listener_fd: i32,
        new_fd: i32,
        peer: Endpoint,
        local: Option<Endpoint>,
        accept_entry: EventCoord,
        _accept_exit: EventCoord,
    ) -> (StreamId, Vec<Edge>) {
        let listener = match self.table.get(&(process, listener_fd)) {
            Some(&i) => Some(i),
            None => {
                self.warnings.push(format!("accept on unknown listener fd {listener_fd} in process {process}"));
                None
            }
        };
        if let Some(q) = listener.and_then(|i| self.pending_accepts.get_mut(&i)) {
            q.retain(|c| *c != accept_entry);
        }
        let local = local.or_else(|| listener.and_then(|i| self.sockets[i].local));

        let child = self.register(process, new_fd, SocketRole::AcceptedChild);
        self.sockets[child].local = local;
        self.sockets[child].peer = Some(peer);

        let existing = local.and_then(|l| self.by_tuple.get(&(peer, l)).copied());
        let id = match existing {
            Some(id) => id,
            None => {
                let id = self.new_stream();
                if let Some(l) = local {
                    self.by_tuple.insert((peer, l), id);
                }
                id
            }
        };
        let st = &mut self.streams[id.0 as usize];
        st.client = Some(peer);
        st.server = local;
        st.server_socket = Some((process, new_fd));
        if st.accept_entry.is_none() {
            st.accept_entry = Some(accept_entry);
        }
        let edges = st.try_pair().into_iter().collect();
        self.sockets[child].stream = Some(id);
        (id, edges)
    }

    fn stream_mut(&mut self, id: StreamId) -> Result<&mut StreamState, StreamError> {
        self.streams.get_mut(id.0 as usize).ok_or(StreamError::UnknownStream(id))
    }

    /// Appends the byte range `[write_cursor, write_cursor + count)`.
    pub fn on_write_exit(
        &mut self,
        stream: StreamId,
        direction: Direction,
        write_exit: EventCoord,
        count: u64,
    ) -> Result<WriteRecord, StreamError> {
        let ch = &mut self.stream_mut(stream)?.channels[direction.slot()];
        let start = ch.write_cursor;
        ch.write_cursor += count;
        let rec = WriteRecord { event: write_exit, range: start..start + count, direction };
        if count > 0 {
            ch.writes.push(rec.clone());
        }
        Ok(rec)
    }

    /// Consumes `count` bytes and returns the writes whose ranges they came from.
    pub fn on_read_exit(
        &mut self,
        stream: StreamId,
        direction: Direction,
        _read_exit: EventCoord,
        count: u64,
    ) -> Result<BTreeSet<EventCoord>, StreamError> {
        let st = self.stream_mut(stream)?;
        if !st.writer_traced(direction) {
            return Ok(BTreeSet::new());
        }
        let ch = &mut st.channels[direction.slot()];
        if count == 0 {
            // End of stream (or an empty read) consumes nothing.
            return Ok(BTreeSet::new());
        }
        if count > ch.buffered() {
            return Err(StreamError::ReadAheadOfWrites {
                stream,
                direction,
                requested: count,
                available: ch.buffered(),
            });
        }
        let (lo, hi) = (ch.read_cursor, ch.read_cursor + count);
        let first = ch.writes.partition_point(|w| w.range.end <= lo);
        let parents = ch.writes[first..]
            .iter()
            .take_while(|w| w.range.start < hi)
            .map(|w| w.event)
            .collect();
        ch.read_cursor = hi;
        Ok(parents)
    }

    /// Checks cursor ordering and range contiguity on every channel.
    pub fn check_invariants(&self) -> Result<(), String> {
        for st in &self.streams {
            for (slot, ch) in st.channels.iter().enumerate() {
                if ch.read_cursor > ch.write_cursor {
                    return Err(format!("{} channel {slot}: read cursor ahead of writes", st.id));
                }
                let mut next = 0;
                for w in &ch.writes {
                    if w.range.start != next || w.range.end <= w.range.start {
                        return Err(format!("{} channel {slot}: gap or overlap at {:?}", st.id, w.range));
                    }
                    next = w.range.end;
                }
                if next != ch.write_cursor {
                    return Err(format!("{} channel {slot}: cursor {} != last range end {next}", st.id, ch.write_cursor));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::errno::Errno;

    fn ep(s: &str) -> Endpoint {
        s.parse().unwrap()
    }

    fn c(p: u32, i: u32) -> EventCoord {
        EventCoord::new(p, 0, i)
    }

    const SERVER: &str = "127.0.0.1:6379";

    fn listening() -> StreamTracker {
        let mut t = StreamTracker::new();
        t.on_socket(0, 3);
        t.on_bind(0, 3, ep(SERVER));
        t.on_listen(0, 3);
        t
    }

    #[test]
    fn bind_registers_lazily_and_last_bind_wins() {
        let mut t = StreamTracker::new();
        t.on_bind(0, 5, ep("127.0.0.1:1"));
        assert_eq!(t.socket(0, 5).unwrap().local, Some(ep("127.0.0.1:1")));
        assert_eq!(t.socket(0, 5).unwrap().role, SocketRole::Unbound);
        t.on_bind(0, 5, ep("127.0.0.1:2"));
        assert_eq!(t.socket(0, 5).unwrap().local, Some(ep("127.0.0.1:2")));
    }

    #[test]
    fn connect_then_accept_pairs_with_one_edge() {
        let mut t = listening();
        t.on_accept_entry(0, 3, c(0, 6));
        let (sid, edges) =
            t.on_connect_exit(1, 3, ep(SERVER), Some(ep("127.0.0.1:51000")), Outcome::Success, c(1, 2), c(1, 3));
        let sid = sid.unwrap();
        assert_eq!(edges, vec![Edge { parent: c(0, 6), child: c(1, 3) }]);
        let (sid2, edges) = t.on_accept_exit(0, 3, 7, ep("127.0.0.1:51000"), None, c(0, 6), c(0, 7));
        assert_eq!(sid, sid2);
        assert!(edges.is_empty());
        assert_eq!(t.socket(0, 7).unwrap().role, SocketRole::AcceptedChild);
        let st = t.stream(sid).unwrap();
        assert_eq!(st.client_socket, Some((1, 3)));
        assert_eq!(st.server_socket, Some((0, 7)));
    }

    #[test]
    fn accept_seen_before_connect_exit_pairs_late() {
        let mut t = listening();
        // No waiting accept recorded when connect returns (backlogged connection).
        let (sid, edges) =
            t.on_connect_exit(1, 3, ep(SERVER), Some(ep("127.0.0.1:51000")), Outcome::Success, c(1, 2), c(1, 3));
        assert!(edges.is_empty());
        t.on_accept_entry(0, 3, c(0, 6));
        let (sid2, edges) = t.on_accept_exit(0, 3, 7, ep("127.0.0.1:51000"), None, c(0, 6), c(0, 7));
        assert_eq!(sid.unwrap(), sid2);
        assert_eq!(edges, vec![Edge { parent: c(0, 6), child: c(1, 3) }]);
    }

    #[test]
    fn refused_connect_creates_nothing() {
        let mut t = listening();
        t.on_accept_entry(0, 3, c(0, 6));
        let (sid, edges) = t.on_connect_exit(
            1,
            3,
            ep(SERVER),
            None,
            Outcome::Error(Errno::ECONNREFUSED),
            c(1, 2),
            c(1, 3),
        );
        assert!(sid.is_none());
        assert!(edges.is_empty());
        assert!(t.streams().is_empty());
        assert_eq!(t.socket(1, 3).unwrap().role, SocketRole::Failed);
    }

    #[test]
    fn two_clients_pair_by_four_tuple() {
        let mut t = listening();
        let a = ep("127.0.0.1:40001");
        let b = ep("127.0.0.1:40002");
        // Both clients connected while nobody was accepting.
        let (sa, _) = t.on_connect_exit(1, 3, ep(SERVER), Some(a), Outcome::Success, c(1, 2), c(1, 3));
        let (sb, _) = t.on_connect_exit(2, 3, ep(SERVER), Some(b), Outcome::Success, c(2, 2), c(2, 3));
        // The server accepts b first.
        t.on_accept_entry(0, 3, c(0, 6));
        let (first, e1) = t.on_accept_exit(0, 3, 7, b, None, c(0, 6), c(0, 7));
        t.on_accept_entry(0, 3, c(0, 8));
        let (second, e2) = t.on_accept_exit(0, 3, 8, a, None, c(0, 8), c(0, 9));
        assert_eq!(Some(first), sb);
        assert_eq!(Some(second), sa);
        assert_eq!(e1, vec![Edge { parent: c(0, 6), child: c(2, 3) }]);
        assert_eq!(e2, vec![Edge { parent: c(0, 8), child: c(1, 3) }]);
    }

    #[test]
    fn unknown_listener_warns_but_tracks() {
        let mut t = StreamTracker::new();
        let (sid, _) = t.on_accept_exit(0, 9, 7, ep("127.0.0.1:51000"), None, c(0, 0), c(0, 1));
        assert_eq!(t.warnings().len(), 1);
        assert_eq!(t.socket(0, 7).unwrap().stream, Some(sid));
        // A second accept gets a second stream.
        let (sid2, _) = t.on_accept_exit(0, 9, 8, ep("127.0.0.1:51001"), None, c(0, 2), c(0, 3));
        assert_ne!(sid, sid2);
    }

    fn stream_pair() -> (StreamTracker, StreamId) {
        let mut t = listening();
        t.on_accept_entry(0, 3, c(0, 0));
        let (sid, _) =
            t.on_connect_exit(1, 3, ep(SERVER), Some(ep("127.0.0.1:50000")), Outcome::Success, c(1, 0), c(1, 1));
        t.on_accept_exit(0, 3, 4, ep("127.0.0.1:50000"), None, c(0, 0), c(0, 1));
        (t, sid.unwrap())
    }

    #[test]
    fn write_ranges_are_contiguous() {
        let (mut t, s) = stream_pair();
        let d = Direction::ClientToServer;
        assert_eq!(t.on_write_exit(s, d, c(1, 3), 100).unwrap().range, 0..100);
        assert_eq!(t.on_write_exit(s, d, c(1, 5), 50).unwrap().range, 100..150);
        assert_eq!(t.on_write_exit(s, d, c(1, 7), 0).unwrap().range, 150..150);
        assert_eq!(t.stream(s).unwrap().channel(d).write_cursor, 150);
        t.check_invariants().unwrap();
        assert_eq!(
            t.on_write_exit(StreamId(9), d, c(1, 9), 1),
            Err(StreamError::UnknownStream(StreamId(9)))
        );
    }

    #[test]
    fn reads_map_to_intersecting_writes() {
        let (mut t, s) = stream_pair();
        let d = Direction::ClientToServer;
        t.on_write_exit(s, d, c(1, 3), 100).unwrap();
        t.on_write_exit(s, d, c(1, 5), 50).unwrap();
        let p = t.on_read_exit(s, d, c(0, 3), 120).unwrap();
        assert_eq!(p, [c(1, 3), c(1, 5)].into());
        let p = t.on_read_exit(s, d, c(0, 5), 30).unwrap();
        assert_eq!(p, [c(1, 5)].into());
        let p = t.on_read_exit(s, d, c(0, 7), 0).unwrap();
        assert!(p.is_empty());
        assert_eq!(t.stream(s).unwrap().channel(d).read_cursor, 150);
        assert!(matches!(t.on_read_exit(s, d, c(0, 9), 1), Err(StreamError::ReadAheadOfWrites { .. })));
    }

    #[test]
    fn empty_read_inside_a_write_maps_nothing() {
        let (mut t, s) = stream_pair();
        let d = Direction::ClientToServer;
        t.on_write_exit(s, d, c(1, 3), 10).unwrap();
        t.on_read_exit(s, d, c(0, 3), 4).unwrap();
        assert!(t.on_read_exit(s, d, c(0, 5), 0).unwrap().is_empty());
    }

    #[test]
    fn one_sided_stream_reads_have_no_parents() {
        let mut t = listening();
        t.on_accept_entry(0, 3, c(0, 0));
        // Untraced client: only the accept side is seen.
        let (sid, _) = t.on_accept_exit(0, 3, 4, ep("10.0.0.2:40000"), None, c(0, 0), c(0, 1));
        let p = t.on_read_exit(sid, Direction::ClientToServer, c(0, 3), 64).unwrap();
        assert!(p.is_empty());
    }

    #[test]
    fn close_releases_descriptor_for_reuse() {
        let (mut t, s) = stream_pair();
        assert_eq!(t.on_close(1, 3), Some(s));
        assert!(t.socket(1, 3).is_none());
        t.on_socket(1, 3);
        assert_eq!(t.socket(1, 3).unwrap().role, SocketRole::Unbound);
        assert_eq!(t.socket(1, 3).unwrap().stream, None);
    }

    #[test]
    fn dup_shares_the_socket() {
        let (mut t, s) = stream_pair();
        t.on_dup(1, 3, 10);
        assert_eq!(t.socket_stream(1, 10), Some((s, Direction::ClientToServer)));
        t.on_close(1, 3);
        assert_eq!(t.socket_stream(1, 10), Some((s, Direction::ClientToServer)));
    }
}
