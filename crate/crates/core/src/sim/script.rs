//! Process programs and the key/value wire format.

use std::collections::BTreeMap;

use crate::stream::Endpoint;

/// One step of a straight-line program.
///
/// Straight-line programs keep two descriptor registers: `sock` (set by
/// `Socket`) and `conn` (set by `Accept`). Data operations use `conn` when it
/// is set and `sock` otherwise.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Op {
    Socket,
    Bind(Endpoint),
    Listen,
    Accept,
    Connect(Endpoint),
    /// Writes all of the buffer, retrying short writes.
    Send(Vec<u8>),
    /// One read of at most `max` bytes.
    Recv { max: u64 },
    /// Reads until one whole length-prefixed frame has arrived.
    RecvFrame,
    /// Writes back everything received so far and clears it.
    SendReceived,
    Close,
    /// A schedulable point that emits no event.
    Compute,
}

/// What a poll-loop server does with the bytes it reads.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum ServerMode {
    /// Key/value protocol: answer each request frame, close on EOF.
    Kv,
    /// Read `reads` times from each connection and reply to nothing.
    Sink { reads: u32 },
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Script {
    Ops(Vec<Op>),
    /// Single-threaded server: socket/bind/listen, then a readiness loop over
    /// the listener and accepted connections until `clients` connections were
    /// served.
    PollServer { listen: Endpoint, clients: u32, mode: ServerMode },
}

impl Script {
    /// Address this program listens on, if it is a server.
    pub fn listen_address(&self) -> Option<Endpoint> {
        match self {
            Script::PollServer { listen, .. } => Some(*listen),
            Script::Ops(ops) => ops.iter().find_map(|op| match op {
                Op::Bind(a) => Some(*a),
                _ => None,
            }),
        }
    }

    /// Address this program connects to first, if any.
    pub fn connect_address(&self) -> Option<Endpoint> {
        match self {
            Script::PollServer { .. } => None,
            Script::Ops(ops) => ops.iter().find_map(|op| match op {
                Op::Connect(a) => Some(*a),
                _ => None,
            }),
        }
    }
}

pub const FRAME_HEADER: usize = 4;

pub fn encode_frame(payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(FRAME_HEADER + payload.len());
    out.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    out.extend_from_slice(payload);
    out
}

/// Splits one complete frame off the front of `buf`.
pub fn take_frame(buf: &mut Vec<u8>) -> Option<Vec<u8>> {
    if buf.len() < FRAME_HEADER {
        return None;
    }
    let len = u32::from_be_bytes(buf[..FRAME_HEADER].try_into().unwrap()) as usize;
    if buf.len() < FRAME_HEADER + len {
        return None;
    }
    let payload = buf[FRAME_HEADER..FRAME_HEADER + len].to_vec();
    buf.drain(..FRAME_HEADER + len);
    Some(payload)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Command {
    Get(String),
    Set(String, String),
}

impl Command {
    pub fn encode(&self) -> Vec<u8> {
        let text = match self {
            Command::Get(k) => format!("GET {k}"),
            Command::Set(k, v) => format!("SET {k} {v}"),
        };
        encode_frame(text.as_bytes())
    }

    pub fn parse(payload: &[u8]) -> Option<Command> {
        let text = std::str::from_utf8(payload).ok()?;
        let mut parts = text.splitn(3, ' ');
        match (parts.next()?, parts.next(), parts.next()) {
            ("GET", Some(k), None) => Some(Command::Get(k.to_string())),
            ("SET", Some(k), Some(v)) => Some(Command::Set(k.to_string(), v.to_string())),
            _ => None,
        }
    }
}

/// Executes one request against the store and returns the response frame.
pub fn serve(store: &mut BTreeMap<String, String>, payload: &[u8]) -> Vec<u8> {
    let reply = match Command::parse(payload) {
        Some(Command::Get(k)) => match store.get(&k) {
            Some(v) => format!("VALUE {v}"),
            None => "NIL".to_string(),
        },
        Some(Command::Set(k, v)) => {
            store.insert(k, v);
            "OK".to_string()
        }
        None => "ERR".to_string(),
    };
    encode_frame(reply.as_bytes())
}

/// A client that connects, runs `commands` with a think step before each,
/// and closes.
pub fn kv_client(server: Endpoint, commands: &[Command]) -> Script {
    let mut ops = vec![Op::Socket, Op::Connect(server)];
    for c in commands {
        ops.extend([Op::Compute, Op::Send(c.encode()), Op::RecvFrame]);
    }
    ops.push(Op::Close);
    Script::Ops(ops)
}
