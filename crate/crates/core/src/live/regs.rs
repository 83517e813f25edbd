//! x86_64 syscall numbers and sockaddr decoding.

use std::net::{Ipv4Addr, SocketAddrV4};

#[allow(non_snake_case)]
pub mod SYS {
    pub const READ: u64 = 0;
    pub const WRITE: u64 = 1;
    pub const CLOSE: u64 = 3;
    pub const SOCKET: u64 = 41;
    pub const CONNECT: u64 = 42;
    pub const ACCEPT: u64 = 43;
    pub const SENDTO: u64 = 44;
    pub const RECVFROM: u64 = 45;
    pub const BIND: u64 = 49;
    pub const LISTEN: u64 = 50;
    pub const GETSOCKNAME: u64 = 51;
    pub const GETPEERNAME: u64 = 52;
    pub const ACCEPT4: u64 = 288;
}

/// Decodes a `struct sockaddr_in` (family, big-endian port, address).
pub fn decode_sockaddr_in(raw: &[u8]) -> Option<SocketAddrV4> {
    if raw.len() < 8 || u16::from_ne_bytes([raw[0], raw[1]]) != 2 {
        return None;
    }
    let port = u16::from_be_bytes([raw[2], raw[3]]);
    Some(SocketAddrV4::new(Ipv4Addr::new(raw[4], raw[5], raw[6], raw[7]), port))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sockaddr() {
        let raw = [2, 0, 0x18, 0xeb, 127, 0, 0, 1, 0, 0, 0, 0, 0, 0, 0, 0];
        assert_eq!(decode_sockaddr_in(&raw), Some("127.0.0.1:6379".parse().unwrap()));
        assert_eq!(decode_sockaddr_in(&[10, 0, 0, 0, 0, 0, 0, 0]), None);
    }
}
