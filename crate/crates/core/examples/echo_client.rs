//! Sends "hello" to an echo server and reads the reply.
//!
//! Usage: echo_client ADDR

use std::io::{Read, Write};
use std::net::TcpStream;

fn main() -> std::io::Result<()> {
    let addr = std::env::args().nth(1).unwrap_or_else(|| "127.0.0.1:7007".into());
    let mut conn = TcpStream::connect(&addr)?;
    conn.write_all(b"hello")?;
    let mut buf = [0u8; 64];
    let n = conn.read(&mut buf)?;
    println!("{}", String::from_utf8_lossy(&buf[..n]));
    Ok(())
}
