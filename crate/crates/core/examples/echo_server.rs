//! Accepts one connection, echoes one read back and closes it.
//!
//! Usage: echo_server ADDR

use std::io::{Read, Write};
use std::net::TcpListener;

fn main() -> std::io::Result<()> {
    let addr = std::env::args().nth(1).unwrap_or_else(|| "127.0.0.1:7007".into());
    let listener = TcpListener::bind(&addr)?;
    let (mut conn, _) = listener.accept()?;
    // The listener stays open until exit.
    std::mem::forget(listener);
    let mut buf = [0u8; 64];
    let n = conn.read(&mut buf)?;
    conn.write_all(&buf[..n])?;
    Ok(())
}
