#![cfg(all(feature = "live", target_os = "linux", target_arch = "x86_64"))]

use std::net::TcpListener;
use std::path::PathBuf;

use hbtrace::live::{trace_commands, LiveConfig};
use hbtrace::sim::{preset, run_simulation};
use hbtrace::{SyscallKind, Termination};

fn example(name: &str) -> String {
    // target/<profile>/deps/<test> -> target/<profile>/examples/<name>
    let mut p: PathBuf = std::env::current_exe().unwrap();
    p.pop();
    p.pop();
    p.push("examples");
    p.push(name);
    p.to_string_lossy().into_owned()
}

pub fn free_addr() -> String {
    let l = TcpListener::bind("127.0.0.1:0").unwrap();
    l.local_addr().unwrap().to_string()
}

pub fn trace_echo() -> hbtrace::live::LiveRun {
    let addr = free_addr();
    let config = LiveConfig::new(vec![
        vec![example("echo_server"), addr.clone()],
        vec![example("echo_client"), addr],
    ]);
    trace_commands(&config, None).expect("ptrace available")
}

#[test]
fn echo_matches_simulated_shape() {
    let live = trace_echo();
    assert_eq!(live.trace.meta().termination, Termination::Completed, "{:?}", live.warnings);
    let sim = run_simulation(&preset("echo").unwrap(), 0, &[], None).unwrap();
    assert_eq!(live.trace.run_id(), sim.trace.run_id(), "\n{:#?}", live.trace.logs());
    for e in live.trace.events().filter(|e| e.syscall == SyscallKind::Connect && e.outcome.is_some()) {
        assert!(e.args.local.is_some() && e.args.peer.is_some());
    }
    assert!(live.warnings.is_empty(), "{:?}", live.warnings);
}

fn echo_with_faults(spec: &str) -> hbtrace::live::LiveRun {
    let addr = free_addr();
    let mut config = LiveConfig::new(vec![
        vec![example("echo_server"), addr.clone()],
        vec![example("echo_client"), addr],
    ]);
    config.faults = hbtrace::fault::parse_fault_spec(spec, None).unwrap();
    config.idle_timeout = std::time::Duration::from_secs(1);
    trace_commands(&config, None).unwrap()
}

#[test]
fn refused_connect_leaves_server_waiting() {
    let live = echo_with_faults(
        "[[rule]]\ntarget = { process = 1, syscall = \"connect\" }\naction = { errno = \"ECONNREFUSED\" }\n",
    );
    assert_eq!(live.trace.meta().termination, Termination::Quiescent);
    let connect_exit = live
        .trace
        .events()
        .find(|e| e.syscall == SyscallKind::Connect && e.outcome.is_some())
        .unwrap();
    assert_eq!(connect_exit.outcome, Some(hbtrace::Outcome::Error(hbtrace::Errno::ECONNREFUSED)));
    assert!(live.trace.edges().is_empty());
}

#[test]
fn truncated_write_is_recorded_short() {
    let live = echo_with_faults(
        "[[rule]]\ntarget = { process = 1, syscall = \"write\", occurrence = 1 }\naction = { truncate = 0.4 }\n",
    );
    let writes: Vec<_> = live
        .trace
        .thread_log(hbtrace::ThreadId::main(1))
        .iter()
        .filter(|e| e.syscall == SyscallKind::Write && e.outcome.is_some())
        .map(|e| e.args.bytes)
        .collect();
    assert_eq!(writes[0], Some(2));
    assert_eq!(live.injections.len(), 1);
}
