use hbtrace::causality::fingerprint;
use hbtrace::format::{deserialize, serialize};
use hbtrace::sim::{preset, run_simulation};

const FIG1_FINGERPRINT: &str = "hbtrace-po/1
0.0: socket/entry socket/exit/ok bind/entry bind/exit/ok listen/entry listen/exit/ok accept/entry accept/exit/ok
1.0: socket/entry socket/exit/ok connect/entry connect/exit/ok<0.0.6>
";

// sha256 of FIG1_FINGERPRINT, computed outside this crate (Python hashlib).
const FIG1_RUN_ID: &str = "579015d88829040db02aad79497b6ab789c7668bcbb0c7f1aed49a7998e5ba18";

#[test]
fn fig1_fingerprint_and_id() {
    let t = run_simulation(&preset("fig1").unwrap(), 0, &[], None).unwrap().trace;
    assert_eq!(fingerprint(&t), FIG1_FINGERPRINT);
    assert_eq!(t.run_id().unwrap().0, FIG1_RUN_ID);
}

#[test]
fn fig1_trace_file_is_stable() {
    let golden = include_bytes!("data/fig1.trace");
    let t = run_simulation(&preset("fig1").unwrap(), 0, &[], None).unwrap().trace;
    assert_eq!(String::from_utf8(serialize(&t).unwrap()).unwrap(), std::str::from_utf8(golden).unwrap());
    assert_eq!(deserialize(golden).unwrap(), t);
}
