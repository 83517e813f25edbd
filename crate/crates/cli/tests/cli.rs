use std::path::Path;
use std::process::{Command, Output};

fn hbtrace(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hbtrace")).current_dir(dir).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn run_records_then_follows() {
    let dir = tempfile::tempdir().unwrap();
    let first = hbtrace(dir.path(), &["run", "--config", "1cl", "--seed", "3"]);
    assert!(first.status.success());
    assert!(stdout(&first).contains("novel=true"));
    let again = hbtrace(dir.path(), &["run", "--config", "1cl", "--seed", "4"]);
    assert!(stdout(&again).contains("novel=false"), "{}", stdout(&again));
    assert!(dir.path().join("runs/1cl/index.tsv").exists());
}

#[test]
fn loop_then_report_and_export() {
    let dir = tempfile::tempdir().unwrap();
    let out = hbtrace(dir.path(), &["loop", "--config", "2cl", "--iterations", "200", "--jobs", "2"]);
    assert!(out.status.success());
    let summary = stdout(&out);
    assert!(summary.starts_with("iterations=200 "), "{summary}");

    let rep = hbtrace(dir.path(), &["report", "--config", "2cl", "--histogram", "h.tsv"]);
    assert!(rep.status.success());
    assert!(stdout(&rep).contains("iterations=200"));
    let hist = std::fs::read_to_string(dir.path().join("h.tsv")).unwrap();
    assert_eq!(hist.lines().next(), Some("rank\tcount\tcumulative"));
    let last = hist.lines().last().unwrap();
    assert!(last.ends_with("1.000000"), "{last}");

    let trace = dir.path().join("t.trace");
    assert!(hbtrace(dir.path(), &["run", "--config", "2cl", "--out", "t.trace"]).status.success());
    let dot = hbtrace(dir.path(), &["export-dot", "--trace", trace.to_str().unwrap()]);
    assert!(dot.status.success());
    assert!(stdout(&dot).starts_with("digraph"));
}

#[test]
fn inject_reports_injection() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("f.toml"),
        "[[rule]]\ntarget = { process = 1, syscall = \"connect\" }\naction = { errno = \"ECONNREFUSED\" }\n",
    )
    .unwrap();
    let out = hbtrace(dir.path(), &["inject", "--config", "1cl", "--faults", "f.toml"]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.contains("injected errno ECONNREFUSED"), "{text}");
    assert!(text.contains("termination=Quiescent"), "{text}");
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        &["run", "--config", "no-such-system"][..],
        &["loop", "--config", "1cl", "--iterations", "0"],
        &["frobnicate"],
        &["report", "--config", "1cl"],
        &["inject", "--config", "1cl"],
    ] {
        let out = hbtrace(dir.path(), args);
        assert_eq!(out.status.code(), Some(1), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    std::fs::write(dir.path().join("bad.toml"), "[[rule]]\ntarget = { process = 0 }\n").unwrap();
    let out = hbtrace(dir.path(), &["inject", "--config", "1cl", "--faults", "bad.toml"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn config_file_runs() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("sys.toml"),
        r#"name = "pair"

[[process]]
kind = "kv-server"
listen = "127.0.0.1:7000"
clients = 1

[[process]]
kind = "kv-client"
server = "127.0.0.1:7000"
commands = ["SET a 1", "GET a"]
"#,
    )
    .unwrap();
    let out = hbtrace(dir.path(), &["loop", "--config", "sys.toml", "--iterations", "20"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("runs/pair/index.tsv").exists());
}
