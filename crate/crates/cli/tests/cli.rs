use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_claa-sim"));
    c.env_remove("CLAA_SIM_SEED");
    c
}

fn repo_file(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../..")
        .join(rel)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn claa-sim")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn dump_then_validate_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("m.json");
    assert_eq!(code(&run(&["dump-builtin-matrix", "--out", p(&m)])), 0);
    let o = run(&["validate-matrix", p(&m)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    assert!(o.stdout.is_empty());
}

#[test]
fn validate_reports_violations() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("m.json");
    run(&["dump-builtin-matrix", "--out", p(&m)]);
    let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&m).unwrap()).unwrap();
    let roles = v[0]["roles"].as_array_mut().unwrap();
    roles.retain(|r| r["role"] != "source");
    fs::write(&m, v.to_string()).unwrap();
    let o = run(&["validate-matrix", p(&m)]);
    assert_eq!(code(&o), 2);
    let out = String::from_utf8(o.stdout).unwrap();
    assert_eq!(out.lines().count(), 1, "{out}");
    assert!(out.starts_with("Node unavailable NE:"));
}

#[test]
fn run_writes_versioned_csv_and_trace() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("r.csv");
    let trace = dir.path().join("t.tsv");
    let scenario = repo_file("scenarios/chain4.json");
    let o = run(&[
        "run",
        "--scenario",
        p(&scenario),
        "--out",
        p(&csv),
        "--trace-claa",
        p(&trace),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let body = fs::read_to_string(&csv).unwrap();
    let mut lines = body.lines();
    assert_eq!(lines.next(), Some("#claa-sim,v1"));
    assert_eq!(lines.next(), Some("scope,metric,value"));
    assert!(body.contains("\nglobal,application_goodput,"));
    assert!(body.contains("\nnode:4,app.messages_received,"));
    assert!(String::from_utf8(o.stdout)
        .unwrap()
        .contains("application_goodput"));
    // the example runs with every CLAA off, so the bus only sees producers
    let t = fs::read_to_string(&trace).unwrap();
    assert!(t.lines().all(|l| l.split('\t').count() == 5));
}

#[test]
fn identical_invocations_identical_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = repo_file("scenarios/chain4.json");
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    run(&["run", "--scenario", p(&scenario), "--out", p(&a)]);
    run(&["run", "--scenario", p(&scenario), "--out", p(&b)]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let c = dir.path().join("c.csv");
    let o = bin()
        .env("CLAA_SIM_SEED", "7")
        .args(["run", "--scenario", p(&scenario), "--out", p(&c)])
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    assert_ne!(fs::read(&a).unwrap(), fs::read(&c).unwrap());
}

#[test]
fn compare_example_prints_table() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("c.csv");
    let o = run(&[
        "compare",
        "--scenario",
        p(&repo_file("scenarios/chain4.json")),
        "--flags",
        p(&repo_file("scenarios/baseline_vs_all.json")),
        "--out",
        p(&csv),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let table = String::from_utf8(o.stdout).unwrap();
    let header = table.lines().next().unwrap();
    assert!(header.contains("baseline") && header.contains("all_on"));
    let row = |name: &str| -> Vec<String> {
        table
            .lines()
            .find(|l| l.split_whitespace().next() == Some(name))
            .unwrap_or_else(|| panic!("{name} missing"))
            .split_whitespace()
            .map(str::to_string)
            .collect()
    };
    assert_eq!(row("checksum_operations_at_transport")[2], "0");
    let body = fs::read_to_string(&csv).unwrap();
    assert!(
        body.starts_with("#claa-sim,v1\nscope,metric,baseline,all_on,delta_all_on,rel_all_on\n")
    );
}

#[test]
fn checksum_values() {
    let o = run(&["checksum", "--alg", "crc32c", "--hex", "313233343536373839"]);
    assert_eq!(String::from_utf8(o.stdout).unwrap(), "e3069283\n");
    let o = run(&[
        "checksum",
        "--alg",
        "adler32",
        "--hex",
        "57696b697065646961",
    ]);
    assert_eq!(String::from_utf8(o.stdout).unwrap(), "11e60398\n");
    assert_eq!(
        code(&run(&["checksum", "--alg", "crc32c", "--hex", "zz"])),
        64
    );
}

#[test]
fn checksum_dist_csv() {
    let o = run(&[
        "checksum-dist",
        "--alg",
        "adler32",
        "--len",
        "8",
        "--samples",
        "1000",
    ]);
    assert_eq!(code(&o), 0);
    let out = String::from_utf8(o.stdout).unwrap();
    assert_eq!(out.lines().next(), Some("bucket,count"));
    assert_eq!(out.lines().count(), 257);
    let total: u64 = out
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse::<u64>().unwrap())
        .sum();
    assert_eq!(total, 1000);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o.csv");
    assert_eq!(code(&run(&["frobnicate"])), 64);
    assert_eq!(code(&run(&["run", "--scenario"])), 64);
    assert_eq!(code(&run(&["run", "--bogus", "x", "--out", "y"])), 64);
    assert_eq!(code(&run(&["--help"])), 0);
    let missing = dir.path().join("nope.json");
    assert_eq!(
        code(&run(&["run", "--scenario", p(&missing), "--out", p(&out)])),
        66
    );
    assert_eq!(code(&run(&["validate-matrix", p(&missing)])), 66);
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"duration": 10, "nodes": [1], "traffic": [{"src": 1, "dst": 5, "size": 50, "rate": 1}]}"#).unwrap();
    assert_eq!(
        code(&run(&["run", "--scenario", p(&bad), "--out", p(&out)])),
        65
    );
    fs::write(&bad, "not json").unwrap();
    assert_eq!(
        code(&run(&["run", "--scenario", p(&bad), "--out", p(&out)])),
        65
    );
    assert!(!out.exists());
}
