use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

fn shipped(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(name)
}

fn eaid(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eaid"))
        .args(args)
        .env_remove("EAID_SEED")
        .output()
        .unwrap()
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn run_writes_csv_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out.csv");
    let o = eaid(&[
        "run",
        "--scenario",
        path_str(&fixture("verify_partition.scn")),
        "--out",
        path_str(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert!(
        stdout.starts_with("eaid_n005: protocol=eaid entries=120"),
        "{stdout}"
    );
    let csv = std::fs::read_to_string(&out).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "entry_index,protocol,dispersal_latency_ms,retransmission_rounds,total_storage_bytes,per_node_max_bytes,per_entry_final_storage_bytes"
    );
    assert_eq!(lines.count(), 120);
}

#[test]
fn identical_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let run = |tag: &str| {
        let out = dir.path().join(format!("{tag}.csv"));
        let trace = dir.path().join(format!("{tag}.trace"));
        let o = eaid(&[
            "run",
            "--scenario",
            path_str(&shipped("kv_crash_recovery.scn")),
            "--out",
            path_str(&out),
            "--trace",
            path_str(&trace),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        (std::fs::read(out).unwrap(), std::fs::read(trace).unwrap())
    };
    let (a_csv, a_trace) = run("a");
    let (b_csv, b_trace) = run("b");
    assert_eq!(a_csv, b_csv);
    assert_eq!(a_trace, b_trace);
    assert!(!a_trace.is_empty());
}

#[test]
fn seed_flag_and_env_override_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = fixture("verify_partition.scn");
    let base = dir.path().join("base.csv");
    let flag = dir.path().join("flag.csv");
    let env = dir.path().join("env.csv");
    let args = |out: &Path| {
        vec![
            "run".to_string(),
            "--scenario".into(),
            path_str(&scenario).into(),
            "--out".into(),
            path_str(out).into(),
        ]
    };
    assert!(
        eaid(&args(&base).iter().map(String::as_str).collect::<Vec<_>>())
            .status
            .success()
    );
    let mut with_flag = args(&flag);
    with_flag.extend(["--seed".into(), "99".into()]);
    assert!(
        eaid(&with_flag.iter().map(String::as_str).collect::<Vec<_>>())
            .status
            .success()
    );
    let o = Command::new(env!("CARGO_BIN_EXE_eaid"))
        .args(args(&env))
        .env("EAID_SEED", "99")
        .output()
        .unwrap();
    assert!(o.status.success());
    let read = |p: &Path| std::fs::read(p).unwrap();
    assert_ne!(read(&base), read(&flag));
    assert_eq!(read(&flag), read(&env));
}

#[test]
fn malformed_file_exits_2_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out.csv");
    let o = eaid(&[
        "run",
        "--scenario",
        path_str(&fixture("malformed.scn")),
        "--out",
        path_str(&out),
    ]);
    assert_eq!(o.status.code(), Some(2));
    let stderr = String::from_utf8(o.stderr).unwrap();
    assert!(stderr.contains("malformed.scn: 3:16:"), "{stderr}");
    assert!(!out.exists());
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
}

#[test]
fn invariant_violation_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.scn");
    std::fs::write(&bad, "n_nodes = 4\nprotocol = \"eaid\"\n").unwrap();
    let out = dir.path().join("out.csv");
    let o = eaid(&["run", "--scenario", path_str(&bad), "--out", path_str(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8(o.stderr)
        .unwrap()
        .contains("invalid `n_nodes`"));
    assert!(!out.exists());
}

#[test]
fn verify_passes_on_a_partitioned_run() {
    let o = eaid(&[
        "verify",
        "--scenario",
        path_str(&fixture("verify_partition.scn")),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        String::from_utf8(o.stdout).unwrap(),
        "eaid_n005: no violations\n"
    );
}

#[test]
fn verify_catches_the_one_short_prune_rule() {
    let o = eaid(&[
        "verify",
        "--scenario",
        path_str(&fixture("verify_one_short.scn")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    let stderr = String::from_utf8(o.stderr).unwrap();
    assert!(stderr.contains("not reconstructable"), "{stderr}");
}

#[test]
fn verify_refuses_large_clusters() {
    let o = eaid(&[
        "verify",
        "--scenario",
        path_str(&fixture("verify_too_large.scn")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8(o.stderr)
        .unwrap()
        .contains("at most 7 nodes"));
}

#[test]
fn verify_replicated_log_scenario() {
    let o = eaid(&[
        "verify",
        "--scenario",
        path_str(&shipped("kv_crash_recovery.scn")),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn sweep_writes_sorted_per_run_files() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("sweep");
    let o = eaid(&[
        "sweep",
        "--scenario",
        path_str(&fixture("small_sweep.scn")),
        "--out-dir",
        path_str(&out_dir),
        "--jobs",
        "3",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let mut names: Vec<String> = std::fs::read_dir(&out_dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(
        names,
        [
            "eaid_n003.csv",
            "eaid_n005.csv",
            "proactive_n003.csv",
            "proactive_n005.csv",
            "summary.csv"
        ]
    );
    let summary = std::fs::read_to_string(out_dir.join("summary.csv")).unwrap();
    let keys: Vec<&str> = summary
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(
        keys,
        ["eaid_n003", "eaid_n005", "proactive_n003", "proactive_n005"]
    );
}

#[test]
fn latency_scenario_has_four_protocols_of_1000_entries() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("latency.csv");
    let o = eaid(&[
        "run",
        "--scenario",
        path_str(&shipped("latency_comparison.scn")),
        "--out",
        path_str(&out),
        "--jobs",
        "4",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(&out).unwrap();
    for p in ["eaid", "full_fallback", "proactive", "resharing"] {
        let n = csv
            .lines()
            .filter(|l| l.split(',').nth(1) == Some(p))
            .count();
        assert_eq!(n, 1000, "{p}");
    }
}

#[test]
fn shipped_scenarios_parse() {
    for name in [
        "two_node_partition.scn",
        "max_faults_partition.scn",
        "n99_partition_sweep.scn",
        "latency_comparison.scn",
        "kv_crash_recovery.scn",
    ] {
        eaid_cli::load(&shipped(name), None).unwrap_or_else(|e| panic!("{name}: {e}"));
    }
}
