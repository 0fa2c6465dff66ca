use std::path::Path;
use std::process::{Command, Output};

fn coalvar(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_coalvar"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = coalvar(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn run_writes_every_output() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(&["run", "--start", "15:00", "--duration-s", "600", "--out", s(dir.path())]);
    assert!(stdout.contains("lower_violation_min="));
    for f in ["voltages.csv", "ratios.csv", "events.csv", "metrics.txt"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let header = std::fs::read_to_string(dir.path().join("ratios.csv")).unwrap();
    assert!(header.starts_with("time_s,inv_id,u,role,coalition_id"));
}

#[test]
fn exported_profiles_reproduce_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let prof = dir.path().join("profiles");
    ok(&["gen-profiles", "--out", s(&prof)]);
    let scenario = dir.path().join("s.toml");
    std::fs::write(&scenario, "[profiles]\ncsv_dir = \"profiles\"\n").unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["run", "--start", "13:00", "--duration-s", "300", "--out", s(&a)]);
    ok(&[
        "run",
        "--scenario",
        s(&scenario),
        "--start",
        "13:00",
        "--duration-s",
        "300",
        "--out",
        s(&b),
    ]);
    let read = |d: &Path| std::fs::read(d.join("voltages.csv")).unwrap();
    assert_eq!(read(&a), read(&b));
}

#[test]
fn gen_network_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let net = dir.path().join("f.net");
    let stdout = ok(&["gen-network", "--out", s(&net)]);
    assert!(stdout.starts_with("103 buses, 32 inverters"));
    let scenario = dir.path().join("s.toml");
    std::fs::write(&scenario, "[network]\nfile = \"f.net\"\n").unwrap();
    ok(&[
        "run",
        "--scenario",
        s(&scenario),
        "--duration-s",
        "60",
        "--out",
        s(&dir.path().join("o")),
    ]);
}

#[test]
fn baseline_and_oracle_report() {
    let zones = ok(&["baseline", "--at", "15:15"]);
    assert!(zones.starts_with("epsilon="));
    let table = ok(&["oracle", "--at", "15:00", "--ticks", "20"]);
    assert!(table.lines().count() >= 2);
}

#[test]
fn bad_input_fails_cleanly() {
    let out = coalvar(&["run", "--scenario", "/nonexistent.toml"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nonexistent"));
    assert!(!coalvar(&["run", "--start", "25:99"]).status.success());
}
