use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn spores(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spores"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

const SMALL: &str = r#"
users = 6
devices_per_user = 3
model = "deterministic"
mu = 0.9
theta = [0.01, 0.001]
files = 2
chunk_kib = 1.0
file_mib = 0.01
"#;

#[test]
fn run_then_attack() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    let mut csvs = Vec::new();
    for out in ["a", "b"] {
        let o = spores(&["run", "--config", "small.toml", "--seed", "1", "--out", out], dir.path());
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let d = dir.path().join(out);
        for f in ["config.toml", "events.ndjson", "transfers.csv", "fig6.csv"] {
            assert!(d.join(f).exists(), "missing {f}");
        }
        csvs.push((
            fs::read(d.join("transfers.csv")).unwrap(),
            fs::read(d.join("fig6.csv")).unwrap(),
            fs::read(d.join("events.ndjson")).unwrap(),
        ));
    }
    assert_eq!(csvs[0], csvs[1]);
    let fig6 = String::from_utf8(csvs[0].1.clone()).unwrap();
    assert!(fig6.starts_with("# config_hash="));
    assert_eq!(fig6.lines().count(), 4);

    let o = spores(&["attack", "--events", "a/events.ndjson", "--max-adversaries", "4", "--cap", "20", "--out", "att"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let fig5 = fs::read_to_string(dir.path().join("att/fig5.csv")).unwrap();
    assert_eq!(fig5.lines().count(), 2 + 4);
}

#[test]
fn saved_config_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    assert!(spores(&["run", "--config", "small.toml", "--seed", "3", "--out", "a"], dir.path()).status.success());
    assert!(spores(&["run", "--config", "a/config.toml", "--out", "b"], dir.path()).status.success());
    let read = |d: &str| fs::read(dir.path().join(d).join("events.ndjson")).unwrap();
    assert_eq!(read("a"), read("b"));
}

#[test]
fn invalid_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.toml"), "mu = 2.0\n").unwrap();
    assert_eq!(spores(&["run", "--config", "bad.toml"], dir.path()).status.code(), Some(2));
    fs::write(dir.path().join("typo.toml"), "userz = 3\n").unwrap();
    assert_eq!(spores(&["run", "--config", "typo.toml"], dir.path()).status.code(), Some(2));
    assert_eq!(spores(&["run", "--theta", "0"], dir.path()).status.code(), Some(2));
}

#[test]
fn attack_on_empty_log_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("empty.ndjson"), "").unwrap();
    assert_eq!(spores(&["attack", "--events", "empty.ndjson"], dir.path()).status.code(), Some(3));
    assert_eq!(spores(&["attack", "--events", "missing.ndjson"], dir.path()).status.code(), Some(3));
}

#[test]
fn predictability_writes_fig4() {
    let dir = tempfile::tempdir().unwrap();
    let o = spores(
        &["predictability", "--models", "uniform,det", "--mu", "0.5", "--rounds", "200", "--users", "3", "--out", "p"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let fig4 = fs::read_to_string(dir.path().join("p/fig4.csv")).unwrap();
    let lines: Vec<&str> = fig4.lines().collect();
    assert_eq!(lines[1], "model,mu,score");
    assert!(lines[2].starts_with("uniform,0.5,"));
    assert!(lines[3].starts_with("deterministic,0.5,"));
}
