use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn kaclab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kaclab")).args(args).output().expect("binary runs")
}

fn out_arg(dir: &Path) -> String {
    dir.to_str().unwrap().to_string()
}

#[test]
fn same_seed_gives_identical_files() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        let o = kaclab(&["newton-cooling", "--k", "200", "--seed", "7", "--out", &out_arg(d)]);
        assert!(o.status.code().is_some_and(|c| c == 0 || c == 1), "{o:?}");
    }
    for f in ["energies.csv", "oracle.csv", "config.txt", "summary.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    let energies = fs::read_to_string(a.join("energies.csv")).unwrap();
    assert!(energies.starts_with("t,e_minus,e_S,e_plus,stderr_e_minus,stderr_e_S,stderr_e_plus\n"));
    assert_eq!(energies.lines().count(), 6);
}

#[test]
fn worker_count_does_not_change_results() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    kaclab(&["thermostat-relaxation", "--k", "300", "--workers", "1", "--out", &out_arg(&a)]);
    kaclab(&["thermostat-relaxation", "--k", "300", "--workers", "3", "--out", &out_arg(&b)]);
    assert_eq!(fs::read(a.join("energies.csv")).unwrap(), fs::read(b.join("energies.csv")).unwrap());
}

#[test]
fn different_seeds_differ() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    kaclab(&["thermostat-relaxation", "--k", "50", "--seed", "1", "--out", &out_arg(&a)]);
    kaclab(&["thermostat-relaxation", "--k", "50", "--seed", "2", "--out", &out_arg(&b)]);
    assert_ne!(fs::read(a.join("energies.csv")).unwrap(), fs::read(b.join("energies.csv")).unwrap());
}

#[test]
fn config_file_then_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.cfg");
    fs::write(&cfg, "# smaller run\nk = 100\nmu=2\n").unwrap();
    let out = tmp.path().join("o");
    // the flag precedes the file but still wins
    let o = kaclab(&["thermostat-relaxation", "--mu", "0.5", "--config", cfg.to_str().unwrap(), "--out", &out_arg(&out)]);
    assert!(o.status.code().is_some());
    let echoed = fs::read_to_string(out.join("config.txt")).unwrap();
    assert!(echoed.contains("\nk=100\n"));
    assert!(echoed.contains("\nmu=0.5\n"));
    assert!(echoed.contains("\nseed=1\n"));
}

#[test]
fn print_config_lists_defaults() {
    let o = kaclab(&["moment-closure", "--print-config"]);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("horizon=50"));
    assert!(text.contains("workers=0"));
}

#[test]
fn errors_exit_with_two() {
    assert_eq!(kaclab(&["no-such-experiment"]).status.code(), Some(2));
    assert_eq!(kaclab(&["newton-cooling", "--bogus", "1"]).status.code(), Some(2));
    assert_eq!(kaclab(&["newton-cooling", "--k"]).status.code(), Some(2));
    let tmp = tempfile::tempdir().unwrap();
    let o = kaclab(&["newton-cooling", "--n", "1", "--out", &out_arg(tmp.path())]);
    assert_eq!(o.status.code(), Some(2));
    let o = kaclab(&["newton-cooling", "--topology", "two_thermostats", "--out", &out_arg(tmp.path())]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn failing_gate_exits_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    // a zero tolerance on a fitted rate cannot be met by a finite ensemble
    let o = kaclab(&["thermostat-relaxation", "--k", "200", "--rate_tolerance", "0", "--out", &out_arg(tmp.path())]);
    assert_eq!(o.status.code(), Some(1));
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["pass"], false);
    assert_eq!(summary["name"], "thermostat-relaxation");
    let m = &summary["metrics"][0];
    for key in ["name", "value", "expected", "tolerance"] {
        assert!(m.get(key).is_some(), "metric lacks {key}");
    }
}

#[test]
fn list_names_all_experiments() {
    let o = kaclab(&["list"]);
    assert_eq!(String::from_utf8(o.stdout).unwrap().lines().count(), 9);
}
