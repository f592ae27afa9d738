use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use aegisnet_core::crypto::vectors::{verify_record, VectorRecord};

fn aegisnet(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aegisnet"))
        .args(args)
        .current_dir(dir)
        .env_remove("AEGISNET_SEED")
        .output()
        .expect("spawn aegisnet")
}

fn small_config(dir: &Path) {
    fs::write(
        dir.join("s.cfg"),
        "[network]\nnodes = 30\n\n[run]\nrounds = 6\n\n[attack]\nkind = replay\ntarget = any\nschedule = 2..\nprobability = 0.5\n",
    )
    .unwrap();
}

#[test]
fn run_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    small_config(dir.path());
    for name in ["a", "b"] {
        let out = aegisnet(
            dir.path(),
            &[
                "run", "--config", "s.cfg", "--seed", "42",
                "--out", &format!("{name}/m.csv"),
                "--trace", &format!("{name}/t.txt"),
                "--auth-log", &format!("{name}/auth.log"),
                "--dump-topology", &format!("{name}/topo.txt"),
            ],
        );
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for f in ["m.csv", "t.txt", "auth.log", "topo.txt"] {
        let a = fs::read(dir.path().join("a").join(f)).unwrap();
        let b = fs::read(dir.path().join("b").join(f)).unwrap();
        assert!(!a.is_empty(), "{f} empty");
        assert_eq!(a, b, "{f} differs");
    }
    let csv = fs::read_to_string(dir.path().join("a/m.csv")).unwrap();
    assert!(csv.starts_with("round,alive,total_energy_j,sent,delivered,pdr,mean_delay_ms,bytes_tx,attack_attempts,attack_accepted\n"));
    assert_eq!(csv.lines().count(), 1 + 6 + 1);
    assert!(csv.lines().last().unwrap().starts_with("-1,"));
}

#[test]
fn env_seed_is_last_resort() {
    let dir = tempfile::tempdir().unwrap();
    small_config(dir.path());
    let with_env = |seed: &str, out: &str| {
        Command::new(env!("CARGO_BIN_EXE_aegisnet"))
            .args(["run", "--config", "s.cfg", "--out", out])
            .current_dir(dir.path())
            .env("AEGISNET_SEED", seed)
            .output()
            .unwrap()
    };
    assert!(with_env("42", "env.csv").status.success());
    assert!(aegisnet(dir.path(), &["run", "--config", "s.cfg", "--seed", "42", "--out", "cli.csv"]).status.success());
    assert_eq!(fs::read(dir.path().join("env.csv")).unwrap(), fs::read(dir.path().join("cli.csv")).unwrap());
    assert_eq!(with_env("forty", "x.csv").status.code(), Some(1));
}

#[test]
fn seed_sweep_writes_each_run_and_aggregate() {
    let dir = tempfile::tempdir().unwrap();
    small_config(dir.path());
    let out = aegisnet(dir.path(), &["run", "--config", "s.cfg", "--seeds", "1..10", "--out", "sweep/m.csv"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for s in 1..=10 {
        assert!(dir.path().join(format!("sweep/m_seed{s}.csv")).exists());
    }
    let agg = fs::read_to_string(dir.path().join("sweep/m_aggregate.csv")).unwrap();
    assert_eq!(agg.lines().count(), 1 + 6);
    assert!(agg.lines().nth(1).unwrap().starts_with("0,10,"));
    let solo = aegisnet(dir.path(), &["run", "--config", "s.cfg", "--seed", "3", "--out", "solo.csv"]);
    assert!(solo.status.success());
    assert_eq!(
        fs::read(dir.path().join("solo.csv")).unwrap(),
        fs::read(dir.path().join("sweep/m_seed3.csv")).unwrap()
    );
}

#[test]
fn config_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = aegisnet(dir.path(), &["run", "--config", "missing.cfg"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.cfg"));

    fs::write(dir.path().join("bad.cfg"), "[network]\nnodez = 3\n").unwrap();
    let out = aegisnet(dir.path(), &["run", "--config", "bad.cfg"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nodez"));

    fs::write(dir.path().join("zero.cfg"), "[network]\nnodes = 0\n").unwrap();
    let out = aegisnet(dir.path(), &["run", "--config", "zero.cfg"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nodes"));

    assert_eq!(aegisnet(dir.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(aegisnet(dir.path(), &["run", "--seeds", "9..2"]).status.code(), Some(1));
}

#[test]
fn unwritable_output_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    small_config(dir.path());
    fs::write(dir.path().join("blocker"), "").unwrap();
    let out = aegisnet(dir.path(), &["run", "--config", "s.cfg", "--out", "blocker/m.csv"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn vectors_file_replays_and_is_stable() {
    let dir = tempfile::tempdir().unwrap();
    assert!(aegisnet(dir.path(), &["vectors", "--out", "v1.tsv"]).status.success());
    assert!(aegisnet(dir.path(), &["vectors", "--out", "v2.tsv"]).status.success());
    let text = fs::read_to_string(dir.path().join("v1.tsv")).unwrap();
    assert_eq!(text.as_bytes(), fs::read(dir.path().join("v2.tsv")).unwrap());
    // HELLOWORLD over three rails
    assert!(text.contains("rail_fence_encode\t48454c4c4f574f524c44,03,00\t484f4c454c5752444c4f"));
    for line in text.lines() {
        let rec = VectorRecord::parse(line).unwrap();
        assert!(verify_record(&rec).unwrap(), "{line}");
    }
    for op in ["kdf", "keystream", "mac", "ec_"] {
        assert!(text.lines().any(|l| l.starts_with(op)), "{op} missing");
    }
}

#[test]
fn keys_redacts_unless_revealed() {
    let dir = tempfile::tempdir().unwrap();
    small_config(dir.path());
    let hidden = aegisnet(dir.path(), &["keys", "--config", "s.cfg", "--node", "0", "--rounds", "2"]);
    assert!(hidden.status.success());
    let hidden = String::from_utf8(hidden.stdout).unwrap();
    assert!(hidden.contains("key=<redacted>"));
    let shown = aegisnet(dir.path(), &["keys", "--config", "s.cfg", "--node", "0", "--rounds", "2", "--reveal"]);
    let shown = String::from_utf8(shown.stdout).unwrap();
    assert!(!shown.contains("<redacted>"));
    assert_eq!(hidden.lines().count(), shown.lines().count());
    assert_eq!(aegisnet(dir.path(), &["keys", "--config", "s.cfg", "--node", "999"]).status.code(), Some(1));
}
