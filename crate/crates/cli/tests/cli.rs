use std::path::Path;
use std::process::{Command, Output};

use dqslam_core::simulator::{desk_easy, Trajectory};

fn dqslam(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dqslam"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> Output {
    let out = dqslam(args, cwd);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn short_spec(dir: &Path) {
    let mut spec = desk_easy();
    if let Trajectory::Orbit { frames, revolutions, .. } = &mut spec.trajectory {
        *revolutions *= 0.5;
        *frames = 60;
    }
    std::fs::write(dir.join("spec.json"), serde_json::to_string(&spec).unwrap()).unwrap();
}

#[test]
fn full_workflow_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    short_spec(d);
    std::fs::write(d.join("run.toml"), "T = 4\nmin_obs = 6\n").unwrap();
    ok(&["simulate", "--spec", "spec.json", "--out", "data", "--seed", "7"], d);
    ok(&["vocab", "--train", "data", "--k", "4", "--levels", "3", "--out", "vocab"], d);
    ok(&["vocab", "--train", "data", "--class", "0", "--k", "4", "--levels", "3", "--out", "class0.json"], d);
    assert_eq!(std::fs::read(d.join("class0.json")).unwrap(), std::fs::read(d.join("vocab/class_0.json")).unwrap());

    for run in ["a", "b"] {
        let out = format!("run_{run}");
        ok(
            &["run", "--dataset", "data", "--vocab-dir", "vocab", "--config", "run.toml", "--out", &out, "--ba-sync"],
            d,
        );
        let stdout = ok(&["eval", "--run", &out, "--dataset", "data", "--out", &format!("metrics_{run}")], d).stdout;
        assert!(String::from_utf8_lossy(&stdout).contains("da_accuracy"));
    }
    for file in ["run_{}/map.json", "run_{}/associations.csv", "run_{}/ba.csv", "run_{}/init.csv", "metrics_{}/da.csv"]
    {
        let a = std::fs::read(d.join(file.replace("{}", "a"))).unwrap();
        let b = std::fs::read(d.join(file.replace("{}", "b"))).unwrap();
        assert!(a == b, "{file} differs between identical runs");
    }
}

#[test]
fn bench_init_writes_table() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&["bench-init", "--trials", "5", "--counts", "5,10", "--out", "init.csv"], tmp.path());
    let text = std::fs::read_to_string(tmp.path().join("init.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "method,count,trials,successes,rate");
    assert_eq!(lines.len(), 5);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert_eq!(dqslam(&["--help"], d).status.code(), Some(0));
    assert_eq!(dqslam(&["frobnicate"], d).status.code(), Some(1));
    assert_eq!(dqslam(&["simulate", "--out", "x"], d).status.code(), Some(1));
    assert_eq!(dqslam(&["simulate", "--spec", "no-such-preset", "--out", "x"], d).status.code(), Some(1));
    assert_eq!(dqslam(&["bench-init", "--trials", "0", "--out", "x.csv"], d).status.code(), Some(1));
    assert_eq!(dqslam(&["run", "--dataset", "missing", "--vocab-dir", "v", "--out", "r"], d).status.code(), Some(2));
    std::fs::write(d.join("bad.toml"), "T = 0\n").unwrap();
    ok(&["simulate", "--spec", "desk-easy", "--out", "data"], d);
    std::fs::create_dir(d.join("vocab")).unwrap();
    let out = dqslam(&["run", "--dataset", "data", "--vocab-dir", "vocab", "--config", "bad.toml", "--out", "r"], d);
    assert_eq!(out.status.code(), Some(2));
}
