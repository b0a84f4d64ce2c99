use std::path::Path;
use std::process::{Command, Output};

fn v2g(dir: &Path, args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_v2g")).args(args).current_dir(dir).env("V2G_THREADS", "2").env("RUST_LOG", "warn").output().unwrap();
    if !out.status.success() {
        eprintln!("{}", String::from_utf8_lossy(&out.stderr));
    }
    out
}

#[test]
fn full_workflow() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("gen.json"), r#"{"chargers": 3, "horizon": 24, "step_duration": 1.0, "sojourn_min_steps": 3, "sojourn_max_steps": 10}"#).unwrap();
    std::fs::write(d.join("dt.json"), r#"{"context": 4, "d_model": 16, "layers": 1, "heads": 2, "ff_width": 32, "gnn_hidden": 8, "batch_size": 4, "steps": 10, "warmup_steps": 2, "max_timestep": 24}"#).unwrap();

    assert!(v2g(d, &["scenario", "gen", "--config", "gen.json", "--seed", "3", "--out", "one.json"]).status.success());
    assert!(v2g(d, &["scenario", "gen", "--config", "gen.json", "--seed", "50", "--count", "3", "--out", "suite"]).status.success());
    assert!(v2g(d, &["oracle", "solve", "--scenario", "one.json", "--out", "one.schedule.json"]).status.success());
    assert!(d.join("one.schedule.json").exists());
    for (p, s) in [("oracle", "100"), ("random", "200")] {
        let out = format!("{p}.bin");
        assert!(v2g(d, &["dataset", "gen", "--policy", p, "--n", "4", "--seed", s, "--config", "gen.json", "--out", &out]).status.success());
    }
    assert!(v2g(d, &["dataset", "merge", "oracle.bin", "random.bin", "--out", "mixed.bin"]).status.success());
    let info = v2g(d, &["dataset", "info", "mixed.bin"]);
    assert!(String::from_utf8_lossy(&info.stdout).contains("trajectories 8"));
    assert!(v2g(d, &["dt", "train", "--dataset", "mixed.bin", "--config", "dt.json", "--out", "m.ckpt"]).status.success());
    let eval = v2g(d, &["dt", "eval", "--checkpoint", "m.ckpt", "--scenarios", "suite", "--target-return", "auto"]);
    assert!(eval.status.success());
    assert_eq!(String::from_utf8_lossy(&eval.stdout).lines().count(), 4);

    let bench = v2g(d, &["bench", "run", "--policies", "cafap,bau,random,oracle,dt", "--scenarios", "suite", "--episodes", "3", "--out", "out", "--checkpoint", "m.ckpt"]);
    assert!(bench.status.success());
    assert_eq!(String::from_utf8_lossy(&bench.stdout).lines().count(), 6);
    assert!(d.join("out/dt/episode_2.csv").exists());
}

#[test]
fn errors_exit_nonzero() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert!(!v2g(d, &["bench", "run", "--policies", "dt", "--scenarios", ".", "--out", "o"]).status.success());
    assert!(!v2g(d, &["dataset", "gen", "--policy", "greedy", "--n", "1", "--out", "x.bin"]).status.success());
    assert!(!v2g(d, &["oracle", "solve", "--scenario", "missing.json", "--out", "s.json"]).status.success());
}
