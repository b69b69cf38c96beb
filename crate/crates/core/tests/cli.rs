//! End-to-end tests of the `nocorr` binary at tiny scale.

use std::path::Path;
use std::process::{Command, Output};

use nocorr::dataset::read_dataset;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_nocorr"));
    c.env("NO_COLOR", "1");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn nocorr")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn gen_tiny(dir: &Path) {
    let out = run(&[
        "gen", "--pde", "lse1d", "--law", "norm", "--n-train", "8", "--n-test", "4", "--res",
        "32", "--seed", "0", "--out", dir.to_str().unwrap(),
    ]);
    assert_ok(&out);
}

const TINY_TRAIN_CFG: &str =
    "pde=lse1d\nlaw=norm\nres=32\nmethod=adaptive\nepochs=2\nbatch_size=4\n";

#[test]
fn gen_writes_readable_datasets_with_small_residual() {
    let dir = tempfile::tempdir().unwrap();
    gen_tiny(dir.path());
    let train = read_dataset(&dir.path().join("train.nods")).unwrap();
    assert_eq!(train.len(), 8);
    let test = read_dataset(&dir.path().join("test.nods")).unwrap();
    assert_eq!(test.len(), 4);
    for (t, &c0) in train.targets.iter().zip(&train.cons_targets) {
        let err = (train.law.quantity(t) - c0).abs() / c0.abs().max(1.0);
        assert!(err < 1e-8, "residual {err}");
    }
    assert!(dir.path().join("resolved.cfg").exists());
}

#[test]
fn gen_is_deterministic_and_reproducible_from_resolved_cfg() {
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    gen_tiny(d1.path());
    gen_tiny(d2.path());
    let a = std::fs::read(d1.path().join("train.nods")).unwrap();
    let b = std::fs::read(d2.path().join("train.nods")).unwrap();
    assert_eq!(a, b);

    // Rerun purely from the echoed config.
    let d3 = tempfile::tempdir().unwrap();
    let out = run(&[
        "gen",
        "--config",
        d1.path().join("resolved.cfg").to_str().unwrap(),
        "--out",
        d3.path().to_str().unwrap(),
    ]);
    assert_ok(&out);
    let c = std::fs::read(d3.path().join("train.nods")).unwrap();
    assert_eq!(a, c);
}

#[test]
fn gen_rejects_invalid_pde_law_pair_listing_valid_ones() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "gen", "--pde", "cac2d", "--law", "norm", "--out", dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("cac2d:mass"), "stderr: {err}");
}

#[test]
fn train_eval_round_trip_with_conserving_rollout() {
    let data = tempfile::tempdir().unwrap();
    gen_tiny(data.path());
    let rundir = tempfile::tempdir().unwrap();
    let cfg = rundir.path().join("run.cfg");
    std::fs::write(&cfg, TINY_TRAIN_CFG).unwrap();

    let out = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        data.path().join("train.nods").to_str().unwrap(),
        "--out",
        rundir.path().to_str().unwrap(),
    ]);
    assert_ok(&out);
    let loss = std::fs::read_to_string(rundir.path().join("loss.csv")).unwrap();
    assert!(loss.starts_with("epoch,loss\n"));
    assert_eq!(loss.lines().count(), 3); // header + 2 epochs

    let evaldir = tempfile::tempdir().unwrap();
    let out = run(&[
        "eval",
        "--checkpoint",
        rundir.path().join("model.nopc").to_str().unwrap(),
        "--data",
        data.path().join("test.nods").to_str().unwrap(),
        "--steps",
        "3",
        "--out",
        evaldir.path().to_str().unwrap(),
    ]);
    assert_ok(&out);
    let eval = std::fs::read_to_string(evaldir.path().join("eval.csv")).unwrap();
    assert!(eval.starts_with(
        "method,pde,law,seed,rel_l2_mean,rel_l2_std,cons_err_abs,cons_err_rel,wall_s\n"
    ));
    let rollout = std::fs::read_to_string(evaldir.path().join("rollout.csv")).unwrap();
    assert_eq!(rollout.lines().count(), 4); // header + 3 steps
    // The adaptive corrector conserves at every rollout step.
    for line in rollout.lines().skip(1) {
        let cons: f64 = line.split(',').nth(2).unwrap().parse().unwrap();
        assert!(cons < 1e-9, "rollout cons err {cons}");
    }
}

#[test]
fn train_reruns_are_bitwise_identical_from_resolved_cfg() {
    let data = tempfile::tempdir().unwrap();
    gen_tiny(data.path());
    let r1 = tempfile::tempdir().unwrap();
    let cfg = data.path().join("run.cfg");
    std::fs::write(&cfg, TINY_TRAIN_CFG).unwrap();
    let train_data = data.path().join("train.nods");
    let out = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        train_data.to_str().unwrap(),
        "--out",
        r1.path().to_str().unwrap(),
    ]);
    assert_ok(&out);

    let r2 = tempfile::tempdir().unwrap();
    let out = run(&[
        "train",
        "--config",
        r1.path().join("resolved.cfg").to_str().unwrap(),
        "--data",
        train_data.to_str().unwrap(),
        "--out",
        r2.path().to_str().unwrap(),
    ]);
    assert_ok(&out);
    let a = std::fs::read(r1.path().join("model.nopc")).unwrap();
    let b = std::fs::read(r2.path().join("model.nopc")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn train_rejects_law_mismatch_with_data_exit_code() {
    let data = tempfile::tempdir().unwrap();
    gen_tiny(data.path());
    let rundir = tempfile::tempdir().unwrap();
    let cfg = rundir.path().join("run.cfg");
    std::fs::write(&cfg, "pde=te2d\nlaw=mass\nepochs=1\n").unwrap();
    let out = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        data.path().join("train.nods").to_str().unwrap(),
        "--out",
        rundir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn eval_rejects_incompatible_checkpoint() {
    let data = tempfile::tempdir().unwrap();
    gen_tiny(data.path());
    let rundir = tempfile::tempdir().unwrap();
    let cfg = rundir.path().join("run.cfg");
    std::fs::write(&cfg, TINY_TRAIN_CFG).unwrap();
    let out = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        data.path().join("train.nods").to_str().unwrap(),
        "--out",
        rundir.path().to_str().unwrap(),
    ]);
    assert_ok(&out);

    // Evaluate under a config asking for a wider model.
    let wide = rundir.path().join("wide.cfg");
    std::fs::write(&wide, format!("{TINY_TRAIN_CFG}width=64\n")).unwrap();
    let evaldir = tempfile::tempdir().unwrap();
    let out = run(&[
        "eval",
        "--checkpoint",
        rundir.path().join("model.nopc").to_str().unwrap(),
        "--config",
        wide.to_str().unwrap(),
        "--data",
        data.path().join("test.nods").to_str().unwrap(),
        "--steps",
        "1",
        "--out",
        evaldir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("incompatible checkpoint"), "stderr: {err}");
}

#[test]
fn bench_emits_five_sorted_method_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "bench", "--suite", "te-mass", "--seeds", "2", "--n-train", "6", "--n-test", "3",
        "--epochs", "1", "--res", "16", "--steps", "2", "--out", dir.path().to_str().unwrap(),
    ]);
    assert_ok(&out);
    let summary = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 6); // header + 5 methods
    let bench = std::fs::read_to_string(dir.path().join("bench.csv")).unwrap();
    assert_eq!(bench.lines().count(), 11); // header + 5 methods x 2 seeds
    let keys: Vec<(String, u64)> = bench
        .lines()
        .skip(1)
        .map(|l| {
            let mut it = l.split(',');
            let m = it.next().unwrap().to_string();
            let seed: u64 = it.nth(2).unwrap().parse().unwrap();
            (m, seed)
        })
        .collect();
    let mut sorted = keys.clone();
    sorted.sort();
    assert_eq!(keys, sorted, "bench.csv rows are not sorted by method, seed");
}

#[test]
fn bench_rejects_unknown_suite() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "bench", "--suite", "swe-mass", "--out", dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn sweep_writes_one_row_per_lambda() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("sweep.cfg");
    std::fs::write(
        &cfg,
        "pde=lse1d\nlaw=norm\nres=32\nn_train=6\nn_test=3\nepochs=1\nbatch_size=4\n",
    )
    .unwrap();
    let out = run(&[
        "sweep",
        "--config",
        cfg.to_str().unwrap(),
        "--lambdas",
        "0,1e-4",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_ok(&out);
    let csv = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert!(csv.starts_with("lambda,rel_l2,cons_err\n"));
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "colour=blue\n").unwrap();
    let out = run(&[
        "sweep", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}
