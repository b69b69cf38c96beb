//! Command-line entry point: dataset generation, training, evaluation,
//! benchmarking, and penalty-weight sweeps, all driven by plain-text
//! configs and emitting CSV artifacts.
//!
//! Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use nocorr::checkpoint::{load_checkpoint, save_checkpoint};
use nocorr::config::{LawChoice, MethodChoice, RunConfig};
use nocorr::dataset::{read_dataset, write_dataset, DatasetSplit};
use nocorr::models::{init_head_params, init_model_params};
use nocorr::pdegen::generate_split;
use nocorr::tape::ParamStore;
use nocorr::training::{evaluate, lambda_sweep, train, EvalReport, Method};
use nocorr::{Error, Result};

#[derive(Parser)]
#[command(
    name = "nocorr",
    version,
    about = "Conservation-corrected neural operators at desk scale"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate train/test datasets with the reference solvers.
    Gen(GenArgs),
    /// Train a model from a config and a dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint: one-step metrics plus a rollout.
    Eval(EvalArgs),
    /// Train and compare all methods on one benchmark suite.
    Bench(BenchArgs),
    /// Sweep the soft-penalty weight.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Start from a previously written resolved config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    pde: Option<String>,
    #[arg(long)]
    law: Option<String>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long)]
    res: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Use a 10x finer solver step than the desk default.
    #[arg(long)]
    paper_dt: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Training dataset file (the matching `<file>.meta` sidecar is read too).
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Config describing the checkpointed model; defaults to
    /// `resolved.cfg` next to the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Rollout length in horizons.
    #[arg(long, default_value_t = 10)]
    steps: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    /// One of: te-mass, te-norm, cac-mass, lse-norm, nls-norm.
    #[arg(long)]
    suite: String,
    /// Number of training replicas per method.
    #[arg(long, default_value_t = 3)]
    seeds: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    res: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    /// Dataset generation seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    /// Comma-separated penalty weights; defaults to the standard grid
    /// for the config's law.
    #[arg(long)]
    lambdas: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.cmd {
        Cmd::Gen(a) => cmd_gen(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Bench(a) => cmd_bench(a),
        Cmd::Sweep(a) => cmd_sweep(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{} {e}", paint("31", "error:"));
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::UnknownParam(_) => 2,
        Error::Data(_) | Error::Io(_) => 3,
        _ => 4,
    }
}

fn paint(code: &str, s: &str) -> String {
    if std::env::var_os("NO_COLOR").is_some() {
        s.to_string()
    } else {
        format!("\x1b[{code}m{s}\x1b[0m")
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text)?;
    Ok(())
}

/// Max relative residual of the stored conservation targets against the
/// target fields: the generator's own postcondition, re-checked at rest.
fn target_residual(split: &DatasetSplit) -> f64 {
    split
        .targets
        .iter()
        .zip(&split.cons_targets)
        .map(|(t, &c0)| (split.law.quantity(t) - c0).abs() / c0.abs().max(1.0))
        .fold(0.0, f64::max)
}

/// Test splits reuse the config seed with a fixed offset so train and
/// test never share per-sample RNG streams.
fn test_seed(seed: u64) -> u64 {
    seed.wrapping_add(0x5eed_0001)
}

fn cmd_gen(a: GenArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(p) = &a.pde {
        cfg.apply("pde", p)?;
    }
    if let Some(l) = &a.law {
        cfg.apply("law", l)?;
    }
    if let Some(n) = a.n_train {
        cfg.n_train = n;
    }
    if let Some(n) = a.n_test {
        cfg.n_test = n;
    }
    if let Some(r) = a.res {
        cfg.res = Some(r);
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if a.paper_dt {
        cfg.paper_dt = true;
    }
    cfg.out = Some(a.out.display().to_string());

    let law = cfg.conservation_law()?;
    let spec = cfg.pde_spec();
    let train_split = generate_split(&spec, &law, cfg.n_train)?;
    let mut tspec = spec.clone();
    tspec.seed = test_seed(spec.seed);
    let test_split = generate_split(&tspec, &law, cfg.n_test)?;

    std::fs::create_dir_all(&a.out)?;
    write_dataset(&train_split, &a.out.join("train.nods"))?;
    write_dataset(&test_split, &a.out.join("test.nods"))?;
    write_text(&a.out.join("resolved.cfg"), &cfg.render())?;

    let r_train = target_residual(&train_split);
    let r_test = target_residual(&test_split);
    println!(
        "gen {} {}: {} train + {} test samples at res {}",
        cfg.pde.name(),
        cfg.law.name(),
        cfg.n_train,
        cfg.n_test,
        cfg.resolution()
    );
    println!("max conservation residual: train {r_train:.3e}, test {r_test:.3e}");
    Ok(())
}

/// The dataset must carry the same benchmark and law the config asks for.
fn check_data_matches(cfg: &RunConfig, split: &DatasetSplit) -> Result<()> {
    let law = cfg.conservation_law()?;
    if split.spec.pde != cfg.pde {
        return Err(Error::Data(format!(
            "dataset holds pde `{}` but config asks for `{}`",
            split.spec.pde.name(),
            cfg.pde.name()
        )));
    }
    if split.law.kind != law.kind || split.law.channels != law.channels {
        return Err(Error::Data(format!(
            "dataset law does not match config law `{}`",
            cfg.law.name()
        )));
    }
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&a.config)?;
    cfg.data = Some(a.data.display().to_string());
    cfg.out = Some(a.out.display().to_string());

    let split = read_dataset(&a.data)?;
    check_data_matches(&cfg, &split)?;
    let mcfg = cfg.model_config();
    let tcfg = cfg.train_config();
    let head = cfg.head()?;
    let head_opt = tcfg.method.needs_head().then_some(&head);

    let outcome = train(&mcfg, head_opt, &split, &tcfg)?;

    std::fs::create_dir_all(&a.out)?;
    save_checkpoint(&outcome.store, &a.out.join("model.nopc"))?;
    let mut csv = String::from("epoch,loss\n");
    for (e, loss) in outcome.loss_curve.iter().enumerate() {
        csv.push_str(&format!("{e},{loss}\n"));
    }
    write_text(&a.out.join("loss.csv"), &csv)?;
    write_text(&a.out.join("resolved.cfg"), &cfg.render())?;

    let last = outcome.loss_curve.last().copied().unwrap_or(f64::NAN);
    println!(
        "train {} on {} samples ({} skipped): final loss {last:.6e}",
        tcfg.method.name(),
        split.len(),
        outcome.skipped
    );
    Ok(())
}

/// A checkpoint is compatible when it holds exactly the parameters a
/// fresh initialization from the config would register.
fn check_checkpoint_matches(cfg: &RunConfig, store: &ParamStore, split: &DatasetSplit) -> Result<()> {
    let mcfg = cfg.model_config();
    let tcfg = cfg.train_config();
    let mut expected = ParamStore::new();
    init_model_params(&mcfg, &mut expected)?;
    if tcfg.method.needs_head() {
        let head = cfg.head()?;
        let grid_dims = split
            .inputs
            .first()
            .map(|f| f.dims().to_vec())
            .unwrap_or_default();
        init_head_params(&head, &mcfg, &grid_dims, &mut expected)?;
    }
    for name in expected.sorted_names() {
        let want = expected.get(&name).unwrap();
        let got = store.get(&name).ok_or_else(|| {
            Error::Data(format!("incompatible checkpoint: missing `{name}`"))
        })?;
        if got.dims != want.dims {
            return Err(Error::Data(format!(
                "incompatible checkpoint: `{name}` has shape {:?}, expected {:?}",
                got.dims, want.dims
            )));
        }
    }
    Ok(())
}

const BENCH_HEADER: &str =
    "method,pde,law,seed,rel_l2_mean,rel_l2_std,cons_err_abs,cons_err_rel,wall_s\n";

fn bench_row(method: &str, cfg: &RunConfig, seed: u64, r: &EvalReport) -> String {
    let rel = r
        .cons_err_rel
        .map(|v| v.to_string())
        .unwrap_or_else(|| "nan".into());
    format!(
        "{method},{},{},{seed},{},{},{},{rel},{}\n",
        cfg.pde.name(),
        cfg.law.name(),
        r.rel_l2_mean,
        r.rel_l2_std,
        r.cons_err_abs,
        r.wall_s
    )
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let cfg_path = match &a.config {
        Some(p) => p.clone(),
        None => a
            .checkpoint
            .parent()
            .unwrap_or(Path::new("."))
            .join("resolved.cfg"),
    };
    let mut cfg = RunConfig::load(&cfg_path)?;
    cfg.data = Some(a.data.display().to_string());
    cfg.out = Some(a.out.display().to_string());
    cfg.steps = a.steps;

    let split = read_dataset(&a.data)?;
    check_data_matches(&cfg, &split)?;
    let store = load_checkpoint(&a.checkpoint)?;
    check_checkpoint_matches(&cfg, &store, &split)?;

    let mcfg = cfg.model_config();
    let tcfg = cfg.train_config();
    let head = cfg.head()?;
    let head_opt = tcfg.method.needs_head().then_some(&head);
    let report = evaluate(&mcfg, head_opt, tcfg.method.clone(), &store, &split, a.steps)?;

    std::fs::create_dir_all(&a.out)?;
    let mut csv = String::from(BENCH_HEADER);
    csv.push_str(&bench_row(
        &tcfg.method.name(),
        &cfg,
        cfg.train_seed,
        &report,
    ));
    write_text(&a.out.join("eval.csv"), &csv)?;

    let mut roll = String::from("step,rel_l2,cons_err\n");
    for (i, (rel, cons)) in report
        .rollout_rel_l2
        .iter()
        .zip(&report.rollout_cons_err)
        .enumerate()
    {
        roll.push_str(&format!("{},{rel},{cons}\n", i + 1));
    }
    write_text(&a.out.join("rollout.csv"), &roll)?;
    write_text(&a.out.join("resolved.cfg"), &cfg.render())?;

    println!(
        "eval {}: rel_l2 {:.4e} ± {:.4e}, cons_err {:.4e}, {} rollout steps",
        tcfg.method.name(),
        report.rel_l2_mean,
        report.rel_l2_std,
        report.cons_err_abs,
        a.steps
    );
    Ok(())
}

fn suite_benchmark(suite: &str) -> Result<(&'static str, &'static str)> {
    Ok(match suite {
        "te-mass" => ("te2d", "mass"),
        "te-norm" => ("te2d", "norm"),
        "cac-mass" => ("cac2d", "mass"),
        "lse-norm" => ("lse1d", "norm"),
        "nls-norm" => ("nls1d", "norm"),
        _ => {
            return Err(Error::Config(format!(
                "unknown suite `{suite}` (expected te-mass, te-norm, cac-mass, lse-norm, or nls-norm)"
            )))
        }
    })
}

fn method_choice(m: &Method) -> MethodChoice {
    match m {
        Method::Raw => MethodChoice::Raw,
        Method::Adaptive => MethodChoice::Adaptive,
        Method::Penalty(_) => MethodChoice::Penalty,
        Method::Projection => MethodChoice::Projection,
        Method::AblationAppendMlp => MethodChoice::AblationAppendMlp,
    }
}

/// Standard penalty-weight grid per law.
fn default_lambdas(law: LawChoice) -> Vec<f64> {
    match law {
        LawChoice::Mass => vec![0.0, 1e-4, 1e-3, 1e-2],
        LawChoice::Norm => vec![0.0, 1e-5, 1e-4, 1e-3],
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn cmd_bench(a: BenchArgs) -> Result<()> {
    let (pde, law_name) = suite_benchmark(&a.suite)?;
    if a.seeds == 0 {
        return Err(Error::Config("need at least one seed".into()));
    }
    let mut cfg = RunConfig::default();
    cfg.apply("pde", pde)?;
    cfg.apply("law", law_name)?;
    if let Some(n) = a.n_train {
        cfg.n_train = n;
    }
    if let Some(n) = a.n_test {
        cfg.n_test = n;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(r) = a.res {
        cfg.res = Some(r);
    }
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.out = Some(a.out.display().to_string());

    let law = cfg.conservation_law()?;
    let spec = cfg.pde_spec();
    let train_split = generate_split(&spec, &law, cfg.n_train)?;
    let mut tspec = spec.clone();
    tspec.seed = test_seed(spec.seed);
    let test_split = generate_split(&tspec, &law, cfg.n_test)?;

    // Pick the penalty weight by an inner sweep scored on the training
    // split, then benchmark every method on fresh replicas.
    let mcfg0 = cfg.model_config();
    let tcfg0 = cfg.train_config();
    let sweep_rows = lambda_sweep(
        &mcfg0,
        &train_split,
        &train_split,
        &default_lambdas(cfg.law),
        &tcfg0,
    )?;
    let best_lambda = sweep_rows
        .iter()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|r| r.0)
        .unwrap_or(0.0);
    println!("penalty weight from inner sweep: {best_lambda:e}");

    let methods = [
        Method::Raw,
        Method::Adaptive,
        Method::Penalty(best_lambda),
        Method::Projection,
        Method::AblationAppendMlp,
    ];

    let mut rows: Vec<(String, u64, EvalReport)> = Vec::new();
    for method in &methods {
        for seed in 0..a.seeds {
            let mut c = cfg.clone();
            c.model_seed = seed;
            c.train_seed = seed;
            c.method = method_choice(method);
            if let Method::Penalty(l) = method {
                c.lambda = *l;
            }
            let mcfg = c.model_config();
            let tcfg = c.train_config();
            let head = c.head()?;
            let head_opt = tcfg.method.needs_head().then_some(&head);
            let outcome = train(&mcfg, head_opt, &train_split, &tcfg)?;
            let report = evaluate(
                &mcfg,
                head_opt,
                method.clone(),
                &outcome.store,
                &test_split,
                cfg.steps,
            )?;
            println!(
                "{} {} seed {seed}: rel_l2 {:.4e}, cons_err {:.4e}",
                paint("36", &a.suite),
                method.name(),
                report.rel_l2_mean,
                report.cons_err_abs
            );
            rows.push((method.name(), seed, report));
        }
    }
    rows.sort_by(|x, y| x.0.cmp(&y.0).then(x.1.cmp(&y.1)));

    std::fs::create_dir_all(&a.out)?;
    let mut csv = String::from(BENCH_HEADER);
    for (method, seed, report) in &rows {
        csv.push_str(&bench_row(method, &cfg, *seed, report));
    }
    write_text(&a.out.join("bench.csv"), &csv)?;

    // One row per method: mean over seeds, std of the per-seed means.
    let mut summary =
        String::from("method,pde,law,rel_l2_mean,rel_l2_std,cons_err_abs,cons_err_rel,wall_s\n");
    let mut names: Vec<String> = methods.iter().map(|m| m.name()).collect();
    names.sort();
    for name in &names {
        let group: Vec<&EvalReport> = rows
            .iter()
            .filter(|(m, _, _)| m == name)
            .map(|(_, _, r)| r)
            .collect();
        let rels: Vec<f64> = group.iter().map(|r| r.rel_l2_mean).collect();
        let (rel_mean, rel_std) = mean_std(&rels);
        let cons_abs = group.iter().map(|r| r.cons_err_abs).sum::<f64>() / group.len() as f64;
        let cons_rel = {
            let vals: Vec<f64> = group.iter().filter_map(|r| r.cons_err_rel).collect();
            if vals.is_empty() {
                "nan".to_string()
            } else {
                (vals.iter().sum::<f64>() / vals.len() as f64).to_string()
            }
        };
        let wall: f64 = group.iter().map(|r| r.wall_s).sum();
        summary.push_str(&format!(
            "{name},{},{},{rel_mean},{rel_std},{cons_abs},{cons_rel},{wall}\n",
            cfg.pde.name(),
            cfg.law.name()
        ));
    }
    write_text(&a.out.join("summary.csv"), &summary)?;
    write_text(&a.out.join("resolved.cfg"), &cfg.render())?;
    println!("wrote {} rows to bench.csv", rows.len());
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&a.config)?;
    cfg.out = Some(a.out.display().to_string());
    let lambdas = match &a.lambdas {
        Some(s) => {
            let mut vs = Vec::new();
            for part in s.split(',') {
                let v: f64 = part.trim().parse().map_err(|_| {
                    Error::Config(format!("invalid penalty weight `{}`", part.trim()))
                })?;
                vs.push(v);
            }
            vs
        }
        None => default_lambdas(cfg.law),
    };

    let law = cfg.conservation_law()?;
    let spec = cfg.pde_spec();
    let train_split = generate_split(&spec, &law, cfg.n_train)?;
    let mut tspec = spec.clone();
    tspec.seed = test_seed(spec.seed);
    let test_split = generate_split(&tspec, &law, cfg.n_test)?;

    let mcfg = cfg.model_config();
    let tcfg = cfg.train_config();
    let rows = lambda_sweep(&mcfg, &train_split, &test_split, &lambdas, &tcfg)?;

    std::fs::create_dir_all(&a.out)?;
    let mut csv = String::from("lambda,rel_l2,cons_err\n");
    for (l, rel, cons) in &rows {
        csv.push_str(&format!("{l},{rel},{cons}\n"));
    }
    write_text(&a.out.join("sweep.csv"), &csv)?;
    write_text(&a.out.join("resolved.cfg"), &cfg.render())?;
    println!("sweep over {} penalty weights written to sweep.csv", rows.len());
    Ok(())
}
