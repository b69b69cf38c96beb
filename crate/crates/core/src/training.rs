//! Training loop, Adam, evaluation (one-step and autoregressive), and the
//! penalty-weight sweep.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

use crate::conservation::{
    conservation_error, penalty_term, project_linear_tape, project_quadratic_tape, LawKind,
};
use crate::dataset::DatasetSplit;
use crate::field::{pairwise_dot, GridField};
use crate::models::{
    ablation_forward, append_coords, corrected_forward, init_head_params, init_model_params,
    model_forward, CorrectionHead, ModelConfig,
};
use crate::pdegen::advance_horizon;
use crate::tape::{ParamStore, Reduction, Tape, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Method {
    Raw,
    Adaptive,
    Penalty(f64),
    Projection,
    AblationAppendMlp,
}

impl Method {
    pub fn name(&self) -> String {
        match self {
            Method::Raw => "raw".into(),
            Method::Adaptive => "adaptive".into(),
            Method::Penalty(l) => format!("penalty({l:e})"),
            Method::Projection => "projection".into(),
            Method::AblationAppendMlp => "ablation-append-mlp".into(),
        }
    }

    pub fn needs_head(&self) -> bool {
        matches!(self, Method::Adaptive | Method::AblationAppendMlp)
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub method: Method,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if let Method::Penalty(l) = self.method {
            if l < 0.0 {
                return Err(Error::Config("penalty weight must be nonnegative".into()));
            }
        }
        if self.lr0 <= 0.0 {
            return Err(Error::Config("lr0 must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// lr0 halved every 100 epochs.
pub fn lr_at_epoch(lr0: f64, epoch: usize) -> f64 {
    lr0 * 0.5f64.powi((epoch / 100) as i32)
}

/// ||pred - gt|| / ||gt|| over all channels and points of one sample.
/// None when the ground truth is identically zero.
pub fn relative_l2(pred: &GridField, gt: &GridField) -> Option<f64> {
    let den: f64 = pairwise_dot(gt.data(), gt.data());
    if den == 0.0 {
        return None;
    }
    let diff: Vec<f64> = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(p, g)| p - g)
        .collect();
    Some((pairwise_dot(&diff, &diff) / den).sqrt())
}

/// On-tape relative L2 against a constant ground truth.
pub fn relative_l2_tape(tape: &mut Tape, pred: Var, gt: &GridField) -> Result<Var> {
    let den = pairwise_dot(gt.data(), gt.data());
    if den == 0.0 {
        return Err(Error::Domain {
            op: "relative_l2_tape",
            msg: "ground truth is identically zero".into(),
        });
    }
    let gv = tape.field(gt.clone());
    let d = tape.sub(pred, gv)?;
    let dsq = tape.square(d)?;
    let num = tape.reduce_sum(dsq, Reduction::All)?;
    let denv = tape.scalar(den);
    let ratio = tape.div(num, denv)?;
    // sqrt rejects exact zeros; pred == gt can only occur with a
    // zero-gradient guard, so nudge via the epsilon-free branch.
    if tape.scalar_value(ratio) == 0.0 {
        return Ok(ratio);
    }
    tape.sqrt(ratio)
}

const ADAM_B1: f64 = 0.9;
const ADAM_B2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// One Adam update from the accumulated gradients; bias-corrected moments.
pub fn adam_step(store: &mut ParamStore, lr: f64) {
    store.step += 1;
    let t = store.step as i32;
    let bc1 = 1.0 - ADAM_B1.powi(t);
    let bc2 = 1.0 - ADAM_B2.powi(t);
    for (_, tensor) in store.iter_mut() {
        for i in 0..tensor.data.len() {
            let g = tensor.grad[i];
            tensor.m[i] = ADAM_B1 * tensor.m[i] + (1.0 - ADAM_B1) * g;
            tensor.v[i] = ADAM_B2 * tensor.v[i] + (1.0 - ADAM_B2) * g * g;
            let mh = tensor.m[i] / bc1;
            let vh = tensor.v[i] / bc2;
            tensor.data[i] -= lr * mh / (vh.sqrt() + ADAM_EPS);
        }
    }
}

/// Build the per-sample training loss on `tape`. Returns the loss together
/// with the prediction var actually used in it.
fn sample_loss(
    tape: &mut Tape,
    mcfg: &ModelConfig,
    head: Option<&CorrectionHead>,
    method: Method,
    store: &ParamStore,
    split: &DatasetSplit,
    idx: usize,
) -> Result<(Var, Var)> {
    let x = append_coords(&split.inputs[idx]);
    let target = &split.targets[idx];
    let c0 = split.cons_targets[idx];
    let need_head = |m: &str| -> Result<&CorrectionHead> {
        head.ok_or_else(|| Error::Config(format!("method {m} requires a correction head")))
    };
    let pred = match method {
        Method::Raw => model_forward(tape, mcfg, store, &x)?.out,
        Method::Penalty(_) => model_forward(tape, mcfg, store, &x)?.out,
        Method::Adaptive => {
            let h = need_head("adaptive")?;
            corrected_forward(tape, mcfg, h, store, &x, c0)?.corrected
        }
        Method::Projection => {
            let out = model_forward(tape, mcfg, store, &x)?.out;
            match split.law.kind {
                LawKind::Linear => project_linear_tape(tape, out, c0)?,
                LawKind::Quadratic => project_quadratic_tape(tape, out, c0)?,
            }
        }
        Method::AblationAppendMlp => {
            need_head("ablation-append-mlp")?;
            ablation_forward(tape, mcfg, store, &x)?
        }
    };
    let base = relative_l2_tape(tape, pred, target)?;
    let loss = match method {
        // lambda = 0 skips the term entirely so the sweep's zero row is
        // bitwise identical to Raw.
        Method::Penalty(lambda) if lambda > 0.0 => {
            let p = penalty_term(tape, pred, split.law.kind, c0)?;
            let lv = tape.scalar(lambda);
            let scaled = tape.mul(lv, p)?;
            tape.add(base, scaled)?
        }
        _ => base,
    };
    Ok((loss, pred))
}

pub struct TrainOutcome {
    pub store: ParamStore,
    /// Mean training loss per epoch.
    pub loss_curve: Vec<f64>,
    /// Samples skipped because their ground truth is identically zero.
    pub skipped: usize,
}

/// Train from a fresh (seeded) initialization. (seed, config, dataset)
/// fully determine the outcome bitwise.
pub fn train(
    mcfg: &ModelConfig,
    head: Option<&CorrectionHead>,
    split: &DatasetSplit,
    tcfg: &TrainConfig,
) -> Result<TrainOutcome> {
    tcfg.validate()?;
    mcfg.validate()?;
    let mut store = ParamStore::new();
    init_model_params(mcfg, &mut store)?;
    if let Some(h) = head {
        let grid_dims: Vec<usize> = split
            .inputs
            .first()
            .map(|f| f.dims().to_vec())
            .unwrap_or_default();
        init_head_params(h, mcfg, &grid_dims, &mut store)?;
    }
    let usable: Vec<usize> = (0..split.len())
        .filter(|&i| split.targets[i].data().iter().any(|&v| v != 0.0))
        .collect();
    let skipped = split.len() - usable.len();
    let mut loss_curve = Vec::with_capacity(tcfg.epochs);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut order = usable.clone();
    for epoch in 0..tcfg.epochs {
        let lr = lr_at_epoch(tcfg.lr0, epoch);
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for (bi, batch) in order.chunks(tcfg.batch_size).enumerate() {
            store.zero_grads();
            let inv = 1.0 / batch.len() as f64;
            let mut batch_loss = 0.0;
            for &idx in batch {
                let mut tape = Tape::new();
                let (loss, pred) =
                    sample_loss(&mut tape, mcfg, head, tcfg.method, &store, split, idx)?;
                let lv = tape.scalar_value(loss);
                if !lv.is_finite() {
                    let pnorm = {
                        let f = tape.field_value(pred);
                        pairwise_dot(f.data(), f.data()).sqrt()
                    };
                    return Err(Error::Numerical(format!(
                        "non-finite loss at epoch {epoch}, batch {bi}, sample {idx} \
                         (prediction norm {pnorm:e})"
                    )));
                }
                batch_loss += lv * inv;
                tape.backward_scaled(loss, inv, &mut store)?;
            }
            adam_step(&mut store, lr);
            epoch_loss += batch_loss;
            batches += 1;
        }
        loss_curve.push(if batches > 0 { epoch_loss / batches as f64 } else { 0.0 });
    }
    Ok(TrainOutcome {
        store,
        loss_curve,
        skipped,
    })
}

/// Prediction for one state field with the method's inference-time rule.
pub fn predict(
    mcfg: &ModelConfig,
    head: Option<&CorrectionHead>,
    method: Method,
    store: &ParamStore,
    split: &DatasetSplit,
    state: &GridField,
    c0: f64,
) -> Result<GridField> {
    let x = append_coords(state);
    let mut tape = Tape::new();
    let pred = match method {
        Method::Raw | Method::Penalty(_) => model_forward(&mut tape, mcfg, store, &x)?.out,
        Method::Adaptive => {
            let h = head.ok_or_else(|| Error::Config("adaptive requires a head".into()))?;
            corrected_forward(&mut tape, mcfg, h, store, &x, c0)?.corrected
        }
        Method::Projection => {
            let out = model_forward(&mut tape, mcfg, store, &x)?.out;
            match split.law.kind {
                LawKind::Linear => project_linear_tape(&mut tape, out, c0)?,
                LawKind::Quadratic => project_quadratic_tape(&mut tape, out, c0)?,
            }
        }
        Method::AblationAppendMlp => ablation_forward(&mut tape, mcfg, store, &x)?,
    };
    Ok(tape.field_value(pred).clone())
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub rel_l2_mean: f64,
    /// Std over test samples.
    pub rel_l2_std: f64,
    pub cons_err_abs: f64,
    pub cons_err_rel: Option<f64>,
    /// Mean relative L2 at rollout steps 1..=n.
    pub rollout_rel_l2: Vec<f64>,
    /// Mean absolute conservation error at rollout steps 1..=n.
    pub rollout_cons_err: Vec<f64>,
    pub skipped: usize,
    pub wall_s: f64,
}

/// One-step metrics plus an autoregressive rollout of `steps` horizons.
/// The predicted state is fed back as the next input, coordinate channels
/// are refreshed each step, and the conservation target is held at the
/// initial condition's value throughout. Rollout ground truth is rebuilt
/// with the reference solver.
pub fn evaluate(
    mcfg: &ModelConfig,
    head: Option<&CorrectionHead>,
    method: Method,
    store: &ParamStore,
    split: &DatasetSplit,
    steps: usize,
) -> Result<EvalReport> {
    let t0 = Instant::now();
    let mut rels = Vec::new();
    let mut abs_errs = Vec::new();
    let mut rel_errs = Vec::new();
    let mut skipped = 0usize;
    let mut rollout_rel = vec![0.0; steps];
    let mut rollout_cnt = vec![0usize; steps];
    let mut rollout_cons = vec![0.0; steps];
    let mut rollout_cons_cnt = vec![0usize; steps];

    for i in 0..split.len() {
        let c0 = split.cons_targets[i];
        let pred = predict(mcfg, head, method, store, split, &split.inputs[i], c0)?;
        match relative_l2(&pred, &split.targets[i]) {
            Some(r) => rels.push(r),
            None => skipped += 1,
        }
        let ce = conservation_error(&pred, &split.law, c0);
        abs_errs.push(ce.abs);
        if let Some(r) = ce.rel {
            rel_errs.push(r);
        }

        if steps > 1 {
            let mut state = pred;
            let mut truth = split.targets[i].clone();
            for (s, slot) in rollout_rel.iter_mut().enumerate() {
                if s > 0 {
                    truth = advance_horizon(&split.spec, &truth)?;
                    state = predict(mcfg, head, method, store, split, &state, c0)?;
                }
                if let Some(r) = relative_l2(&state, &truth) {
                    *slot += r;
                    rollout_cnt[s] += 1;
                }
                let ce = conservation_error(&state, &split.law, c0);
                rollout_cons[s] += ce.abs;
                rollout_cons_cnt[s] += 1;
            }
        }
    }
    let n = rels.len().max(1) as f64;
    let mean = rels.iter().sum::<f64>() / n;
    let var = rels.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let rollout_rel_l2: Vec<f64> = rollout_rel
        .iter()
        .zip(&rollout_cnt)
        .map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
        .collect();
    let rollout_cons_err: Vec<f64> = rollout_cons
        .iter()
        .zip(&rollout_cons_cnt)
        .map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
        .collect();
    Ok(EvalReport {
        rel_l2_mean: mean,
        rel_l2_std: var.sqrt(),
        cons_err_abs: abs_errs.iter().sum::<f64>() / abs_errs.len().max(1) as f64,
        cons_err_rel: if rel_errs.is_empty() {
            None
        } else {
            Some(rel_errs.iter().sum::<f64>() / rel_errs.len() as f64)
        },
        rollout_rel_l2: if steps > 1 { rollout_rel_l2 } else { Vec::new() },
        rollout_cons_err: if steps > 1 { rollout_cons_err } else { Vec::new() },
        skipped,
        wall_s: t0.elapsed().as_secs_f64(),
    })
}

/// Train one model per penalty weight from the same initialization and
/// report (lambda, one-step rel L2, one-step conservation error).
pub fn lambda_sweep(
    mcfg: &ModelConfig,
    train_split: &DatasetSplit,
    test_split: &DatasetSplit,
    lambdas: &[f64],
    tcfg: &TrainConfig,
) -> Result<Vec<(f64, f64, f64)>> {
    let mut rows = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        if lambda < 0.0 {
            return Err(Error::Config("penalty weight must be nonnegative".into()));
        }
        let mut cfg = tcfg.clone();
        cfg.method = Method::Penalty(lambda);
        let outcome = train(mcfg, None, train_split, &cfg)?;
        let report = evaluate(mcfg, None, cfg.method, &outcome.store, test_split, 1)?;
        rows.push((lambda, report.rel_l2_mean, report.cons_err_abs));
    }
    Ok(rows)
}
