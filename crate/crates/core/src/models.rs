//! Desk-scale neural operators and the learnable correction heads.
//!
//! Two architectures cover the benchmarks: a 1D spectral operator (lifting,
//! spectral + pointwise-skip blocks, projection) and a flat 2D CNN with
//! circular padding. A [`CorrectionHead`] generates the coefficient field `A`
//! from the model output (and, for the conv generator, the final feature
//! maps), and [`corrected_forward`] composes model, generator, and correction
//! operator on a single tape.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::conservation::{
    linear_correct, quadratic_correct_lenient, ConservationLaw, CorrectionCoefficients, LawKind,
};
use crate::field::GridField;
use crate::tape::{ElemOp, ParamStore, Tape, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    Fno1d,
    Cnn2d,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Tanh,
}

impl Activation {
    fn op(self) -> ElemOp {
        match self {
            Activation::Gelu => ElemOp::Gelu,
            Activation::Tanh => ElemOp::Tanh,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub arch: Arch,
    pub in_channels: usize,
    pub out_channels: usize,
    pub hidden_width: usize,
    pub layers: usize,
    /// Retained Fourier modes (Fno1d only).
    pub modes: usize,
    pub activation: Activation,
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale 1D spectral operator: width 32, 4 layers, 16 modes.
    pub fn fno1d(in_channels: usize, out_channels: usize, seed: u64) -> Self {
        ModelConfig {
            arch: Arch::Fno1d,
            in_channels,
            out_channels,
            hidden_width: 32,
            layers: 4,
            modes: 16,
            activation: Activation::Gelu,
            seed,
        }
    }

    /// Desk-scale flat circular CNN: width 16, 4 layers, Tanh.
    pub fn cnn2d(in_channels: usize, out_channels: usize, seed: u64) -> Self {
        ModelConfig {
            arch: Arch::Cnn2d,
            in_channels,
            out_channels,
            hidden_width: 16,
            layers: 4,
            modes: 0,
            activation: Activation::Tanh,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers < 1 {
            return Err(Error::Config("model needs at least one layer".into()));
        }
        if self.arch == Arch::Fno1d && self.modes == 0 {
            return Err(Error::Config("Fno1d needs modes >= 1".into()));
        }
        Ok(())
    }
}

// ── Parameter initialization ─────────────────────────────────────────

fn uniform(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
}

/// Register all model parameters under the `model.` prefix, seeded from
/// `cfg.seed`. Deterministic: same config, same initialization.
pub fn init_model_params(cfg: &ModelConfig, store: &mut ParamStore) -> Result<()> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let w = cfg.hidden_width;
    match cfg.arch {
        Arch::Fno1d => {
            let s_in = 1.0 / (cfg.in_channels as f64).sqrt();
            store.register(
                "model.lift.w",
                vec![w, cfg.in_channels],
                uniform(&mut rng, w * cfg.in_channels, s_in),
            );
            store.register("model.lift.b", vec![w], vec![0.0; w]);
            let s_spec = 1.0 / (w * w) as f64;
            let s_mix = 1.0 / (w as f64).sqrt();
            for l in 0..cfg.layers {
                store.register(
                    &format!("model.layer{l}.spec.w"),
                    vec![cfg.modes, w, w, 2],
                    uniform(&mut rng, cfg.modes * w * w * 2, s_spec),
                );
                store.register(
                    &format!("model.layer{l}.skip.w"),
                    vec![w, w],
                    uniform(&mut rng, w * w, s_mix),
                );
                store.register(&format!("model.layer{l}.skip.b"), vec![w], vec![0.0; w]);
            }
            let s_proj = 1.0 / (w as f64).sqrt();
            store.register(
                "model.proj.w",
                vec![cfg.out_channels, w],
                uniform(&mut rng, cfg.out_channels * w, s_proj),
            );
            store.register("model.proj.b", vec![cfg.out_channels], vec![0.0; cfg.out_channels]);
        }
        Arch::Cnn2d => {
            for l in 0..cfg.layers {
                let ic = if l == 0 { cfg.in_channels } else { w };
                let s = 1.0 / (9.0 * ic as f64).sqrt();
                store.register(
                    &format!("model.layer{l}.conv.k"),
                    vec![w, ic, 3, 3],
                    uniform(&mut rng, w * ic * 9, s),
                );
                store.register(&format!("model.layer{l}.conv.b"), vec![w], vec![0.0; w]);
            }
            let s_proj = 1.0 / (w as f64).sqrt();
            store.register(
                "model.proj.w",
                vec![cfg.out_channels, w],
                uniform(&mut rng, cfg.out_channels * w, s_proj),
            );
            store.register("model.proj.b", vec![cfg.out_channels], vec![0.0; cfg.out_channels]);
        }
    }
    Ok(())
}

/// Model output together with the pre-projection feature maps.
pub struct ForwardOut {
    pub out: Var,
    pub features: Var,
}

/// Lifting, `layers` spectral blocks with pointwise skips, projection.
/// Resolution-invariant: the same parameters apply at any admissible N.
pub fn fno1d_forward(
    tape: &mut Tape,
    cfg: &ModelConfig,
    store: &ParamStore,
    x: &GridField,
) -> Result<ForwardOut> {
    let n = x.points();
    if x.dims().len() != 1 || !n.is_power_of_two() || n < 2 * cfg.modes {
        return Err(Error::Domain {
            op: "fno1d_forward",
            msg: format!("grid length {n} invalid for {} modes", cfg.modes),
        });
    }
    if x.channels() != cfg.in_channels {
        return Err(Error::ShapeMismatch {
            op: "fno1d_forward",
            left: x.shape().to_vec(),
            right: vec![cfg.in_channels, n],
        });
    }
    let act = cfg.activation.op();
    let xv = tape.field(x.clone());
    let lw = tape.param(store, "model.lift.w")?;
    let lb = tape.param(store, "model.lift.b")?;
    let mut h = tape.dense(xv, lw, lb)?;
    for l in 0..cfg.layers {
        let sw = tape.param(store, &format!("model.layer{l}.spec.w"))?;
        let spec = tape.spectral_conv1d(h, sw, cfg.modes)?;
        let kw = tape.param(store, &format!("model.layer{l}.skip.w"))?;
        let kb = tape.param(store, &format!("model.layer{l}.skip.b"))?;
        let skip = tape.dense(h, kw, kb)?;
        let sum = tape.add(spec, skip)?;
        h = tape.activation(act, sum)?;
    }
    let features = h;
    let pw = tape.param(store, "model.proj.w")?;
    let pb = tape.param(store, "model.proj.b")?;
    let out = tape.dense(h, pw, pb)?;
    Ok(ForwardOut { out, features })
}

/// Stacked circular 3x3 convolutions with a final 1x1 channel projection.
/// Translation-equivariant under periodic shifts.
pub fn cnn2d_forward(
    tape: &mut Tape,
    cfg: &ModelConfig,
    store: &ParamStore,
    x: &GridField,
) -> Result<ForwardOut> {
    if x.channels() != cfg.in_channels {
        return Err(Error::ShapeMismatch {
            op: "cnn2d_forward",
            left: x.shape().to_vec(),
            right: vec![cfg.in_channels],
        });
    }
    let act = cfg.activation.op();
    let mut h = tape.field(x.clone());
    for l in 0..cfg.layers {
        let k = tape.param(store, &format!("model.layer{l}.conv.k"))?;
        let b = tape.param(store, &format!("model.layer{l}.conv.b"))?;
        let conv = tape.circular_conv2d(h, k, b)?;
        h = tape.activation(act, conv)?;
    }
    let features = h;
    let pw = tape.param(store, "model.proj.w")?;
    let pb = tape.param(store, "model.proj.b")?;
    let out = tape.dense(h, pw, pb)?;
    Ok(ForwardOut { out, features })
}

pub fn model_forward(
    tape: &mut Tape,
    cfg: &ModelConfig,
    store: &ParamStore,
    x: &GridField,
) -> Result<ForwardOut> {
    match cfg.arch {
        Arch::Fno1d => fno1d_forward(tape, cfg, store, x),
        Arch::Cnn2d => cnn2d_forward(tape, cfg, store, x),
    }
}

// ── Coefficient generators ───────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Generator {
    /// A free logit field of grid size, input-independent.
    SoftmaxVector,
    /// Entry-wise three-hidden-layer MLP on the output channels,
    /// hidden dim twice the output channel count. Resolution-invariant.
    PointwiseMlp,
    /// 3x3 circular convolution on concat(output, features). 2D only.
    ConvK3,
}

#[derive(Debug, Clone)]
pub struct CorrectionHead {
    pub generator: Generator,
    pub law: ConservationLaw,
}

/// Register head parameters under the `head.` prefix. `grid_dims` is only
/// needed by the input-independent SoftmaxVector generator.
pub fn init_head_params(
    head: &CorrectionHead,
    cfg: &ModelConfig,
    grid_dims: &[usize],
    store: &mut ParamStore,
) -> Result<()> {
    head.law.validate(cfg.out_channels)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let oc = cfg.out_channels;
    match head.generator {
        Generator::SoftmaxVector => {
            let mut shape = vec![oc];
            shape.extend_from_slice(grid_dims);
            let n: usize = shape.iter().product();
            store.register("head.logits", shape, vec![0.0; n]);
        }
        Generator::PointwiseMlp => {
            let h = 2 * oc;
            let dims = [(h, oc), (h, h), (h, h), (oc, h)];
            for (i, (rows, cols)) in dims.iter().enumerate() {
                // The last layer starts small so the generated A barely
                // perturbs the closed-form correction at initialization;
                // coefficient noise otherwise dominates early training.
                let damp = if i == 3 { 0.01 } else { 1.0 };
                let s = damp / (*cols as f64).sqrt();
                store.register(
                    &format!("head.mlp{i}.w"),
                    vec![*rows, *cols],
                    uniform(&mut rng, rows * cols, s),
                );
                store.register(&format!("head.mlp{i}.b"), vec![*rows], vec![0.0; *rows]);
            }
        }
        Generator::ConvK3 => {
            let ic = oc + cfg.hidden_width;
            let s = 1.0 / (9.0 * ic as f64).sqrt();
            store.register("head.conv.k", vec![oc, ic, 3, 3], uniform(&mut rng, oc * ic * 9, s));
            store.register("head.conv.b", vec![oc], vec![0.0; oc]);
        }
    }
    Ok(())
}

/// Run the pointwise MLP chain (without the final constraint), shared by
/// the generator and the append-MLP ablation.
fn pointwise_mlp_chain(tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
    let mut h = x;
    for i in 0..4 {
        let w = tape.param(store, &format!("head.mlp{i}.w"))?;
        let b = tape.param(store, &format!("head.mlp{i}.b"))?;
        h = tape.dense(h, w, b)?;
        if i < 3 {
            h = tape.tanh(h)?;
        }
    }
    Ok(h)
}

/// Produce the coefficient field `A` for the configured generator. Linear
/// laws pass the raw output through a flat softmax (SumToOne); quadratic
/// laws use it unconstrained.
pub fn generate_a(
    tape: &mut Tape,
    head: &CorrectionHead,
    store: &ParamStore,
    model_output: Var,
    features: Var,
) -> Result<CorrectionCoefficients> {
    let raw = match head.generator {
        Generator::SoftmaxVector => tape.param(store, "head.logits")?,
        Generator::PointwiseMlp => pointwise_mlp_chain(tape, store, model_output)?,
        Generator::ConvK3 => {
            let of = tape.field_value(model_output);
            let ff = tape.field_value(features);
            if of.dims() != ff.dims() {
                return Err(Error::ShapeMismatch {
                    op: "generate_a",
                    left: of.shape().to_vec(),
                    right: ff.shape().to_vec(),
                });
            }
            let cat = tape.concat_channels(model_output, features)?;
            let k = tape.param(store, "head.conv.k")?;
            let b = tape.param(store, "head.conv.b")?;
            tape.circular_conv2d(cat, k, b)?
        }
    };
    match head.law.kind {
        LawKind::Linear => {
            let alpha = tape.softmax_flat(raw)?;
            CorrectionCoefficients::sum_to_one(tape, alpha)
        }
        LawKind::Quadratic => Ok(CorrectionCoefficients::unconstrained(raw)),
    }
}

// ── Corrected composition ────────────────────────────────────────────

pub struct CorrectedForward {
    pub raw: Var,
    pub corrected: Var,
    /// Quadratic corrector hit a degenerate (all-zero) raw output.
    pub degenerate: bool,
}

/// The corrected operator: model, coefficient generator, correction, all on
/// one tape. `target` is the conserved quantity of the sample's initial
/// condition.
pub fn corrected_forward(
    tape: &mut Tape,
    cfg: &ModelConfig,
    head: &CorrectionHead,
    store: &ParamStore,
    x: &GridField,
    target: f64,
) -> Result<CorrectedForward> {
    let fw = model_forward(tape, cfg, store, x)?;
    let a = generate_a(tape, head, store, fw.out, fw.features)?;
    match head.law.kind {
        LawKind::Linear => {
            let corrected = linear_correct(tape, fw.out, &a, target)?;
            Ok(CorrectedForward {
                raw: fw.out,
                corrected,
                degenerate: false,
            })
        }
        LawKind::Quadratic => {
            let q = quadratic_correct_lenient(tape, fw.out, &a, target, &head.law)?;
            Ok(CorrectedForward {
                raw: fw.out,
                corrected: q.var,
                degenerate: q.degenerate,
            })
        }
    }
}

/// Ablation twin: the same pointwise MLP appended to the model output with
/// no conservation correction.
pub fn ablation_forward(
    tape: &mut Tape,
    cfg: &ModelConfig,
    store: &ParamStore,
    x: &GridField,
) -> Result<Var> {
    let fw = model_forward(tape, cfg, store, x)?;
    pointwise_mlp_chain(tape, store, fw.out)
}

/// Append coordinate channels (x for 1D, x and y for 2D) to a state field.
/// Coordinates are grid-point positions j/N on [0,1).
pub fn append_coords(state: &GridField) -> GridField {
    let dims = state.dims();
    let pts = state.points();
    let mut shape = state.shape().to_vec();
    let mut data = state.data().to_vec();
    match dims.len() {
        1 => {
            shape[0] += 1;
            let n = dims[0];
            data.extend((0..n).map(|i| i as f64 / n as f64));
        }
        2 => {
            shape[0] += 2;
            let (h, w) = (dims[0], dims[1]);
            data.extend((0..pts).map(|p| (p / w) as f64 / h as f64));
            data.extend((0..pts).map(|p| (p % w) as f64 / w as f64));
        }
        _ => panic!("append_coords supports 1D and 2D fields"),
    }
    GridField::from_data(&shape, data).expect("coord shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conservation::{conservation_error, quantity_linear, quantity_quadratic};
    use crate::tape::{grad_check, Reduction};
    use rand::Rng;

    fn rand_field(shape: &[usize], seed: u64) -> GridField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        GridField::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn fno_zero_input_zero_biases_gives_zero() {
        let mut cfg = ModelConfig::fno1d(3, 2, 0);
        cfg.activation = Activation::Tanh;
        cfg.hidden_width = 8;
        cfg.layers = 2;
        cfg.modes = 4;
        let mut store = ParamStore::new();
        init_model_params(&cfg, &mut store).unwrap();
        let mut tape = Tape::new();
        let out = fno1d_forward(&mut tape, &cfg, &store, &GridField::zeros(&[3, 16])).unwrap();
        assert_eq!(tape.field_value(out.out).shape(), &[2, 16]);
        assert!(tape.field_value(out.out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fno_shape_contract_across_resolutions() {
        let mut cfg = ModelConfig::fno1d(3, 2, 1);
        cfg.hidden_width = 8;
        cfg.layers = 2;
        cfg.modes = 4;
        let mut store = ParamStore::new();
        init_model_params(&cfg, &mut store).unwrap();
        for n in [16usize, 32, 64] {
            let mut tape = Tape::new();
            let out = fno1d_forward(&mut tape, &cfg, &store, &rand_field(&[3, n], 2)).unwrap();
            assert_eq!(tape.field_value(out.out).shape(), &[2, n]);
        }
    }

    #[test]
    fn fno_rejects_small_grid() {
        let cfg = ModelConfig::fno1d(3, 2, 0);
        let mut store = ParamStore::new();
        init_model_params(&cfg, &mut store).unwrap();
        let mut tape = Tape::new();
        assert!(fno1d_forward(&mut tape, &cfg, &store, &GridField::zeros(&[3, 16])).is_err());
    }

    #[test]
    fn cnn_shift_equivariance() {
        let mut cfg = ModelConfig::cnn2d(3, 1, 3);
        cfg.hidden_width = 4;
        cfg.layers = 2;
        let mut store = ParamStore::new();
        init_model_params(&cfg, &mut store).unwrap();
        let x = rand_field(&[3, 8, 8], 4);
        let (s1, s2) = (3usize, 5usize);
        let shifted = {
            let (h, w) = (8usize, 8usize);
            GridField::from_fn(&[3, 8, 8], |i| {
                let c = i / (h * w);
                let r = (i / w) % h;
                let cc = i % w;
                x.data()[c * h * w + ((r + h - s1) % h) * w + (cc + w - s2) % w]
            })
        };
        let mut t1 = Tape::new();
        let y1 = cnn2d_forward(&mut t1, &cfg, &store, &x).unwrap();
        let mut t2 = Tape::new();
        let y2 = cnn2d_forward(&mut t2, &cfg, &store, &shifted).unwrap();
        let (h, w) = (8usize, 8usize);
        let a = t1.field_value(y1.out);
        let b = t2.field_value(y2.out);
        for r in 0..h {
            for c in 0..w {
                let diff = (a.data()[r * w + c] - b.data()[((r + s1) % h) * w + (c + s2) % w]).abs();
                assert!(diff < 1e-12, "equivariance violated by {diff}");
            }
        }
    }

    #[test]
    fn cnn_zero_params_zero_output() {
        let cfg = ModelConfig::cnn2d(1, 1, 0);
        let mut store = ParamStore::new();
        init_model_params(&cfg, &mut store).unwrap();
        for (_, t) in store.iter_mut() {
            t.data.fill(0.0);
        }
        let mut tape = Tape::new();
        let out = cnn2d_forward(&mut tape, &cfg, &store, &rand_field(&[1, 4, 4], 5)).unwrap();
        assert!(tape.field_value(out.out).data().iter().all(|&v| v == 0.0));
        assert_eq!(tape.field_value(out.out).shape(), &[1, 4, 4]);
    }

    #[test]
    fn softmax_vector_uniform_at_zero_logits() {
        let cfg = ModelConfig::fno1d(3, 1, 0);
        let head = CorrectionHead {
            generator: Generator::SoftmaxVector,
            law: ConservationLaw::linear(vec![0]),
        };
        let mut store = ParamStore::new();
        init_model_params(&cfg, &mut store).unwrap();
        init_head_params(&head, &cfg, &[64], &mut store).unwrap();
        let mut tape = Tape::new();
        let fw = fno1d_forward(&mut tape, &cfg, &store, &rand_field(&[3, 64], 6)).unwrap();
        let a = generate_a(&mut tape, &head, &store, fw.out, fw.features).unwrap();
        for &v in tape.field_value(a.var).data() {
            assert!((v - 1.0 / 64.0).abs() < 1e-15);
        }
    }

    #[test]
    fn linear_generators_sum_to_one() {
        let mut cfg = ModelConfig::fno1d(3, 1, 7);
        cfg.hidden_width = 8;
        cfg.layers = 2;
        cfg.modes = 4;
        for gen in [Generator::SoftmaxVector, Generator::PointwiseMlp] {
            let head = CorrectionHead {
                generator: gen,
                law: ConservationLaw::linear(vec![0]),
            };
            let mut store = ParamStore::new();
            init_model_params(&cfg, &mut store).unwrap();
            init_head_params(&head, &cfg, &[16], &mut store).unwrap();
            let mut tape = Tape::new();
            let fw = fno1d_forward(&mut tape, &cfg, &store, &rand_field(&[3, 16], 8)).unwrap();
            let a = generate_a(&mut tape, &head, &store, fw.out, fw.features).unwrap();
            let s = quantity_linear(tape.field_value(a.var));
            assert!((s - 1.0).abs() < 1e-12, "{gen:?} sums to {s}");
        }
    }

    #[test]
    fn pointwise_mlp_is_resolution_invariant() {
        let cfg = ModelConfig::fno1d(3, 2, 9);
        let head = CorrectionHead {
            generator: Generator::PointwiseMlp,
            law: ConservationLaw::quadratic(vec![0, 1], 1e-12),
        };
        let mut store = ParamStore::new();
        init_model_params(&cfg, &mut store).unwrap();
        init_head_params(&head, &cfg, &[], &mut store).unwrap();
        // The same pointwise input value must map to the same A value
        // regardless of grid size.
        let run = |n: usize| -> f64 {
            let mut tape = Tape::new();
            let x = tape.field(GridField::from_fn(&[2, n], |_| 0.37));
            let a = pointwise_mlp_chain(&mut tape, &store, x).unwrap();
            tape.field_value(a).data()[0]
        };
        assert_eq!(run(128).to_bits(), run(256).to_bits());
    }

    #[test]
    fn corrected_forward_conserves_for_random_params() {
        let mut cfg = ModelConfig::fno1d(3, 1, 11);
        cfg.hidden_width = 8;
        cfg.layers = 2;
        cfg.modes = 4;
        let head = CorrectionHead {
            generator: Generator::PointwiseMlp,
            law: ConservationLaw::linear(vec![0]),
        };
        let mut store = ParamStore::new();
        init_model_params(&cfg, &mut store).unwrap();
        init_head_params(&head, &cfg, &[16], &mut store).unwrap();
        let x = rand_field(&[3, 16], 12);
        let target = 1.75;
        let mut tape = Tape::new();
        let cf = corrected_forward(&mut tape, &cfg, &head, &store, &x, target).unwrap();
        let err = conservation_error(tape.field_value(cf.corrected), &head.law, target);
        assert!(err.abs <= 1e-10 * target.abs().max(1.0));
    }

    #[test]
    fn ablation_twin_violates_the_law() {
        let mut cfg = ModelConfig::fno1d(3, 1, 13);
        cfg.hidden_width = 8;
        cfg.layers = 2;
        cfg.modes = 4;
        let head = CorrectionHead {
            generator: Generator::PointwiseMlp,
            law: ConservationLaw::linear(vec![0]),
        };
        let mut store = ParamStore::new();
        init_model_params(&cfg, &mut store).unwrap();
        init_head_params(&head, &cfg, &[16], &mut store).unwrap();
        let x = rand_field(&[3, 16], 14);
        let mut tape = Tape::new();
        let y = ablation_forward(&mut tape, &cfg, &store, &x).unwrap();
        let err = conservation_error(tape.field_value(y), &head.law, 1.75);
        assert!(err.abs > 1e-4, "ablation unexpectedly conserves: {}", err.abs);
    }

    #[test]
    fn corrected_forward_grad_check_all_combinations() {
        // Toy sizes; every (arch x generator x law) pairing that the
        // benchmarks use. The finite-difference step is per-law: the
        // quadratic corrector amplifies a small raw output (lambda1 =
        // sqrt(c0/S_U2)), so its loss has large curvature along bias
        // directions and needs a small step; the linear pipeline is
        // rounding-limited on near-zero gradient coordinates and needs a
        // larger one.
        let combos: Vec<(Arch, Generator, LawKind, u64, f64)> = vec![
            (Arch::Fno1d, Generator::PointwiseMlp, LawKind::Linear, 5, 5e-5),
            (Arch::Fno1d, Generator::PointwiseMlp, LawKind::Quadratic, 5, 1e-6),
            (Arch::Fno1d, Generator::SoftmaxVector, LawKind::Linear, 5, 5e-5),
            (Arch::Cnn2d, Generator::ConvK3, LawKind::Linear, 4, 5e-5),
            (Arch::Cnn2d, Generator::ConvK3, LawKind::Quadratic, 4, 1e-6),
        ];
        for (arch, gen, law_kind, seed, h) in combos {
            let mut cfg = match arch {
                Arch::Fno1d => ModelConfig::fno1d(3, 2, seed),
                Arch::Cnn2d => ModelConfig::cnn2d(3, 2, seed),
            };
            cfg.hidden_width = 4;
            cfg.layers = 2;
            cfg.modes = 2;
            let law = match law_kind {
                LawKind::Linear => ConservationLaw::linear(vec![0, 1]),
                LawKind::Quadratic => ConservationLaw::quadratic(vec![0, 1], 1e-12),
            };
            let head = CorrectionHead { generator: gen, law };
            let x = match arch {
                Arch::Fno1d => rand_field(&[3, 8], seed + 100),
                Arch::Cnn2d => rand_field(&[3, 4, 4], seed + 100),
            };
            let grid_dims: Vec<usize> = x.dims().to_vec();
            let mut store = ParamStore::new();
            init_model_params(&cfg, &mut store).unwrap();
            init_head_params(&head, &cfg, &grid_dims, &mut store).unwrap();
            // Undo the deliberately damped last-layer init: the check
            // should hold at a generic operating point, and the step
            // sizes above are tuned for coefficients at full scale.
            if let Some(t) = store.get_mut("head.mlp3.w") {
                for v in t.data.iter_mut() {
                    *v *= 100.0;
                }
            }
            let err = grad_check(
                |t, s| {
                    let cf = corrected_forward(t, &cfg, &head, s, &x, 0.8)?;
                    let tn = t.tanh(cf.corrected)?;
                    let sq = t.square(tn)?;
                    t.reduce_sum(sq, Reduction::All)
                },
                &mut store,
                h,
            )
            .unwrap();
            assert!(err < 1e-5, "{arch:?}/{gen:?}/{law_kind:?} rel error {err}");
        }
    }

    #[test]
    fn fno_resolution_transfer_on_band_limited_input() {
        let mut cfg = ModelConfig::fno1d(2, 1, 51);
        cfg.hidden_width = 8;
        cfg.layers = 2;
        cfg.modes = 4;
        let mut store = ParamStore::new();
        init_model_params(&cfg, &mut store).unwrap();
        // Band-limited continuum input: frequencies strictly below `modes`.
        let sample = |n: usize| {
            GridField::from_fn(&[2, n], |i| {
                let c = i / n;
                let x = (i % n) as f64 / n as f64;
                let t = 2.0 * std::f64::consts::PI * x;
                if c == 0 {
                    (t).sin() + 0.5 * (2.0 * t).cos()
                } else {
                    0.3 * (3.0 * t).sin() - 0.2
                }
            })
        };
        let run = |x: &GridField| {
            let mut tape = Tape::new();
            let fw = fno1d_forward(&mut tape, &cfg, &store, x).unwrap();
            tape.field_value(fw.out).data().to_vec()
        };
        let coarse = run(&sample(32));
        let fine = run(&sample(64));
        for i in 0..32 {
            let d = (coarse[i] - fine[2 * i]).abs();
            assert!(d < 1e-8, "resolution transfer off by {d} at point {i}");
        }
    }

    #[test]
    fn linear_conserving_raw_is_passed_through_bitwise() {
        let mut cfg = ModelConfig::fno1d(3, 1, 31);
        cfg.hidden_width = 8;
        cfg.layers = 2;
        cfg.modes = 4;
        let head = CorrectionHead {
            generator: Generator::SoftmaxVector,
            law: ConservationLaw::linear(vec![0]),
        };
        let mut store = ParamStore::new();
        init_model_params(&cfg, &mut store).unwrap();
        init_head_params(&head, &cfg, &[16], &mut store).unwrap();
        // Randomize the logits so alpha is non-trivial.
        {
            let mut rng = ChaCha8Rng::seed_from_u64(32);
            let t = store.get_mut("head.logits").unwrap();
            for v in t.data.iter_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
        }
        let x = rand_field(&[3, 16], 33);
        let m0 = 0.6;
        // Subtract the uniform offset from the projection bias so the raw
        // output conserves, then take the recomputed sum as the target so
        // conservation is exact in floating point.
        let (raw0, n_pts) = {
            let mut tape = Tape::new();
            let fw = fno1d_forward(&mut tape, &cfg, &store, &x).unwrap();
            let f = tape.field_value(fw.out);
            (quantity_linear(f), f.points())
        };
        store.get_mut("model.proj.b").unwrap().data[0] -= (raw0 - m0) / n_pts as f64;
        let exact_target = {
            let mut tape = Tape::new();
            let fw = fno1d_forward(&mut tape, &cfg, &store, &x).unwrap();
            quantity_linear(tape.field_value(fw.out))
        };
        assert!((exact_target - m0).abs() < 1e-12);
        let mut tape = Tape::new();
        let cf = corrected_forward(&mut tape, &cfg, &head, &store, &x, exact_target).unwrap();
        let raw = tape.field_value(cf.raw);
        let cor = tape.field_value(cf.corrected);
        for (a, b) in raw.data().iter().zip(cor.data()) {
            assert_eq!(a.to_bits(), b.to_bits(), "pass-through is not bitwise");
        }
    }

    #[test]
    fn quadratic_identity_with_zero_a_and_matched_target() {
        let mut cfg = ModelConfig::fno1d(3, 2, 41);
        cfg.hidden_width = 8;
        cfg.layers = 2;
        cfg.modes = 4;
        let head = CorrectionHead {
            generator: Generator::PointwiseMlp,
            law: ConservationLaw::quadratic(vec![0, 1], 0.0),
        };
        let mut store = ParamStore::new();
        init_model_params(&cfg, &mut store).unwrap();
        init_head_params(&head, &cfg, &[], &mut store).unwrap();
        // Zero the final MLP layer so the generated A is identically zero.
        store.get_mut("head.mlp3.w").unwrap().data.fill(0.0);
        store.get_mut("head.mlp3.b").unwrap().data.fill(0.0);
        let x = rand_field(&[3, 16], 42);
        let c0 = {
            let mut tape = Tape::new();
            let fw = fno1d_forward(&mut tape, &cfg, &store, &x).unwrap();
            quantity_quadratic(tape.field_value(fw.out))
        };
        let mut tape = Tape::new();
        let cf = corrected_forward(&mut tape, &cfg, &head, &store, &x, c0).unwrap();
        assert!(!cf.degenerate);
        let raw = tape.field_value(cf.raw);
        let cor = tape.field_value(cf.corrected);
        for (a, b) in raw.data().iter().zip(cor.data()) {
            assert!((a - b).abs() <= 1e-12, "identity violated: {a} vs {b}");
        }
    }

    #[test]
    fn append_coords_layout() {
        let f1 = GridField::from_data(&[2, 4], vec![0.0; 8]).unwrap();
        let c1 = append_coords(&f1);
        assert_eq!(c1.shape(), &[3, 4]);
        assert_eq!(c1.channel(2), &[0.0, 0.25, 0.5, 0.75]);
        let f2 = GridField::zeros(&[1, 2, 2]);
        let c2 = append_coords(&f2);
        assert_eq!(c2.shape(), &[3, 2, 2]);
        assert_eq!(c2.channel(1), &[0.0, 0.0, 0.5, 0.5]);
        assert_eq!(c2.channel(2), &[0.0, 0.5, 0.0, 0.5]);
    }
}
