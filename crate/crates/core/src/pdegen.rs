//! Reference data generation: initial-condition samplers and classical
//! solvers for the benchmark problems, plus conservation-target computation.
//!
//! Benchmarks: 2D transport (analytic solution), 2D conservative
//! Allen-Cahn (forward Euler), 1D linear and nonlinear Schrodinger
//! (Strang splitting with FFT). All domains are periodic [0,1]^d with
//! unit-spacing-normalized coordinates x = i/N.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::f64::consts::PI;

use crate::conservation::ConservationLaw;
use crate::dataset::DatasetSplit;
use crate::fft::fft_raw;
use crate::field::{ComplexField, GridField};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pde {
    Te2d,
    Cac2d,
    Lse1d,
    Nls1d,
}

impl Pde {
    pub fn tag(self) -> u32 {
        match self {
            Pde::Te2d => 0,
            Pde::Cac2d => 1,
            Pde::Lse1d => 2,
            Pde::Nls1d => 3,
        }
    }

    pub fn from_tag(tag: u32) -> Result<Self> {
        Ok(match tag {
            0 => Pde::Te2d,
            1 => Pde::Cac2d,
            2 => Pde::Lse1d,
            3 => Pde::Nls1d,
            _ => return Err(Error::Data(format!("unknown pde tag {tag}"))),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Pde::Te2d => "te2d",
            Pde::Cac2d => "cac2d",
            Pde::Lse1d => "lse1d",
            Pde::Nls1d => "nls1d",
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PdeParams {
    /// Allen-Cahn diffusion coefficient.
    pub epsilon: f64,
    /// LSE constant potential.
    pub v: f64,
    /// NLS nonlinearity strength.
    pub lambda: f64,
}

impl Default for PdeParams {
    fn default() -> Self {
        PdeParams {
            epsilon: 0.01,
            v: 1.0,
            lambda: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PdeSpec {
    pub pde: Pde,
    /// Grid size per dimension.
    pub resolution: usize,
    /// Inner solver step.
    pub dt_solver: f64,
    /// Prediction interval: one dataset target is one horizon ahead.
    pub horizon: f64,
    pub params: PdeParams,
    pub seed: u64,
}

impl PdeSpec {
    /// Desk-scale defaults per benchmark.
    pub fn desk(pde: Pde, seed: u64) -> Self {
        let (resolution, dt_solver, horizon) = match pde {
            Pde::Te2d => (64, 0.05, 0.05),
            Pde::Cac2d => (32, 1e-4, 0.5),
            Pde::Lse1d | Pde::Nls1d => (128, 1e-4, 0.025),
        };
        PdeSpec {
            pde,
            resolution,
            dt_solver,
            horizon,
            params: PdeParams::default(),
            seed,
        }
    }

    pub fn steps_per_horizon(&self) -> Result<usize> {
        let ratio = self.horizon / self.dt_solver;
        let n = ratio.round();
        if n < 1.0 || (ratio - n).abs() > 1e-9 * n.max(1.0) {
            return Err(Error::Config(format!(
                "dt_solver {} does not divide horizon {} evenly",
                self.dt_solver, self.horizon
            )));
        }
        Ok(n as usize)
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution == 0 {
            return Err(Error::Config("resolution must be positive".into()));
        }
        self.steps_per_horizon()?;
        if self.pde == Pde::Cac2d {
            let h = 1.0 / self.resolution as f64;
            let bound = h * h / (4.0 * self.params.epsilon);
            if self.dt_solver > bound {
                return Err(Error::Config(format!(
                    "Allen-Cahn dt {} exceeds the diffusion stability bound {bound:.3e}",
                    self.dt_solver
                )));
            }
        }
        if matches!(self.pde, Pde::Lse1d | Pde::Nls1d) && !self.resolution.is_power_of_two() {
            return Err(Error::Config("Schrodinger resolution must be a power of two".into()));
        }
        Ok(())
    }
}

/// RNG stream for one sample: all samples derive from (seed, index), so
/// generation order never matters.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

// ── Transport equation ───────────────────────────────────────────────

/// Provenance of one transport sample: u0 = a sin(2 pi k1 x) sin(2 pi k2 y).
#[derive(Debug, Clone, Copy)]
pub struct TeIc {
    pub a: f64,
    pub k1: u32,
    pub k2: u32,
}

impl TeIc {
    /// Closed-form solution u0(x - t, y - t) on an n x n grid.
    pub fn eval(&self, n: usize, t: f64) -> GridField {
        let (a, k1, k2) = (self.a, self.k1 as f64, self.k2 as f64);
        GridField::from_fn(&[1, n, n], |i| {
            let y = (i / n) as f64 / n as f64 - t;
            let x = (i % n) as f64 / n as f64 - t;
            a * (2.0 * PI * k1 * x).sin() * (2.0 * PI * k2 * y).sin()
        })
    }

    /// A sample with either wavenumber zero is identically zero.
    pub fn is_degenerate(&self) -> bool {
        self.k1 == 0 || self.k2 == 0
    }
}

/// Amplitude uniform in [2.5, 3], wavenumbers uniform in {0,1,2,3}.
pub fn sample_ic_te2d(rng: &mut ChaCha8Rng) -> TeIc {
    TeIc {
        a: rng.gen_range(2.5..3.0),
        k1: rng.gen_range(0..4u32),
        k2: rng.gen_range(0..4u32),
    }
}

pub fn solve_te2d(ic: &TeIc, n: usize, t: f64) -> GridField {
    ic.eval(n, t)
}

/// Advance a sampled 2D field by the transport flow for time t via a
/// spectral phase shift. Exact to roundoff for band-limited fields, which
/// covers every transport sample; used where IC provenance is unavailable
/// (rollout ground truth from stored inputs).
pub fn te2d_shift(u: &GridField, t: f64) -> Result<GridField> {
    let dims = u.dims();
    if dims.len() != 2 || u.channels() != 1 {
        return Err(Error::Domain {
            op: "te2d_shift",
            msg: format!("expected single-channel 2D field, got {:?}", u.shape()),
        });
    }
    let (h, w) = (dims[0], dims[1]);
    if !h.is_power_of_two() || !w.is_power_of_two() {
        return Err(Error::NotPowerOfTwo { len: h.max(w) });
    }
    let mut re = u.data().to_vec();
    let mut im = vec![0.0; h * w];

    let phase = |n: usize, k: usize| {
        let kw = if k > n / 2 { k as f64 - n as f64 } else { k as f64 };
        let ang = -2.0 * PI * kw * t;
        (ang.cos(), ang.sin())
    };

    // Rows (x direction).
    for r in 0..h {
        let (rr, ri) = (&mut re[r * w..(r + 1) * w], &mut im[r * w..(r + 1) * w]);
        fft_raw(rr, ri, false)?;
        for k in 0..w {
            let (pc, ps) = phase(w, k);
            let (a, b) = (rr[k], ri[k]);
            rr[k] = a * pc - b * ps;
            ri[k] = a * ps + b * pc;
        }
    }
    // Columns (y direction).
    let mut cr = vec![0.0; h];
    let mut ci = vec![0.0; h];
    for c in 0..w {
        for r in 0..h {
            cr[r] = re[r * w + c];
            ci[r] = im[r * w + c];
        }
        fft_raw(&mut cr, &mut ci, false)?;
        for k in 0..h {
            let (pc, ps) = phase(h, k);
            let (a, b) = (cr[k], ci[k]);
            cr[k] = a * pc - b * ps;
            ci[k] = a * ps + b * pc;
        }
        fft_raw(&mut cr, &mut ci, true)?;
        for r in 0..h {
            re[r * w + c] = cr[r];
            im[r * w + c] = ci[r];
        }
    }
    // Undo the row transform.
    for r in 0..h {
        fft_raw(&mut re[r * w..(r + 1) * w], &mut im[r * w..(r + 1) * w], true)?;
    }
    let out = GridField::from_data(&[1, h, w], re)?;
    out.check_finite("te2d_shift")?;
    Ok(out)
}

// ── Conservative Allen-Cahn ──────────────────────────────────────────

/// Pointwise uniform [-1, 1] initial condition.
pub fn sample_ic_cac2d(rng: &mut ChaCha8Rng, n: usize) -> GridField {
    GridField::from_fn(&[1, n, n], |_| rng.gen_range(-1.0..1.0))
}

/// Forward Euler on u_t = eps*Lap(u) + f(u) - mean(f(u)), f(u) = u - u^3,
/// with the 5-point periodic Laplacian. The mean-subtracted reaction term
/// conserves the discrete mean identically up to roundoff.
pub fn solve_cac2d(u0: &GridField, spec: &PdeSpec, t: f64) -> Result<GridField> {
    let dims = u0.dims();
    if dims.len() != 2 || u0.channels() != 1 {
        return Err(Error::Domain {
            op: "solve_cac2d",
            msg: format!("expected single-channel 2D field, got {:?}", u0.shape()),
        });
    }
    let (h, w) = (dims[0], dims[1]);
    let dt = spec.dt_solver;
    let steps = {
        let ratio = t / dt;
        let n = ratio.round();
        if (ratio - n).abs() > 1e-9 * n.max(1.0) {
            return Err(Error::Config(format!("dt {dt} does not divide t {t} evenly")));
        }
        n as usize
    };
    let inv_h2 = (w as f64) * (h as f64); // 1/spacing^2 on a unit square grid
    let eps = spec.params.epsilon;
    let npts = (h * w) as f64;

    let mut u = u0.data().to_vec();
    let mut f = vec![0.0; h * w];
    for step in 0..steps {
        let mut fsum = 0.0;
        for (fi, &ui) in f.iter_mut().zip(&u) {
            *fi = ui - ui * ui * ui;
            fsum += *fi;
        }
        let fmean = fsum / npts;
        let prev = u.clone();
        for r in 0..h {
            let (up, dn) = ((r + h - 1) % h, (r + 1) % h);
            for c in 0..w {
                let (lf, rt) = ((c + w - 1) % w, (c + 1) % w);
                let i = r * w + c;
                let lap = (prev[up * w + c] + prev[dn * w + c] + prev[r * w + lf]
                    + prev[r * w + rt]
                    - 4.0 * prev[i])
                    * inv_h2;
                u[i] = prev[i] + dt * (eps * lap + f[i] - fmean);
                if !u[i].is_finite() || u[i].abs() > 10.0 {
                    return Err(Error::SolverInstability {
                        step,
                        value: u[i],
                    });
                }
            }
        }
    }
    GridField::from_data(&[1, h, w], u)
}

// ── Schrodinger ──────────────────────────────────────────────────────

/// psi0 = sum_{k=1}^{5} (a_k + i b_k) e^{i(2 pi k x + phi_k)} with
/// a, b standard normal and phases uniform in [0, 2 pi).
pub fn sample_ic_schrodinger(rng: &mut ChaCha8Rng, n: usize) -> ComplexField {
    let coefs: Vec<(f64, f64, f64)> = (0..5)
        .map(|_| {
            let a: f64 = rng.sample(StandardNormal);
            let b: f64 = rng.sample(StandardNormal);
            let phi = rng.gen_range(0.0..2.0 * PI);
            (a, b, phi)
        })
        .collect();
    let mut re = vec![0.0; n];
    let mut im = vec![0.0; n];
    for j in 0..n {
        let x = j as f64 / n as f64;
        let (mut sr, mut si) = (0.0, 0.0);
        for (k, &(a, b, phi)) in coefs.iter().enumerate() {
            let ang = 2.0 * PI * (k + 1) as f64 * x + phi;
            let (c, s) = (ang.cos(), ang.sin());
            sr += a * c - b * s;
            si += a * s + b * c;
        }
        re[j] = sr;
        im[j] = si;
    }
    ComplexField::from_parts(&[1, n], re, im).expect("ic shape")
}

/// Strang splitting: half kinetic step in Fourier space, full potential
/// (LSE) or nonlinear (NLS) phase rotation, half kinetic step. Every
/// substep is an exact phase rotation, so the discrete norm is conserved
/// to FFT roundoff.
pub fn solve_schrodinger(psi0: &ComplexField, spec: &PdeSpec, t: f64) -> Result<ComplexField> {
    let n = psi0.len();
    if !n.is_power_of_two() {
        return Err(Error::NotPowerOfTwo { len: n });
    }
    let dt = spec.dt_solver;
    let ratio = t / dt;
    let steps = ratio.round();
    if (ratio - steps).abs() > 1e-9 * steps.max(1.0) {
        return Err(Error::Config(format!("dt {dt} does not divide t {t} evenly")));
    }
    let steps = steps as usize;

    // Half-step kinetic phases exp(-i (2 pi k_wrapped)^2 dt / 4), with
    // signed frequencies k in (-N/2, N/2].
    let inv_n = 1.0 / n as f64;
    let kin: Vec<(f64, f64)> = (0..n)
        .map(|k| {
            let kw = if k > n / 2 { k as f64 - n as f64 } else { k as f64 };
            let w = 2.0 * PI * kw;
            let ang = -w * w * dt / 4.0;
            (ang.cos(), ang.sin())
        })
        .collect();

    let mut re = psi0.re.clone();
    let mut im = psi0.im.clone();
    let half_kinetic = |re: &mut [f64], im: &mut [f64]| -> Result<()> {
        fft_raw(re, im, false)?;
        for k in 0..n {
            let (c, s) = kin[k];
            let (a, b) = (re[k], im[k]);
            re[k] = a * c - b * s;
            im[k] = a * s + b * c;
        }
        fft_raw(re, im, true)?;
        Ok(())
    };

    for _ in 0..steps {
        half_kinetic(&mut re, &mut im)?;
        match spec.pde {
            Pde::Lse1d => {
                let ang = spec.params.v * dt;
                let (c, s) = (ang.cos(), ang.sin());
                for j in 0..n {
                    let (a, b) = (re[j], im[j]);
                    re[j] = a * c - b * s;
                    im[j] = a * s + b * c;
                }
            }
            Pde::Nls1d => {
                for j in 0..n {
                    let (a, b) = (re[j], im[j]);
                    let ang = spec.params.lambda * (a * a + b * b) * dt;
                    let (c, s) = (ang.cos(), ang.sin());
                    re[j] = a * c - b * s;
                    im[j] = a * s + b * c;
                }
            }
            _ => {
                return Err(Error::Domain {
                    op: "solve_schrodinger",
                    msg: format!("{:?} is not a Schrodinger benchmark", spec.pde),
                })
            }
        }
        half_kinetic(&mut re, &mut im)?;
    }
    let _ = inv_n;
    let out = ComplexField::from_parts(&[1, n], re, im).expect("ic shape");
    if !out.re.iter().chain(out.im.iter()).all(|v| v.is_finite()) {
        return Err(Error::Numerical("Schrodinger solve produced non-finite values".into()));
    }
    Ok(out)
}

// ── Targets and generation ───────────────────────────────────────────

/// The conserved value of the initial condition, carried through every
/// prediction step including autoregressive rollout.
pub fn compute_cons_target(input: &GridField, law: &ConservationLaw) -> f64 {
    law.quantity(input)
}

/// Advance a stored state field by one horizon with the reference solver.
/// Used to build rollout ground truth when only the field is available.
pub fn advance_horizon(spec: &PdeSpec, state: &GridField) -> Result<GridField> {
    match spec.pde {
        Pde::Te2d => te2d_shift(state, spec.horizon),
        Pde::Cac2d => solve_cac2d(state, spec, spec.horizon),
        Pde::Lse1d | Pde::Nls1d => {
            let psi = ComplexField::from_grid(state)?;
            let out = solve_schrodinger(&psi, spec, spec.horizon)?;
            Ok(out.to_grid())
        }
    }
}

/// Generate a dataset split of (input, one-horizon target, conservation
/// target) triples. Bitwise-reproducible from (spec, law, n, seed): each
/// sample uses its own RNG stream.
pub fn generate_split(
    spec: &PdeSpec,
    law: &ConservationLaw,
    n_samples: usize,
) -> Result<DatasetSplit> {
    spec.validate()?;
    let n = spec.resolution;
    let mut inputs = Vec::with_capacity(n_samples);
    let mut targets = Vec::with_capacity(n_samples);
    let mut cons_targets = Vec::with_capacity(n_samples);
    for idx in 0..n_samples {
        let mut rng = sample_rng(spec.seed, idx as u64);
        let (input, target) = match spec.pde {
            Pde::Te2d => {
                let ic = sample_ic_te2d(&mut rng);
                (solve_te2d(&ic, n, 0.0), solve_te2d(&ic, n, spec.horizon))
            }
            Pde::Cac2d => {
                let u0 = sample_ic_cac2d(&mut rng, n);
                let ut = solve_cac2d(&u0, spec, spec.horizon)?;
                (u0, ut)
            }
            Pde::Lse1d | Pde::Nls1d => {
                let psi0 = sample_ic_schrodinger(&mut rng, n);
                let psit = solve_schrodinger(&psi0, spec, spec.horizon)?;
                (psi0.to_grid(), psit.to_grid())
            }
        };
        let c = compute_cons_target(&input, law);
        let q_target = law.quantity(&target);
        let denom = c.abs().max(1.0);
        if (q_target - c).abs() > 1e-8 * denom {
            return Err(Error::Numerical(format!(
                "sample {idx}: solver violated the conservation law ({q_target} vs {c})"
            )));
        }
        inputs.push(input);
        targets.push(target);
        cons_targets.push(c);
    }
    Ok(DatasetSplit {
        inputs,
        targets,
        cons_targets,
        law: law.clone(),
        spec: spec.clone(),
    })
}
