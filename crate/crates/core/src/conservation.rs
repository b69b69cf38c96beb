//! Correction operators for linear and quadratic conservation laws.
//!
//! The linear corrector redistributes the conserved-sum residual along a
//! learnable direction `A` with `sum(A) = 1`; the quadratic corrector rescales
//! onto the constraint sphere along `U` and removes the cross term along an
//! unconstrained `A`. Both are built from tape primitives, so they are
//! differentiable end to end, and both reduce to exact pass-throughs on
//! already-conserving inputs.
//!
//! The non-learnable baselines live here too: closed-form projections
//! (uniform offset, radial rescale) and the penalty residual.

use crate::field::{pairwise_dot, pairwise_sum, GridField};
use crate::tape::{Reduction, Tape, Var};
use crate::{Error, Result};

/// Which class of conserved quantity a law tracks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LawKind {
    Linear,
    Quadratic,
}

/// Declarative description of the enforced conservation law.
#[derive(Debug, Clone)]
pub struct ConservationLaw {
    pub kind: LawKind,
    /// Output channels participating in the conserved quantity.
    pub channels: Vec<usize>,
    /// Stability constant for the quadratic corrector denominators.
    pub epsilon: f64,
    /// Rescale the quadratic output back onto the sphere after the
    /// epsilon-guarded formula, restoring machine-precision conservation.
    pub exactness_pass: bool,
}

impl ConservationLaw {
    pub fn linear(channels: Vec<usize>) -> Self {
        ConservationLaw {
            kind: LawKind::Linear,
            channels,
            epsilon: 0.0,
            exactness_pass: false,
        }
    }

    pub fn quadratic(channels: Vec<usize>, epsilon: f64) -> Self {
        assert!(epsilon >= 0.0);
        ConservationLaw {
            kind: LawKind::Quadratic,
            channels,
            epsilon,
            exactness_pass: true,
        }
    }

    pub fn validate(&self, out_channels: usize) -> Result<()> {
        if self.channels.is_empty() {
            return Err(Error::Config("law channels must be nonempty".into()));
        }
        if let Some(&c) = self.channels.iter().find(|&&c| c >= out_channels) {
            return Err(Error::IndexOutOfRange {
                index: c,
                len: out_channels,
            });
        }
        Ok(())
    }

    /// Restrict a field to the participating channels.
    pub fn restrict(&self, u: &GridField) -> GridField {
        let pts = u.points();
        let mut data = Vec::with_capacity(self.channels.len() * pts);
        for &c in &self.channels {
            data.extend_from_slice(u.channel(c));
        }
        let mut shape = vec![self.channels.len()];
        shape.extend_from_slice(u.dims());
        GridField::from_data(&shape, data).expect("restrict shape")
    }

    /// Conserved quantity of `u` over the participating channels.
    pub fn quantity(&self, u: &GridField) -> f64 {
        let r = self.restrict(u);
        match self.kind {
            LawKind::Linear => quantity_linear(&r),
            LawKind::Quadratic => quantity_quadratic(&r),
        }
    }
}

/// Constraint satisfied by a coefficient field.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Constraint {
    SumToOne,
    Unconstrained,
}

/// On-tape correction coefficients `A` with their constraint tag.
#[derive(Debug, Clone, Copy)]
pub struct CorrectionCoefficients {
    pub var: Var,
    pub constraint: Constraint,
}

impl CorrectionCoefficients {
    /// Wrap a coefficient field that must sum to one; verified on the
    /// forward value at 1e-12.
    pub fn sum_to_one(tape: &Tape, var: Var) -> Result<Self> {
        let s = pairwise_sum(tape.field_value(var).data());
        if (s - 1.0).abs() > 1e-12 {
            return Err(Error::Numerical(format!(
                "coefficients sum to {s}, expected 1"
            )));
        }
        Ok(CorrectionCoefficients {
            var,
            constraint: Constraint::SumToOne,
        })
    }

    pub fn unconstrained(var: Var) -> Self {
        CorrectionCoefficients {
            var,
            constraint: Constraint::Unconstrained,
        }
    }
}

// ── Discrete quantities ──────────────────────────────────────────────

/// Discrete mass: plain (unweighted) sum over all entries.
pub fn quantity_linear(u: &GridField) -> f64 {
    pairwise_sum(u.data())
}

/// Discrete squared norm: sum of squares over all entries. For a complex
/// field stored as (Re, Im) channels this equals sum |psi_i|^2.
pub fn quantity_quadratic(u: &GridField) -> f64 {
    let sq: Vec<f64> = u.data().iter().map(|&x| x * x).collect();
    pairwise_sum(&sq)
}

// ── Local and global linear correction ───────────────────────────────

/// Alter only entry `i` (flat index) so the sum hits `m0`.
pub fn local_correct(u: &GridField, i: usize, m0: f64) -> Result<GridField> {
    if i >= u.len() {
        return Err(Error::IndexOutOfRange {
            index: i,
            len: u.len(),
        });
    }
    let mut rest: Vec<f64> = u.data().to_vec();
    rest.remove(i);
    let mut out = u.clone();
    out.data_mut()[i] = m0 - pairwise_sum(&rest);
    Ok(out)
}

/// Global linear correction on tape: `U + (m0 - M(U)) * A`.
///
/// When `M(U) = m0` exactly the result is a bitwise copy of `U`.
pub fn linear_correct(
    tape: &mut Tape,
    u: Var,
    a: &CorrectionCoefficients,
    m0: f64,
) -> Result<Var> {
    if a.constraint != Constraint::SumToOne {
        return Err(Error::Domain {
            op: "linear_correct",
            msg: "coefficients must carry the SumToOne constraint".into(),
        });
    }
    let mass = tape.reduce_sum(u, Reduction::All)?;
    let m0v = tape.scalar(m0);
    let residual = tape.sub(m0v, mass)?;
    let out = tape.add_scaled(u, residual, a.var)?;
    debug_assert!({
        let m_u = tape.scalar_value(mass);
        let m_new = quantity_linear(tape.field_value(out));
        (m_new - m0).abs() <= 1e-10 * m0.abs().max(m_u.abs()).max(1.0)
    });
    Ok(out)
}

// ── Quadratic correction ─────────────────────────────────────────────

/// Real roots of `l1^2 S_U2 + 2 l1 l2 S_UA + l2^2 S_A2 = c0` in `l2`.
pub fn lambda2_roots(l1: f64, s_u2: f64, s_ua: f64, s_a2: f64, c0: f64) -> Result<Vec<f64>> {
    if s_a2 <= 0.0 {
        return Err(Error::Domain {
            op: "lambda2_roots",
            msg: format!("S_A2 must be positive, got {s_a2}"),
        });
    }
    let b = 2.0 * l1 * s_ua;
    let c = l1 * l1 * s_u2 - c0;
    let disc = b * b - 4.0 * s_a2 * c;
    if disc < 0.0 {
        return Ok(vec![]);
    }
    if disc == 0.0 {
        return Ok(vec![-b / (2.0 * s_a2)]);
    }
    let sq = disc.sqrt();
    // Citardauq-style pairing avoids cancellation on the small root.
    let q = -0.5 * (b + b.signum() * sq);
    let r1 = q / s_a2;
    let r2 = if q != 0.0 { c / q } else { -b / s_a2 - r1 };
    Ok(vec![r1, r2])
}

/// Outcome of the quadratic corrector in training (lenient) mode.
pub struct QuadraticOutcome {
    pub var: Var,
    /// True when the input was degenerate (U = 0 with c0 > 0) and the
    /// correction was skipped.
    pub degenerate: bool,
}

/// Quadratic correction on tape (strict mode): errors on degenerate input.
pub fn quadratic_correct(
    tape: &mut Tape,
    u: Var,
    a: &CorrectionCoefficients,
    c0: f64,
    law: &ConservationLaw,
) -> Result<Var> {
    let out = quadratic_correct_impl(tape, u, a, c0, law, true)?;
    Ok(out.var)
}

/// Quadratic correction in training mode: a degenerate batch passes the raw
/// output through and flags it instead of aborting.
pub fn quadratic_correct_lenient(
    tape: &mut Tape,
    u: Var,
    a: &CorrectionCoefficients,
    c0: f64,
    law: &ConservationLaw,
) -> Result<QuadraticOutcome> {
    quadratic_correct_impl(tape, u, a, c0, law, false)
}

fn quadratic_correct_impl(
    tape: &mut Tape,
    u: Var,
    a: &CorrectionCoefficients,
    c0: f64,
    law: &ConservationLaw,
    strict: bool,
) -> Result<QuadraticOutcome> {
    if c0 < 0.0 {
        return Err(Error::Domain {
            op: "quadratic_correct",
            msg: format!("c0 must be nonnegative, got {c0}"),
        });
    }
    let eps = law.epsilon;
    if c0 == 0.0 {
        // Target sphere degenerates to the origin; scale to zero.
        let zero = tape.scalar(0.0);
        let var = tape.mul(zero, u)?;
        return Ok(QuadraticOutcome {
            var,
            degenerate: false,
        });
    }
    let usq = tape.square(u)?;
    let s_u2 = tape.reduce_sum(usq, Reduction::All)?;
    let denom_u = if eps > 0.0 {
        let e = tape.scalar(eps);
        tape.add(s_u2, e)?
    } else {
        s_u2
    };
    if tape.scalar_value(s_u2) <= 0.0 {
        // U identically zero: rescaling cannot reach the sphere even with
        // the epsilon guard in place.
        if strict {
            return Err(Error::Domain {
                op: "quadratic_correct",
                msg: "input field is identically zero with c0 > 0".into(),
            });
        }
        return Ok(QuadraticOutcome {
            var: u,
            degenerate: true,
        });
    }
    let c0v = tape.scalar(c0);
    let ratio = tape.div(c0v, denom_u)?;
    let lambda1 = tape.sqrt(ratio)?;
    let scaled_u = tape.mul(lambda1, u)?;

    let ua = tape.mul(u, a.var)?;
    let s_ua = tape.reduce_sum(ua, Reduction::All)?;
    let asq = tape.square(a.var)?;
    let s_a2 = tape.reduce_sum(asq, Reduction::All)?;
    let denom_a = if eps > 0.0 {
        let e = tape.scalar(eps);
        tape.add(s_a2, e)?
    } else {
        s_a2
    };
    let mut out = if tape.scalar_value(denom_a) == 0.0 {
        // A is the zero field; the cross term vanishes identically.
        scaled_u
    } else {
        let frac = tape.div(s_ua, denom_a)?;
        let minus_two = tape.scalar(-2.0);
        let coef0 = tape.mul(minus_two, frac)?;
        let coef = tape.mul(coef0, lambda1)?;
        tape.add_scaled(scaled_u, coef, a.var)?
    };
    if law.exactness_pass && eps > 0.0 {
        // The epsilon guard leaves an O(eps) residual; one on-tape radial
        // rescale closes it without leaving the differentiation graph.
        let osq = tape.square(out)?;
        let s_o2 = tape.reduce_sum(osq, Reduction::All)?;
        if tape.scalar_value(s_o2) > 0.0 {
            let r = tape.div(c0v, s_o2)?;
            let mu = tape.sqrt(r)?;
            out = tape.mul(mu, out)?;
        }
    }
    Ok(QuadraticOutcome {
        var: out,
        degenerate: false,
    })
}

// ── Projection baselines ─────────────────────────────────────────────

/// Nearest point with `sum(u) = m0`: a uniform offset.
pub fn project_linear(u: &GridField, m0: f64) -> GridField {
    let shift = (m0 - quantity_linear(u)) / u.len() as f64;
    u.map(|x| x + shift)
}

/// Nearest point with `sum(u^2) = c0`: radial rescale onto the sphere.
pub fn project_quadratic(u: &GridField, c0: f64) -> Result<GridField> {
    let s = quantity_quadratic(u);
    if s == 0.0 {
        return Err(Error::Domain {
            op: "project_quadratic",
            msg: "projection of the zero field onto a sphere is non-unique".into(),
        });
    }
    let scale = (c0 / s).sqrt();
    Ok(u.map(|x| x * scale))
}

/// Differentiable uniform-offset projection, for projection-in-training.
pub fn project_linear_tape(tape: &mut Tape, u: Var, m0: f64) -> Result<Var> {
    let uf = tape.field_value(u).clone();
    let n = uf.len() as f64;
    let uniform = tape.field(GridField::from_fn(uf.shape(), |_| 1.0 / n));
    let a = CorrectionCoefficients::sum_to_one(tape, uniform)?;
    linear_correct(tape, u, &a, m0)
}

/// Differentiable radial projection, for projection-in-training.
pub fn project_quadratic_tape(tape: &mut Tape, u: Var, c0: f64) -> Result<Var> {
    let usq = tape.square(u)?;
    let s = tape.reduce_sum(usq, Reduction::All)?;
    if tape.scalar_value(s) <= 0.0 {
        return Err(Error::Domain {
            op: "project_quadratic",
            msg: "projection of the zero field onto a sphere is non-unique".into(),
        });
    }
    if c0 == 0.0 {
        let zero = tape.scalar(0.0);
        return tape.mul(zero, u);
    }
    let c0v = tape.scalar(c0);
    let r = tape.div(c0v, s)?;
    let mu = tape.sqrt(r)?;
    tape.mul(mu, u)
}

// ── Penalty and error reporting ──────────────────────────────────────

/// On-tape penalty residual `|quantity(U) - target|`; the multiplier lambda
/// is applied by the caller.
pub fn penalty_term(tape: &mut Tape, u: Var, kind: LawKind, target: f64) -> Result<Var> {
    let q = match kind {
        LawKind::Linear => tape.reduce_sum(u, Reduction::All)?,
        LawKind::Quadratic => {
            let sq = tape.square(u)?;
            tape.reduce_sum(sq, Reduction::All)?
        }
    };
    let tv = tape.scalar(target);
    let d = tape.sub(q, tv)?;
    tape.abs(d)
}

/// Absolute and (when the target is meaningfully nonzero) relative
/// conservation error of a prediction.
#[derive(Debug, Clone, Copy)]
pub struct ConservationError {
    pub abs: f64,
    pub rel: Option<f64>,
}

pub fn conservation_error(pred: &GridField, law: &ConservationLaw, target: f64) -> ConservationError {
    let abs = (law.quantity(pred) - target).abs();
    let rel = if target.abs() > 1e-8 {
        Some(abs / target.abs())
    } else {
        None
    };
    ConservationError { abs, rel }
}

/// Helper used by tests and training: sums `U_i A_i` off tape.
pub fn cross_sum(u: &GridField, a: &GridField) -> f64 {
    pairwise_dot(u.data(), a.data())
}
