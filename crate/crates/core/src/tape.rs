//! Reverse-mode automatic differentiation on a linear tape.
//!
//! The tape is eager: forward values are computed as operations are recorded,
//! so composite builders can branch on intermediate values while keeping the
//! backward pass a pure reverse sweep. Nodes are append-only and parents
//! always precede children, which makes the graph trivially acyclic.
//!
//! Gradients accumulate in tape order with no fusion: two identical runs
//! produce bit-identical values and gradients.

use std::collections::HashMap;

use crate::fft::fft_raw;
use crate::field::{pairwise_dot, pairwise_sum, GridField};
use crate::{Error, Result};

// ── Parameter storage ────────────────────────────────────────────────

/// One named parameter tensor with its gradient buffer and Adam slots.
#[derive(Debug, Clone)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
    pub grad: Vec<f64>,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Self {
        let n = data.len();
        debug_assert_eq!(n, dims.iter().product::<usize>());
        Tensor {
            dims,
            data,
            grad: vec![0.0; n],
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// Named map of parameter tensors. Registration order is the iteration order
/// for optimizer updates; serialization uses sorted (canonical) name order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
    /// Adam step counter, shared by all tensors.
    pub step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, dims: Vec<usize>, data: Vec<f64>) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter `{name}`"
        );
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), Tensor::new(dims, data)));
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = *self.index.get(name)?;
        Some(&mut self.entries[i].1)
    }

    pub fn tensor(&self, idx: usize) -> &Tensor {
        &self.entries[idx].1
    }

    pub fn tensor_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.entries[idx].1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    /// Names in canonical (sorted) order.
    pub fn sorted_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.entries.iter().map(|(n, _)| n.clone()).collect();
        names.sort();
        names
    }

    pub fn zero_grads(&mut self) {
        for (_, t) in self.entries.iter_mut() {
            t.grad.fill(0.0);
        }
    }
}

// ── Tape nodes ───────────────────────────────────────────────────────

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Forward value of a node.
#[derive(Debug, Clone)]
pub enum Payload {
    Scalar(f64),
    Field(GridField),
}

impl Payload {
}

/// Elementwise operation kinds exposed by [`Tape::elementwise`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElemOp {
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Square,
    Sqrt,
    Tanh,
    Gelu,
    Relu,
    Abs,
}

impl ElemOp {
    fn is_binary(self) -> bool {
        matches!(self, ElemOp::Add | ElemOp::Sub | ElemOp::Mul | ElemOp::Div)
    }
}

/// Reduction extent for [`Tape::reduce_sum`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    All,
    PerChannel,
}

#[derive(Debug, Clone)]
enum Op {
    Const,
    Param(usize),
    Unary(ElemOp, Var),
    Binary(ElemOp, Var, Var),
    SumAll(Var),
    SumPerChannel(Var),
    Dense { x: Var, w: Var, b: Var },
    Conv2d { x: Var, k: Var, b: Var },
    SpectralConv1d { x: Var, w: Var, modes: usize },
    SoftmaxFlat(Var),
    /// base + scale * dir, with a bitwise pass-through when scale == 0.
    AddScaled { base: Var, scale: Var, dir: Var },
    ConcatChannels(Var, Var),
}

struct Node {
    payload: Payload,
    op: Op,
}

/// The differentiation tape. One tape per forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

// GELU tanh-form constants.
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, payload: Payload, op: Op) -> Var {
        self.nodes.push(Node { payload, op });
        Var(self.nodes.len() - 1)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.push(Payload::Scalar(v), Op::Const)
    }

    pub fn field(&mut self, f: GridField) -> Var {
        self.push(Payload::Field(f), Op::Const)
    }

    /// Record a parameter leaf; its adjoint is accumulated into the store's
    /// gradient buffer by [`Tape::backward`].
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let idx = store
            .index_of(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        let t = store.tensor(idx);
        let f = GridField::from_data(&t.dims, t.data.clone())?;
        Ok(self.push(Payload::Field(f), Op::Param(idx)))
    }

    pub fn payload(&self, v: Var) -> &Payload {
        &self.nodes[v.0].payload
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        match &self.nodes[v.0].payload {
            Payload::Scalar(s) => *s,
            Payload::Field(_) => panic!("expected scalar node"),
        }
    }

    pub fn field_value(&self, v: Var) -> &GridField {
        match &self.nodes[v.0].payload {
            Payload::Field(f) => f,
            Payload::Scalar(_) => panic!("expected field node"),
        }
    }

    // ── Elementwise ──────────────────────────────────────────────────

    pub fn elementwise(&mut self, kind: ElemOp, a: Var, b: Option<Var>) -> Result<Var> {
        if kind.is_binary() {
            let b = b.ok_or_else(|| Error::Domain {
                op: "elementwise",
                msg: format!("{kind:?} needs a second operand"),
            })?;
            self.binary(kind, a, b)
        } else {
            if b.is_some() {
                return Err(Error::Domain {
                    op: "elementwise",
                    msg: format!("{kind:?} is unary"),
                });
            }
            self.unary(kind, a)
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(ElemOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(ElemOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(ElemOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(ElemOp::Div, a, b)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(ElemOp::Neg, a)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(ElemOp::Square, a)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(ElemOp::Sqrt, a)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(ElemOp::Tanh, a)
    }

    pub fn activation(&mut self, kind: ElemOp, a: Var) -> Result<Var> {
        self.unary(kind, a)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(ElemOp::Abs, a)
    }

    fn unary(&mut self, kind: ElemOp, a: Var) -> Result<Var> {
        let f = |x: f64| -> f64 {
            match kind {
                ElemOp::Neg => -x,
                ElemOp::Square => x * x,
                ElemOp::Sqrt => x.sqrt(),
                ElemOp::Tanh => x.tanh(),
                ElemOp::Gelu => gelu(x),
                ElemOp::Relu => x.max(0.0),
                ElemOp::Abs => x.abs(),
                _ => unreachable!(),
            }
        };
        if kind == ElemOp::Sqrt {
            let bad = match self.payload(a) {
                Payload::Scalar(s) => *s <= 0.0,
                Payload::Field(g) => g.data().iter().any(|&x| x <= 0.0),
            };
            if bad {
                return Err(Error::Domain {
                    op: "sqrt",
                    msg: "input must be strictly positive".into(),
                });
            }
        }
        let payload = match self.payload(a) {
            Payload::Scalar(s) => Payload::Scalar(f(*s)),
            Payload::Field(g) => Payload::Field(g.map(f)),
        };
        self.finite_checked(payload, Op::Unary(kind, a))
    }

    fn binary(&mut self, kind: ElemOp, a: Var, b: Var) -> Result<Var> {
        let f = |x: f64, y: f64| -> f64 {
            match kind {
                ElemOp::Add => x + y,
                ElemOp::Sub => x - y,
                ElemOp::Mul => x * y,
                ElemOp::Div => x / y,
                _ => unreachable!(),
            }
        };
        let payload = match (self.payload(a), self.payload(b)) {
            (Payload::Scalar(x), Payload::Scalar(y)) => Payload::Scalar(f(*x, *y)),
            (Payload::Scalar(x), Payload::Field(g)) => {
                let x = *x;
                Payload::Field(g.map(|y| f(x, y)))
            }
            (Payload::Field(g), Payload::Scalar(y)) => {
                let y = *y;
                Payload::Field(g.map(|x| f(x, y)))
            }
            (Payload::Field(ga), Payload::Field(gb)) => {
                if ga.shape() != gb.shape() {
                    return Err(Error::ShapeMismatch {
                        op: "elementwise",
                        left: ga.shape().to_vec(),
                        right: gb.shape().to_vec(),
                    });
                }
                let data = ga
                    .data()
                    .iter()
                    .zip(gb.data())
                    .map(|(&x, &y)| f(x, y))
                    .collect();
                Payload::Field(GridField::from_data(ga.shape(), data)?)
            }
        };
        self.finite_checked(payload, Op::Binary(kind, a, b))
    }

    fn finite_checked(&mut self, payload: Payload, op: Op) -> Result<Var> {
        let finite = match &payload {
            Payload::Scalar(s) => s.is_finite(),
            Payload::Field(f) => f.all_finite(),
        };
        if !finite {
            return Err(Error::Numerical(format!(
                "non-finite value produced by {op:?}"
            )));
        }
        Ok(self.push(payload, op))
    }

    // ── Reductions ───────────────────────────────────────────────────

    pub fn reduce_sum(&mut self, a: Var, over: Reduction) -> Result<Var> {
        let g = self.field_value(a).clone();
        match over {
            Reduction::All => {
                let s = pairwise_sum(g.data());
                self.finite_checked(Payload::Scalar(s), Op::SumAll(a))
            }
            Reduction::PerChannel => {
                let sums: Vec<f64> = (0..g.channels())
                    .map(|c| pairwise_sum(g.channel(c)))
                    .collect();
                let f = GridField::from_data(&[g.channels()], sums)?;
                self.finite_checked(Payload::Field(f), Op::SumPerChannel(a))
            }
        }
    }

    // ── Structured layers ────────────────────────────────────────────

    /// Per-grid-point affine channel mixing: `y[o,p] = sum_i W[o,i] x[i,p] + b[o]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xf, wf, bf) = (
            self.field_value(x).clone(),
            self.field_value(w).clone(),
            self.field_value(b).clone(),
        );
        let (ic, pts) = (xf.channels(), xf.points());
        let oc = wf.shape()[0];
        if wf.shape().len() != 2 || wf.shape()[1] != ic || bf.shape() != [oc] {
            return Err(Error::ShapeMismatch {
                op: "dense",
                left: wf.shape().to_vec(),
                right: xf.shape().to_vec(),
            });
        }
        let mut shape = xf.shape().to_vec();
        shape[0] = oc;
        let mut out = vec![0.0; oc * pts];
        for o in 0..oc {
            let row = &wf.data()[o * ic..(o + 1) * ic];
            let dst = &mut out[o * pts..(o + 1) * pts];
            dst.fill(bf.data()[o]);
            for i in 0..ic {
                let wv = row[i];
                let src = xf.channel(i);
                for p in 0..pts {
                    dst[p] += wv * src[p];
                }
            }
        }
        let f = GridField::from_data(&shape, out)?;
        self.finite_checked(Payload::Field(f), Op::Dense { x, w, b })
    }

    /// Periodic (wrap-around) 3x3 convolution on a 2D field.
    pub fn circular_conv2d(&mut self, x: Var, k: Var, b: Var) -> Result<Var> {
        let (xf, kf, bf) = (
            self.field_value(x).clone(),
            self.field_value(k).clone(),
            self.field_value(b).clone(),
        );
        if xf.dims().len() != 2 {
            return Err(Error::Domain {
                op: "circular_conv2d",
                msg: format!("input must be 2D, got dims {:?}", xf.dims()),
            });
        }
        let (ic, h, w) = (xf.channels(), xf.dims()[0], xf.dims()[1]);
        let oc = kf.shape()[0];
        if kf.shape() != [oc, ic, 3, 3] || bf.shape() != [oc] {
            return Err(Error::ShapeMismatch {
                op: "circular_conv2d",
                left: kf.shape().to_vec(),
                right: vec![oc, ic, 3, 3],
            });
        }
        let mut out = vec![0.0; oc * h * w];
        for o in 0..oc {
            let dst = &mut out[o * h * w..(o + 1) * h * w];
            dst.fill(bf.data()[o]);
            for i in 0..ic {
                let src = xf.channel(i);
                let ker = &kf.data()[(o * ic + i) * 9..(o * ic + i) * 9 + 9];
                for r in 0..h {
                    for c in 0..w {
                        let mut acc = 0.0;
                        for dr in 0..3 {
                            let rr = (r + h + dr - 1) % h;
                            for dc in 0..3 {
                                let cc = (c + w + dc - 1) % w;
                                acc += ker[dr * 3 + dc] * src[rr * w + cc];
                            }
                        }
                        dst[r * w + c] += acc;
                    }
                }
            }
        }
        let mut shape = xf.shape().to_vec();
        shape[0] = oc;
        let f = GridField::from_data(&shape, out)?;
        self.finite_checked(Payload::Field(f), Op::Conv2d { x, k, b })
    }

    /// FNO-style spectral mixing on a 1D real field: FFT, truncate to the
    /// lowest `modes` frequencies, complex channel mix by `w`
    /// (shape `[modes, oc, ic, 2]`), Hermitian completion, inverse FFT.
    pub fn spectral_conv1d(&mut self, x: Var, w: Var, modes: usize) -> Result<Var> {
        let (xf, wf) = (self.field_value(x).clone(), self.field_value(w).clone());
        let (ic, n) = (xf.channels(), xf.points());
        if xf.dims().len() != 1 || !n.is_power_of_two() {
            return Err(Error::NotPowerOfTwo { len: n });
        }
        if n < 2 * modes {
            return Err(Error::Domain {
                op: "spectral_conv1d",
                msg: format!("modes {modes} too large for grid length {n}"),
            });
        }
        let oc = wf.shape()[1];
        if wf.shape() != [modes, oc, ic, 2] {
            return Err(Error::ShapeMismatch {
                op: "spectral_conv1d",
                left: wf.shape().to_vec(),
                right: vec![modes, oc, ic, 2],
            });
        }
        let (xh_re, xh_im) = spectral_fft_channels(&xf)?;
        let mut out = vec![0.0; oc * n];
        let mut h_re = vec![0.0; n];
        let mut h_im = vec![0.0; n];
        for o in 0..oc {
            h_re.fill(0.0);
            h_im.fill(0.0);
            for k in 0..modes {
                let (mut yr, mut yi) = (0.0, 0.0);
                for i in 0..ic {
                    let wi = ((k * oc + o) * ic + i) * 2;
                    let (wr, wim) = (wf.data()[wi], wf.data()[wi + 1]);
                    let (xr, xim) = (xh_re[i * n + k], xh_im[i * n + k]);
                    yr += wr * xr - wim * xim;
                    yi += wr * xim + wim * xr;
                }
                h_re[k] = yr;
                h_im[k] = yi;
                if k > 0 {
                    h_re[n - k] = yr;
                    h_im[n - k] = -yi;
                }
            }
            fft_raw(&mut h_re, &mut h_im, true)?;
            out[o * n..(o + 1) * n].copy_from_slice(&h_re);
        }
        let f = GridField::from_data(&[oc, n], out)?;
        self.finite_checked(Payload::Field(f), Op::SpectralConv1d { x, w, modes })
    }

    /// Numerically stabilized softmax over the whole flattened field.
    pub fn softmax_flat(&mut self, logits: Var) -> Result<Var> {
        let g = self.field_value(logits).clone();
        let max = g.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = g.data().iter().map(|&x| (x - max).exp()).collect();
        let z = pairwise_sum(&exps);
        let alpha: Vec<f64> = exps.iter().map(|&e| e / z).collect();
        let f = GridField::from_data(g.shape(), alpha)?;
        self.finite_checked(Payload::Field(f), Op::SoftmaxFlat(logits))
    }

    /// `base + scale * dir`. When the scalar `scale` is exactly zero the
    /// forward value is a bitwise copy of `base`, which is what makes the
    /// correction operators exact pass-throughs on conserving inputs.
    pub fn add_scaled(&mut self, base: Var, scale: Var, dir: Var) -> Result<Var> {
        let s = self.scalar_value(scale);
        let (bf, df) = (self.field_value(base).clone(), self.field_value(dir).clone());
        if bf.shape() != df.shape() {
            return Err(Error::ShapeMismatch {
                op: "add_scaled",
                left: bf.shape().to_vec(),
                right: df.shape().to_vec(),
            });
        }
        let payload = if s == 0.0 {
            Payload::Field(bf)
        } else {
            let data = bf
                .data()
                .iter()
                .zip(df.data())
                .map(|(&b, &d)| b + s * d)
                .collect();
            Payload::Field(GridField::from_data(bf.shape(), data)?)
        };
        self.finite_checked(payload, Op::AddScaled { base, scale, dir })
    }

    /// Concatenate two fields along the channel axis (identical grid dims).
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (fa, fb) = (self.field_value(a).clone(), self.field_value(b).clone());
        if fa.dims() != fb.dims() {
            return Err(Error::ShapeMismatch {
                op: "concat_channels",
                left: fa.shape().to_vec(),
                right: fb.shape().to_vec(),
            });
        }
        let mut shape = fa.shape().to_vec();
        shape[0] += fb.channels();
        let mut data = Vec::with_capacity(fa.len() + fb.len());
        data.extend_from_slice(fa.data());
        data.extend_from_slice(fb.data());
        let f = GridField::from_data(&shape, data)?;
        self.finite_checked(Payload::Field(f), Op::ConcatChannels(a, b))
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Accumulate `d(root)/d(param)` into the store's gradient buffers,
    /// seeding the root adjoint with 1.
    pub fn backward(&self, root: Var, store: &mut ParamStore) -> Result<()> {
        self.backward_scaled(root, 1.0, store)
    }

    /// Backward with an arbitrary scalar seed (used for mini-batch averaging).
    pub fn backward_scaled(&self, root: Var, seed: f64, store: &mut ParamStore) -> Result<()> {
        if !matches!(self.nodes[root.0].payload, Payload::Scalar(_)) {
            return Err(Error::Domain {
                op: "backward",
                msg: "root must be a scalar node".into(),
            });
        }
        let mut adj: Vec<Option<Payload>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[root.0] = Some(Payload::Scalar(seed));

        for i in (0..=root.0).rev() {
            let g = match adj[i].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[i].op {
                Op::Const => {}
                Op::Param(idx) => {
                    let gf = as_field(&g);
                    let t = store.tensor_mut(*idx);
                    for (dst, src) in t.grad.iter_mut().zip(gf) {
                        *dst += src;
                    }
                }
                Op::Unary(kind, a) => self.back_unary(*kind, *a, &g, &mut adj),
                Op::Binary(kind, a, b) => self.back_binary(*kind, *a, *b, &g, &mut adj),
                Op::SumAll(a) => {
                    let gs = as_scalar(&g);
                    let fa = self.field_value(*a);
                    add_field(&mut adj[a.0], fa.shape(), |buf| {
                        for x in buf.iter_mut() {
                            *x += gs;
                        }
                    });
                }
                Op::SumPerChannel(a) => {
                    let gf = as_field(&g).to_vec();
                    let fa = self.field_value(*a);
                    let pts = fa.points();
                    add_field(&mut adj[a.0], fa.shape(), |buf| {
                        for (c, gc) in gf.iter().enumerate() {
                            for x in buf[c * pts..(c + 1) * pts].iter_mut() {
                                *x += gc;
                            }
                        }
                    });
                }
                Op::Dense { x, w, b } => self.back_dense(*x, *w, *b, &g, &mut adj),
                Op::Conv2d { x, k, b } => self.back_conv2d(*x, *k, *b, &g, &mut adj),
                Op::SpectralConv1d { x, w, modes } => {
                    self.back_spectral(*x, *w, *modes, &g, &mut adj)?
                }
                Op::SoftmaxFlat(a) => {
                    let gf = as_field(&g);
                    let alpha = self.field_value(Var(i)); // output is on this node
                    let s = pairwise_dot(gf, alpha.data());
                    let alpha = alpha.clone();
                    let gf = gf.to_vec();
                    add_field(&mut adj[a.0], alpha.shape(), |buf| {
                        for ((x, &al), &gg) in buf.iter_mut().zip(alpha.data()).zip(&gf) {
                            *x += al * (gg - s);
                        }
                    });
                }
                Op::AddScaled { base, scale, dir } => {
                    let gf = as_field(&g).to_vec();
                    let s = self.scalar_value(*scale);
                    let df = self.field_value(*dir).clone();
                    add_field(&mut adj[base.0], df.shape(), |buf| {
                        for (x, &gg) in buf.iter_mut().zip(&gf) {
                            *x += gg;
                        }
                    });
                    add_scalar(&mut adj[scale.0], pairwise_dot(&gf, df.data()));
                    add_field(&mut adj[dir.0], df.shape(), |buf| {
                        for (x, &gg) in buf.iter_mut().zip(&gf) {
                            *x += s * gg;
                        }
                    });
                }
                Op::ConcatChannels(a, b) => {
                    let gf = as_field(&g).to_vec();
                    let fa = self.field_value(*a).clone();
                    let fb = self.field_value(*b).clone();
                    add_field(&mut adj[a.0], fa.shape(), |buf| {
                        for (x, &gg) in buf.iter_mut().zip(&gf[..fa.len()]) {
                            *x += gg;
                        }
                    });
                    add_field(&mut adj[b.0], fb.shape(), |buf| {
                        for (x, &gg) in buf.iter_mut().zip(&gf[fa.len()..]) {
                            *x += gg;
                        }
                    });
                }
            }
        }
        Ok(())
    }

    fn back_unary(&self, kind: ElemOp, a: Var, g: &Payload, adj: &mut [Option<Payload>]) {
        let deriv = |x: f64, y: f64| -> f64 {
            // y is the forward output, handy for sqrt/tanh.
            match kind {
                ElemOp::Neg => -1.0,
                ElemOp::Square => 2.0 * x,
                ElemOp::Sqrt => 0.5 / y,
                ElemOp::Tanh => 1.0 - y * y,
                ElemOp::Gelu => gelu_grad(x),
                ElemOp::Relu => {
                    if x > 0.0 {
                        1.0
                    } else {
                        0.0
                    }
                }
                ElemOp::Abs => {
                    if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                }
                _ => unreachable!(),
            }
        };
        // The unary output node is the one whose adjoint we are propagating;
        // find it by matching payload shape against the parent.
        match (self.payload(a), g) {
            (Payload::Scalar(x), Payload::Scalar(gs)) => {
                let y = unary_forward(kind, *x);
                add_scalar(&mut adj[a.0], gs * deriv(*x, y));
            }
            (Payload::Field(xf), Payload::Field(_)) | (Payload::Field(xf), Payload::Scalar(_)) => {
                let gf = as_field(g).to_vec();
                let xd = xf.data().to_vec();
                add_field(&mut adj[a.0], xf.shape(), |buf| {
                    for ((dst, &x), &gg) in buf.iter_mut().zip(&xd).zip(&gf) {
                        let y = unary_forward(kind, x);
                        *dst += gg * deriv(x, y);
                    }
                });
            }
            _ => unreachable!("scalar parent with field adjoint"),
        }
    }

    fn back_binary(&self, kind: ElemOp, a: Var, b: Var, g: &Payload, adj: &mut [Option<Payload>]) {
        let pa = self.payload(a).clone();
        let pb = self.payload(b).clone();
        // Per-element partials.
        let da = |x: f64, y: f64| match kind {
            ElemOp::Add => 1.0,
            ElemOp::Sub => 1.0,
            ElemOp::Mul => y,
            ElemOp::Div => 1.0 / y,
            _ => {
                let _ = x;
                unreachable!()
            }
        };
        let db = |x: f64, y: f64| match kind {
            ElemOp::Add => 1.0,
            ElemOp::Sub => -1.0,
            ElemOp::Mul => x,
            ElemOp::Div => -x / (y * y),
            _ => unreachable!(),
        };
        match (&pa, &pb) {
            (Payload::Scalar(x), Payload::Scalar(y)) => {
                let gs = as_scalar(g);
                add_scalar(&mut adj[a.0], gs * da(*x, *y));
                add_scalar(&mut adj[b.0], gs * db(*x, *y));
            }
            (Payload::Scalar(x), Payload::Field(yf)) => {
                let gf = as_field(g).to_vec();
                let contrib: Vec<f64> = yf
                    .data()
                    .iter()
                    .zip(&gf)
                    .map(|(&y, &gg)| gg * da(*x, y))
                    .collect();
                add_scalar(&mut adj[a.0], pairwise_sum(&contrib));
                let x = *x;
                let yd = yf.data().to_vec();
                add_field(&mut adj[b.0], yf.shape(), |buf| {
                    for ((dst, &y), &gg) in buf.iter_mut().zip(&yd).zip(&gf) {
                        *dst += gg * db(x, y);
                    }
                });
            }
            (Payload::Field(xf), Payload::Scalar(y)) => {
                let gf = as_field(g).to_vec();
                let y = *y;
                let xd = xf.data().to_vec();
                add_field(&mut adj[a.0], xf.shape(), |buf| {
                    for ((dst, &x), &gg) in buf.iter_mut().zip(&xd).zip(&gf) {
                        *dst += gg * da(x, y);
                    }
                });
                let contrib: Vec<f64> = xd.iter().zip(&gf).map(|(&x, &gg)| gg * db(x, y)).collect();
                add_scalar(&mut adj[b.0], pairwise_sum(&contrib));
            }
            (Payload::Field(xf), Payload::Field(yf)) => {
                let gf = as_field(g).to_vec();
                let xd = xf.data().to_vec();
                let yd = yf.data().to_vec();
                add_field(&mut adj[a.0], xf.shape(), |buf| {
                    for (i, dst) in buf.iter_mut().enumerate() {
                        *dst += gf[i] * da(xd[i], yd[i]);
                    }
                });
                add_field(&mut adj[b.0], yf.shape(), |buf| {
                    for (i, dst) in buf.iter_mut().enumerate() {
                        *dst += gf[i] * db(xd[i], yd[i]);
                    }
                });
            }
        }
    }

    fn back_dense(&self, x: Var, w: Var, b: Var, g: &Payload, adj: &mut [Option<Payload>]) {
        let gf = as_field(g).to_vec();
        let xf = self.field_value(x).clone();
        let wf = self.field_value(w).clone();
        let (ic, pts, oc) = (xf.channels(), xf.points(), wf.shape()[0]);
        add_field(&mut adj[x.0], xf.shape(), |buf| {
            for o in 0..oc {
                let row = &wf.data()[o * ic..(o + 1) * ic];
                let go = &gf[o * pts..(o + 1) * pts];
                for (i, &wv) in row.iter().enumerate() {
                    let dst = &mut buf[i * pts..(i + 1) * pts];
                    for p in 0..pts {
                        dst[p] += wv * go[p];
                    }
                }
            }
        });
        add_field(&mut adj[w.0], wf.shape(), |buf| {
            for o in 0..oc {
                let go = &gf[o * pts..(o + 1) * pts];
                for i in 0..ic {
                    buf[o * ic + i] += pairwise_dot(go, xf.channel(i));
                }
            }
        });
        add_field(&mut adj[b.0], &[oc], |buf| {
            for o in 0..oc {
                buf[o] += pairwise_sum(&gf[o * pts..(o + 1) * pts]);
            }
        });
    }

    fn back_conv2d(&self, x: Var, k: Var, b: Var, g: &Payload, adj: &mut [Option<Payload>]) {
        let gf = as_field(g).to_vec();
        let xf = self.field_value(x).clone();
        let kf = self.field_value(k).clone();
        let (ic, h, w) = (xf.channels(), xf.dims()[0], xf.dims()[1]);
        let oc = kf.shape()[0];
        add_field(&mut adj[x.0], xf.shape(), |buf| {
            for o in 0..oc {
                let go = &gf[o * h * w..(o + 1) * h * w];
                for i in 0..ic {
                    let ker = &kf.data()[(o * ic + i) * 9..(o * ic + i) * 9 + 9];
                    let dst = &mut buf[i * h * w..(i + 1) * h * w];
                    for r in 0..h {
                        for c in 0..w {
                            let gv = go[r * w + c];
                            for dr in 0..3 {
                                let rr = (r + h + dr - 1) % h;
                                for dc in 0..3 {
                                    let cc = (c + w + dc - 1) % w;
                                    dst[rr * w + cc] += ker[dr * 3 + dc] * gv;
                                }
                            }
                        }
                    }
                }
            }
        });
        add_field(&mut adj[k.0], kf.shape(), |buf| {
            for o in 0..oc {
                let go = &gf[o * h * w..(o + 1) * h * w];
                for i in 0..ic {
                    let src = xf.channel(i);
                    let ker = &mut buf[(o * ic + i) * 9..(o * ic + i) * 9 + 9];
                    for r in 0..h {
                        for c in 0..w {
                            let gv = go[r * w + c];
                            for dr in 0..3 {
                                let rr = (r + h + dr - 1) % h;
                                for dc in 0..3 {
                                    let cc = (c + w + dc - 1) % w;
                                    ker[dr * 3 + dc] += src[rr * w + cc] * gv;
                                }
                            }
                        }
                    }
                }
            }
        });
        add_field(&mut adj[b.0], &[oc], |buf| {
            for o in 0..oc {
                buf[o] += pairwise_sum(&gf[o * h * w..(o + 1) * h * w]);
            }
        });
    }

    fn back_spectral(
        &self,
        x: Var,
        w: Var,
        modes: usize,
        g: &Payload,
        adj: &mut [Option<Payload>],
    ) -> Result<()> {
        let gf = as_field(g).to_vec();
        let xf = self.field_value(x).clone();
        let wf = self.field_value(w).clone();
        let (ic, n) = (xf.channels(), xf.points());
        let oc = wf.shape()[1];
        let (xh_re, xh_im) = spectral_fft_channels(&xf)?;
        // Adjoint of the retained output spectrum: G_Y[o][k] = (c_k / N) FFT(g_o)[k]
        // with c_0 = 1 and c_k = 2 for the conjugate-completed bins.
        let mut gy_re = vec![0.0; oc * modes];
        let mut gy_im = vec![0.0; oc * modes];
        let mut buf_re = vec![0.0; n];
        let mut buf_im = vec![0.0; n];
        for o in 0..oc {
            buf_re.copy_from_slice(&gf[o * n..(o + 1) * n]);
            buf_im.fill(0.0);
            fft_raw(&mut buf_re, &mut buf_im, false)?;
            for k in 0..modes {
                let ck = if k == 0 { 1.0 } else { 2.0 };
                gy_re[o * modes + k] = ck / n as f64 * buf_re[k];
                gy_im[o * modes + k] = ck / n as f64 * buf_im[k];
            }
        }
        // dW[k,o,i] = G_Y[o][k] * conj(Xhat[i][k])
        add_field(&mut adj[w.0], wf.shape(), |buf| {
            for k in 0..modes {
                for o in 0..oc {
                    let (gr, gi) = (gy_re[o * modes + k], gy_im[o * modes + k]);
                    for i in 0..ic {
                        let (xr, xi) = (xh_re[i * n + k], xh_im[i * n + k]);
                        let idx = ((k * oc + o) * ic + i) * 2;
                        buf[idx] += gr * xr + gi * xi;
                        buf[idx + 1] += gi * xr - gr * xi;
                    }
                }
            }
        });
        // G_X[i][k] = sum_o conj(W[k,o,i]) G_Y[o][k];  dx = N * Re(IFFT(zero-pad(G_X)))
        let mut dx = vec![0.0; ic * n];
        for i in 0..ic {
            buf_re.fill(0.0);
            buf_im.fill(0.0);
            for k in 0..modes {
                let (mut sr, mut si) = (0.0, 0.0);
                for o in 0..oc {
                    let idx = ((k * oc + o) * ic + i) * 2;
                    let (wr, wi) = (wf.data()[idx], wf.data()[idx + 1]);
                    let (gr, gi) = (gy_re[o * modes + k], gy_im[o * modes + k]);
                    sr += wr * gr + wi * gi;
                    si += wr * gi - wi * gr;
                }
                buf_re[k] = sr;
                buf_im[k] = si;
            }
            fft_raw(&mut buf_re, &mut buf_im, true)?;
            for p in 0..n {
                dx[i * n + p] = n as f64 * buf_re[p];
            }
        }
        add_field(&mut adj[x.0], xf.shape(), |buf| {
            for (dst, &src) in buf.iter_mut().zip(&dx) {
                *dst += src;
            }
        });
        Ok(())
    }
}

fn unary_forward(kind: ElemOp, x: f64) -> f64 {
    match kind {
        ElemOp::Neg => -x,
        ElemOp::Square => x * x,
        ElemOp::Sqrt => x.sqrt(),
        ElemOp::Tanh => x.tanh(),
        ElemOp::Gelu => gelu(x),
        ElemOp::Relu => x.max(0.0),
        ElemOp::Abs => x.abs(),
        _ => unreachable!(),
    }
}

fn as_scalar(p: &Payload) -> f64 {
    match p {
        Payload::Scalar(s) => *s,
        Payload::Field(_) => panic!("expected scalar adjoint"),
    }
}

fn as_field(p: &Payload) -> &[f64] {
    match p {
        Payload::Field(f) => f.data(),
        Payload::Scalar(_) => panic!("expected field adjoint"),
    }
}

fn add_scalar(slot: &mut Option<Payload>, v: f64) {
    match slot {
        Some(Payload::Scalar(s)) => *s += v,
        None => *slot = Some(Payload::Scalar(v)),
        _ => panic!("adjoint kind mismatch"),
    }
}

fn add_field(slot: &mut Option<Payload>, shape: &[usize], write: impl FnOnce(&mut [f64])) {
    if slot.is_none() {
        *slot = Some(Payload::Field(GridField::zeros(shape)));
    }
    match slot {
        Some(Payload::Field(f)) => write(f.data_mut()),
        _ => panic!("adjoint kind mismatch"),
    }
}

/// Per-channel forward FFT of a real field, returned as flat re/im buffers.
fn spectral_fft_channels(xf: &GridField) -> Result<(Vec<f64>, Vec<f64>)> {
    let (ic, n) = (xf.channels(), xf.points());
    let mut re = vec![0.0; ic * n];
    let mut im = vec![0.0; ic * n];
    for i in 0..ic {
        re[i * n..(i + 1) * n].copy_from_slice(xf.channel(i));
        fft_raw(&mut re[i * n..(i + 1) * n], &mut im[i * n..(i + 1) * n], false)?;
    }
    Ok((re, im))
}

// ── Finite-difference verification ───────────────────────────────────

/// Central-difference gradient check for a scalar function of the store's
/// parameters. Returns the worst relative error over all coordinates with
/// denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(build: F, store: &mut ParamStore, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    assert!(h > 0.0);
    store.zero_grads();
    let mut tape = Tape::new();
    let root = build(&mut tape, store)?;
    tape.backward(root, store)?;
    let analytic: Vec<Vec<f64>> = store.iter().map(|(_, t)| t.grad.clone()).collect();

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let root = build(&mut tape, store)?;
        Ok(tape.scalar_value(root))
    };

    let mut worst = 0.0f64;
    for ti in 0..store.len() {
        for ci in 0..store.tensor(ti).data.len() {
            let orig = store.tensor(ti).data[ci];
            store.tensor_mut(ti).data[ci] = orig + h;
            let fp = eval(store)?;
            store.tensor_mut(ti).data[ci] = orig - h;
            let fm = eval(store)?;
            store.tensor_mut(ti).data[ci] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[ti][ci];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn vec_field(xs: &[f64]) -> GridField {
        GridField::from_data(&[1, xs.len()], xs.to_vec()).unwrap()
    }

    #[test]
    fn elementwise_add() {
        let mut t = Tape::new();
        let a = t.field(vec_field(&[1.0, 2.0]));
        let b = t.field(vec_field(&[3.0, 4.0]));
        let c = t.add(a, b).unwrap();
        assert_eq!(t.field_value(c).data(), &[4.0, 6.0]);
    }

    #[test]
    fn elementwise_shape_mismatch_reports_both_shapes() {
        let mut t = Tape::new();
        let a = t.field(vec_field(&[1.0, 2.0]));
        let b = t.field(vec_field(&[1.0, 2.0, 3.0]));
        match t.add(a, b) {
            Err(Error::ShapeMismatch { left, right, .. }) => {
                assert_eq!(left, vec![1, 2]);
                assert_eq!(right, vec![1, 3]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn sqrt_rejects_non_positive() {
        let mut t = Tape::new();
        let a = t.field(vec_field(&[1.0, 0.0]));
        assert!(t.sqrt(a).is_err());
    }

    #[test]
    fn mul_by_zero_field_kills_gradient() {
        let mut store = ParamStore::new();
        store.register("x", vec![1, 2], vec![5.0, -3.0]);
        let mut t = Tape::new();
        let x = t.param(&store, "x").unwrap();
        let z = t.field(vec_field(&[0.0, 0.0]));
        let y = t.mul(x, z).unwrap();
        assert_eq!(t.field_value(y).data(), &[0.0, 0.0]);
        let s = t.reduce_sum(y, Reduction::All).unwrap();
        t.backward(s, &mut store).unwrap();
        assert_eq!(store.get("x").unwrap().grad, vec![0.0, 0.0]);
    }

    #[test]
    fn square_backward_matches_hand_diff() {
        let mut store = ParamStore::new();
        store.register("x", vec![1, 2], vec![3.0, 4.0]);
        let mut t = Tape::new();
        let x = t.param(&store, "x").unwrap();
        let sq = t.square(x).unwrap();
        assert_eq!(t.field_value(sq).data(), &[9.0, 16.0]);
        let s = t.reduce_sum(sq, Reduction::All).unwrap();
        t.backward(s, &mut store).unwrap();
        assert_eq!(store.get("x").unwrap().grad, vec![6.0, 8.0]);
    }

    #[test]
    fn reduce_sum_variants() {
        let mut t = Tape::new();
        let a = t.field(GridField::from_data(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let all = t.reduce_sum(a, Reduction::All).unwrap();
        assert_eq!(t.scalar_value(all), 10.0);
        let pc = t.reduce_sum(a, Reduction::PerChannel).unwrap();
        assert_eq!(t.field_value(pc).data(), &[3.0, 7.0]);
    }

    #[test]
    fn dense_identity_and_hand_case() {
        let mut store = ParamStore::new();
        store.register("w", vec![1, 1], vec![2.0]);
        store.register("b", vec![1], vec![1.0]);
        let mut t = Tape::new();
        let x = t.field(vec_field(&[3.0]));
        let w = t.param(&store, "w").unwrap();
        let b = t.param(&store, "b").unwrap();
        let y = t.dense(x, w, b).unwrap();
        assert_eq!(t.field_value(y).data(), &[7.0]);
    }

    #[test]
    fn dense_bias_gradient_is_point_count() {
        let mut store = ParamStore::new();
        store.register("w", vec![1, 1], vec![1.0]);
        store.register("b", vec![1], vec![0.0]);
        let mut t = Tape::new();
        let x = t.field(vec_field(&[1.0, 2.0, 3.0, 4.0]));
        let w = t.param(&store, "w").unwrap();
        let b = t.param(&store, "b").unwrap();
        let y = t.dense(x, w, b).unwrap();
        let s = t.reduce_sum(y, Reduction::All).unwrap();
        t.backward(s, &mut store).unwrap();
        assert_eq!(store.get("b").unwrap().grad, vec![4.0]);
    }

    #[test]
    fn conv2d_delta_kernel_is_identity() {
        let mut store = ParamStore::new();
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        store.register("k", vec![1, 1, 3, 3], k);
        store.register("b", vec![1], vec![0.0]);
        let x = GridField::from_fn(&[1, 4, 4], |i| (i as f64).sin());
        let mut t = Tape::new();
        let xv = t.field(x.clone());
        let kv = t.param(&store, "k").unwrap();
        let bv = t.param(&store, "b").unwrap();
        let y = t.circular_conv2d(xv, kv, bv).unwrap();
        assert_eq!(t.field_value(y).data(), x.data());
    }

    #[test]
    fn conv2d_constant_field_scales_by_kernel_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let k: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let ksum: f64 = k.iter().sum();
        let mut store = ParamStore::new();
        store.register("k", vec![1, 1, 3, 3], k);
        store.register("b", vec![1], vec![0.0]);
        let c = 0.7;
        let mut t = Tape::new();
        let xv = t.field(GridField::from_fn(&[1, 4, 4], |_| c));
        let kv = t.param(&store, "k").unwrap();
        let bv = t.param(&store, "b").unwrap();
        let y = t.circular_conv2d(xv, kv, bv).unwrap();
        for &v in t.field_value(y).data() {
            assert!((v - c * ksum).abs() < 1e-14);
        }
    }

    #[test]
    fn conv2d_grad_check_vs_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        store.register("k", vec![1, 1, 3, 3], (0..9).map(|_| rng.gen_range(-0.5..0.5)).collect());
        store.register("b", vec![1], vec![0.1]);
        store.register("x", vec![1, 4, 4], (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let err = grad_check(
            |t, s| {
                let x = t.param(s, "x")?;
                let k = t.param(s, "k")?;
                let b = t.param(s, "b")?;
                let y = t.circular_conv2d(x, k, b)?;
                let sq = t.square(y)?;
                t.reduce_sum(sq, Reduction::All)
            },
            &mut store,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "rel error {err}");
    }

    #[test]
    fn spectral_identity_on_band_limited_input() {
        let n = 16;
        let modes = 4;
        // Band-limited input: frequencies 0..modes only.
        let x = GridField::from_fn(&[1, n], |i| {
            let xx = i as f64 / n as f64;
            1.0 + (std::f64::consts::TAU * xx).cos() + 0.5 * (2.0 * std::f64::consts::TAU * xx).sin()
        });
        let mut w = vec![0.0; modes * 2];
        for k in 0..modes {
            w[k * 2] = 1.0; // identity mix on each retained mode
        }
        let mut store = ParamStore::new();
        store.register("w", vec![modes, 1, 1, 2], w);
        let mut t = Tape::new();
        let xv = t.field(x.clone());
        let wv = t.param(&store, "w").unwrap();
        let y = t.spectral_conv1d(xv, wv, modes).unwrap();
        for (a, b) in t.field_value(y).data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn spectral_zero_weights_give_zero_field() {
        let mut store = ParamStore::new();
        store.register("w", vec![2, 1, 1, 2], vec![0.0; 4]);
        let mut t = Tape::new();
        let xv = t.field(GridField::from_fn(&[1, 8], |i| i as f64));
        let wv = t.param(&store, "w").unwrap();
        let y = t.spectral_conv1d(xv, wv, 2).unwrap();
        assert!(t.field_value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn spectral_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 16;
        let modes = 4;
        let mut store = ParamStore::new();
        store.register(
            "w",
            vec![modes, 2, 1, 2],
            (0..modes * 2 * 2).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        );
        store.register("x", vec![1, n], (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let err = grad_check(
            |t, s| {
                let x = t.param(s, "x")?;
                let w = t.param(s, "w")?;
                let y = t.spectral_conv1d(x, w, modes)?;
                let sq = t.square(y)?;
                t.reduce_sum(sq, Reduction::All)
            },
            &mut store,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-5, "rel error {err}");
    }

    #[test]
    fn softmax_uniform_and_shift_invariance() {
        let mut t = Tape::new();
        let z = t.field(vec_field(&[0.0; 64]));
        let a = t.softmax_flat(z).unwrap();
        for &v in t.field_value(a).data() {
            assert!((v - 1.0 / 64.0).abs() < 1e-15);
        }
        let logits = [0.3, -1.2, 2.0, 0.0];
        let shifted: Vec<f64> = logits.iter().map(|x| x + 5.0).collect();
        let mut t2 = Tape::new();
        let z1 = t2.field(vec_field(&logits));
        let z2 = t2.field(vec_field(&shifted));
        let a1 = t2.softmax_flat(z1).unwrap();
        let a2 = t2.softmax_flat(z2).unwrap();
        for (x, y) in t2.field_value(a1).data().iter().zip(t2.field_value(a2).data()) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_log_ratio_example() {
        // logits [ln 1, ln 2, ln 3] -> [1/6, 2/6, 3/6]
        let mut t = Tape::new();
        let z = t.field(vec_field(&[0.0, 2.0f64.ln(), 3.0f64.ln()]));
        let a = t.softmax_flat(z).unwrap();
        let got = t.field_value(a).data();
        for (g, e) in got.iter().zip(&[1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((g - e).abs() < 1e-15);
        }
        let s: f64 = got.iter().sum();
        assert!((s - 1.0).abs() < 1e-15);
    }

    #[test]
    fn backward_rejects_field_root() {
        let mut store = ParamStore::new();
        store.register("p", vec![1, 2], vec![1.0, 2.0]);
        let mut t = Tape::new();
        let p = t.param(&store, "p").unwrap();
        assert!(t.backward(p, &mut store).is_err());
    }

    #[test]
    fn backward_sum_gives_ones_and_unreachable_params_zero() {
        let mut store = ParamStore::new();
        store.register("p", vec![1, 3], vec![1.0, 2.0, 3.0]);
        store.register("q", vec![1, 2], vec![5.0, 6.0]);
        let mut t = Tape::new();
        let p = t.param(&store, "p").unwrap();
        let s = t.reduce_sum(p, Reduction::All).unwrap();
        t.backward(s, &mut store).unwrap();
        assert_eq!(store.get("p").unwrap().grad, vec![1.0, 1.0, 1.0]);
        assert_eq!(store.get("q").unwrap().grad, vec![0.0, 0.0]);
    }

    #[test]
    fn grad_check_constant_function_is_exact() {
        let mut store = ParamStore::new();
        store.register("p", vec![1, 2], vec![1.0, -2.0]);
        let err = grad_check(|t, _| Ok(t.scalar(7.5)), &mut store, 1e-6).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn grad_check_quadratic_is_near_exact() {
        let mut store = ParamStore::new();
        store.register("p", vec![1, 3], vec![0.5, -1.5, 2.0]);
        let err = grad_check(
            |t, s| {
                let p = t.param(s, "p")?;
                let sq = t.square(p)?;
                t.reduce_sum(sq, Reduction::All)
            },
            &mut store,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-9, "rel error {err}");
    }

    #[test]
    fn all_unary_ops_pass_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for kind in [
            ElemOp::Neg,
            ElemOp::Square,
            ElemOp::Sqrt,
            ElemOp::Tanh,
            ElemOp::Gelu,
            ElemOp::Relu,
            ElemOp::Abs,
        ] {
            let mut store = ParamStore::new();
            let data: Vec<f64> = (0..8)
                .map(|_| {
                    let v: f64 = rng.gen_range(0.2..1.5);
                    if matches!(kind, ElemOp::Sqrt) {
                        v
                    } else {
                        v * if rng.gen_bool(0.5) { 1.0 } else { -1.0 }
                    }
                })
                .collect();
            store.register("p", vec![1, 8], data);
            let err = grad_check(
                |t, s| {
                    let p = t.param(s, "p")?;
                    let y = t.unary(kind, p)?;
                    let sq = t.square(y)?;
                    t.reduce_sum(sq, Reduction::All)
                },
                &mut store,
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-5, "{kind:?} rel error {err}");
        }
    }

    #[test]
    fn binary_ops_pass_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for kind in [ElemOp::Add, ElemOp::Sub, ElemOp::Mul, ElemOp::Div] {
            let mut store = ParamStore::new();
            store.register("a", vec![1, 6], (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect());
            store.register("b", vec![1, 6], (0..6).map(|_| rng.gen_range(0.5..1.5)).collect());
            let err = grad_check(
                |t, s| {
                    let a = t.param(s, "a")?;
                    let b = t.param(s, "b")?;
                    let y = t.elementwise(kind, a, Some(b))?;
                    let sq = t.square(y)?;
                    t.reduce_sum(sq, Reduction::All)
                },
                &mut store,
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-5, "{kind:?} rel error {err}");
        }
    }

    #[test]
    fn replay_is_bit_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let data: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let run = |data: &[f64]| -> (f64, Vec<f64>) {
            let mut store = ParamStore::new();
            store.register("p", vec![1, 16], data.to_vec());
            let mut t = Tape::new();
            let p = t.param(&store, "p").unwrap();
            let y = t.tanh(p).unwrap();
            let sq = t.square(y).unwrap();
            let s = t.reduce_sum(sq, Reduction::All).unwrap();
            t.backward(s, &mut store).unwrap();
            (t.scalar_value(s), store.get("p").unwrap().grad.clone())
        };
        let (v1, g1) = run(&data);
        let (v2, g2) = run(&data);
        assert!(v1.to_bits() == v2.to_bits());
        assert!(g1.iter().zip(&g2).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
