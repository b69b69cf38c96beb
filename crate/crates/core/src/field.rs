//! Dense real and complex fields on uniform periodic grids.
//!
//! `GridField` is the carrier for PDE states, activations, and parameter
//! tensors alike: a flat `f64` buffer with shape `[channels, dims...]`,
//! row-major and channel-major. The grid lives on `[0,1]^d`, so the cell
//! width along dimension `k` is `1 / dims[k]`.

use crate::{Error, Result};

/// Multi-channel real field. `shape[0]` is the channel count, the remaining
/// entries are grid sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct GridField {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl GridField {
    pub fn zeros(shape: &[usize]) -> Self {
        assert!(!shape.is_empty(), "field shape must at least carry channels");
        let len = shape.iter().product();
        GridField {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn from_data(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if shape.is_empty() || data.len() != expect {
            return Err(Error::ShapeMismatch {
                op: "GridField::from_data",
                left: shape.to_vec(),
                right: vec![data.len()],
            });
        }
        Ok(GridField {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Build from a generator over flat indices.
    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f64) -> Self {
        let len: usize = shape.iter().product();
        GridField {
            shape: shape.to_vec(),
            data: (0..len).map(f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn channels(&self) -> usize {
        self.shape[0]
    }

    /// Grid dimensions (everything past the channel axis).
    pub fn dims(&self) -> &[usize] {
        &self.shape[1..]
    }

    /// Grid points per channel.
    pub fn points(&self) -> usize {
        self.dims().iter().product()
    }

    /// Cell width along grid dimension `k` (uniform grid on [0,1]).
    pub fn spacing(&self, k: usize) -> f64 {
        1.0 / self.dims()[k] as f64
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Flat slice of one channel.
    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.points();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.points();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        GridField {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn check_finite(&self, op: &'static str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(Error::Numerical(format!("non-finite entry after {op}")))
        }
    }
}

/// Complex field with the same shape convention as `GridField`.
///
/// Interconvertible with a 2-channel real field (channel 0 = Re, 1 = Im).
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexField {
    shape: Vec<usize>,
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

impl ComplexField {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        ComplexField {
            shape: shape.to_vec(),
            re: vec![0.0; len],
            im: vec![0.0; len],
        }
    }

    pub fn from_parts(shape: &[usize], re: Vec<f64>, im: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if re.len() != expect || im.len() != re.len() {
            return Err(Error::ShapeMismatch {
                op: "ComplexField::from_parts",
                left: shape.to_vec(),
                right: vec![re.len(), im.len()],
            });
        }
        Ok(ComplexField {
            shape: shape.to_vec(),
            re,
            im,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.re.len()
    }

    pub fn is_empty(&self) -> bool {
        self.re.is_empty()
    }

    /// Lossless view as a 2-channel real field (single-channel complex only).
    pub fn to_grid(&self) -> GridField {
        assert_eq!(self.shape[0], 1, "to_grid expects a single complex channel");
        let mut shape = self.shape.clone();
        shape[0] = 2;
        let mut data = Vec::with_capacity(2 * self.re.len());
        data.extend_from_slice(&self.re);
        data.extend_from_slice(&self.im);
        GridField { shape, data }
    }

    /// Inverse of [`to_grid`](Self::to_grid).
    pub fn from_grid(g: &GridField) -> Result<Self> {
        if g.channels() != 2 {
            return Err(Error::ShapeMismatch {
                op: "ComplexField::from_grid",
                left: g.shape().to_vec(),
                right: vec![2],
            });
        }
        let mut shape = g.shape().to_vec();
        shape[0] = 1;
        Ok(ComplexField {
            shape,
            re: g.channel(0).to_vec(),
            im: g.channel(1).to_vec(),
        })
    }

    /// Discrete squared norm sum |psi_i|^2.
    pub fn norm_sq(&self) -> f64 {
        let sq: Vec<f64> = self
            .re
            .iter()
            .zip(&self.im)
            .map(|(r, i)| r * r + i * i)
            .collect();
        pairwise_sum(&sq)
    }
}

/// Pairwise (cascade) summation. Error grows like O(log n) rather than O(n),
/// which keeps reductions permutation-stable to ~1e-12 relative.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 32 {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// Pairwise dot product via a materialized product buffer.
pub fn pairwise_dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let prod: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    pairwise_sum(&prod)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_accessors() {
        let f = GridField::zeros(&[2, 4, 4]);
        assert_eq!(f.channels(), 2);
        assert_eq!(f.dims(), &[4, 4]);
        assert_eq!(f.points(), 16);
        assert_eq!(f.len(), 32);
        assert_eq!(f.spacing(0), 0.25);
    }

    #[test]
    fn from_data_rejects_bad_length() {
        assert!(GridField::from_data(&[1, 3], vec![1.0, 2.0]).is_err());
    }

    #[test]
    fn complex_roundtrip_is_lossless() {
        let c = ComplexField::from_parts(&[1, 3], vec![1.0, 2.0, 3.0], vec![-1.0, 0.5, 0.0]).unwrap();
        let g = c.to_grid();
        assert_eq!(ComplexField::from_grid(&g).unwrap(), c);
    }

    #[test]
    fn pairwise_sum_matches_exact_on_integers() {
        let xs: Vec<f64> = (1..=1000).map(|i| i as f64).collect();
        assert_eq!(pairwise_sum(&xs), 500500.0);
    }

    #[test]
    fn pairwise_sum_permutation_stable() {
        use rand::{seq::SliceRandom, Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut xs: Vec<f64> = (0..4096).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let s0 = pairwise_sum(&xs);
        for _ in 0..10 {
            xs.shuffle(&mut rng);
            let s = pairwise_sum(&xs);
            assert!((s - s0).abs() <= 1e-12 * s0.abs().max(1.0));
        }
    }
}
