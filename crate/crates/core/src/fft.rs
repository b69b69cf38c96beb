//! Radix-2 FFT on power-of-two lengths.
//!
//! Forward transform is unnormalized (`X[k] = sum_n x[n] e^{-2πikn/N}`);
//! the inverse applies `1/N`. Grids in this crate are chosen power-of-two,
//! so the general-N case never arises.

use crate::field::ComplexField;
use crate::{Error, Result};

/// In-place iterative Cooley-Tukey on one transform of length `re.len()`.
fn fft_inplace(re: &mut [f64], im: &mut [f64], inverse: bool) {
    let n = re.len();
    debug_assert!(n.is_power_of_two());
    if n <= 1 {
        return;
    }
    // Bit-reversal permutation.
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = (i as u32).reverse_bits() >> (32 - bits);
        let j = j as usize;
        if i < j {
            re.swap(i, j);
            im.swap(i, j);
        }
    }
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut len = 2;
    while len <= n {
        let ang = sign * std::f64::consts::TAU / len as f64;
        let (w_re, w_im) = (ang.cos(), ang.sin());
        for start in (0..n).step_by(len) {
            let (mut cur_re, mut cur_im) = (1.0, 0.0);
            for k in 0..len / 2 {
                let (a, b) = (start + k, start + k + len / 2);
                let t_re = re[b] * cur_re - im[b] * cur_im;
                let t_im = re[b] * cur_im + im[b] * cur_re;
                re[b] = re[a] - t_re;
                im[b] = im[a] - t_im;
                re[a] += t_re;
                im[a] += t_im;
                let next_re = cur_re * w_re - cur_im * w_im;
                cur_im = cur_re * w_im + cur_im * w_re;
                cur_re = next_re;
            }
        }
        len <<= 1;
    }
    if inverse {
        let scale = 1.0 / n as f64;
        for x in re.iter_mut() {
            *x *= scale;
        }
        for x in im.iter_mut() {
            *x *= scale;
        }
    }
}

fn check_len(x: &ComplexField) -> Result<usize> {
    let n = x.len() / x.shape()[0];
    if !n.is_power_of_two() {
        return Err(Error::NotPowerOfTwo { len: n });
    }
    Ok(n)
}

/// Unnormalized forward DFT along the grid axis, per channel.
pub fn fft_1d(x: &ComplexField) -> Result<ComplexField> {
    transform(x, false)
}

/// Inverse DFT with the `1/N` factor.
pub fn ifft_1d(x: &ComplexField) -> Result<ComplexField> {
    transform(x, true)
}

fn transform(x: &ComplexField, inverse: bool) -> Result<ComplexField> {
    let n = check_len(x)?;
    let mut out = x.clone();
    for c in 0..x.shape()[0] {
        let span = c * n..(c + 1) * n;
        fft_inplace(&mut out.re[span.clone()], &mut out.im[span], inverse);
    }
    Ok(out)
}

/// Raw in-place transform on bare buffers, for solver inner loops.
pub fn fft_raw(re: &mut [f64], im: &mut [f64], inverse: bool) -> Result<()> {
    if !re.len().is_power_of_two() {
        return Err(Error::NotPowerOfTwo { len: re.len() });
    }
    fft_inplace(re, im, inverse);
    Ok(())
}
