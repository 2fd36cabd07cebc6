//! FFT helpers on tensor-product grids.
//!
//! Conventions: forward transforms are normalized by the number of samples, so
//! a field is recovered as `f(y) = sum_k c_k exp(2 pi i k.y)` on any grid. The
//! Nyquist frequency is treated as unresolved: derivative symbols vanish there
//! and band-limited data never carries it.

use std::cell::RefCell;
use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plan(n: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if inverse {
            p.plan_fft_inverse(n)
        } else {
            p.plan_fft_forward(n)
        }
    })
}

/// Signed frequency of FFT index `i` on `n` points; `None` at the Nyquist index.
#[inline]
pub fn freq(i: usize, n: usize) -> Option<i64> {
    if n.is_multiple_of(2) && i == n / 2 {
        None
    } else if i < n.div_ceil(2) {
        Some(i as i64)
    } else {
        Some(i as i64 - n as i64)
    }
}

/// Frequency with the Nyquist index mapped to zero (derivative convention).
#[inline]
pub fn freq0(i: usize, n: usize) -> i64 {
    freq(i, n).unwrap_or(0)
}

/// FFT index of signed frequency `k` on `n` points.
#[inline]
pub fn index_of(k: i64, n: usize) -> usize {
    k.rem_euclid(n as i64) as usize
}

/// Transform along one axis of a row-major complex array.
pub fn fft_axis(data: &mut [Complex64], dims: &[usize], axis: usize, inverse: bool) {
    let n = dims[axis];
    if n == 1 {
        return;
    }
    let stride: usize = dims[axis + 1..].iter().product();
    let outer: usize = dims[..axis].iter().product();
    let fft = plan(n, inverse);
    let scale = if inverse { 1.0 } else { 1.0 / n as f64 };
    let chunk = n * stride;
    let work = |block: &mut [Complex64]| {
        if stride == 1 {
            fft.process(block);
        } else {
            let mut buf = vec![Complex64::new(0.0, 0.0); chunk];
            for s in 0..stride {
                for i in 0..n {
                    buf[s * n + i] = block[i * stride + s];
                }
            }
            fft.process(&mut buf);
            for s in 0..stride {
                for i in 0..n {
                    block[i * stride + s] = buf[s * n + i];
                }
            }
        }
        if scale != 1.0 {
            for v in block.iter_mut() {
                *v *= scale;
            }
        }
    };
    if outer >= 4 && data.len() >= 4096 {
        data.par_chunks_mut(chunk).for_each(work);
    } else {
        data.chunks_mut(chunk).for_each(work);
    }
}

/// Transform along every axis in `axes`.
pub fn fft_axes(data: &mut [Complex64], dims: &[usize], axes: &[usize], inverse: bool) {
    for &a in axes {
        fft_axis(data, dims, a, inverse);
    }
}

/// Full multi-dimensional transform.
pub fn fft_all(data: &mut [Complex64], dims: &[usize], inverse: bool) {
    for a in 0..dims.len() {
        fft_axis(data, dims, a, inverse);
    }
}

pub fn to_complex(x: &[f64]) -> Vec<Complex64> {
    x.iter().map(|&v| Complex64::new(v, 0.0)).collect()
}

pub fn to_real(z: &[Complex64]) -> Vec<f64> {
    z.iter().map(|v| v.re).collect()
}

/// Decompose a flat row-major index into per-axis indices.
#[inline]
pub fn unravel(mut idx: usize, dims: &[usize], out: &mut [usize]) {
    for a in (0..dims.len()).rev() {
        out[a] = idx % dims[a];
        idx /= dims[a];
    }
}

/// Multiply the spectrum of a real array by a symbol depending on the signed
/// frequencies of the listed axes. The symbol sees `freq0` values, so the
/// Nyquist index is presented as zero; `nyquist_zero` removes Nyquist content.
pub fn apply_symbol<F>(x: &[f64], dims: &[usize], axes: &[usize], symbol: F) -> Vec<f64>
where
    F: Fn(&[i64]) -> Complex64 + Sync,
{
    let mut z = to_complex(x);
    fft_axes(&mut z, dims, axes, false);
    multiply_symbol(&mut z, dims, axes, symbol);
    fft_axes(&mut z, dims, axes, true);
    to_real(&z)
}

/// In-place multiplication of a (partially) transformed array by a symbol.
pub fn multiply_symbol<F>(z: &mut [Complex64], dims: &[usize], axes: &[usize], symbol: F)
where
    F: Fn(&[i64]) -> Complex64 + Sync,
{
    let nd = dims.len();
    z.par_chunks_mut(4096).enumerate().for_each(|(ci, chunk)| {
        let mut ix = vec![0usize; nd];
        let mut ks = vec![0i64; axes.len()];
        for (j, v) in chunk.iter_mut().enumerate() {
            unravel(ci * 4096 + j, dims, &mut ix);
            let mut nyq = false;
            for (s, &a) in axes.iter().enumerate() {
                match freq(ix[a], dims[a]) {
                    Some(k) => ks[s] = k,
                    None => {
                        ks[s] = 0;
                        nyq = true;
                    }
                }
            }
            if nyq {
                *v = Complex64::new(0.0, 0.0);
            } else {
                *v *= symbol(&ks);
            }
        }
    });
}

/// `(2 pi i k)^order`.
#[inline]
pub fn deriv_symbol(k: i64, order: u32) -> Complex64 {
    Complex64::new(0.0, 2.0 * PI * k as f64).powu(order)
}

/// Spectral derivative of order `order` along a single axis.
pub fn derivative(x: &[f64], dims: &[usize], axis: usize, order: u32) -> Vec<f64> {
    if dims[axis] == 1 {
        return vec![0.0; x.len()];
    }
    apply_symbol(x, dims, &[axis], |k| deriv_symbol(k[0], order))
}

/// Zero-pad (or truncate) a centered spectrum from `from` dims to `to` dims.
/// Nyquist entries are dropped.
pub fn resample_spectrum(z: &[Complex64], from: &[usize], to: &[usize]) -> Vec<Complex64> {
    let nd = from.len();
    let total_to: usize = to.iter().product();
    let mut out = vec![Complex64::new(0.0, 0.0); total_to];
    let mut ix = vec![0usize; nd];
    'outer: for (i, v) in z.iter().enumerate() {
        unravel(i, from, &mut ix);
        let mut j = 0usize;
        for a in 0..nd {
            let k = match freq(ix[a], from[a]) {
                Some(k) => k,
                None => continue 'outer,
            };
            if 2 * k.unsigned_abs() as usize >= to[a] {
                continue 'outer;
            }
            j = j * to[a] + index_of(k, to[a]);
        }
        out[j] += *v;
    }
    out
}
