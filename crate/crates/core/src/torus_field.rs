//! Periodic fields on the lifted torus `T^{d x n}` and their calculus.
//!
//! A field is sampled on a tensor-product grid with one block of `d` axes per
//! scale. Axes are ordered block by block (block 0 first) and samples are
//! stored row-major per tensor component (component-major overall).

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::{BufRead, Write};

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral;

/// Upper bound on the number of samples (points times components) in one field.
pub const MAX_SAMPLES: usize = 1 << 27;

/// Grid description of `T^{d x n}`: `res[b]` points per period on every axis of block `b`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    pub d: usize,
    pub res: Vec<usize>,
}

impl GridSpec {
    pub fn new(d: usize, res: Vec<usize>) -> Result<Self> {
        if !(1..=2).contains(&d) {
            return Err(Error::Validation(format!("dimension d = {d} not supported")));
        }
        for &r in &res {
            if r < 4 || !r.is_power_of_two() {
                return Err(Error::Validation(format!(
                    "block resolution {r} must be a power of two >= 4"
                )));
            }
        }
        let g = GridSpec { d, res };
        if g.len() > MAX_SAMPLES {
            return Err(Error::Resource(format!(
                "grid with {} points exceeds the sample budget",
                g.len()
            )));
        }
        Ok(g)
    }

    pub fn uniform(d: usize, n: usize, r: usize) -> Result<Self> {
        Self::new(d, vec![r; n])
    }

    /// Default resolution per block: 64 for d = 1, 32 for d = 2.
    pub fn default_for(d: usize, n: usize) -> Result<Self> {
        Self::uniform(d, n, if d == 1 { 64 } else { 32 })
    }

    pub fn n(&self) -> usize {
        self.res.len()
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut v = Vec::with_capacity(self.d * self.n());
        for &r in &self.res {
            v.extend(std::iter::repeat_n(r, self.d));
        }
        v
    }

    pub fn len(&self) -> usize {
        self.res.iter().map(|r| r.pow(self.d as u32)).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn axis(&self, block: usize, dir: usize) -> usize {
        block * self.d + dir
    }

    pub fn block_axes(&self, block: usize) -> Vec<usize> {
        (0..self.d).map(|l| self.axis(block, l)).collect()
    }

    /// Number of points of a single block.
    pub fn block_len(&self, block: usize) -> usize {
        self.res[block].pow(self.d as u32)
    }

    pub fn remove_block(&self, block: usize) -> GridSpec {
        let mut res = self.res.clone();
        res.remove(block);
        GridSpec { d: self.d, res }
    }

    pub fn without_last(&self) -> GridSpec {
        self.remove_block(self.n() - 1)
    }

    /// Coordinates `y` (one entry per axis) of the flat point index.
    pub fn coords(&self, idx: usize) -> Vec<f64> {
        let dims = self.dims();
        let mut ix = vec![0; dims.len()];
        spectral::unravel(idx, &dims, &mut ix);
        ix.iter()
            .zip(&dims)
            .map(|(&i, &n)| i as f64 / n as f64)
            .collect()
    }
}

fn shape_len(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Sampled real tensor field on a [`GridSpec`].
#[derive(Debug, Clone, PartialEq)]
pub struct TorusField {
    grid: GridSpec,
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl TorusField {
    pub fn new(grid: GridSpec, shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let want = grid.len() * shape_len(&shape);
        if data.len() != want {
            return Err(Error::Validation(format!(
                "sample count {} does not match grid and shape ({want})",
                data.len()
            )));
        }
        if want > MAX_SAMPLES {
            return Err(Error::Resource(format!("field with {want} samples exceeds budget")));
        }
        Ok(TorusField { grid, shape, data })
    }

    pub fn zeros(grid: &GridSpec, shape: &[usize]) -> Self {
        let n = grid.len() * shape_len(shape);
        TorusField {
            grid: grid.clone(),
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    /// Field with the same tensor value at every point.
    pub fn constant(grid: &GridSpec, shape: &[usize], value: &[f64]) -> Self {
        assert_eq!(value.len(), shape_len(shape));
        let np = grid.len();
        let mut data = Vec::with_capacity(np * value.len());
        for &v in value {
            data.extend(std::iter::repeat_n(v, np));
        }
        TorusField {
            grid: grid.clone(),
            shape: shape.to_vec(),
            data,
        }
    }

    /// Sample `f(y, out)` at every grid node; `y` lists one coordinate per axis.
    pub fn from_fn<F>(grid: &GridSpec, shape: &[usize], f: F) -> Self
    where
        F: Fn(&[f64], &mut [f64]) + Sync,
    {
        let np = grid.len();
        let nc = shape_len(shape);
        let dims = grid.dims();
        let pts: Vec<Vec<f64>> = (0..np)
            .into_par_iter()
            .map(|i| {
                let mut ix = vec![0; dims.len()];
                spectral::unravel(i, &dims, &mut ix);
                let y: Vec<f64> = ix
                    .iter()
                    .zip(&dims)
                    .map(|(&k, &n)| k as f64 / n as f64)
                    .collect();
                let mut out = vec![0.0; nc];
                f(&y, &mut out);
                out
            })
            .collect();
        let mut data = vec![0.0; np * nc];
        for (i, v) in pts.iter().enumerate() {
            for c in 0..nc {
                data[c * np + i] = v[c];
            }
        }
        TorusField {
            grid: grid.clone(),
            shape: shape.to_vec(),
            data,
        }
    }

    /// Assemble a field from scalar components (component-major order).
    pub fn from_components(grid: &GridSpec, shape: &[usize], comps: Vec<Vec<f64>>) -> Self {
        assert_eq!(comps.len(), shape_len(shape));
        let mut data = Vec::with_capacity(grid.len() * comps.len());
        for c in comps {
            assert_eq!(c.len(), grid.len());
            data.extend(c);
        }
        TorusField {
            grid: grid.clone(),
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }
    pub fn ncomp(&self) -> usize {
        shape_len(&self.shape)
    }
    pub fn npoints(&self) -> usize {
        self.grid.len()
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
    pub fn into_data(self) -> Vec<f64> {
        self.data
    }
    pub fn comp(&self, c: usize) -> &[f64] {
        let np = self.npoints();
        &self.data[c * np..(c + 1) * np]
    }
    pub fn comp_mut(&mut self, c: usize) -> &mut [f64] {
        let np = self.npoints();
        &mut self.data[c * np..(c + 1) * np]
    }

    /// Scalar field holding component `c`.
    pub fn component(&self, c: usize) -> TorusField {
        TorusField {
            grid: self.grid.clone(),
            shape: vec![],
            data: self.comp(c).to_vec(),
        }
    }

    /// Tensor value at point `i`.
    pub fn at(&self, i: usize) -> Vec<f64> {
        let np = self.npoints();
        (0..self.ncomp()).map(|c| self.data[c * np + i]).collect()
    }

    pub fn reshape(mut self, shape: &[usize]) -> TorusField {
        assert_eq!(shape_len(shape), self.ncomp());
        self.shape = shape.to_vec();
        self
    }

    pub fn scale(&self, s: f64) -> TorusField {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|v| *v *= s);
        out
    }

    /// `self += s * other`.
    pub fn axpy(&mut self, s: f64, other: &TorusField) {
        assert_eq!(self.data.len(), other.data.len(), "axpy shape mismatch");
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, b)| *a += s * b);
    }

    pub fn add(&self, other: &TorusField) -> TorusField {
        let mut out = self.clone();
        out.axpy(1.0, other);
        out
    }

    pub fn sub(&self, other: &TorusField) -> TorusField {
        let mut out = self.clone();
        out.axpy(-1.0, other);
        out
    }

    /// Pointwise tensor norm `|T|` = sum of absolute component values.
    pub fn pointwise_norm(&self) -> Vec<f64> {
        let np = self.npoints();
        let mut out = vec![0.0; np];
        for c in 0..self.ncomp() {
            for (o, v) in out.iter_mut().zip(self.comp(c)) {
                *o += v.abs();
            }
        }
        out
    }

    /// `sup |T|` over the grid.
    pub fn sup_norm(&self) -> f64 {
        self.pointwise_norm().into_iter().fold(0.0, f64::max)
    }

    /// Discrete L2 norm `(mean |T|^2)^{1/2}` with the component-sum tensor norm.
    pub fn l2_norm(&self) -> f64 {
        let p = self.pointwise_norm();
        (p.iter().map(|v| v * v).sum::<f64>() / p.len() as f64).sqrt()
    }

    /// Largest absolute sample.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Derivative along a single axis.
    pub fn axis_derivative(&self, axis: usize, order: u32) -> TorusField {
        let dims = self.grid.dims();
        let comps = (0..self.ncomp())
            .map(|c| spectral::derivative(self.comp(c), &dims, axis, order))
            .collect();
        TorusField::from_components(&self.grid, &self.shape, comps)
    }

    /// Gradient `sum_b w_b grad_{y_b}`; a new leading index of size `d` is added.
    /// Blocks with zero weight are not differentiated.
    pub fn weighted_grad(&self, weights: &[f64]) -> TorusField {
        assert_eq!(weights.len(), self.grid.n());
        let d = self.grid.d;
        let dims = self.grid.dims();
        let np = self.npoints();
        let nc = self.ncomp();
        let mut data = vec![0.0; d * nc * np];
        for l in 0..d {
            for c in 0..nc {
                let out = &mut data[(l * nc + c) * np..(l * nc + c + 1) * np];
                let axes: Vec<(usize, f64)> = weights
                    .iter()
                    .enumerate()
                    .filter(|(_, w)| **w != 0.0)
                    .map(|(b, &w)| (self.grid.axis(b, l), w))
                    .collect();
                if axes.is_empty() {
                    continue;
                }
                let ax: Vec<usize> = axes.iter().map(|a| a.0).collect();
                let ws: Vec<f64> = axes.iter().map(|a| a.1).collect();
                let v = spectral::apply_symbol(self.comp(c), &dims, &ax, |k| {
                    let s: f64 = k.iter().zip(&ws).map(|(&k, w)| w * k as f64).sum();
                    Complex64::new(0.0, 2.0 * PI * s)
                });
                out.copy_from_slice(&v);
            }
        }
        let mut shape = vec![d];
        shape.extend(&self.shape);
        TorusField {
            grid: self.grid.clone(),
            shape,
            data,
        }
    }

    /// Divergence over the leading index: `sum_l sum_b w_b d/dy_b^l F[l, ..]`.
    pub fn weighted_div(&self, weights: &[f64]) -> TorusField {
        let d = self.grid.d;
        assert!(!self.shape.is_empty() && self.shape[0] == d, "divergence needs a leading d index");
        let rest: Vec<usize> = self.shape[1..].to_vec();
        let nr = shape_len(&rest);
        let np = self.npoints();
        let dims = self.grid.dims();
        let mut data = vec![0.0; nr * np];
        for l in 0..d {
            let axes: Vec<(usize, f64)> = weights
                .iter()
                .enumerate()
                .filter(|(_, w)| **w != 0.0)
                .map(|(b, &w)| (self.grid.axis(b, l), w))
                .collect();
            if axes.is_empty() {
                continue;
            }
            let ax: Vec<usize> = axes.iter().map(|a| a.0).collect();
            let ws: Vec<f64> = axes.iter().map(|a| a.1).collect();
            for c in 0..nr {
                let v = spectral::apply_symbol(self.comp(l * nr + c), &dims, &ax, |k| {
                    let s: f64 = k.iter().zip(&ws).map(|(&k, w)| w * k as f64).sum();
                    Complex64::new(0.0, 2.0 * PI * s)
                });
                for (o, x) in data[c * np..(c + 1) * np].iter_mut().zip(v) {
                    *o += x;
                }
            }
        }
        TorusField {
            grid: self.grid.clone(),
            shape: rest,
            data,
        }
    }

    /// Mean over the axes of `block`; the result lives on the grid without that block.
    pub fn partial_average(&self, block: usize) -> TorusField {
        let g = &self.grid;
        let pre: usize = (0..block).map(|b| g.block_len(b)).product();
        let mid = g.block_len(block);
        let post: usize = (block + 1..g.n()).map(|b| g.block_len(b)).product();
        let nc = self.ncomp();
        let np = self.npoints();
        let out_np = pre * post;
        let mut data = vec![0.0; nc * out_np];
        for c in 0..nc {
            let src = &self.data[c * np..(c + 1) * np];
            let dst = &mut data[c * out_np..(c + 1) * out_np];
            for p in 0..pre {
                for m in 0..mid {
                    let row = &src[(p * mid + m) * post..(p * mid + m + 1) * post];
                    for (o, v) in dst[p * post..(p + 1) * post].iter_mut().zip(row) {
                        *o += v;
                    }
                }
            }
            dst.iter_mut().for_each(|v| *v /= mid as f64);
        }
        TorusField {
            grid: g.remove_block(block),
            shape: self.shape.clone(),
            data,
        }
    }

    /// Broadcast a field along a new block inserted at position `block` of `full`.
    pub fn extend_block(&self, full: &GridSpec, block: usize) -> TorusField {
        assert_eq!(full.remove_block(block), self.grid, "extend: grid mismatch");
        let pre: usize = (0..block).map(|b| full.block_len(b)).product();
        let mid = full.block_len(block);
        let post: usize = (block + 1..full.n()).map(|b| full.block_len(b)).product();
        let nc = self.ncomp();
        let np_in = self.npoints();
        let np = full.len();
        let mut data = vec![0.0; nc * np];
        for c in 0..nc {
            let src = &self.data[c * np_in..(c + 1) * np_in];
            let dst = &mut data[c * np..(c + 1) * np];
            for p in 0..pre {
                for m in 0..mid {
                    dst[(p * mid + m) * post..(p * mid + m + 1) * post]
                        .copy_from_slice(&src[p * post..(p + 1) * post]);
                }
            }
        }
        TorusField {
            grid: full.clone(),
            shape: self.shape.clone(),
            data,
        }
    }

    /// Mean over the whole torus, one value per component.
    pub fn full_average(&self) -> Vec<f64> {
        let np = self.npoints() as f64;
        (0..self.ncomp())
            .map(|c| self.comp(c).iter().sum::<f64>() / np)
            .collect()
    }

    /// Pointwise matrix product `self[i, l] * other[l, ..]` (contracting the
    /// last index of `self` with the first of `other`).
    pub fn contract(&self, other: &TorusField) -> TorusField {
        assert_eq!(self.grid, other.grid);
        let k = *self.shape.last().expect("contract: scalar left operand");
        assert_eq!(other.shape[0], k);
        let left: Vec<usize> = self.shape[..self.shape.len() - 1].to_vec();
        let right: Vec<usize> = other.shape[1..].to_vec();
        let nl = shape_len(&left);
        let nr = shape_len(&right);
        let np = self.npoints();
        let mut data = vec![0.0; nl * nr * np];
        for i in 0..nl {
            for j in 0..nr {
                let dst = &mut data[(i * nr + j) * np..(i * nr + j + 1) * np];
                for l in 0..k {
                    let a = self.comp(i * k + l);
                    let b = other.comp(l * nr + j);
                    for ((o, x), y) in dst.iter_mut().zip(a).zip(b) {
                        *o += x * y;
                    }
                }
            }
        }
        let mut shape = left;
        shape.extend(right);
        TorusField {
            grid: self.grid.clone(),
            shape,
            data,
        }
    }

    /// Multiply every component by a scalar field.
    pub fn mul_scalar_field(&self, s: &TorusField) -> TorusField {
        assert_eq!(s.ncomp(), 1);
        assert_eq!(self.grid, s.grid);
        let mut out = self.clone();
        let np = self.npoints();
        for c in 0..self.ncomp() {
            for (o, v) in out.data[c * np..(c + 1) * np].iter_mut().zip(&s.data) {
                *o *= v;
            }
        }
        out
    }

    /// Normalized spectrum of every component (full transform).
    pub fn spectrum(&self) -> Vec<Vec<Complex64>> {
        let dims = self.grid.dims();
        (0..self.ncomp())
            .map(|c| {
                let mut z = spectral::to_complex(self.comp(c));
                spectral::fft_all(&mut z, &dims, false);
                z
            })
            .collect()
    }

    /// Build from per-component spectra (inverse transform, real part).
    pub fn from_spectrum(grid: &GridSpec, shape: &[usize], spec: Vec<Vec<Complex64>>) -> TorusField {
        let dims = grid.dims();
        let comps = spec
            .into_iter()
            .map(|mut z| {
                spectral::fft_all(&mut z, &dims, true);
                spectral::to_real(&z)
            })
            .collect();
        TorusField::from_components(grid, shape, comps)
    }
}

/// Order-`order` spectral derivative tensor with respect to block `block`.
/// The result carries `order` new leading indices of size `d`.
pub fn scale_partial(field: &TorusField, block: usize, order: u32) -> Result<TorusField> {
    let g = field.grid();
    if block >= g.n() {
        return Err(Error::Validation(format!(
            "block {block} out of range for n = {}",
            g.n()
        )));
    }
    if order == 0 {
        return Err(Error::Validation("derivative order must be >= 1".into()));
    }
    let mut w = vec![0.0; g.n()];
    w[block] = 1.0;
    let mut f = field.clone();
    for _ in 0..order {
        f = f.weighted_grad(&w);
    }
    Ok(f)
}

/// Microscopic scales and regularization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleVector {
    pub epsilons: Vec<f64>,
    /// Explicit regularization; `None` lets the truncation plan choose it.
    pub tau: Option<f64>,
}

impl ScaleVector {
    pub fn new(epsilons: Vec<f64>) -> Result<Self> {
        if epsilons.is_empty() {
            return Err(Error::Validation("at least one scale is required".into()));
        }
        for (i, &e) in epsilons.iter().enumerate() {
            if !(e > 0.0 && e <= 1.0) {
                return Err(Error::Validation(format!("scale eps_{} = {e} not in (0, 1]", i + 1)));
            }
            if i > 0 {
                let prev = epsilons[i - 1];
                if e == prev {
                    return Err(Error::Validation(format!(
                        "scales eps_{} and eps_{} coincide; merge them into one scale",
                        i,
                        i + 1
                    )));
                }
                if e > prev {
                    return Err(Error::Validation("scales must be strictly decreasing".into()));
                }
            }
        }
        Ok(ScaleVector {
            epsilons,
            tau: None,
        })
    }

    /// Scales given through the ratios `delta_i = eps_i / eps_1` with `eps_1 = 1`.
    pub fn from_deltas(deltas: &[f64]) -> Result<Self> {
        Self::new(deltas.to_vec())
    }

    pub fn with_tau(mut self, tau: f64) -> Result<Self> {
        if !(tau >= 0.0) {
            return Err(Error::Validation(format!("tau = {tau} must be >= 0")));
        }
        self.tau = Some(tau);
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.epsilons.len()
    }

    pub fn deltas(&self) -> Vec<f64> {
        let e1 = self.epsilons[0];
        self.epsilons.iter().map(|e| e / e1).collect()
    }

    /// Directional-gradient weights `1 / delta_i`.
    pub fn weights(&self) -> Vec<f64> {
        self.deltas().iter().map(|d| 1.0 / d).collect()
    }
}

/// Weighted gradient `sum_i delta_i^{-1} grad_i` (physical components first).
pub fn directional_gradient(field: &TorusField, scales: &ScaleVector) -> Result<TorusField> {
    if scales.n() != field.grid().n() {
        return Err(Error::Validation(format!(
            "scale vector has n = {} but the grid has n = {}",
            scales.n(),
            field.grid().n()
        )));
    }
    Ok(field.weighted_grad(&scales.weights()))
}

pub fn partial_average(field: &TorusField, block: usize) -> TorusField {
    field.partial_average(block)
}

pub fn full_average(field: &TorusField) -> Vec<f64> {
    field.full_average()
}

/// Retained Fourier modes of a field: `(frequency per axis, coefficient per component)`.
struct ModeList {
    freqs: Vec<i64>,
    coefs: Vec<Complex64>,
    naxes: usize,
    ncomp: usize,
}

fn mode_list(field: &TorusField) -> ModeList {
    let dims = field.grid().dims();
    let spec = field.spectrum();
    let nc = field.ncomp();
    let np = field.npoints();
    let maxc = spec
        .iter()
        .flat_map(|s| s.iter().map(|v| v.norm()))
        .fold(0.0, f64::max);
    let cut = maxc * 1e-17;
    let mut freqs = Vec::new();
    let mut coefs = Vec::new();
    let mut ix = vec![0; dims.len()];
    'modes: for i in 0..np {
        if !(0..nc).any(|c| spec[c][i].norm() > cut) {
            continue;
        }
        spectral::unravel(i, &dims, &mut ix);
        let mut f = Vec::with_capacity(dims.len());
        for a in 0..dims.len() {
            match spectral::freq(ix[a], dims[a]) {
                Some(k) => f.push(k),
                None => continue 'modes,
            }
        }
        freqs.extend(f);
        coefs.extend((0..nc).map(|c| spec[c][i]));
    }
    ModeList {
        freqs,
        coefs,
        naxes: dims.len(),
        ncomp: nc,
    }
}

impl ModeList {
    fn eval(&self, y: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        let nm = self.freqs.len() / self.naxes.max(1);
        for m in 0..nm {
            let f = &self.freqs[m * self.naxes..(m + 1) * self.naxes];
            let th: f64 = f.iter().zip(y).map(|(&k, &y)| k as f64 * y).sum::<f64>() * 2.0 * PI;
            let (s, c) = th.sin_cos();
            for (o, z) in out
                .iter_mut()
                .zip(&self.coefs[m * self.ncomp..(m + 1) * self.ncomp])
            {
                *o += z.re * c - z.im * s;
            }
        }
    }
}

/// Evaluate `f(x/eps_1, ..., x/eps_n)` at physical points `x` (each a d-vector)
/// by trigonometric interpolation. Returns one tensor value per point.
pub fn diagonal_trace(
    field: &TorusField,
    scales: &ScaleVector,
    points: &[Vec<f64>],
) -> Result<Vec<Vec<f64>>> {
    let g = field.grid();
    if scales.n() != g.n() {
        return Err(Error::Validation("diagonal_trace: scale count mismatch".into()));
    }
    let inv: Vec<f64> = scales.epsilons.iter().map(|e| 1.0 / e).collect();
    trace_with_factors(field, &inv, points)
}

/// Evaluate `f(s_1 x, ..., s_n x)` for per-block factors `s_b`.
pub fn trace_with_factors(
    field: &TorusField,
    factors: &[f64],
    points: &[Vec<f64>],
) -> Result<Vec<Vec<f64>>> {
    let g = field.grid();
    let d = g.d;
    let modes = mode_list(field);
    let nc = field.ncomp();
    points
        .par_iter()
        .map(|x| {
            if x.len() != d {
                return Err(Error::Validation("diagonal_trace: point dimension mismatch".into()));
            }
            let mut y = Vec::with_capacity(d * g.n());
            for &s in factors {
                for &xi in x {
                    y.push((s * xi).rem_euclid(1.0));
                }
            }
            let mut out = vec![0.0; nc];
            modes.eval(&y, &mut out);
            Ok(out)
        })
        .collect()
}

/// Evaluate a field at arbitrary torus points `y` (one coordinate per axis).
pub fn evaluate_at(field: &TorusField, ys: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let modes = mode_list(field);
    let nc = field.ncomp();
    ys.par_iter()
        .map(|y| {
            let mut out = vec![0.0; nc];
            modes.eval(y, &mut out);
            out
        })
        .collect()
}

/// One Fourier mode of an analytic coefficient: `(matrix + i matrix_im) exp(2 pi i k.y)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientMode {
    /// One integer d-vector per scale block.
    pub freq: Vec<Vec<i64>>,
    pub matrix: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matrix_im: Option<Vec<Vec<f64>>>,
}

/// Matrix-valued coefficient on `T^{d x n}` given as a finite Fourier sum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyticCoefficient {
    pub modes: Vec<CoefficientMode>,
    pub lambda: f64,
    #[serde(rename = "C0")]
    pub c0: f64,
    #[serde(rename = "Lambda0")]
    pub lambda0: f64,
}

fn ident(d: usize, s: f64) -> Vec<Vec<f64>> {
    (0..d)
        .map(|i| (0..d).map(|j| if i == j { s } else { 0.0 }).collect())
        .collect()
}

impl AnalyticCoefficient {
    /// Constant matrix on `T^{d x n}`.
    pub fn constant(d: usize, n: usize, matrix: Vec<Vec<f64>>) -> Self {
        AnalyticCoefficient {
            modes: vec![CoefficientMode {
                freq: vec![vec![0; d]; n],
                matrix,
                matrix_im: None,
            }],
            lambda: 0.0,
            c0: 0.0,
            lambda0: 0.0,
        }
    }

    /// `s I` on `T^{d x n}`.
    pub fn scalar(d: usize, n: usize, s: f64) -> Self {
        Self::constant(d, n, ident(d, s))
    }

    pub fn d(&self) -> usize {
        self.modes[0].freq[0].len()
    }

    pub fn n(&self) -> usize {
        self.modes[0].freq.len()
    }

    fn push(&mut self, freq: Vec<Vec<i64>>, re: Vec<Vec<f64>>, im: Vec<Vec<f64>>) {
        let any_im = im.iter().flatten().any(|v| *v != 0.0);
        self.modes.push(CoefficientMode {
            freq,
            matrix: re,
            matrix_im: if any_im { Some(im) } else { None },
        });
    }

    fn neg(freq: &[Vec<i64>]) -> Vec<Vec<i64>> {
        freq.iter().map(|b| b.iter().map(|k| -k).collect()).collect()
    }

    fn scaled(m: &[Vec<f64>], s: f64) -> Vec<Vec<f64>> {
        m.iter().map(|r| r.iter().map(|v| v * s).collect()).collect()
    }

    /// Add `M cos(2 pi k.y)`.
    pub fn add_cos(mut self, freq: Vec<Vec<i64>>, m: Vec<Vec<f64>>) -> Self {
        let z = Self::scaled(&m, 0.0);
        self.push(Self::neg(&freq), Self::scaled(&m, 0.5), z.clone());
        self.push(freq, Self::scaled(&m, 0.5), z);
        self
    }

    /// Add `M sin(2 pi k.y)`.
    pub fn add_sin(mut self, freq: Vec<Vec<i64>>, m: Vec<Vec<f64>>) -> Self {
        let z = Self::scaled(&m, 0.0);
        self.push(Self::neg(&freq), z.clone(), Self::scaled(&m, 0.5));
        self.push(freq, z, Self::scaled(&m, -0.5));
        self
    }

    pub fn add_cos_scalar(self, freq: Vec<Vec<i64>>, amp: f64) -> Self {
        let d = freq[0].len();
        self.add_cos(freq, ident(d, amp))
    }

    pub fn add_sin_scalar(self, freq: Vec<Vec<i64>>, amp: f64) -> Self {
        let d = freq[0].len();
        self.add_sin(freq, ident(d, amp))
    }

    /// Add `amp sin(2 pi k.y) sin(2 pi m.y) I`.
    pub fn add_sin_sin_scalar(self, k: Vec<Vec<i64>>, m: Vec<Vec<i64>>, amp: f64) -> Self {
        let diff: Vec<Vec<i64>> = k
            .iter()
            .zip(&m)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x - y).collect())
            .collect();
        let sum: Vec<Vec<i64>> = k
            .iter()
            .zip(&m)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect())
            .collect();
        self.add_cos_scalar(diff, 0.5 * amp)
            .add_cos_scalar(sum, -0.5 * amp)
    }

    pub fn with_certificates(mut self, lambda: f64, c0: f64, lambda0: f64) -> Self {
        self.lambda = lambda;
        self.c0 = c0;
        self.lambda0 = lambda0;
        self
    }

    /// Merge duplicate frequencies and check shapes and realness.
    pub fn normalized(&self) -> Result<AnalyticCoefficient> {
        if self.modes.is_empty() {
            return Err(Error::Validation("coefficient has no modes".into()));
        }
        let d = self.d();
        let n = self.n();
        let mut map: BTreeMap<Vec<i64>, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
        for m in &self.modes {
            if m.freq.len() != n || m.freq.iter().any(|b| b.len() != d) {
                return Err(Error::Validation("inconsistent frequency shapes".into()));
            }
            if m.matrix.len() != d || m.matrix.iter().any(|r| r.len() != d) {
                return Err(Error::Validation("mode matrix must be d x d".into()));
            }
            let key: Vec<i64> = m.freq.iter().flatten().copied().collect();
            let e = map
                .entry(key)
                .or_insert_with(|| (vec![0.0; d * d], vec![0.0; d * d]));
            for i in 0..d {
                for j in 0..d {
                    e.0[i * d + j] += m.matrix[i][j];
                    if let Some(im) = &m.matrix_im {
                        e.1[i * d + j] += im[i][j];
                    }
                }
            }
        }
        let scale = map
            .values()
            .flat_map(|(r, i)| r.iter().chain(i.iter()).map(|v| v.abs()))
            .fold(0.0, f64::max)
            .max(1.0);
        for (k, (re, im)) in &map {
            let nk: Vec<i64> = k.iter().map(|v| -v).collect();
            let (re2, im2) = match map.get(&nk) {
                Some(v) => v,
                None => {
                    if re.iter().chain(im.iter()).all(|v| *v == 0.0) {
                        continue;
                    }
                    return Err(Error::Validation(format!(
                        "mode {k:?} has no conjugate partner; samples would not be real"
                    )));
                }
            };
            for t in 0..d * d {
                if (re[t] - re2[t]).abs() > 1e-12 * scale || (im[t] + im2[t]).abs() > 1e-12 * scale {
                    return Err(Error::Validation(format!(
                        "modes {k:?} and {nk:?} are not conjugate"
                    )));
                }
            }
        }
        let modes = map
            .into_iter()
            .filter(|(_, (re, im))| re.iter().chain(im.iter()).any(|v| *v != 0.0))
            .map(|(k, (re, im))| CoefficientMode {
                freq: k.chunks(d).map(|c| c.to_vec()).collect(),
                matrix: re.chunks(d).map(|c| c.to_vec()).collect(),
                matrix_im: if im.iter().any(|v| *v != 0.0) {
                    Some(im.chunks(d).map(|c| c.to_vec()).collect())
                } else {
                    None
                },
            })
            .collect::<Vec<_>>();
        let modes = if modes.is_empty() {
            vec![CoefficientMode {
                freq: vec![vec![0; d]; n],
                matrix: ident(d, 0.0),
                matrix_im: None,
            }]
        } else {
            modes
        };
        Ok(AnalyticCoefficient {
            modes,
            lambda: self.lambda,
            c0: self.c0,
            lambda0: self.lambda0,
        })
    }

    /// Largest |frequency| on any axis of each block.
    pub fn max_freq(&self) -> Vec<i64> {
        let n = self.n();
        (0..n)
            .map(|b| {
                self.modes
                    .iter()
                    .flat_map(|m| m.freq[b].iter().map(|k| k.abs()))
                    .max()
                    .unwrap_or(0)
            })
            .collect()
    }

    /// Matrix value at a torus point `y` (one coordinate per axis).
    pub fn eval(&self, y: &[f64]) -> Vec<f64> {
        let d = self.d();
        let mut out = vec![0.0; d * d];
        for m in &self.modes {
            let th: f64 = m
                .freq
                .iter()
                .flatten()
                .zip(y)
                .map(|(&k, &y)| k as f64 * y)
                .sum::<f64>()
                * 2.0
                * PI;
            let (s, c) = th.sin_cos();
            for i in 0..d {
                for j in 0..d {
                    let re = m.matrix[i][j];
                    let im = m.matrix_im.as_ref().map(|v| v[i][j]).unwrap_or(0.0);
                    out[i * d + j] += re * c - im * s;
                }
            }
        }
        out
    }

    /// Read from the JSON coefficient format.
    pub fn from_json(s: &str) -> Result<Self> {
        let c: AnalyticCoefficient = serde_json::from_str(s)?;
        c.normalized()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Sample a coefficient on a grid.
pub fn build_field(spec: &AnalyticCoefficient, grid: &GridSpec) -> Result<TorusField> {
    let spec = spec.normalized()?;
    if spec.d() != grid.d || spec.n() != grid.n() {
        return Err(Error::Validation(format!(
            "coefficient lives on T^({}x{}) but the grid is T^({}x{})",
            spec.d(),
            spec.n(),
            grid.d,
            grid.n()
        )));
    }
    for (b, &k) in spec.max_freq().iter().enumerate() {
        if 2 * k as usize >= grid.res[b] {
            return Err(Error::Resolution(format!(
                "block {} resolution {} does not resolve frequency {k}",
                b + 1,
                grid.res[b]
            )));
        }
    }
    let d = spec.d();
    Ok(TorusField::from_fn(grid, &[d, d], |y, out| {
        out.copy_from_slice(&spec.eval(y))
    }))
}

/// Smallest eigenvalue of the symmetric part and operator norm of a d x d matrix.
pub fn ellipticity_pair(a: &[f64], d: usize) -> (f64, f64) {
    match d {
        1 => (a[0], a[0].abs()),
        2 => {
            let (p, q, r) = (a[0], 0.5 * (a[1] + a[2]), a[3]);
            let mean = 0.5 * (p + r);
            let rad = (0.25 * (p - r) * (p - r) + q * q).sqrt();
            let (m11, m12, m21, m22) = (a[0], a[1], a[2], a[3]);
            let t = m11 * m11 + m12 * m12 + m21 * m21 + m22 * m22;
            let det = m11 * m22 - m12 * m21;
            let s = (0.5 * (t + (t * t - 4.0 * det * det).max(0.0).sqrt())).sqrt();
            (mean - rad, s)
        }
        _ => unreachable!("only d = 1, 2 are supported"),
    }
}

/// Ellipticity check of a matrix field: returns (min xi.A xi, max |A xi|) over unit xi and nodes.
pub fn ellipticity_bounds(field: &TorusField) -> (f64, f64) {
    let d = field.grid().d;
    assert_eq!(field.shape(), &[d, d]);
    (0..field.npoints())
        .into_par_iter()
        .map(|i| ellipticity_pair(&field.at(i), d))
        .reduce(|| (f64::INFINITY, 0.0), |a, b| (a.0.min(b.0), a.1.max(b.1)))
}

/// Verify `xi.A xi >= lambda |xi|^2` and `|A xi| <= |xi| / lambda` on all nodes.
pub fn verify_ellipticity(field: &TorusField, lambda: f64) -> Result<(f64, f64)> {
    let (lo, hi) = ellipticity_bounds(field);
    if lo < lambda * (1.0 - 1e-12) || hi > (1.0 / lambda) * (1.0 + 1e-12) {
        return Err(Error::Validation(format!(
            "ellipticity with lambda = {lambda} fails: min xi.A xi = {lo:.6}, max |A| = {hi:.6}"
        )));
    }
    Ok((lo, hi))
}

/// Derivative-growth certificate `|D^l A| <= C0 Lambda0^l l!`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnalyticityReport {
    /// `max |D^l A|` on the check grid for `l = 0..=ell_check` (component-sum norm).
    pub derivative_norms: Vec<f64>,
    pub c0: f64,
    pub lambda0: f64,
    /// Whether the declared (C0, Lambda0) of the coefficient dominate the measured norms.
    pub declared_ok: bool,
}

fn multisets(nvar: usize, order: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, nvar: usize, left: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if left == 0 {
            out.push(cur.clone());
            return;
        }
        for v in start..nvar {
            cur.push(v);
            rec(v, nvar, left - 1, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, nvar, order, &mut Vec::new(), &mut out);
    out
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

/// Measure `max |D^l A|` for `l <= ell_check` and fit the smallest consistent (C0, Lambda0).
pub fn verify_analyticity(spec: &AnalyticCoefficient, ell_check: usize) -> Result<AnalyticityReport> {
    let spec = spec.normalized()?;
    let d = spec.d();
    let n = spec.n();
    let nvar = d * n;
    let kmax = spec.max_freq().into_iter().max().unwrap_or(0) as usize;
    let per_axis = (8 * kmax.max(1)).clamp(16, 64);
    let total_axes = nvar;
    let npts_target: usize = 1 << 16;
    let per_axis = {
        let mut r = per_axis;
        while r > 8 && r.pow(total_axes as u32) > npts_target {
            r /= 2;
        }
        r
    };
    let npts = per_axis.pow(total_axes as u32);
    let dims = vec![per_axis; total_axes];
    let modes = &spec.modes;
    let phases: Vec<Vec<Complex64>> = (0..npts)
        .into_par_iter()
        .map(|p| {
            let mut ix = vec![0; total_axes];
            spectral::unravel(p, &dims, &mut ix);
            modes
                .iter()
                .map(|m| {
                    let th: f64 = m
                        .freq
                        .iter()
                        .flatten()
                        .zip(&ix)
                        .map(|(&k, &i)| k as f64 * i as f64 / per_axis as f64)
                        .sum::<f64>()
                        * 2.0
                        * PI;
                    Complex64::from_polar(1.0, th)
                })
                .collect()
        })
        .collect();
    let mut norms = Vec::with_capacity(ell_check + 1);
    for ell in 0..=ell_check {
        let sets = multisets(nvar, ell);
        // coefficient per (multiset, mode, component)
        let mut weights = Vec::with_capacity(sets.len());
        let mut coefs: Vec<Vec<Complex64>> = Vec::with_capacity(sets.len());
        for s in &sets {
            let mut counts = vec![0usize; nvar];
            for &v in s {
                counts[v] += 1;
            }
            let mult = factorial(ell) / counts.iter().map(|&c| factorial(c)).product::<f64>();
            weights.push(mult);
            let mut cs = Vec::with_capacity(modes.len() * d * d);
            for m in modes {
                let k: Vec<i64> = m.freq.iter().flatten().copied().collect();
                let mut sym = Complex64::new(1.0, 0.0);
                for &v in s {
                    sym *= Complex64::new(0.0, 2.0 * PI * k[v] as f64);
                }
                for i in 0..d {
                    for j in 0..d {
                        let im = m.matrix_im.as_ref().map(|x| x[i][j]).unwrap_or(0.0);
                        cs.push(sym * Complex64::new(m.matrix[i][j], im));
                    }
                }
            }
            coefs.push(cs);
        }
        let nm = modes.len();
        let best = phases
            .par_iter()
            .map(|ph| {
                let mut tot = 0.0;
                for (si, cs) in coefs.iter().enumerate() {
                    for c in 0..d * d {
                        let mut v = 0.0;
                        for m in 0..nm {
                            v += (cs[m * d * d + c] * ph[m]).re;
                        }
                        tot += weights[si] * v.abs();
                    }
                }
                tot
            })
            .reduce(|| 0.0, f64::max);
        norms.push(best);
    }
    let c0 = norms[0];
    let mut lambda0: f64 = 0.0;
    for (ell, &v) in norms.iter().enumerate().skip(1) {
        if c0 > 0.0 && v > 0.0 {
            lambda0 = lambda0.max((v / (c0 * factorial(ell))).powf(1.0 / ell as f64));
        }
    }
    let declared_ok = norms.iter().enumerate().all(|(ell, &v)| {
        v <= spec.c0 * spec.lambda0.powi(ell as i32) * factorial(ell) * (1.0 + 1e-9) + 1e-12
    });
    Ok(AnalyticityReport {
        derivative_norms: norms,
        c0,
        lambda0,
        declared_ok,
    })
}

fn shape_name(shape: &[usize]) -> &'static str {
    match shape.len() {
        0 => "scalar",
        1 => "vector",
        2 => "matrix",
        3 => "tensor3",
        _ => "tensor",
    }
}

#[derive(Serialize, Deserialize)]
struct TnsrHeader {
    dims: Vec<usize>,
    shape: String,
    dtype: String,
    order: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    grid: Option<GridSpec>,
}

/// Write a TNSR/1 snapshot: a JSON header line, a newline, then little-endian f64
/// samples. `dims` lists the grid axes followed by the tensor indices, row-major
/// (tensor components vary fastest).
pub fn write_tnsr<W: Write>(field: &TorusField, mut w: W) -> Result<()> {
    let mut dims = field.grid().dims();
    dims.extend(field.shape());
    let header = TnsrHeader {
        dims,
        shape: shape_name(field.shape()).to_string(),
        dtype: "f64".into(),
        order: "row-major".into(),
        grid: Some(field.grid().clone()),
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    let np = field.npoints();
    let nc = field.ncomp();
    let mut buf = Vec::with_capacity(np * nc * 8);
    for i in 0..np {
        for c in 0..nc {
            buf.extend_from_slice(&field.data()[c * np + i].to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Read a TNSR/1 snapshot written by [`write_tnsr`].
pub fn read_tnsr<R: BufRead>(mut r: R) -> Result<TorusField> {
    let mut line = String::new();
    r.read_line(&mut line)?;
    let h: TnsrHeader = serde_json::from_str(line.trim_end())?;
    if h.dtype != "f64" || h.order != "row-major" {
        return Err(Error::Validation("unsupported TNSR/1 dtype or order".into()));
    }
    let rank = match h.shape.as_str() {
        "scalar" => 0,
        "vector" => 1,
        "matrix" => 2,
        "tensor3" => 3,
        other => return Err(Error::Validation(format!("unknown TNSR/1 shape {other}"))),
    };
    if h.dims.len() < rank {
        return Err(Error::Validation("TNSR/1 dims shorter than tensor rank".into()));
    }
    let split = h.dims.len() - rank;
    let grid = match h.grid {
        Some(g) => g,
        None => GridSpec::new(1, h.dims[..split].to_vec())?,
    };
    if grid.dims() != h.dims[..split] {
        return Err(Error::Validation("TNSR/1 grid does not match dims".into()));
    }
    let shape = h.dims[split..].to_vec();
    let np = grid.len();
    let nc = shape_len(&shape);
    let mut bytes = vec![0u8; np * nc * 8];
    r.read_exact(&mut bytes)?;
    let mut data = vec![0.0; np * nc];
    for i in 0..np {
        for c in 0..nc {
            let o = (i * nc + c) * 8;
            data[c * np + i] = f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        }
    }
    TorusField::new(grid, shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn g(d: usize, n: usize, r: usize) -> GridSpec {
        GridSpec::uniform(d, n, r).unwrap()
    }

    #[test]
    fn constant_spec_samples_identity() {
        let c = AnalyticCoefficient::scalar(2, 2, 1.0);
        let f = build_field(&c, &g(2, 2, 8)).unwrap();
        for i in 0..f.npoints() {
            assert_eq!(f.at(i), vec![1.0, 0.0, 0.0, 1.0]);
        }
    }

    #[test]
    fn reciprocal_counterexample_range() {
        let alpha = 0.25;
        let c = AnalyticCoefficient::scalar(1, 2, 1.0).add_sin_sin_scalar(
            vec![vec![1], vec![0]],
            vec![vec![0], vec![1]],
            2.0 * alpha,
        );
        assert_eq!(c.normalized().unwrap().modes.len(), 5);
        let f = build_field(&c, &g(1, 2, 64)).unwrap();
        let (lo, hi) = f
            .data()
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        assert!(lo >= 0.5 - 1e-14 && hi <= 1.5 + 1e-14);
        assert_abs_diff_eq!(lo, 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(hi, 1.5, epsilon = 1e-12);
        assert_abs_diff_eq!(f.full_average()[0], 1.0, epsilon = 1e-14);
    }

    #[test]
    fn odd_product_has_zero_mean() {
        let c = AnalyticCoefficient::scalar(1, 2, 0.0).add_sin_sin_scalar(
            vec![vec![1], vec![0]],
            vec![vec![0], vec![1]],
            1.0,
        );
        let f = build_field(&c, &g(1, 2, 32)).unwrap();
        assert!(f.full_average()[0].abs() < 1e-15);
    }

    #[test]
    fn under_resolved_grid_is_rejected() {
        let c = AnalyticCoefficient::scalar(1, 1, 1.0).add_cos_scalar(vec![vec![4]], 0.1);
        assert!(matches!(build_field(&c, &g(1, 1, 8)), Err(Error::Resolution(_))));
        assert!(build_field(&c, &g(1, 1, 16)).is_ok());
    }

    #[test]
    fn non_real_mode_set_is_rejected() {
        let mut c = AnalyticCoefficient::scalar(1, 1, 1.0);
        c.modes.push(CoefficientMode {
            freq: vec![vec![1]],
            matrix: vec![vec![0.5]],
            matrix_im: None,
        });
        assert!(matches!(c.normalized(), Err(Error::Validation(_))));
    }

    #[test]
    fn scale_partial_single_modes() {
        let gr = g(1, 2, 16);
        let f = TorusField::from_fn(&gr, &[], |y, o| o[0] = (2.0 * PI * y[0]).sin());
        let df = scale_partial(&f, 0, 1).unwrap();
        for i in 0..gr.len() {
            let y = gr.coords(i);
            assert_abs_diff_eq!(df.data()[i], 2.0 * PI * (2.0 * PI * y[0]).cos(), epsilon = 1e-11);
        }
        let c = TorusField::constant(&gr, &[], &[3.0]);
        assert!(scale_partial(&c, 1, 1).unwrap().max_abs() < 1e-14);
        let h = TorusField::from_fn(&gr, &[], |y, o| {
            o[0] = (2.0 * PI * y[0]).sin() * (2.0 * PI * y[1]).cos()
        });
        let d2 = scale_partial(&h, 1, 2).unwrap();
        for i in 0..gr.len() {
            assert_abs_diff_eq!(d2.data()[i], -4.0 * PI * PI * h.data()[i], epsilon = 1e-10);
        }
        assert!(scale_partial(&h, 2, 1).is_err());
    }

    #[test]
    fn directional_gradient_weights_blocks() {
        let gr = g(1, 2, 16);
        let s = ScaleVector::new(vec![1.0, 0.1]).unwrap();
        let f = TorusField::from_fn(&gr, &[], |y, o| o[0] = (2.0 * PI * y[1]).sin());
        let df = directional_gradient(&f, &s).unwrap();
        for i in 0..gr.len() {
            let y = gr.coords(i);
            assert_abs_diff_eq!(
                df.data()[i],
                10.0 * 2.0 * PI * (2.0 * PI * y[1]).cos(),
                epsilon = 1e-9
            );
        }
        let f1 = TorusField::from_fn(&gr, &[], |y, o| o[0] = (2.0 * PI * y[0]).sin());
        let df1 = directional_gradient(&f1, &s).unwrap();
        for i in 0..gr.len() {
            let y = gr.coords(i);
            assert_abs_diff_eq!(df1.data()[i], 2.0 * PI * (2.0 * PI * y[0]).cos(), epsilon = 1e-10);
        }
        let bad = ScaleVector::new(vec![1.0]).unwrap();
        assert!(directional_gradient(&f, &bad).is_err());
    }

    #[test]
    fn averages() {
        let gr = g(1, 2, 16);
        let f = TorusField::from_fn(&gr, &[], |y, o| o[0] = (2.0 * PI * y[1]).sin() + y[0]);
        let p = f.partial_average(1);
        for i in 0..p.npoints() {
            assert_abs_diff_eq!(p.data()[i], i as f64 / 16.0, epsilon = 1e-14);
        }
        let c = TorusField::constant(&gr, &[2], &[1.5, -2.0]);
        assert_eq!(c.full_average(), vec![1.5, -2.0]);
        let e = p.extend_block(&gr, 1);
        let back = e.partial_average(1);
        for i in 0..p.npoints() {
            assert_abs_diff_eq!(back.data()[i], p.data()[i], epsilon = 1e-14);
        }
    }

    #[test]
    fn diagonal_trace_closed_form() {
        let gr = g(1, 2, 16);
        let s = ScaleVector::new(vec![0.1, 0.01]).unwrap();
        let f = TorusField::from_fn(&gr, &[], |y, o| o[0] = (2.0 * PI * y[1]).sin());
        let v = diagonal_trace(&f, &s, &[vec![0.005]]).unwrap();
        assert!(v[0][0].abs() < 1e-12);
        let c = TorusField::constant(&gr, &[], &[2.5]);
        let v = diagonal_trace(&c, &s, &[vec![0.1], vec![0.37]]).unwrap();
        assert!(v.iter().all(|x| (x[0] - 2.5).abs() < 1e-14));
    }

    #[test]
    fn tnsr_roundtrip() {
        let gr = g(2, 1, 8);
        let f = TorusField::from_fn(&gr, &[2, 2], |y, o| {
            o[0] = y[0];
            o[1] = y[1];
            o[2] = -y[0];
            o[3] = 1.0;
        });
        let mut buf = Vec::new();
        write_tnsr(&f, &mut buf).unwrap();
        let first = buf.iter().position(|&b| b == b'\n').unwrap();
        let head: serde_json::Value = serde_json::from_slice(&buf[..first]).unwrap();
        assert_eq!(head["shape"], "matrix");
        assert_eq!(head["dtype"], "f64");
        assert_eq!(head["dims"], serde_json::json!([8, 8, 2, 2]));
        let g2 = read_tnsr(std::io::Cursor::new(buf)).unwrap();
        assert_eq!(f, g2);
    }

    #[test]
    fn coefficient_json_roundtrip() {
        let c = AnalyticCoefficient::scalar(1, 2, 3.0)
            .add_sin_scalar(vec![vec![1], vec![0]], 1.0)
            .add_sin_scalar(vec![vec![0], vec![1]], 1.0)
            .with_certificates(0.2, 5.0, 6.3);
        let s = c.to_json().unwrap();
        let c2 = AnalyticCoefficient::from_json(&s).unwrap();
        let y = [0.3, 0.7];
        let a = c.eval(&y)[0];
        assert_abs_diff_eq!(a, 3.0 + (2.0 * PI * 0.3).sin() + (2.0 * PI * 0.7).sin(), epsilon = 1e-13);
        assert_abs_diff_eq!(c2.eval(&y)[0], a, epsilon = 1e-13);
        assert_eq!(c2.lambda, 0.2);
    }

    #[test]
    fn analyticity_constant_and_single_mode() {
        let c = AnalyticCoefficient::scalar(2, 1, 1.0);
        let r = verify_analyticity(&c, 3).unwrap();
        assert_abs_diff_eq!(r.c0, 2.0, epsilon = 1e-12);
        let s = AnalyticCoefficient::scalar(1, 1, 0.0).add_sin_scalar(vec![vec![1]], 1.0);
        let r = verify_analyticity(&s, 4).unwrap();
        for (l, v) in r.derivative_norms.iter().enumerate() {
            assert_abs_diff_eq!(*v, (2.0 * PI).powi(l as i32), epsilon = 1e-9 * v.max(1.0));
        }
        assert!(r.lambda0 <= 2.0 * PI + 1e-9);
    }
}
