//! Nondegenerate one-scale cell problems
//! `-w^2 div_n (A grad_n Y) + tau^2 Y = w div_n F + G` on the innermost block,
//! solved independently at every node of the outer blocks.
//!
//! Discretization is Fourier-Galerkin: derivatives act on spectra, `A` multiplies
//! in sample space on a 3/2-padded grid. The Krylov solver is conjugate
//! gradients preconditioned by the constant-coefficient symbol; BiCGSTAB is used
//! when `A` is not symmetric.

use std::f64::consts::PI;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::Calibration;
use crate::error::{Error, Result};
use crate::spectral;
use crate::torus_field::TorusField;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolveOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub dealias: bool,
    /// Largest admissible `|<rhs>_n| / rms(rhs)` when `tau = 0`.
    pub solvability_tol: f64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            tol: 1e-10,
            max_iter: 1000,
            dealias: true,
            solvability_tol: 1e-8,
        }
    }
}

impl From<&Calibration> for SolveOptions {
    fn from(c: &Calibration) -> Self {
        SolveOptions {
            tol: c.tol,
            max_iter: c.max_iter,
            dealias: c.dealias,
            solvability_tol: 1e-8,
        }
    }
}

/// Cell problem on the last block of the grid of `a`; all other blocks are parameters.
#[derive(Debug, Clone, Copy)]
pub struct CellProblem<'a> {
    /// d x d matrix field.
    pub a: &'a TorusField,
    /// Vector source in divergence form.
    pub f: Option<&'a TorusField>,
    /// Scalar source.
    pub g: Option<&'a TorusField>,
    pub tau: f64,
    /// Scale factor `w` of the inner derivative (1 for the plain cell problem).
    pub weight: f64,
}

impl<'a> CellProblem<'a> {
    pub fn new(a: &'a TorusField) -> Self {
        CellProblem {
            a,
            f: None,
            g: None,
            tau: 0.0,
            weight: 1.0,
        }
    }

    pub fn with_f(mut self, f: &'a TorusField) -> Self {
        self.f = Some(f);
        self
    }

    pub fn with_g(mut self, g: &'a TorusField) -> Self {
        self.g = Some(g);
        self
    }

    pub fn with_tau(mut self, tau: f64) -> Self {
        self.tau = tau;
        self
    }

    pub fn with_weight(mut self, w: f64) -> Self {
        self.weight = w;
        self
    }

    fn inner_weights(&self) -> Vec<f64> {
        let n = self.a.grid().n();
        let mut w = vec![0.0; n];
        w[n - 1] = self.weight;
        w
    }

    /// Assembled right-hand side `w div_n F + G`.
    pub fn rhs(&self) -> TorusField {
        let grid = self.a.grid();
        let mut r = TorusField::zeros(grid, &[]);
        if let Some(f) = self.f {
            r.axpy(1.0, &f.weighted_div(&self.inner_weights()));
        }
        if let Some(g) = self.g {
            r.axpy(1.0, g);
        }
        r
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolveDiagnostics {
    pub iterations: Vec<usize>,
    pub max_relative_residual: f64,
    /// Mean of the right-hand side removed at each outer node (`tau = 0` only).
    pub defects: Vec<f64>,
    pub norm_y: f64,
    pub norm_grad_y: f64,
    /// `(|grad_n Y| + tau |Y|) / (|F| + [G != 0] |G| / tau)` when the denominator is positive.
    pub energy_constant: Option<f64>,
}

impl SolveDiagnostics {
    pub fn max_defect(&self) -> f64 {
        self.defects.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Operator `-w^2 div(A grad) + tau^2` on a single `T^d` slice.
struct InnerOp {
    d: usize,
    n: usize,
    dims: Vec<usize>,
    fine: Vec<usize>,
    /// Matrix samples on the product grid (fine grid when dealiasing).
    a: Vec<Vec<f64>>,
    tau2: f64,
    /// Preconditioner symbol inverse on the base grid (0 on null modes).
    pinv: Vec<f64>,
    /// `2 pi i k_l w` per direction on the base grid (0 at Nyquist).
    dsym: Vec<Vec<Complex64>>,
    symmetric: bool,
}

impl InnerOp {
    fn new(a_loc: Vec<Vec<f64>>, d: usize, n: usize, w: f64, tau: f64, dealias: bool) -> Self {
        let dims = vec![n; d];
        let m: usize = dims.iter().product();
        let fine: Vec<usize> = if dealias {
            vec![3 * n / 2; d]
        } else {
            dims.clone()
        };
        let mut mean = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                let s: f64 = a_loc[i * d + j].iter().zip(&a_loc[j * d + i]).map(|(x, y)| 0.5 * (x + y)).sum();
                mean[i * d + j] = s / m as f64;
            }
        }
        let symmetric = (0..d).all(|i| {
            (0..d).all(|j| {
                a_loc[i * d + j]
                    .iter()
                    .zip(&a_loc[j * d + i])
                    .all(|(x, y)| (x - y).abs() <= 1e-14 * (1.0 + x.abs()))
            })
        });
        let a = if dealias {
            a_loc
                .iter()
                .map(|c| {
                    let mut z = spectral::to_complex(c);
                    spectral::fft_all(&mut z, &dims, false);
                    let mut zf = spectral::resample_spectrum(&z, &dims, &fine);
                    spectral::fft_all(&mut zf, &fine, true);
                    spectral::to_real(&zf)
                })
                .collect()
        } else {
            a_loc
        };
        let tau2 = tau * tau;
        let mut pinv = vec![0.0; m];
        let mut dsym = vec![vec![Complex64::new(0.0, 0.0); m]; d];
        let mut ix = vec![0; d];
        for (p, pv) in pinv.iter_mut().enumerate() {
            spectral::unravel(p, &dims, &mut ix);
            let ks: Vec<Option<i64>> = ix.iter().map(|&i| spectral::freq(i, n)).collect();
            let nyq = ks.iter().any(|k| k.is_none());
            let k: Vec<f64> = ks.iter().map(|k| k.unwrap_or(0) as f64).collect();
            for l in 0..d {
                dsym[l][p] = Complex64::new(0.0, 2.0 * PI * w * k[l]);
            }
            let mut q = 0.0;
            for i in 0..d {
                for j in 0..d {
                    q += k[i] * mean[i * d + j] * k[j];
                }
            }
            let s = 4.0 * PI * PI * w * w * q + tau2;
            *pv = if nyq || s == 0.0 { 0.0 } else { 1.0 / s };
        }
        InnerOp {
            d,
            n,
            dims,
            fine,
            a,
            tau2,
            pinv,
            dsym,
            symmetric,
        }
    }

    fn m(&self) -> usize {
        self.pinv.len()
    }

    fn apply(&self, y: &[f64]) -> Vec<f64> {
        let d = self.d;
        let m = self.m();
        let mut yh = spectral::to_complex(y);
        spectral::fft_all(&mut yh, &self.dims, false);
        let mf: usize = self.fine.iter().product();
        let dealias = self.fine != self.dims;
        let grads: Vec<Vec<f64>> = (0..d)
            .map(|l| {
                let g: Vec<Complex64> = yh.iter().zip(&self.dsym[l]).map(|(a, b)| a * b).collect();
                let mut g = if dealias {
                    spectral::resample_spectrum(&g, &self.dims, &self.fine)
                } else {
                    g
                };
                spectral::fft_all(&mut g, &self.fine, true);
                spectral::to_real(&g)
            })
            .collect();
        let mut out = vec![Complex64::new(0.0, 0.0); m];
        for i in 0..d {
            let mut q = vec![0.0; mf];
            for (l, gl) in grads.iter().enumerate() {
                let a = &self.a[i * d + l];
                for ((qv, av), gv) in q.iter_mut().zip(a).zip(gl) {
                    *qv += av * gv;
                }
            }
            let mut qh = spectral::to_complex(&q);
            spectral::fft_all(&mut qh, &self.fine, false);
            let qh = if dealias {
                spectral::resample_spectrum(&qh, &self.fine, &self.dims)
            } else {
                qh
            };
            for ((o, qv), s) in out.iter_mut().zip(&qh).zip(&self.dsym[i]) {
                *o -= s * qv;
            }
        }
        for (o, yv) in out.iter_mut().zip(&yh) {
            *o += self.tau2 * yv;
        }
        spectral::fft_all(&mut out, &self.dims, true);
        spectral::to_real(&out)
    }

    fn precondition(&self, r: &[f64]) -> Vec<f64> {
        let mut z = spectral::to_complex(r);
        spectral::fft_all(&mut z, &self.dims, false);
        for (v, p) in z.iter_mut().zip(&self.pinv) {
            *v *= *p;
        }
        spectral::fft_all(&mut z, &self.dims, true);
        spectral::to_real(&z)
    }

    /// Remove Nyquist content (and the mean when `tau = 0`).
    fn project(&self, r: &[f64]) -> Vec<f64> {
        let mut z = spectral::to_complex(r);
        spectral::fft_all(&mut z, &self.dims, false);
        let mut ix = vec![0; self.d];
        for (p, v) in z.iter_mut().enumerate() {
            spectral::unravel(p, &self.dims, &mut ix);
            let nyq = ix.iter().any(|&i| spectral::freq(i, self.n).is_none());
            let zero = ix.iter().all(|&i| i == 0);
            if nyq || (zero && self.tau2 == 0.0) {
                *v = Complex64::new(0.0, 0.0);
            }
        }
        spectral::fft_all(&mut z, &self.dims, true);
        spectral::to_real(&z)
    }

    fn solve(&self, b: &[f64], tol: f64, max_iter: usize) -> (Vec<f64>, usize, f64) {
        if self.symmetric {
            pcg(self, b, tol, max_iter)
        } else {
            bicgstab(self, b, tol, max_iter)
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn pcg(op: &InnerOp, b: &[f64], tol: f64, max_iter: usize) -> (Vec<f64>, usize, f64) {
    let m = b.len();
    let bn = norm(b);
    let mut x = vec![0.0; m];
    if bn == 0.0 {
        return (x, 0, 0.0);
    }
    let mut r = b.to_vec();
    let mut z = op.precondition(&r);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut rel = 1.0;
    for it in 1..=max_iter {
        let ap = op.apply(&p);
        let pap = dot(&p, &ap);
        if pap <= 0.0 {
            return (x, it, rel);
        }
        let alpha = rz / pap;
        for i in 0..m {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        rel = norm(&r) / bn;
        if rel <= tol {
            return (x, it, rel);
        }
        z = op.precondition(&r);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..m {
            p[i] = z[i] + beta * p[i];
        }
    }
    (x, max_iter, rel)
}

fn bicgstab(op: &InnerOp, b: &[f64], tol: f64, max_iter: usize) -> (Vec<f64>, usize, f64) {
    let m = b.len();
    let bn = norm(b);
    let mut x = vec![0.0; m];
    if bn == 0.0 {
        return (x, 0, 0.0);
    }
    let mut r = b.to_vec();
    let r0 = r.clone();
    let (mut rho, mut alpha, mut omega) = (1.0, 1.0, 1.0);
    let mut v = vec![0.0; m];
    let mut p = vec![0.0; m];
    let mut rel = 1.0;
    for it in 1..=max_iter {
        let rho_new = dot(&r0, &r);
        if rho_new == 0.0 {
            return (x, it, rel);
        }
        let beta = (rho_new / rho) * (alpha / omega);
        rho = rho_new;
        for i in 0..m {
            p[i] = r[i] + beta * (p[i] - omega * v[i]);
        }
        let ph = op.precondition(&p);
        v = op.apply(&ph);
        alpha = rho / dot(&r0, &v);
        let s: Vec<f64> = (0..m).map(|i| r[i] - alpha * v[i]).collect();
        if norm(&s) / bn <= tol {
            for i in 0..m {
                x[i] += alpha * ph[i];
            }
            return (x, it, norm(&s) / bn);
        }
        let sh = op.precondition(&s);
        let t = op.apply(&sh);
        let tt = dot(&t, &t);
        omega = if tt > 0.0 { dot(&t, &s) / tt } else { 0.0 };
        for i in 0..m {
            x[i] += alpha * ph[i] + omega * sh[i];
            r[i] = s[i] - omega * t[i];
        }
        rel = norm(&r) / bn;
        if rel <= tol || omega == 0.0 {
            return (x, it, rel);
        }
    }
    (x, max_iter, rel)
}

struct Slicer {
    d: usize,
    n: usize,
    m: usize,
    outer: usize,
}

impl Slicer {
    fn new(a: &TorusField) -> Self {
        let g = a.grid();
        let nb = g.n();
        let n = g.res[nb - 1];
        let m = g.block_len(nb - 1);
        Slicer {
            d: g.d,
            n,
            m,
            outer: g.len() / m,
        }
    }

    fn matrix(&self, a: &TorusField, o: usize) -> Vec<Vec<f64>> {
        (0..self.d * self.d)
            .map(|c| a.comp(c)[o * self.m..(o + 1) * self.m].to_vec())
            .collect()
    }
}

fn rms(v: &[f64]) -> f64 {
    (dot(v, v) / v.len() as f64).sqrt()
}

/// Solve `-w^2 div_n(A grad_n Y) + tau^2 Y = rhs` at every outer node.
pub fn solve_scalar_rhs(
    a: &TorusField,
    rhs: &TorusField,
    tau: f64,
    weight: f64,
    opts: &SolveOptions,
) -> Result<(TorusField, SolveDiagnostics)> {
    let g = a.grid();
    if a.shape() != [g.d, g.d] {
        return Err(Error::Validation("cell problem coefficient must be a d x d field".into()));
    }
    if rhs.grid() != g || rhs.ncomp() != 1 {
        return Err(Error::Validation("cell problem right-hand side must be a scalar field on the coefficient grid".into()));
    }
    let sl = Slicer::new(a);
    let results: Vec<(Vec<f64>, usize, f64, f64)> = (0..sl.outer)
        .into_par_iter()
        .map(|o| {
            let op = InnerOp::new(sl.matrix(a, o), sl.d, sl.n, weight, tau, opts.dealias);
            let r = &rhs.data()[o * sl.m..(o + 1) * sl.m];
            let mean = r.iter().sum::<f64>() / sl.m as f64;
            let b = op.project(r);
            let (x, it, rel) = op.solve(&b, opts.tol, opts.max_iter);
            let defect = if tau == 0.0 { mean } else { 0.0 };
            let scale = rms(r);
            let violated = tau == 0.0 && scale > 0.0 && mean.abs() > opts.solvability_tol * scale;
            (x, it, if violated { f64::NAN } else { rel }, defect)
        })
        .collect();
    if let Some((o, r)) = results
        .iter()
        .enumerate()
        .find(|(_, r)| r.2.is_nan())
    {
        return Err(Error::Validation(format!(
            "solvability violated at outer node {o}: <G>_n = {:.3e} with tau = 0",
            r.3
        )));
    }
    let worst = results
        .iter()
        .enumerate()
        .filter(|(_, r)| r.2 > opts.tol)
        .max_by(|x, y| x.1 .2.total_cmp(&y.1 .2));
    if let Some((o, r)) = worst {
        return Err(Error::Solver {
            node: o,
            residual: r.2,
            iterations: r.1,
        });
    }
    let mut data = Vec::with_capacity(g.len());
    let mut iterations = Vec::with_capacity(sl.outer);
    let mut defects = Vec::with_capacity(sl.outer);
    let mut maxrel: f64 = 0.0;
    for (x, it, rel, df) in results {
        data.extend(x);
        iterations.push(it);
        defects.push(df);
        maxrel = maxrel.max(rel);
    }
    let y = TorusField::new(g.clone(), vec![], data)?;
    let mut w = vec![0.0; g.n()];
    w[g.n() - 1] = 1.0;
    let norm_grad_y = y.weighted_grad(&w).l2_norm();
    let norm_y = y.l2_norm();
    Ok((
        y,
        SolveDiagnostics {
            iterations,
            max_relative_residual: maxrel,
            defects,
            norm_y,
            norm_grad_y,
            energy_constant: None,
        },
    ))
}

/// Solve a [`CellProblem`]. When `tau = 0` the solution has zero mean in the inner block.
pub fn solve_inner(p: &CellProblem, opts: &SolveOptions) -> Result<(TorusField, SolveDiagnostics)> {
    let rhs = p.rhs();
    let (y, mut diag) = solve_scalar_rhs(p.a, &rhs, p.tau, p.weight, opts)?;
    let nf = p.f.map(|f| f.l2_norm()).unwrap_or(0.0);
    let ng = p.g.map(|g| g.l2_norm()).unwrap_or(0.0);
    let den = nf + if ng > 0.0 && p.tau > 0.0 { ng / p.tau } else { 0.0 };
    if den > 0.0 {
        diag.energy_constant = Some((diag.norm_grad_y + p.tau * diag.norm_y) / den);
    }
    Ok((y, diag))
}

/// Apply the cell operator `-w^2 div_n(A grad_n Y) + tau^2 Y` at every outer node.
pub fn apply_operator(a: &TorusField, y: &TorusField, tau: f64, weight: f64, dealias: bool) -> TorusField {
    let sl = Slicer::new(a);
    let parts: Vec<Vec<f64>> = (0..sl.outer)
        .into_par_iter()
        .map(|o| {
            let op = InnerOp::new(sl.matrix(a, o), sl.d, sl.n, weight, tau, dealias);
            op.apply(&y.data()[o * sl.m..(o + 1) * sl.m])
        })
        .collect();
    TorusField::new(a.grid().clone(), vec![], parts.concat()).expect("operator output shape")
}

/// Discrete L2 (root-mean-square) norm of the cell residual, maximized over outer nodes.
pub fn residual_inner(p: &CellProblem, y: &TorusField, opts: &SolveOptions) -> f64 {
    let ly = apply_operator(p.a, y, p.tau, p.weight, opts.dealias);
    let r = ly.sub(&p.rhs());
    let sl = Slicer::new(p.a);
    (0..sl.outer)
        .map(|o| rms(&r.data()[o * sl.m..(o + 1) * sl.m]))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::torus_field::GridSpec;
    use approx::assert_abs_diff_eq;

    fn ident(g: &GridSpec) -> TorusField {
        let d = g.d;
        let v: Vec<f64> = (0..d * d).map(|c| if c % (d + 1) == 0 { 1.0 } else { 0.0 }).collect();
        TorusField::constant(g, &[d, d], &v)
    }

    #[test]
    fn identity_divergence_single_mode() {
        let g = GridSpec::uniform(2, 1, 16).unwrap();
        let a = ident(&g);
        let f = TorusField::from_fn(&g, &[2], |y, o| {
            o[0] = (2.0 * PI * y[0]).sin();
            o[1] = 0.0;
        });
        let p = CellProblem::new(&a).with_f(&f);
        let opts = SolveOptions::default();
        let (y, _) = solve_inner(&p, &opts).unwrap();
        for i in 0..g.len() {
            let c = g.coords(i);
            assert_abs_diff_eq!(y.data()[i], (2.0 * PI * c[0]).cos() / (2.0 * PI), epsilon = 1e-11);
        }
        assert!(residual_inner(&p, &y, &opts) <= 1e-10);
    }

    #[test]
    fn identity_tau_one_single_mode() {
        let g = GridSpec::uniform(1, 1, 32).unwrap();
        let a = ident(&g);
        let gs = TorusField::from_fn(&g, &[], |y, o| o[0] = (2.0 * PI * y[0]).cos());
        let p = CellProblem::new(&a).with_g(&gs).with_tau(1.0);
        let (y, _) = solve_inner(&p, &SolveOptions::default()).unwrap();
        for i in 0..g.len() {
            assert_abs_diff_eq!(y.data()[i], gs.data()[i] / (4.0 * PI * PI + 1.0), epsilon = 1e-12);
        }
        let zero = TorusField::zeros(&g, &[]);
        let r = residual_inner(&p, &zero, &SolveOptions::default());
        assert_abs_diff_eq!(r, 1.0 / 2f64.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn solvability_violation_is_reported() {
        let g = GridSpec::uniform(1, 1, 16).unwrap();
        let a = ident(&g);
        let gs = TorusField::constant(&g, &[], &[1.0]);
        let p = CellProblem::new(&a).with_g(&gs);
        assert!(matches!(solve_inner(&p, &SolveOptions::default()), Err(Error::Validation(_))));
    }
}
