//! Dirichlet reference solves on `(0,1)` and the unit square, the first-order
//! expansion error and rate fits.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::effective::Matrix;
use crate::error::{Error, Result};

/// 8-point Gauss-Legendre rule on `[-1, 1]`.
const GAUSS_X: [f64; 8] = [
    -0.960_289_856_497_536_3,
    -0.796_666_477_413_626_7,
    -0.525_532_409_916_329,
    -0.183_434_642_495_649_8,
    0.183_434_642_495_649_8,
    0.525_532_409_916_329,
    0.796_666_477_413_626_7,
    0.960_289_856_497_536_3,
];
const GAUSS_W: [f64; 8] = [
    0.101_228_536_290_376_3,
    0.222_381_034_453_374_5,
    0.313_706_645_877_887_3,
    0.362_683_783_378_362,
    0.362_683_783_378_362,
    0.313_706_645_877_887_3,
    0.222_381_034_453_374_5,
    0.101_228_536_290_376_3,
];

/// Gauss nodes and weights on `[a, b]`.
pub fn gauss_nodes(a: f64, b: f64) -> [(f64, f64); 8] {
    let (c, h) = (0.5 * (a + b), 0.5 * (b - a));
    let mut out = [(0.0, 0.0); 8];
    for q in 0..8 {
        out[q] = (c + h * GAUSS_X[q], h * GAUSS_W[q]);
    }
    out
}

/// Composite 8-point Gauss integral of `f` over `[a, b]` with `panels` panels.
pub fn gauss_integral<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, panels: usize) -> f64 {
    let h = (b - a) / panels as f64;
    (0..panels)
        .map(|p| {
            gauss_nodes(a + p as f64 * h, a + (p + 1) as f64 * h)
                .iter()
                .map(|(x, w)| w * f(*x))
                .sum::<f64>()
        })
        .sum()
}

pub type Coef1d = dyn Fn(f64) -> f64 + Send + Sync;

/// Solution of `-(a u')' = f` on `(0, 1)` with `u(0) = g0`, `u(1) = g1` and constant `f`:
/// `u(x) = g0 - int_0^x (f t + p) / a(t) dt`.
pub struct Fine1d {
    a: Arc<Coef1d>,
    pub f: f64,
    pub g0: f64,
    pub g1: f64,
    pub p: f64,
    pub panels: usize,
    /// `int_0^{x_i} 1/a` and `int_0^{x_i} t/a` at panel ends.
    cum1: Vec<f64>,
    cumt: Vec<f64>,
}

impl Fine1d {
    pub fn h(&self) -> f64 {
        1.0 / self.panels as f64
    }

    fn partial(&self, x: f64) -> (f64, f64) {
        let x = x.clamp(0.0, 1.0);
        let h = self.h();
        let i = ((x / h).floor() as usize).min(self.panels - 1);
        let x0 = i as f64 * h;
        let (mut s1, mut st) = (self.cum1[i], self.cumt[i]);
        if x > x0 {
            for (t, w) in gauss_nodes(x0, x) {
                let ia = 1.0 / (self.a)(t);
                s1 += w * ia;
                st += w * t * ia;
            }
        }
        (s1, st)
    }

    pub fn eval(&self, x: f64) -> f64 {
        let (s1, st) = self.partial(x);
        self.g0 - self.f * st - self.p * s1
    }

    /// `u'(x) = -(f x + p) / a(x)`.
    pub fn derivative(&self, x: f64) -> f64 {
        -(self.f * x + self.p) / (self.a)(x)
    }

    /// The constant flux `a u' + f x = -p`.
    pub fn flux(&self, x: f64) -> f64 {
        (self.a)(x) * self.derivative(x) + self.f * x
    }

    pub fn coefficient(&self, x: f64) -> f64 {
        (self.a)(x)
    }

    /// `(node, weight)` pairs of the composite rule.
    pub fn nodes(&self) -> Vec<(f64, f64)> {
        let h = self.h();
        (0..self.panels)
            .flat_map(|i| gauss_nodes(i as f64 * h, (i + 1) as f64 * h))
            .collect()
    }

    /// `u` at every node of the composite rule.
    pub fn values_at_nodes(&self) -> Vec<f64> {
        let h = self.h();
        (0..self.panels)
            .into_par_iter()
            .flat_map_iter(|i| {
                let x0 = i as f64 * h;
                gauss_nodes(x0, x0 + h).map(|(x, _)| self.eval(x))
            })
            .collect()
    }
}

/// Fine 1-D solve by the closed formula with panels of width at most `0.4 eps_min`
/// (at least 20 Gauss nodes per finest period).
pub fn solve_fine_1d(a: Arc<Coef1d>, eps_min: f64, f: f64, g0: f64, g1: f64) -> Result<Fine1d> {
    let panels = (1.0 / (0.4 * eps_min)).ceil().max(8.0) as usize;
    solve_fine_1d_panels(a, eps_min, panels, f, g0, g1)
}

/// Same as [`solve_fine_1d`] with an explicit panel count.
pub fn solve_fine_1d_panels(a: Arc<Coef1d>, eps_min: f64, panels: usize, f: f64, g0: f64, g1: f64) -> Result<Fine1d> {
    let h = 1.0 / panels as f64;
    if h > 0.4 * eps_min * (1.0 + 1e-12) {
        return Err(Error::Resolution(format!(
            "panel width {h:.3e} leaves fewer than 20 nodes per period {eps_min:.3e}"
        )));
    }
    if panels > 1 << 26 {
        return Err(Error::Resource(format!("{panels} panels exceed the quadrature budget")));
    }
    let parts: Vec<(f64, f64)> = (0..panels)
        .into_par_iter()
        .map(|i| {
            let mut s = (0.0, 0.0);
            for (t, w) in gauss_nodes(i as f64 * h, (i + 1) as f64 * h) {
                let av = a(t);
                if !(av > 0.0) {
                    return (f64::NAN, f64::NAN);
                }
                s.0 += w / av;
                s.1 += w * t / av;
            }
            s
        })
        .collect();
    if parts.iter().any(|p| p.0.is_nan()) {
        return Err(Error::Validation("coefficient is not positive on the quadrature nodes".into()));
    }
    let mut cum1 = Vec::with_capacity(panels + 1);
    let mut cumt = Vec::with_capacity(panels + 1);
    let (mut s1, mut st) = (0.0, 0.0);
    cum1.push(0.0);
    cumt.push(0.0);
    for (p1, pt) in parts {
        s1 += p1;
        st += pt;
        cum1.push(s1);
        cumt.push(st);
    }
    let p = (g0 - g1 - f * st) / s1;
    Ok(Fine1d {
        a,
        f,
        g0,
        g1,
        p,
        panels,
        cum1,
        cumt,
    })
}

/// Constant-coefficient 1-D solution `g0 + (g1 - g0) x + f x (1 - x) / (2 abar)`.
pub fn solve_effective_1d(abar: f64, f: f64, g0: f64, g1: f64) -> impl Fn(f64) -> f64 + Sync {
    move |x| g0 + (g1 - g0) * x + f * x * (1.0 - x) / (2.0 * abar)
}

/// `||u - v||_{L^2(0,1)}` on the nodes of a fine solve.
pub fn l2_distance_1d<F: Fn(f64) -> f64 + Sync>(u: &Fine1d, v: F) -> f64 {
    let vals = u.values_at_nodes();
    u.nodes()
        .iter()
        .zip(&vals)
        .map(|((x, w), uv)| w * (uv - v(*x)).powi(2))
        .sum::<f64>()
        .sqrt()
}

pub type Coef2d = dyn Fn(f64, f64) -> [f64; 4] + Sync;

/// FD solution on the unit square with `n` interior points per axis.
#[derive(Debug, Clone)]
pub struct Fine2d {
    pub n: usize,
    pub h: f64,
    /// Nodal values including the boundary, `(n + 2)^2` row-major in `(i, j)` = `(x, y)`.
    pub u: Vec<f64>,
    pub iterations: usize,
    pub relative_residual: f64,
}

impl Fine2d {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.u[i * (self.n + 2) + j]
    }

    /// Discrete `L^2` distance to `v` over interior nodes.
    pub fn l2_distance<F: Fn(f64, f64) -> f64>(&self, v: F) -> f64 {
        let mut s = 0.0;
        for i in 1..=self.n {
            for j in 1..=self.n {
                let d = self.at(i, j) - v(i as f64 * self.h, j as f64 * self.h);
                s += d * d;
            }
        }
        (s * self.h * self.h).sqrt()
    }

    pub fn max_distance<F: Fn(f64, f64) -> f64>(&self, v: F) -> f64 {
        let mut m: f64 = 0.0;
        for i in 0..self.n + 2 {
            for j in 0..self.n + 2 {
                m = m.max((self.at(i, j) - v(i as f64 * self.h, j as f64 * self.h)).abs());
            }
        }
        m
    }
}

/// DST-I on rows of length `m` through an FFT of length `2(m + 1)`.
struct Dst {
    m: usize,
    fft: Arc<dyn Fft<f64>>,
}

impl Dst {
    fn new(m: usize) -> Self {
        let fft = FftPlanner::new().plan_fft_forward(2 * (m + 1));
        Dst { m, fft }
    }

    /// `y_k = sum_j x_j sin(pi j k / (m + 1))`, `j, k = 1..m`.
    fn apply(&self, x: &mut [f64]) {
        let m = self.m;
        let mut buf = vec![Complex64::new(0.0, 0.0); 2 * (m + 1)];
        for j in 0..m {
            buf[j + 1] = Complex64::new(x[j], 0.0);
            buf[2 * (m + 1) - 1 - j] = Complex64::new(-x[j], 0.0);
        }
        self.fft.process(&mut buf);
        for k in 0..m {
            x[k] = -0.5 * buf[k + 1].im;
        }
    }
}

/// Matrix-free FD operator `-div(A grad)` with Dirichlet data folded into the right side.
struct Fd2 {
    n: usize,
    h: f64,
    /// `a11` at `(i + 1/2, j)` for `i = 0..=n`, `j = 1..=n`.
    a11: Vec<f64>,
    /// `a22` at `(i, j + 1/2)`.
    a22: Vec<f64>,
    /// `a12`, `a21` at all nodes `(n + 2)^2`.
    a12: Vec<f64>,
    a21: Vec<f64>,
    cross: bool,
}

impl Fd2 {
    fn new(a: &Coef2d, n: usize) -> Self {
        let h = 1.0 / (n + 1) as f64;
        let np = n + 2;
        let a11: Vec<f64> = (0..(n + 1) * np)
            .into_par_iter()
            .map(|k| a((k / np) as f64 * h + 0.5 * h, (k % np) as f64 * h)[0])
            .collect();
        let a22: Vec<f64> = (0..np * (n + 1))
            .into_par_iter()
            .map(|k| a((k / (n + 1)) as f64 * h, (k % (n + 1)) as f64 * h + 0.5 * h)[3])
            .collect();
        let off: Vec<(f64, f64)> = (0..np * np)
            .into_par_iter()
            .map(|k| {
                let v = a((k / np) as f64 * h, (k % np) as f64 * h);
                (v[1], v[2])
            })
            .collect();
        let cross = off.iter().any(|(p, q)| *p != 0.0 || *q != 0.0);
        Fd2 {
            n,
            h,
            a11,
            a22,
            a12: off.iter().map(|p| p.0).collect(),
            a21: off.iter().map(|p| p.1).collect(),
            cross,
        }
    }

    /// Apply to a full nodal array (boundary included); returns interior values `n^2`.
    fn apply_full(&self, u: &[f64]) -> Vec<f64> {
        let n = self.n;
        let np = n + 2;
        let ih2 = 1.0 / (self.h * self.h);
        let id = |i: usize, j: usize| i * np + j;
        (0..n * n)
            .into_par_iter()
            .map(|k| {
                let (i, j) = (k / n + 1, k % n + 1);
                let c = u[id(i, j)];
                let ae = self.a11[i * np + j];
                let aw = self.a11[(i - 1) * np + j];
                let an = self.a22[i * (n + 1) + j];
                let as_ = self.a22[i * (n + 1) + j - 1];
                let mut r = -(ae * (u[id(i + 1, j)] - c) - aw * (c - u[id(i - 1, j)])) * ih2
                    - (an * (u[id(i, j + 1)] - c) - as_ * (c - u[id(i, j - 1)])) * ih2;
                if self.cross {
                    let q = 0.25 * ih2;
                    r -= q
                        * (self.a12[id(i + 1, j)] * (u[id(i + 1, j + 1)] - u[id(i + 1, j - 1)])
                            - self.a12[id(i - 1, j)] * (u[id(i - 1, j + 1)] - u[id(i - 1, j - 1)]));
                    r -= q
                        * (self.a21[id(i, j + 1)] * (u[id(i + 1, j + 1)] - u[id(i - 1, j + 1)])
                            - self.a21[id(i, j - 1)] * (u[id(i + 1, j - 1)] - u[id(i - 1, j - 1)]));
                }
                r
            })
            .collect()
    }

    fn embed(&self, x: &[f64], full: &mut [f64]) {
        let n = self.n;
        for i in 0..n {
            full[(i + 1) * (n + 2) + 1..(i + 1) * (n + 2) + 1 + n].copy_from_slice(&x[i * n..(i + 1) * n]);
        }
    }
}

/// Poisson preconditioner `-(c1 d_xx + c2 d_yy)` inverted by a 2-D DST-I.
struct PoissonPrec {
    n: usize,
    dst: Dst,
    inv: Vec<f64>,
}

impl PoissonPrec {
    fn new(n: usize, h: f64, c1: f64, c2: f64) -> Self {
        let lam: Vec<f64> = (1..=n)
            .map(|k| (2.0 - 2.0 * (PI * k as f64 / (n + 1) as f64).cos()) / (h * h))
            .collect();
        let mut inv = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                inv[i * n + j] = 1.0 / (c1 * lam[i] + c2 * lam[j]);
            }
        }
        PoissonPrec {
            n,
            dst: Dst::new(n),
            inv,
        }
    }

    fn transform(&self, x: &mut [f64]) {
        let n = self.n;
        x.par_chunks_mut(n).for_each(|row| self.dst.apply(row));
        let mut t = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                t[j * n + i] = x[i * n + j];
            }
        }
        t.par_chunks_mut(n).for_each(|row| self.dst.apply(row));
        for i in 0..n {
            for j in 0..n {
                x[i * n + j] = t[j * n + i];
            }
        }
    }

    fn apply(&self, r: &[f64]) -> Vec<f64> {
        let mut z = r.to_vec();
        self.transform(&mut z);
        for (v, s) in z.iter_mut().zip(&self.inv) {
            *v *= s;
        }
        self.transform(&mut z);
        let c = 2.0 / (self.n + 1) as f64;
        z.iter_mut().for_each(|v| *v *= c * c);
        z
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let parts: Vec<f64> = a
        .par_chunks(4096)
        .zip(b.par_chunks(4096))
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>())
        .collect();
    parts.iter().sum()
}

/// Second-order FD solve of `-div(A grad u) = f` on the unit square with `u = g` on
/// the boundary; `n` interior points per axis. `eps_min` enforces `h <= eps_min / 8`.
pub fn solve_fine_2d(
    a: &Coef2d,
    f: &(dyn Fn(f64, f64) -> f64 + Sync),
    g: &(dyn Fn(f64, f64) -> f64 + Sync),
    n: usize,
    eps_min: f64,
    tol: f64,
    max_iter: usize,
) -> Result<Fine2d> {
    let h = 1.0 / (n + 1) as f64;
    if h > eps_min / 8.0 * (1.0 + 1e-12) {
        return Err(Error::Resolution(format!(
            "mesh width {h:.3e} exceeds eps_min / 8 = {:.3e}",
            eps_min / 8.0
        )));
    }
    if (n + 2) * (n + 2) > 1 << 24 {
        return Err(Error::Resource(format!("{n}^2 unknowns exceed the FD budget")));
    }
    let op = Fd2::new(a, n);
    let np = n + 2;
    let mut bnd = vec![0.0; np * np];
    for i in 0..np {
        for j in 0..np {
            if i == 0 || j == 0 || i == np - 1 || j == np - 1 {
                bnd[i * np + j] = g(i as f64 * h, j as f64 * h);
            }
        }
    }
    let lb = op.apply_full(&bnd);
    let b: Vec<f64> = (0..n * n)
        .map(|k| f((k / n + 1) as f64 * h, (k % n + 1) as f64 * h) - lb[k])
        .collect();
    let c1 = op.a11.iter().sum::<f64>() / op.a11.len() as f64;
    let c2 = op.a22.iter().sum::<f64>() / op.a22.len() as f64;
    let prec = PoissonPrec::new(n, h, c1, c2);
    let mut full = vec![0.0; np * np];
    let apply = |x: &[f64], full: &mut Vec<f64>| {
        op.embed(x, full);
        op.apply_full(full)
    };
    let bnorm = dot(&b, &b).sqrt().max(1e-300);
    let mut x = vec![0.0; n * n];
    let mut r = b.clone();
    let mut z = prec.apply(&r);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut it = 0;
    let mut rel = 1.0;
    while it < max_iter {
        rel = dot(&r, &r).sqrt() / bnorm;
        if rel <= tol {
            break;
        }
        let ap = apply(&p, &mut full);
        let alpha = rz / dot(&p, &ap);
        x.par_iter_mut().zip(&p).for_each(|(xi, pi)| *xi += alpha * pi);
        r.par_iter_mut().zip(&ap).for_each(|(ri, ai)| *ri -= alpha * ai);
        z = prec.apply(&r);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        p.par_iter_mut().zip(&z).for_each(|(pi, zi)| *pi = zi + beta * *pi);
        it += 1;
    }
    if rel > tol {
        return Err(Error::Solver {
            node: 0,
            residual: rel,
            iterations: it,
        });
    }
    let mut u = bnd;
    op.embed(&x, &mut u);
    Ok(Fine2d {
        n,
        h,
        u,
        iterations: it,
        relative_residual: rel,
    })
}

/// Constant-coefficient 2-D solve on the same mesh.
pub fn solve_effective_2d(
    abar: &Matrix,
    f: &(dyn Fn(f64, f64) -> f64 + Sync),
    g: &(dyn Fn(f64, f64) -> f64 + Sync),
    n: usize,
    tol: f64,
) -> Result<Fine2d> {
    let m = [abar[0][0], abar[0][1], abar[1][0], abar[1][1]];
    solve_fine_2d(&move |_, _| m, f, g, n, f64::INFINITY, tol, 100_000)
}

/// Norms of `w = u_eps - u_0 - eps_1 eta X(x / eps) . grad u_0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpansionError {
    pub l2_error: f64,
    pub w_l2: f64,
    pub w_eps_h1: f64,
    pub cutoff_width: f64,
}

/// C^2 cutoff: 0 for `dist <= 3 eps_1`, 1 for `dist >= 4 eps_1`; returns `(eta, d eta / d dist)`.
pub fn cutoff(dist: f64, eps1: f64) -> (f64, f64) {
    let t = (dist - 3.0 * eps1) / eps1;
    if t <= 0.0 {
        (0.0, 0.0)
    } else if t >= 1.0 {
        (1.0, 0.0)
    } else {
        let s = t * t * t * (10.0 - 15.0 * t + 6.0 * t * t);
        let ds = 30.0 * t * t * (1.0 - t) * (1.0 - t) / eps1;
        (s, ds)
    }
}

/// Effective solution with its first two derivatives.
pub struct Effective1d<'a> {
    pub u: &'a (dyn Fn(f64) -> f64 + Sync),
    pub du: &'a (dyn Fn(f64) -> f64 + Sync),
    pub d2u: &'a (dyn Fn(f64) -> f64 + Sync),
}

/// 1-D expansion error; `x_trace(x)` returns `(X, dhat X)` along the diagonal.
pub fn expansion_error_1d(
    u_eps: &Fine1d,
    u0: &Effective1d,
    x_trace: &(dyn Fn(f64) -> (f64, f64) + Sync),
    eps1: f64,
) -> ExpansionError {
    let nodes = u_eps.nodes();
    let vals = u_eps.values_at_nodes();
    let (mut l2, mut wl2, mut wh1) = (0.0, 0.0, 0.0);
    for ((x, w), ue) in nodes.iter().zip(&vals) {
        let x = *x;
        let dist = x.min(1.0 - x);
        let (eta, deta_dd) = cutoff(dist, eps1);
        let deta = if x < 0.5 { deta_dd } else { -deta_dd };
        let (xv, xg) = x_trace(x);
        let (u, du, d2u) = ((u0.u)(x), (u0.du)(x), (u0.d2u)(x));
        let e = ue - u;
        let wv = e - eps1 * eta * xv * du;
        let dw = u_eps.derivative(x) - du - eps1 * deta * xv * du - eta * xg * du - eps1 * eta * xv * d2u;
        l2 += w * e * e;
        wl2 += w * wv * wv;
        wh1 += w * (wv * wv + dw * dw);
    }
    ExpansionError {
        l2_error: l2.sqrt(),
        w_l2: wl2.sqrt(),
        w_eps_h1: wh1.sqrt(),
        cutoff_width: eps1,
    }
}

/// 2-D expansion error on the FD mesh; `x_trace(x, y)` returns `X = (X^1, X^2)`.
pub fn expansion_error_2d(
    u_eps: &Fine2d,
    u0: &Fine2d,
    grad_u0: &(dyn Fn(f64, f64) -> [f64; 2] + Sync),
    x_trace: &(dyn Fn(f64, f64) -> [f64; 2] + Sync),
    eps1: f64,
) -> Result<ExpansionError> {
    if u_eps.n != u0.n {
        return Err(Error::Validation("expansion error: mesh mismatch".into()));
    }
    let np = u_eps.n + 2;
    let h = u_eps.h;
    let w: Vec<f64> = (0..np * np)
        .into_par_iter()
        .map(|k| {
            let (i, j) = (k / np, k % np);
            let (x, y) = (i as f64 * h, j as f64 * h);
            let dist = x.min(1.0 - x).min(y).min(1.0 - y);
            let (eta, _) = cutoff(dist, eps1);
            let corr = if eta > 0.0 {
                let xv = x_trace(x, y);
                let g = grad_u0(x, y);
                eps1 * eta * (xv[0] * g[0] + xv[1] * g[1])
            } else {
                0.0
            };
            u_eps.u[k] - u0.u[k] - corr
        })
        .collect();
    let (mut l2, mut wl2, mut grad) = (0.0, 0.0, 0.0);
    for i in 0..np {
        for j in 0..np {
            let k = i * np + j;
            let e = u_eps.u[k] - u0.u[k];
            l2 += e * e;
            wl2 += w[k] * w[k];
            if i + 1 < np {
                grad += ((w[k + np] - w[k]) / h).powi(2);
            }
            if j + 1 < np {
                grad += ((w[k + 1] - w[k]) / h).powi(2);
            }
        }
    }
    let a = h * h;
    Ok(ExpansionError {
        l2_error: (l2 * a).sqrt(),
        w_l2: (wl2 * a).sqrt(),
        w_eps_h1: ((wl2 + grad) * a).sqrt(),
        cutoff_width: eps1,
    })
}

/// Least-squares line fit report.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    /// `exp(intercept)`.
    pub prefactor: f64,
    /// `-slope` (exponential fits).
    pub decay: f64,
    pub r2: f64,
    /// Root-mean-square deviation of the fit.
    pub residual: f64,
}

/// Least-squares fit of `y = intercept + slope x`.
pub fn line_fit(x: &[f64], y: &[f64]) -> Result<RateFit> {
    if x.len() != y.len() || x.len() < 3 {
        return Err(Error::Validation("rate fit needs at least 3 points".into()));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Validation("rate fit: non-finite data".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    if sxx <= 1e-300 {
        return Err(Error::Validation("rate fit: degenerate design".into()));
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    let ss_tot: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    Ok(RateFit {
        slope,
        intercept,
        prefactor: intercept.exp(),
        decay: -slope,
        r2: if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 },
        residual: (ss_res / n).sqrt(),
    })
}

/// Fit `log err = log C + slope log eps`.
pub fn power_fit(eps: &[f64], err: &[f64]) -> Result<RateFit> {
    if eps.iter().chain(err).any(|v| *v <= 0.0) {
        return Err(Error::Validation("power fit needs positive data".into()));
    }
    let lx: Vec<f64> = eps.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = err.iter().map(|v| v.ln()).collect();
    line_fit(&lx, &ly)
}

/// Fit `log err = log C - decay r`.
pub fn exp_fit(r: &[f64], err: &[f64]) -> Result<RateFit> {
    if err.iter().any(|v| *v <= 0.0) {
        return Err(Error::Validation("exponential fit needs positive errors".into()));
    }
    let ly: Vec<f64> = err.iter().map(|v| v.ln()).collect();
    line_fit(r, &ly)
}
