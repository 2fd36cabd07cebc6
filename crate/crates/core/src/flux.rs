//! Flux correctors: `-Delta_hat U + tau^2 U = G` with `G = A_bar - A - A grad_hat X`,
//! solved by the two-scale recursion in the innermost block, and the antisymmetric
//! potential `Phi_{l i j} = dhat_l U_ij - dhat_i U_lj`.
//!
//! Every solve in the recursion has a constant-coefficient operator, so it is an
//! exact division of Fourier coefficients.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::corrector::{CorrectorSet, TruncationPlan};
use crate::effective::Matrix;
use crate::error::{Error, Result};
use crate::spectral;
use crate::torus_field::{GridSpec, ScaleVector, TorusField};

/// Apply a symbol of the frequencies of `block` to every component.
fn block_symbol<F>(u: &TorusField, block: usize, symbol: F) -> TorusField
where
    F: Fn(&[i64]) -> Complex64 + Sync,
{
    let g = u.grid();
    let dims = g.dims();
    let axes = g.block_axes(block);
    let comps = (0..u.ncomp())
        .map(|c| spectral::apply_symbol(u.comp(c), &dims, &axes, &symbol))
        .collect();
    TorusField::from_components(g, u.shape(), comps)
}

fn k2(k: &[i64]) -> f64 {
    k.iter().map(|&v| (v * v) as f64).sum()
}

/// `(-w^2 Delta_b + tau^2)^{-1}` in block `b`; the null mode is set to zero.
fn inverse_laplacian(u: &TorusField, block: usize, w: f64, tau: f64) -> TorusField {
    let c = 4.0 * PI * PI * w * w;
    let t2 = tau * tau;
    block_symbol(u, block, move |k| {
        let s = c * k2(k) + t2;
        Complex64::new(if s == 0.0 { 0.0 } else { 1.0 / s }, 0.0)
    })
}

fn laplacian_hat(u: &TorusField, w: &[f64]) -> TorusField {
    u.weighted_grad(w).weighted_div(w)
}

fn last_weights(n: usize) -> Vec<f64> {
    let mut w = vec![0.0; n];
    w[n - 1] = 1.0;
    w
}

/// Pieces of one level of the recursion.
#[derive(Debug, Clone)]
pub struct FluxPieces {
    pub delta: f64,
    pub k: usize,
    /// `U_0` on the grid without the innermost block.
    pub u0: TorusField,
    /// `U_k` for `k = 2..=K` (entry `k - 2`); `U_1 = 0`.
    pub uk: Vec<TorusField>,
}

struct Level {
    v: TorusField,
    remainder: TorusField,
    pieces: Option<FluxPieces>,
}

struct Ctx<'a> {
    weights: &'a [f64],
    n_param: usize,
    k: &'a [usize],
    tau: f64,
}

impl Ctx<'_> {
    fn solve(&self, g: &TorusField, keep: bool) -> Level {
        let grid = g.grid().clone();
        let nb = grid.n();
        let w = &self.weights[..nb];
        let tau2 = self.tau * self.tau;
        if nb - self.n_param == 1 {
            let v = inverse_laplacian(g, nb - 1, w[nb - 1], self.tau);
            let mut remainder = laplacian_hat(&v, w).scale(-1.0);
            remainder.axpy(tau2, &v);
            remainder.axpy(-1.0, g);
            return Level {
                v,
                remainder,
                pieces: None,
            };
        }
        let m = nb - self.n_param;
        let kk = self.k[m - 2].max(2);
        let delta = 1.0 / w[nb - 1];
        let wl = last_weights(nb);
        let mut wo = w.to_vec();
        wo[nb - 1] = 0.0;
        let ext = |z: &TorusField| z.extend_block(&grid, nb - 1);
        let inner = |z: &TorusField| inverse_laplacian(z, nb - 1, 1.0, 0.0);
        let op_o = |z: &TorusField| {
            let mut r = laplacian_hat(z, &wo).scale(-1.0);
            r.axpy(tau2, z);
            r
        };
        let mixed = |z: &TorusField| z.weighted_grad(&wl).weighted_div(&wo).scale(2.0);

        let mean = g.partial_average(nb - 1);
        let red = self.solve(&mean, false);
        let mut uk: Vec<TorusField> = vec![inner(&g.sub(&ext(&mean)))];
        // U_{k+2} from U_{k+1}, U_k with U_1 = 0
        for k in 1..kk.saturating_sub(1) {
            let mut rhs = mixed(&uk[k - 1]);
            if k >= 2 {
                rhs.axpy(-1.0, &op_o(&uk[k - 2]));
            }
            uk.push(inner(&rhs));
        }
        let u0 = ext(&red.v);
        let mut v = u0.clone();
        for (j, u) in uk.iter().enumerate() {
            v.axpy(delta.powi(j as i32 + 2), u);
        }
        let u_k = &uk[kk - 2];
        let u_km1 = if kk >= 3 { Some(&uk[kk - 3]) } else { None };
        let mut tail = mixed(u_k).scale(-1.0);
        if let Some(u) = u_km1 {
            tail.axpy(1.0, &op_o(u));
        }
        let mut remainder = ext(&red.remainder);
        remainder.axpy(delta.powi(kk as i32 - 1), &tail);
        remainder.axpy(delta.powi(kk as i32), &op_o(u_k));
        let pieces = keep.then_some(FluxPieces {
            delta,
            k: kk,
            u0: red.v,
            uk,
        });
        Level {
            v,
            remainder,
            pieces,
        }
    }
}

/// Flux correctors for all matrix entries.
#[derive(Debug, Clone)]
pub struct FluxSet {
    /// `G = A_bar - A - A grad_hat X` (shape `[d, d]`).
    pub g: TorusField,
    /// Truncated `V_K` (shape `[d, d]`).
    pub u: TorusField,
    /// `Phi[l, i, j]` (shape `[d, d, d]`).
    pub phi: TorusField,
    /// `(-Delta_hat + tau^2) V_K - G`, assembled from the recursion.
    pub remainder: TorusField,
    pub pieces: Option<FluxPieces>,
    pub weights: Vec<f64>,
    pub n_param: usize,
    pub tau: f64,
    /// Largest `|<G>|` entry.
    pub mean_g: f64,
}

/// `Phi_{l i j} = dhat_l U_ij - dhat_i U_lj`, antisymmetric in `(l, i)` by construction.
pub fn flux_potential(u: &TorusField, weights: &[f64]) -> TorusField {
    let d = u.grid().d;
    let gu = u.weighted_grad(weights);
    let np = u.npoints();
    let mut phi = TorusField::zeros(u.grid(), &[d, d, d]);
    let idx = |l: usize, i: usize, j: usize| (l * d + i) * d + j;
    for l in 0..d {
        for i in (l + 1)..d {
            for j in 0..d {
                let a = gu.comp(idx(l, i, j)).to_vec();
                let b = gu.comp(idx(i, l, j));
                let v: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
                let neg: Vec<f64> = v.iter().map(|x| -x).collect();
                phi.comp_mut(idx(l, i, j)).copy_from_slice(&v);
                phi.comp_mut(idx(i, l, j)).copy_from_slice(&neg);
            }
        }
    }
    debug_assert_eq!(phi.npoints(), np);
    phi
}

fn constant_matrix(grid: &GridSpec, m: &Matrix) -> TorusField {
    let v: Vec<f64> = m.iter().flatten().copied().collect();
    let d = m.len();
    TorusField::constant(grid, &[d, d], &v)
}

/// `G = A_bar - A - A grad_hat X`.
pub fn flux_source(a: &TorusField, x: &TorusField, abar: &Matrix, weights: &[f64]) -> TorusField {
    let flux = a.add(&a.contract(&x.weighted_grad(weights)));
    constant_matrix(a.grid(), abar).sub(&flux)
}

/// Build the flux corrector from a corrector set and its effective matrix.
pub fn build_flux(a: &TorusField, set: &CorrectorSet, abar: &Matrix, scales: &ScaleVector, plan: &TruncationPlan) -> Result<FluxSet> {
    if set.n_param != 0 {
        return Err(Error::Validation("build_flux expects a non-parametric corrector".into()));
    }
    for gap in &plan.gaps {
        if !gap.weakly_separated {
            return Err(Error::Validation(format!(
                "weak separation fails at gap {}: eps_j / eps_(j-1) = {:.3e} > {}",
                gap.j,
                1.0 / gap.ratio,
                plan.constants.ctilde_inv
            )));
        }
    }
    let weights = scales.weights();
    let g = flux_source(a, &set.x, abar, &weights);
    let mean_g = g.full_average().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if mean_g > 1e-8 {
        return Err(Error::Validation(format!(
            "flux source has nonzero mean {mean_g:.3e}; the effective matrix is inconsistent with X"
        )));
    }
    Ok(build_flux_from_source(g, &weights, 0, &plan.k, plan.tau))
}

/// Flux recursion for an arbitrary source on a grid with `n_param` parameter blocks.
pub fn build_flux_from_source(g: TorusField, weights: &[f64], n_param: usize, k: &[usize], tau: f64) -> FluxSet {
    let ctx = Ctx {
        weights,
        n_param,
        k,
        tau,
    };
    let level = ctx.solve(&g, true);
    let phi = flux_potential(&level.v, weights);
    let mean_g = g.full_average().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    FluxSet {
        g,
        u: level.v,
        phi,
        remainder: level.remainder,
        pieces: level.pieces,
        weights: weights.to_vec(),
        n_param,
        tau,
        mean_g,
    }
}

/// Sup norms of the divergence identity
/// `A + A grad_hat X - A_bar - div_hat Phi = grad_hat(div_hat V) - tau^2 V + remainder`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FluxResidual {
    /// Left side, evaluated directly.
    pub direct: f64,
    /// Right side, assembled from its three contributors.
    pub formula: f64,
    pub grad_div: f64,
    pub tau2_u: f64,
    pub remainder: f64,
    /// `sup |direct - formula|`.
    pub mismatch: f64,
}

/// `(div_hat Phi)_ij = sum_l dhat_l Phi_lij`.
pub fn div_phi(phi: &TorusField, weights: &[f64]) -> TorusField {
    phi.weighted_div(weights)
}

/// Evaluate the flux identity on the lifted torus by both paths.
pub fn flux_identity_residual(a: &TorusField, x: &TorusField, abar: &Matrix, flux: &FluxSet) -> FluxResidual {
    let w = &flux.weights;
    let d = a.grid().d;
    let lhs = flux_source(a, x, abar, w).scale(-1.0).sub(&div_phi(&flux.phi, w));
    let div_u = flux.u.weighted_div(w);
    // [grad(div V)]_ij = dhat_i (div V)_j
    let gd = div_u.weighted_grad(w).reshape(&[d, d]);
    let tu = flux.u.scale(flux.tau * flux.tau);
    let rhs = gd.sub(&tu).add(&flux.remainder);
    FluxResidual {
        direct: lhs.sup_norm(),
        formula: rhs.sup_norm(),
        grad_div: gd.sup_norm(),
        tau2_u: tu.sup_norm(),
        remainder: flux.remainder.sup_norm(),
        mismatch: lhs.sub(&rhs).sup_norm(),
    }
}

/// `|Delta_hat V| + tau |grad_hat V| + tau^2 |V|` in `L^2`, divided by `|G|_{L^2}`.
pub fn flux_energy_ratio(flux: &FluxSet) -> f64 {
    let w = &flux.weights;
    let gu = flux.u.weighted_grad(w);
    let h2 = gu.weighted_grad(w);
    let num = h2.l2_norm() + flux.tau * gu.l2_norm() + flux.tau * flux.tau * flux.u.l2_norm();
    let den = flux.g.l2_norm();
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cell_solver::SolveOptions;
    use crate::config::Calibration;
    use crate::corrector::{build_corrector, choose_parameters};
    use crate::effective::{effective_matrix, supercell};
    use crate::torus_field::{build_field, diagonal_trace, AnalyticCoefficient};

    fn coef() -> AnalyticCoefficient {
        AnalyticCoefficient::scalar(1, 2, 3.0)
            .add_sin_scalar(vec![vec![1], vec![0]], 1.0)
            .add_sin_scalar(vec![vec![0], vec![1]], 1.0)
    }

    fn cfg() -> Calibration {
        Calibration::default().with_c_sep(0.25)
    }

    #[test]
    fn constant_matrix_has_zero_flux() {
        let g = GridSpec::uniform(2, 2, 8).unwrap();
        let m = vec![vec![2.0, 0.3], vec![0.3, 1.0]];
        let a = build_field(&AnalyticCoefficient::constant(2, 2, m.clone()), &g).unwrap();
        let s = ScaleVector::new(vec![1.0, 0.125]).unwrap();
        let plan = choose_parameters(&s, &cfg());
        let set = build_corrector(&a, &s, &plan).unwrap();
        let f = build_flux(&a, &set, &m, &s, &plan).unwrap();
        assert!(f.u.sup_norm() < 1e-12 && f.phi.sup_norm() < 1e-12);
        let r = flux_identity_residual(&a, &set.x, &m, &f);
        assert!(r.direct < 1e-12);
    }

    #[test]
    fn potential_is_bitwise_antisymmetric() {
        let g = GridSpec::uniform(2, 2, 8).unwrap();
        let u = TorusField::from_fn(&g, &[2, 2], |y, o| {
            for (c, v) in o.iter_mut().enumerate() {
                *v = (2.0 * PI * (y[0] + (c as f64 + 1.0) * y[3])).sin() + c as f64 * (2.0 * PI * y[1]).cos();
            }
        });
        let phi = flux_potential(&u, &[1.0, 8.0]);
        for l in 0..2 {
            for i in 0..2 {
                for j in 0..2 {
                    let a = phi.comp((l * 2 + i) * 2 + j);
                    let b = phi.comp((i * 2 + l) * 2 + j);
                    if l == i {
                        assert!(a.iter().all(|x| *x == 0.0));
                    } else {
                        assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == (-y).to_bits()));
                    }
                }
            }
        }
    }

    #[test]
    fn single_block_solve_is_exact_division() {
        let g = GridSpec::uniform(1, 1, 16).unwrap();
        let src = TorusField::from_fn(&g, &[1, 1], |y, o| o[0] = (2.0 * PI * 3.0 * y[0]).cos());
        let f = build_flux_from_source(src, &[2.0], 0, &[], 0.5);
        let expect = 1.0 / (4.0 * PI * PI * 36.0 + 0.25);
        for i in 0..16 {
            let y = i as f64 / 16.0;
            assert!((f.u.data()[i] - expect * (2.0 * PI * 3.0 * y).cos()).abs() < 1e-15);
        }
        assert!(f.remainder.sup_norm() < 1e-14);
    }

    #[test]
    fn identity_paths_agree_and_wrong_mean_survives() {
        let g = GridSpec::uniform(1, 2, 32).unwrap();
        let a = build_field(&coef(), &g).unwrap();
        let s = ScaleVector::new(vec![1.0, 0.125]).unwrap();
        let plan = choose_parameters(&s, &cfg()).with_tau(1e-2);
        let set = build_corrector(&a, &s, &plan).unwrap();
        let abar = effective_matrix(&a, &set.x, &s, None).unwrap();
        let f = build_flux(&a, &set, &abar, &s, &plan).unwrap();
        let r = flux_identity_residual(&a, &set.x, &abar, &f);
        assert!(r.mismatch < 1e-3 * r.direct, "{r:?}");
        let wrong = vec![vec![abar[0][0] + 0.1]];
        let r = flux_identity_residual(&a, &set.x, &wrong, &f);
        assert!(r.direct >= 0.1 * (1.0 - 1e-9), "{r:?}");
        assert!(matches!(build_flux(&a, &set, &wrong, &s, &plan), Err(Error::Validation(_))));
    }

    #[test]
    fn mean_zero_pieces() {
        let g = GridSpec::uniform(1, 2, 16).unwrap();
        let a = build_field(&coef(), &g).unwrap();
        let s = ScaleVector::new(vec![1.0, 0.125]).unwrap();
        let plan = choose_parameters(&s, &cfg());
        let set = build_corrector(&a, &s, &plan).unwrap();
        let abar = effective_matrix(&a, &set.x, &s, None).unwrap();
        let f = build_flux(&a, &set, &abar, &s, &plan).unwrap();
        assert!(f.u.full_average()[0].abs() < 1e-12);
        let p = f.pieces.as_ref().unwrap();
        for u in &p.uk {
            assert!(u.partial_average(1).sup_norm() < 1e-13);
        }
    }

    #[test]
    fn trace_matches_supercell_flux_potential() {
        let g = GridSpec::uniform(1, 2, 32).unwrap();
        let a = build_field(&coef(), &g).unwrap();
        let s = ScaleVector::new(vec![1.0, 1.0 / 16.0]).unwrap();
        let plan = choose_parameters(&s, &cfg());
        let set = build_corrector(&a, &s, &plan).unwrap();
        let abar = effective_matrix(&a, &set.x, &s, None).unwrap();
        let f = build_flux(&a, &set, &abar, &s, &plan).unwrap();
        let opts = SolveOptions::default();
        let sc = supercell(&a, &[1, 16], 32, plan.tau, &opts).unwrap();
        // supercell source abar - b - b z' solved by Fourier division on the period-16 torus
        let zg = sc.z.weighted_grad(&[1.0]).reshape(&[1, 1]);
        let src = constant_matrix(sc.b.grid(), &abar).sub(&sc.b.add(&sc.b.contract(&zg)));
        let u_sc = inverse_laplacian(&src, 0, 1.0, plan.tau);
        let n = sc.b.npoints();
        let pts: Vec<Vec<f64>> = (0..n).step_by(7).map(|i| vec![i as f64 / n as f64]).collect();
        let tr = diagonal_trace(&f.u, &s, &pts).unwrap();
        for (k, i) in (0..n).step_by(7).enumerate() {
            assert!((tr[k][0] - u_sc.data()[i]).abs() < 1e-3, "{} vs {}", tr[k][0], u_sc.data()[i]);
        }
    }
}

