//! Multiscale correctors by the recursive two-scale expansion on the lifted torus.
//!
//! For the innermost active block `y_n` with `delta = delta_n` the lifted operator
//! splits as `L = delta^-2 L_yy + delta^-1 (L_xy + L_yx) + L_xx` where `L_yy` only
//! differentiates in `y_n` and `L_xx` only in the remaining active blocks. The
//! expansion `Y = sum_k delta^k Y_k` is solved order by order: inner cell problems
//! in `y_n` and reduced problems with the homogenized matrix `A_hat` on one
//! block fewer, recursively down to a single nondegenerate cell problem.

use serde::{Deserialize, Serialize};

use crate::cell_solver::{solve_scalar_rhs, SolveOptions};
use crate::config::Calibration;
use crate::error::{Error, Result};
use crate::torus_field::{ellipticity_bounds, ScaleVector, TorusField};

/// Separation check of one gap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapCheck {
    /// 1-based index of the smaller scale of the gap.
    pub j: usize,
    /// `eps_{j-1} / eps_j`.
    pub ratio: f64,
    /// Left side `eps_j` of the check.
    pub lhs: f64,
    /// Right side `c_j eps_{j-1} / (1 + ln(eps_1 / eps_{j-1}))`.
    pub rhs: f64,
    pub separated: bool,
    /// `eps_j <= ctilde_inv eps_{j-1}`.
    pub weakly_separated: bool,
    pub k: usize,
}

/// Truncation orders, regularization and the separation record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruncationPlan {
    /// `k_j` for gaps `j = 2..=n` (index `j - 2`).
    pub k: Vec<usize>,
    pub tau: f64,
    pub ell0: usize,
    pub gaps: Vec<GapCheck>,
    pub constants: Calibration,
}

impl TruncationPlan {
    pub fn all_separated(&self) -> bool {
        self.gaps.iter().all(|g| g.separated)
    }

    pub fn all_weakly_separated(&self) -> bool {
        self.gaps.iter().all(|g| g.weakly_separated)
    }

    /// Same plan with a different regularization.
    pub fn with_tau(&self, tau: f64) -> TruncationPlan {
        let mut p = self.clone();
        p.tau = tau;
        p
    }

    /// Same plan with every truncation order set to `k`.
    pub fn with_k(&self, k: usize) -> TruncationPlan {
        let mut p = self.clone();
        for v in p.k.iter_mut() {
            *v = k.max(1);
        }
        for g in p.gaps.iter_mut() {
            g.k = k.max(1);
        }
        p
    }
}

/// Evaluate the separation conditions and choose `(k_j, tau)`.
pub fn choose_parameters(scales: &ScaleVector, cfg: &Calibration) -> TruncationPlan {
    let e = &scales.epsilons;
    let mut gaps = Vec::new();
    let mut tau2: f64 = 0.0;
    for j in 2..=e.len() {
        let ratio = e[j - 2] / e[j - 1];
        let rhs = cfg.c_j(j) * e[j - 2] / (1.0 + (e[0] / e[j - 2]).ln());
        let k = match cfg.k {
            Some(k) => k.max(1),
            None => ((cfg.gamma * ratio).floor() as usize).clamp(1, cfg.k_cap.max(1)),
        };
        gaps.push(GapCheck {
            j,
            ratio,
            lhs: e[j - 1],
            rhs,
            separated: e[j - 1] <= rhs,
            weakly_separated: e[j - 1] <= cfg.ctilde_inv * e[j - 2],
            k,
        });
        tau2 = tau2.max((-cfg.c_tau * ratio).exp());
    }
    let tau = scales.tau.or(cfg.tau).unwrap_or(tau2.sqrt());
    TruncationPlan {
        k: gaps.iter().map(|g| g.k).collect(),
        tau,
        ell0: cfg.ell0,
        gaps,
        constants: cfg.clone(),
    }
}

/// Column `j` of a matrix field as a vector field.
pub fn column(a: &TorusField, j: usize) -> TorusField {
    let d = a.shape()[0];
    let comps = (0..d).map(|i| a.comp(i * d + j).to_vec()).collect();
    TorusField::from_components(a.grid(), &[d], comps)
}

/// `-div_{wd}(A grad_{wg} z)` for scalar `z`.
fn flux_form(a: &TorusField, z: &TorusField, wg: &[f64], wd: &[f64]) -> TorusField {
    a.contract(&z.weighted_grad(wg)).weighted_div(wd).scale(-1.0)
}

fn last_weights(n: usize) -> Vec<f64> {
    let mut w = vec![0.0; n];
    w[n - 1] = 1.0;
    w
}

/// Weights of the active blocks except the last one.
fn outer_weights(w: &[f64]) -> Vec<f64> {
    let mut o = w.to_vec();
    *o.last_mut().unwrap() = 0.0;
    o
}

/// `sum_j chi_j dhat_j y` for vector `chi` and scalar `y` on the same grid.
fn chi_dot_grad(chi: &TorusField, y: &TorusField, w: &[f64]) -> TorusField {
    let g = y.weighted_grad(w);
    let d = chi.shape()[0];
    let mut out = TorusField::zeros(y.grid(), &[]);
    for j in 0..d {
        let c = chi.component(j).mul_scalar_field(&g.component(j));
        out.axpy(1.0, &c);
    }
    out
}

/// One-scale corrector in the last block: `-div_n A grad_n chi_j = div_n(A e_j)`,
/// parametric in every other block. Returned as a vector field `(chi_1, .., chi_d)`.
pub fn one_scale_corrector(a: &TorusField, opts: &SolveOptions) -> Result<TorusField> {
    let g = a.grid();
    let d = g.d;
    let wl = last_weights(g.n());
    let mut comps = Vec::with_capacity(d);
    for j in 0..d {
        let rhs = column(a, j).weighted_div(&wl);
        let (chi, _) = solve_scalar_rhs(a, &rhs, 0.0, 1.0, opts)?;
        comps.push(chi.into_data());
    }
    Ok(TorusField::from_components(g, &[d], comps))
}

/// `A_hat = <A + A grad_n chi>_{y_n}` on the grid without the last block.
pub fn hat_matrix(a: &TorusField, chi: &TorusField, lambda: Option<f64>) -> Result<TorusField> {
    let n = a.grid().n();
    let wl = last_weights(n);
    let full = a.add(&a.contract(&chi.weighted_grad(&wl)));
    let hat = full.partial_average(n - 1);
    if let Some(l) = lambda {
        let (lo, _) = ellipticity_bounds(&hat);
        if lo < l * (1.0 - 1e-8) {
            return Err(Error::Consistency(format!(
                "homogenized matrix lost ellipticity: min xi.A xi = {lo:.6} < lambda = {l}"
            )));
        }
    }
    Ok(hat)
}

/// Hierarchy of interim matrices: `levels[m - 1]` holds `A_m` on the grid with
/// `n_param + m` blocks and, for `m >= 2`, its one-scale corrector.
pub struct Hierarchy {
    pub n_param: usize,
    /// Weights of all blocks of the top grid (0 on parameter blocks).
    pub weights: Vec<f64>,
    pub a: Vec<TorusField>,
    pub chi: Vec<Option<TorusField>>,
}

impl Hierarchy {
    pub fn new(a: &TorusField, n_param: usize, weights: &[f64], opts: &SolveOptions) -> Result<Self> {
        let nb = a.grid().n();
        if nb <= n_param {
            return Err(Error::Validation("no active scale blocks".into()));
        }
        let m_top = nb - n_param;
        let mut mats = vec![a.clone()];
        let mut chis = Vec::new();
        for _ in (2..=m_top).rev() {
            let cur = mats.last().unwrap();
            let chi = one_scale_corrector(cur, opts)?;
            let hat = hat_matrix(cur, &chi, None)?;
            chis.push(Some(chi));
            mats.push(hat);
        }
        chis.push(None);
        mats.reverse();
        chis.reverse();
        Ok(Hierarchy {
            n_param,
            weights: weights.to_vec(),
            a: mats,
            chi: chis,
        })
    }

    pub fn top(&self) -> usize {
        self.a.len()
    }

    fn weights_at(&self, m: usize) -> Vec<f64> {
        self.weights[..self.n_param + m].to_vec()
    }
}

/// Intermediate pieces of one recursive solve.
#[derive(Debug, Clone)]
pub struct Pieces {
    pub delta: f64,
    pub k: usize,
    pub f_tilde: TorusField,
    /// `F_hat` on the reduced grid.
    pub f_hat: TorusField,
    /// `Y_0` on the reduced grid.
    pub y0: TorusField,
    /// `Y_k^o` for `k = 1..=K` (entry `k - 1`).
    pub yo: Vec<TorusField>,
    /// `Y_k^r` for `k = 1..K` on the reduced grid (entry `k - 1`).
    pub yr: Vec<TorusField>,
    /// `Ytilde_k^o` for `k = 2..=K` (entry `k - 2`).
    pub ytilde: Vec<TorusField>,
    /// Mean removed from the inner right-hand side at orders `0..K-1`, on the reduced grid.
    pub defects: Vec<TorusField>,
}

/// Result of a lifted solve `-div_hat A grad_hat Y + tau^2 Y = div_hat F`.
#[derive(Debug, Clone)]
pub struct LiftedSolution {
    /// Truncated solution `N_K`.
    pub y: TorusField,
    pub pieces: Option<Pieces>,
    /// Residual assembled from the order-by-order balance (the `E_K` expression
    /// plus the solvability defects of the inner solves).
    pub residual_formula: Option<TorusField>,
}

struct Ctx<'a> {
    h: &'a Hierarchy,
    k: &'a [usize],
    tau: f64,
    opts: SolveOptions,
}

impl<'a> Ctx<'a> {
    fn solve(&self, m: usize, f: &TorusField, g: Option<&TorusField>, keep: bool) -> Result<LiftedSolution> {
        let a = &self.h.a[m - 1];
        let grid = a.grid().clone();
        let nb = grid.n();
        let w = self.h.weights_at(m);
        let tau2 = self.tau * self.tau;
        if m == 1 {
            let wl = w[nb - 1];
            let mut wv = vec![0.0; nb];
            wv[nb - 1] = wl;
            let mut rhs = f.weighted_div(&wv);
            if let Some(g) = g {
                rhs.axpy(1.0, g);
            }
            let (y, _) = solve_scalar_rhs(a, &rhs, self.tau, wl, &self.opts)?;
            return Ok(LiftedSolution {
                y,
                pieces: None,
                residual_formula: None,
            });
        }
        let chi = self.h.chi[m - 1].as_ref().unwrap();
        let delta = 1.0 / w[nb - 1];
        let kk = self.k[m - 2].max(1);
        let wl = last_weights(nb);
        let wo = outer_weights(&w);
        let ext = |z: &TorusField| z.extend_block(&grid, nb - 1);
        let mut inner_opts = self.opts;
        inner_opts.solvability_tol = f64::INFINITY;
        let inner = |rhs: &TorusField| -> Result<(TorusField, TorusField)> {
            let mean = rhs.partial_average(nb - 1);
            let (y, _) = solve_scalar_rhs(a, &rhs.sub(&ext(&mean)), 0.0, 1.0, &inner_opts)?;
            Ok((y, mean))
        };

        // F_tilde and F_hat
        let (f_tilde, _) = inner(&f.weighted_div(&wl))?;
        let f_hat = f.add(&a.contract(&f_tilde.weighted_grad(&wl))).partial_average(nb - 1);
        let g_hat = g.map(|g| g.partial_average(nb - 1));
        let y0 = self.solve(m - 1, &f_hat, g_hat.as_ref(), false)?.y;
        let mut y_full: Vec<TorusField> = vec![ext(&y0)];
        let mut yo: Vec<TorusField> = vec![f_tilde.add(&chi_dot_grad(chi, &ext(&y0), &wo))];
        let mut yr: Vec<TorusField> = Vec::new();
        let mut ytilde: Vec<TorusField> = Vec::new();
        let mut defects: Vec<TorusField> = Vec::new();
        let lmix = |z: &TorusField| flux_form(a, z, &wl, &wo).add(&flux_form(a, z, &wo, &wl));
        let lxx_tau = |z: &TorusField| {
            let mut r = flux_form(a, z, &wo, &wo);
            r.axpy(tau2, z);
            r
        };
        for k in 0..kk.saturating_sub(1) {
            // balance at order delta^k
            let mut rhs = lmix(&yo[k]).scale(-1.0);
            rhs.axpy(-1.0, &lxx_tau(&y_full[k]));
            if k == 0 {
                rhs.axpy(1.0, &f.weighted_div(&wo));
                if let Some(g) = g {
                    rhs.axpy(1.0, g);
                }
            }
            let (yt, mean) = inner(&rhs)?;
            defects.push(mean);
            let h = a
                .contract(&yt.weighted_grad(&wl))
                .add(&a.contract(&yo[k].weighted_grad(&wo)))
                .partial_average(nb - 1);
            let g_r = yo[k].partial_average(nb - 1).scale(-tau2);
            let r = self.solve(m - 1, &h, Some(&g_r), false)?.y;
            let r_ext = ext(&r);
            y_full.push(yo[k].add(&r_ext));
            yo.push(yt.add(&chi_dot_grad(chi, &r_ext, &wo)));
            ytilde.push(yt);
            yr.push(r);
        }
        // N_K = sum_{j<K} delta^j Y_j + delta^K Y_K^o
        let mut y = TorusField::zeros(&grid, &[]);
        for (j, yj) in y_full.iter().enumerate().take(kk) {
            y.axpy(delta.powi(j as i32), yj);
        }
        y.axpy(delta.powi(kk as i32), &yo[kk - 1]);

        let residual_formula = if keep {
            let yk = &yo[kk - 1];
            let mut e = lmix(yk).add(&lxx_tau(&y_full[kk - 1])).scale(delta.powi(kk as i32 - 1));
            e.axpy(delta.powi(kk as i32), &lxx_tau(yk));
            for (k, dfc) in defects.iter().enumerate() {
                e.axpy(-delta.powi(k as i32), &ext(dfc));
            }
            if kk == 1 {
                e.axpy(-1.0, &f.weighted_div(&wo));
                if let Some(g) = g {
                    e.axpy(-1.0, g);
                }
            }
            Some(e)
        } else {
            None
        };
        let pieces = if keep {
            Some(Pieces {
                delta,
                k: kk,
                f_tilde,
                f_hat,
                y0,
                yo,
                yr,
                ytilde,
                defects,
            })
        } else {
            None
        };
        Ok(LiftedSolution {
            y,
            pieces,
            residual_formula,
        })
    }
}

fn check_plan(scales: &ScaleVector, plan: &TruncationPlan) -> Result<()> {
    if plan.k.len() + 1 != scales.n() {
        return Err(Error::Validation(format!(
            "plan has {} gaps but the scale vector has n = {}",
            plan.k.len(),
            scales.n()
        )));
    }
    if !plan.all_separated() {
        let bad: Vec<String> = plan
            .gaps
            .iter()
            .filter(|g| !g.separated)
            .map(|g| format!("gap {}: eps_j = {:.3e} > {:.3e}", g.j, g.lhs, g.rhs))
            .collect();
        return Err(Error::Validation(format!(
            "scale separation violated ({}); use the grouping pipeline or calibrate c_j",
            bad.join("; ")
        )));
    }
    Ok(())
}

/// Lifted solve `-div_hat A grad_hat Y + tau^2 Y = div_hat F + G` for a vector
/// field `F` and an optional scalar `G` on the top grid of the hierarchy.
pub fn solve_lifted(
    h: &Hierarchy,
    f: &TorusField,
    g: Option<&TorusField>,
    plan: &TruncationPlan,
    opts: &SolveOptions,
) -> Result<LiftedSolution> {
    let ctx = Ctx {
        h,
        k: &plan.k,
        tau: plan.tau,
        opts: *opts,
    };
    ctx.solve(h.top(), f, g, true)
}

/// Pieces and diagnostics of one direction `e_j`.
#[derive(Debug, Clone)]
pub struct DirectionPieces {
    pub pieces: Option<Pieces>,
    /// `N_K` for this direction.
    pub n_k: TorusField,
    /// Directly evaluated residual `-div_hat A grad_hat N_K + tau^2 N_K - div_hat(A e_j)`.
    pub residual: TorusField,
    pub residual_formula: Option<TorusField>,
}

/// Multiscale corrector for all directions.
#[derive(Debug, Clone)]
pub struct CorrectorSet {
    /// `X = (X^1, .., X^d)` on the lifted grid.
    pub x: TorusField,
    /// One-scale corrector of the innermost block (absent for a single scale).
    pub chi: Option<TorusField>,
    pub a_hat: Option<TorusField>,
    pub directions: Vec<DirectionPieces>,
    pub plan: TruncationPlan,
    pub weights: Vec<f64>,
    pub n_param: usize,
    pub residual_l2: Vec<f64>,
    pub residual_sup: Vec<f64>,
    /// `sup |direct residual - formula residual|` per direction.
    pub formula_mismatch: Vec<f64>,
    pub sup_x: f64,
}

/// Direct residual of a lifted solve.
pub fn lifted_residual(a: &TorusField, y: &TorusField, f: &TorusField, weights: &[f64], tau: f64) -> TorusField {
    let mut r = flux_form(a, y, weights, weights);
    r.axpy(tau * tau, y);
    r.axpy(-1.0, &f.weighted_div(weights));
    r
}

/// Build the corrector on a grid whose leading `n_param` blocks are parameters.
pub fn build_corrector_parametric(
    a: &TorusField,
    n_param: usize,
    scales: &ScaleVector,
    plan: &TruncationPlan,
    opts: &SolveOptions,
) -> Result<CorrectorSet> {
    let g = a.grid();
    if g.n() != n_param + scales.n() {
        return Err(Error::Validation(format!(
            "grid has {} blocks, expected {} parameter + {} scale blocks",
            g.n(),
            n_param,
            scales.n()
        )));
    }
    check_plan(scales, plan)?;
    let mut weights = vec![0.0; n_param];
    weights.extend(scales.weights());
    let h = Hierarchy::new(a, n_param, &weights, opts)?;
    let d = g.d;
    let mut dirs = Vec::with_capacity(d);
    let mut comps = Vec::with_capacity(d);
    for j in 0..d {
        let f = column(a, j);
        let sol = solve_lifted(&h, &f, None, plan, opts)?;
        let residual = lifted_residual(a, &sol.y, &f, &weights, plan.tau);
        comps.push(sol.y.data().to_vec());
        dirs.push(DirectionPieces {
            pieces: sol.pieces,
            n_k: sol.y,
            residual,
            residual_formula: sol.residual_formula,
        });
    }
    let x = TorusField::from_components(g, &[d], comps);
    let residual_l2 = dirs.iter().map(|p| p.residual.l2_norm()).collect();
    let residual_sup = dirs.iter().map(|p| p.residual.sup_norm()).collect();
    let formula_mismatch = dirs
        .iter()
        .map(|p| match &p.residual_formula {
            Some(e) => p.residual.sub(e).sup_norm(),
            None => 0.0,
        })
        .collect();
    let top = h.top();
    let (chi, a_hat) = if top >= 2 {
        (h.chi[top - 1].clone(), Some(h.a[top - 2].clone()))
    } else {
        (None, None)
    };
    let sup_x = x.sup_norm();
    Ok(CorrectorSet {
        x,
        chi,
        a_hat,
        directions: dirs,
        plan: plan.clone(),
        weights,
        n_param,
        residual_l2,
        residual_sup,
        formula_mismatch,
        sup_x,
    })
}

/// Build the multiscale corrector `X` for every direction `e_j`.
pub fn build_corrector(a: &TorusField, scales: &ScaleVector, plan: &TruncationPlan) -> Result<CorrectorSet> {
    let opts = SolveOptions::from(&plan.constants);
    build_corrector_parametric(a, 0, scales, plan, &opts)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorrectorCertificate {
    pub sup_x: f64,
    /// `|grad_hat X|_{L2} + tau |X|_{L2}`.
    pub energy: f64,
    pub residual_l2: f64,
    pub residual_sup: f64,
    /// Set when `sup |X|` exceeds `factor` times a reference value.
    pub uniformity_flag: bool,
}

/// Uniform-bound and energy certificates; `reference` is `sup |X|` at the coarsest
/// tau of a sweep, if any.
pub fn corrector_certificates(
    set: &CorrectorSet,
    reference: Option<f64>,
    factor: f64,
) -> CorrectorCertificate {
    let gx = set.x.weighted_grad(&set.weights);
    let energy = gx.l2_norm() + set.plan.tau * set.x.l2_norm();
    CorrectorCertificate {
        sup_x: set.sup_x,
        energy,
        residual_l2: set.residual_l2.iter().fold(0.0, |m, v| m.max(*v)),
        residual_sup: set.residual_sup.iter().fold(0.0, |m, v| m.max(*v)),
        uniformity_flag: reference.map(|r| set.sup_x > factor * r).unwrap_or(false),
    }
}

/// `sup |X|` over a sweep of tau values at a fixed plan.
pub fn tau_sweep(a: &TorusField, scales: &ScaleVector, plan: &TruncationPlan, taus: &[f64]) -> Result<Vec<(f64, f64)>> {
    taus.iter()
        .map(|&t| Ok((t, build_corrector(a, scales, &plan.with_tau(t))?.sup_x)))
        .collect()
}

/// Serialize a corrector set as TNSR/1 snapshots plus `manifest.json`.
pub fn save_corrector(set: &CorrectorSet, dir: &std::path::Path) -> Result<()> {
    use std::fs::File;
    use std::io::BufWriter;
    std::fs::create_dir_all(dir)?;
    crate::torus_field::write_tnsr(&set.x, BufWriter::new(File::create(dir.join("X.tnsr"))?))?;
    if let Some(c) = &set.chi {
        crate::torus_field::write_tnsr(c, BufWriter::new(File::create(dir.join("chi.tnsr"))?))?;
    }
    if let Some(h) = &set.a_hat {
        crate::torus_field::write_tnsr(h, BufWriter::new(File::create(dir.join("A_hat.tnsr"))?))?;
    }
    for (j, p) in set.directions.iter().enumerate() {
        if let Some(pc) = &p.pieces {
            crate::torus_field::write_tnsr(&pc.y0, BufWriter::new(File::create(dir.join(format!("Y0_e{}.tnsr", j + 1)))?))?;
            for (k, yo) in pc.yo.iter().enumerate() {
                crate::torus_field::write_tnsr(yo, BufWriter::new(File::create(dir.join(format!("Yo{}_e{}.tnsr", k + 1, j + 1)))?))?;
            }
            for (k, yr) in pc.yr.iter().enumerate() {
                crate::torus_field::write_tnsr(yr, BufWriter::new(File::create(dir.join(format!("Yr{}_e{}.tnsr", k + 1, j + 1)))?))?;
            }
        }
    }
    let manifest = serde_json::json!({
        "plan": set.plan,
        "weights": set.weights,
        "n_param": set.n_param,
        "residual_l2": set.residual_l2,
        "residual_sup": set.residual_sup,
        "formula_mismatch": set.formula_mismatch,
        "sup_x": set.sup_x,
    });
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::torus_field::{build_field, diagonal_trace, AnalyticCoefficient, GridSpec};
    use std::f64::consts::PI;

    fn coef_1d() -> AnalyticCoefficient {
        AnalyticCoefficient::scalar(1, 2, 2.0)
            .add_sin_scalar(vec![vec![1], vec![0]], 1.0)
            .add_cos_scalar(vec![vec![0], vec![1]], 0.5)
    }

    fn a_1d(y1: f64, y2: f64) -> f64 {
        2.0 + (2.0 * PI * y1).sin() + 0.5 * (2.0 * PI * y2).cos()
    }

    fn cfg() -> Calibration {
        Calibration::default().with_c_sep(0.25)
    }

    #[test]
    fn parameters_follow_gap() {
        let s = ScaleVector::new(vec![1.0, 1.0 / 16.0]).unwrap();
        let p = choose_parameters(&s, &cfg());
        assert_eq!(p.k, vec![12]);
        assert!(p.all_separated());
        assert!((p.tau - (-0.25f64 * 16.0).exp()).abs() < 1e-15);
        let p = choose_parameters(&s, &Calibration::default().with_c_sep(0.05));
        assert!(!p.all_separated());
        let s = ScaleVector::new(vec![1.0, 0.25]).unwrap();
        assert_eq!(choose_parameters(&s, &cfg()).k, vec![4]);
    }

    #[test]
    fn hat_matrix_is_harmonic_mean_in_1d() {
        let g = GridSpec::uniform(1, 2, 32).unwrap();
        let a = build_field(&coef_1d(), &g).unwrap();
        let chi = one_scale_corrector(&a, &SolveOptions::default()).unwrap();
        let hat = hat_matrix(&a, &chi, Some(0.5)).unwrap();
        for i in 0..32 {
            let y1 = i as f64 / 32.0;
            let m = 4096;
            let inv: f64 = (0..m).map(|j| 1.0 / a_1d(y1, j as f64 / m as f64)).sum::<f64>() / m as f64;
            assert!((hat.data()[i] - 1.0 / inv).abs() < 1e-9, "{} vs {}", hat.data()[i], 1.0 / inv);
        }
    }

    #[test]
    fn two_scale_gradient_matches_closed_form() {
        let q = 16.0;
        let g = GridSpec::uniform(1, 2, 64).unwrap();
        let a = build_field(&coef_1d(), &g).unwrap();
        let s = ScaleVector::new(vec![1.0, 1.0 / q]).unwrap();
        let plan = choose_parameters(&s, &cfg()).with_tau(0.0);
        let set = build_corrector(&a, &s, &plan).unwrap();
        let m = 8192;
        let bbar = 1.0
            / ((0..m)
                .map(|j| {
                    let t = j as f64 / m as f64;
                    1.0 / a_1d(t, q * t)
                })
                .sum::<f64>()
                / m as f64);
        let grad = set.x.weighted_grad(&set.weights);
        let pts: Vec<Vec<f64>> = (0..50).map(|i| vec![i as f64 / 50.0 + 0.0031]).collect();
        let tr = diagonal_trace(&grad, &s, &pts).unwrap();
        for (x, v) in pts.iter().zip(&tr) {
            let exact = bbar / a_1d(x[0], q * x[0]) - 1.0;
            assert!((v[0] - exact).abs() < 1e-5, "x={} {} vs {}", x[0], v[0], exact);
        }
        assert!(set.residual_sup[0] < 1e-3, "{:?}", set.residual_sup);
    }

    #[test]
    fn residual_formula_matches_direct_residual() {
        let g = GridSpec::uniform(1, 2, 64).unwrap();
        let a = build_field(&coef_1d(), &g).unwrap();
        let s = ScaleVector::new(vec![1.0, 0.25]).unwrap();
        let mut plan = choose_parameters(&s, &cfg().with_c_sep(0.5)).with_tau(0.3);
        plan.constants.dealias = false;
        let set = build_corrector(&a, &s, &plan).unwrap();
        let r = set.residual_sup[0];
        assert!(r > 1e-6, "truncation residual should be visible, got {r}");
        assert!(set.formula_mismatch[0] < 1e-8 * r.max(1.0), "{} vs {}", set.formula_mismatch[0], r);
    }

    #[test]
    fn single_scale_matches_direct_cell_solve() {
        let g = GridSpec::uniform(1, 1, 64).unwrap();
        let c = AnalyticCoefficient::scalar(1, 1, 2.0).add_sin_scalar(vec![vec![1]], 1.0);
        let a = build_field(&c, &g).unwrap();
        let s = ScaleVector::new(vec![0.5]).unwrap();
        let plan = choose_parameters(&s, &cfg()).with_tau(0.0);
        let set = build_corrector(&a, &s, &plan).unwrap();
        let grad = set.x.weighted_grad(&set.weights);
        let hm = 3f64.sqrt();
        for i in 0..64 {
            let y = i as f64 / 64.0;
            let exact = hm / (2.0 + (2.0 * PI * y).sin()) - 1.0;
            assert!((grad.data()[i] - exact).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_matrix_has_zero_corrector() {
        let g = GridSpec::uniform(2, 2, 8).unwrap();
        let c = AnalyticCoefficient::constant(2, 2, vec![vec![2.0, 0.3], vec![0.3, 1.0]]);
        let a = build_field(&c, &g).unwrap();
        let s = ScaleVector::new(vec![1.0, 0.125]).unwrap();
        let plan = choose_parameters(&s, &cfg());
        let set = build_corrector(&a, &s, &plan).unwrap();
        assert!(set.sup_x < 1e-12);
        let cert = corrector_certificates(&set, None, 10.0);
        assert!(cert.energy < 1e-12 && !cert.uniformity_flag);
    }

    #[test]
    fn refuses_unseparated_scales() {
        let g = GridSpec::uniform(1, 2, 8).unwrap();
        let a = build_field(&coef_1d(), &g).unwrap();
        let s = ScaleVector::new(vec![1.0, 0.5]).unwrap();
        let plan = choose_parameters(&s, &Calibration::default());
        assert!(matches!(build_corrector(&a, &s, &plan), Err(Error::Validation(_))));
    }

    #[test]
    fn snapshots_are_written() {
        let g = GridSpec::uniform(1, 2, 8).unwrap();
        let a = build_field(&coef_1d(), &g).unwrap();
        let s = ScaleVector::new(vec![1.0, 0.125]).unwrap();
        let set = build_corrector(&a, &s, &choose_parameters(&s, &cfg()).with_k(2)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_corrector(&set, dir.path()).unwrap();
        assert!(dir.path().join("X.tnsr").exists());
        assert!(dir.path().join("manifest.json").exists());
        assert!(dir.path().join("Yo2_e1.tnsr").exists());
    }
}
