//! Effective matrices: the simultaneous `A_bar`, the reiterated `A_0` and the
//! regularized intermediate `A_tau`, their gaps, and the rational-ratio supercell oracle.

use serde::{Deserialize, Serialize};

use crate::cell_solver::{solve_scalar_rhs, SolveOptions};
use crate::corrector::{build_corrector, column, hat_matrix, one_scale_corrector, TruncationPlan};
use crate::error::{Error, Result};
use crate::torus_field::{ellipticity_pair, evaluate_at, GridSpec, ScaleVector, TorusField};

pub type Matrix = Vec<Vec<f64>>;

fn to_matrix(v: &[f64], d: usize) -> Matrix {
    (0..d).map(|i| v[i * d..(i + 1) * d].to_vec()).collect()
}

fn flat(m: &Matrix) -> Vec<f64> {
    m.iter().flatten().copied().collect()
}

/// Smallest eigenvalue of the symmetric part.
pub fn ellipticity_margin(m: &Matrix) -> f64 {
    ellipticity_pair(&flat(m), m.len()).0
}

/// Componentwise maximum of `|a - b|`.
pub fn max_abs_diff(a: &Matrix, b: &Matrix) -> f64 {
    flat(a)
        .iter()
        .zip(flat(b))
        .fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

/// Sum of `|a_ij - b_ij|`.
pub fn sum_abs_diff(a: &Matrix, b: &Matrix) -> f64 {
    flat(a).iter().zip(flat(b)).map(|(x, y)| (x - y).abs()).sum()
}

/// `<A + A grad_hat X>` averaged over every block after the first `n_param`.
pub fn effective_matrix_field(a: &TorusField, x: &TorusField, weights: &[f64], n_param: usize) -> TorusField {
    let mut m = a.add(&a.contract(&x.weighted_grad(weights)));
    while m.grid().n() > n_param {
        let last = m.grid().n() - 1;
        m = m.partial_average(last);
    }
    m
}

fn check_elliptic(m: &Matrix, lambda: Option<f64>, what: &str) -> Result<()> {
    let lo = ellipticity_margin(m);
    if !lo.is_finite() || lambda.is_some_and(|l| lo < l * (1.0 - 1e-8)) {
        return Err(Error::Consistency(format!(
            "{what} is not elliptic: min xi.A xi = {lo:.6} (lambda = {lambda:?})"
        )));
    }
    Ok(())
}

/// `A_bar = <A + A grad_hat X>` over the whole lifted torus.
pub fn effective_matrix(a: &TorusField, x: &TorusField, scales: &ScaleVector, lambda: Option<f64>) -> Result<Matrix> {
    let d = a.grid().d;
    let m = effective_matrix_field(a, x, &scales.weights(), 0);
    let m = to_matrix(m.data(), d);
    check_elliptic(&m, lambda, "effective matrix")?;
    Ok(m)
}

/// Interim matrices `A_n = A, A_{n-1}, .., A_1` obtained by homogenizing the
/// innermost block one at a time with exact (`tau = 0`) correctors.
pub fn interim_matrices(a: &TorusField, opts: &SolveOptions) -> Result<Vec<TorusField>> {
    let mut out = vec![a.clone()];
    while out.last().unwrap().grid().n() > 1 {
        let cur = out.last().unwrap();
        let chi = one_scale_corrector(cur, opts)?;
        out.push(hat_matrix(cur, &chi, None)?);
    }
    Ok(out)
}

/// Classical reiterated matrix `A_0`.
pub fn reiterated_matrix(a: &TorusField, opts: &SolveOptions) -> Result<Matrix> {
    let d = a.grid().d;
    let a1 = interim_matrices(a, opts)?.pop().unwrap();
    let chi = one_scale_corrector(&a1, opts)?;
    let m = to_matrix(&a1.add(&a1.contract(&chi.weighted_grad(&[1.0]))).full_average(), d);
    check_elliptic(&m, None, "reiterated matrix")?;
    Ok(m)
}

/// `A_tau = <A_1 + A_1 grad_1 psi_tau>` with `-div A_1 grad psi_tau + tau^2 psi_tau = div A_1`.
pub fn tau_matrix(a1: &TorusField, tau: f64, opts: &SolveOptions) -> Result<Matrix> {
    let g = a1.grid();
    if g.n() != 1 {
        return Err(Error::Validation("tau_matrix expects a single-block matrix field".into()));
    }
    let d = g.d;
    let mut comps = Vec::with_capacity(d);
    for j in 0..d {
        let rhs = column(a1, j).weighted_div(&[1.0]);
        let (psi, _) = solve_scalar_rhs(a1, &rhs, tau, 1.0, opts)?;
        comps.push(psi.into_data());
    }
    let psi = TorusField::from_components(g, &[d], comps);
    Ok(to_matrix(&a1.add(&a1.contract(&psi.weighted_grad(&[1.0]))).full_average(), d))
}

/// The three effective matrices and their gaps for one scale vector.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EffectiveReport {
    pub abar: Matrix,
    pub a0: Matrix,
    pub atau: Matrix,
    /// Componentwise max of `|A_0 - A_bar|`.
    pub gap_bar_0: f64,
    /// Entry sum of `|A_0 - A_bar|`.
    pub gap_bar_0_sum: f64,
    pub gap_tau_0: f64,
    pub gap_tau_bar: f64,
    /// `tau^2 + sum_i delta_{i+1} / delta_i`.
    pub predicted_bound: f64,
    pub margin_bar: f64,
    pub margin_0: f64,
    pub margin_tau: f64,
    pub tau: f64,
    pub deltas: Vec<f64>,
    pub plan: TruncationPlan,
    pub residual_l2: Vec<f64>,
}

/// `tau^2 + sum_i delta_{i+1} / delta_i`.
pub fn predicted_bound(scales: &ScaleVector, tau: f64) -> f64 {
    let d = scales.deltas();
    tau * tau + d.windows(2).map(|w| w[1] / w[0]).sum::<f64>()
}

/// Compute `A_bar`, `A_0`, `A_tau` and the gaps.
pub fn gap_report(a: &TorusField, scales: &ScaleVector, plan: &TruncationPlan, lambda: Option<f64>) -> Result<EffectiveReport> {
    let opts = SolveOptions::from(&plan.constants);
    let set = build_corrector(a, scales, plan)?;
    let abar = effective_matrix(a, &set.x, scales, lambda)?;
    let interim = interim_matrices(a, &opts)?;
    let a1 = interim.last().unwrap();
    let a0 = tau_matrix(a1, 0.0, &opts)?;
    let atau = tau_matrix(a1, plan.tau, &opts)?;
    for (m, w) in [(&a0, "A_0"), (&atau, "A_tau")] {
        check_elliptic(m, lambda, w)?;
    }
    Ok(EffectiveReport {
        gap_bar_0: max_abs_diff(&a0, &abar),
        gap_bar_0_sum: sum_abs_diff(&a0, &abar),
        gap_tau_0: max_abs_diff(&atau, &a0),
        gap_tau_bar: max_abs_diff(&atau, &abar),
        predicted_bound: predicted_bound(scales, plan.tau),
        margin_bar: ellipticity_margin(&abar),
        margin_0: ellipticity_margin(&a0),
        margin_tau: ellipticity_margin(&atau),
        abar,
        a0,
        atau,
        tau: plan.tau,
        deltas: scales.deltas(),
        plan: plan.clone(),
        residual_l2: set.residual_l2,
    })
}

/// Indices `(i, j)` of report pairs where the predicted bound shrinks by at least
/// a factor 2 from `i` to `j` but the measured gap does not shrink.
pub fn gap_trend_flags(reports: &[EffectiveReport]) -> Vec<(usize, usize)> {
    let mut flags = Vec::new();
    for i in 0..reports.len() {
        for j in 0..reports.len() {
            let (ri, rj) = (&reports[i], &reports[j]);
            if rj.predicted_bound * 2.0 <= ri.predicted_bound && rj.gap_bar_0 >= ri.gap_bar_0 {
                flags.push((i, j));
            }
        }
    }
    flags
}

/// One-scale homogenization of `b(y) = A(y, q_2 y + c_2, .., q_n y + c_n)` on `T^d`.
#[derive(Debug, Clone)]
pub struct Supercell {
    pub b: TorusField,
    /// Correctors `(Z^1, .., Z^d)` on the supercell grid.
    pub z: TorusField,
    pub matrix: Matrix,
}

/// Supercell oracle for integer ratios `q[b] = eps_1 / eps_b` (`q[0] = 1`) on a grid
/// with `res` points per unit of the finest block, shifted by `offsets[b]` in block `b`.
pub fn supercell_shifted(
    a: &TorusField,
    q: &[usize],
    res: usize,
    tau: f64,
    offsets: &[Vec<f64>],
    opts: &SolveOptions,
) -> Result<Supercell> {
    let g = a.grid();
    let d = g.d;
    if q.len() != g.n() || offsets.len() != g.n() || q[0] != 1 {
        return Err(Error::Validation("supercell: one ratio and offset per block, q[0] = 1".into()));
    }
    let qmax = *q.iter().max().unwrap();
    let grid = GridSpec::uniform(d, 1, res * qmax)?;
    let ys: Vec<Vec<f64>> = (0..grid.len())
        .map(|i| {
            let y = grid.coords(i);
            let mut out = Vec::with_capacity(d * q.len());
            for (b, &qb) in q.iter().enumerate() {
                for k in 0..d {
                    out.push((qb as f64 * y[k] + offsets[b][k]).rem_euclid(1.0));
                }
            }
            out
        })
        .collect();
    let vals = evaluate_at(a, &ys);
    let nc = d * d;
    let comps = (0..nc).map(|c| vals.iter().map(|v| v[c]).collect()).collect();
    let b = TorusField::from_components(&grid, &[d, d], comps);
    let mut zc = Vec::with_capacity(d);
    for j in 0..d {
        let rhs = column(&b, j).weighted_div(&[1.0]);
        let (z, _) = solve_scalar_rhs(&b, &rhs, tau, 1.0, opts)?;
        zc.push(z.into_data());
    }
    let z = TorusField::from_components(&grid, &[d], zc);
    let matrix = to_matrix(&b.add(&b.contract(&z.weighted_grad(&[1.0]))).full_average(), d);
    Ok(Supercell { b, z, matrix })
}

/// Supercell oracle along the unshifted diagonal `b(y) = A(y, q_2 y, .., q_n y)`.
pub fn supercell(a: &TorusField, q: &[usize], res: usize, tau: f64, opts: &SolveOptions) -> Result<Supercell> {
    let offsets = vec![vec![0.0; a.grid().d]; q.len()];
    supercell_shifted(a, q, res, tau, &offsets, opts)
}

/// Supercell matrix averaged over `shifts` equispaced offsets of the last block;
/// for a rational ratio this equals the lifted `A_bar` of the exact solution.
pub fn supercell_mean(a: &TorusField, q: &[usize], res: usize, tau: f64, shifts: usize, opts: &SolveOptions) -> Result<Matrix> {
    let g = a.grid();
    let d = g.d;
    let n = g.n();
    let shifts = shifts.max(1);
    let mut acc = vec![vec![0.0; d]; d];
    let total = shifts.pow(d as u32);
    for s in 0..total {
        let mut off = vec![vec![0.0; d]; n];
        let mut t = s;
        for k in 0..d {
            off[n - 1][k] = (t % shifts) as f64 / shifts as f64;
            t /= shifts;
        }
        let m = supercell_shifted(a, q, res, tau, &off, opts)?.matrix;
        for i in 0..d {
            for j in 0..d {
                acc[i][j] += m[i][j] / total as f64;
            }
        }
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Calibration;
    use crate::corrector::choose_parameters;
    use crate::torus_field::{build_field, AnalyticCoefficient};
    use std::f64::consts::PI;

    fn a3(y1: f64, y2: f64) -> f64 {
        3.0 + (2.0 * PI * y1).sin() + (2.0 * PI * y2).sin()
    }

    fn coef() -> AnalyticCoefficient {
        AnalyticCoefficient::scalar(1, 2, 3.0)
            .add_sin_scalar(vec![vec![1], vec![0]], 1.0)
            .add_sin_scalar(vec![vec![0], vec![1]], 1.0)
    }

    fn quad2(m: usize) -> f64 {
        let mut s = 0.0;
        for i in 0..m {
            for j in 0..m {
                s += 1.0 / a3(i as f64 / m as f64, j as f64 / m as f64);
            }
        }
        (m * m) as f64 / s
    }

    #[test]
    fn constant_matrix_is_fixed_by_every_map() {
        let g = GridSpec::uniform(2, 2, 8).unwrap();
        let m = vec![vec![2.0, 0.5], vec![0.5, 1.0]];
        let a = build_field(&AnalyticCoefficient::constant(2, 2, m.clone()), &g).unwrap();
        let opts = SolveOptions::default();
        assert!(max_abs_diff(&reiterated_matrix(&a, &opts).unwrap(), &m) < 1e-13);
        let a1 = interim_matrices(&a, &opts).unwrap().pop().unwrap();
        assert!(max_abs_diff(&tau_matrix(&a1, 0.3, &opts).unwrap(), &m) < 1e-13);
        let s = ScaleVector::new(vec![1.0, 0.125]).unwrap();
        let r = gap_report(&a, &s, &choose_parameters(&s, &Calibration::default().with_c_sep(0.25)), Some(0.5)).unwrap();
        assert!(r.gap_bar_0 < 1e-12 && r.gap_tau_0 < 1e-12);
    }

    #[test]
    fn reiterated_is_full_harmonic_mean_in_1d() {
        let g = GridSpec::uniform(1, 2, 64).unwrap();
        let a = build_field(&coef(), &g).unwrap();
        let a0 = reiterated_matrix(&a, &SolveOptions::default()).unwrap();
        assert!((a0[0][0] - quad2(512)).abs() < 1e-10, "{} vs {}", a0[0][0], quad2(512));
    }

    #[test]
    fn cross_mode_coefficient_has_unit_reiterated_matrix() {
        let g = GridSpec::uniform(1, 2, 64).unwrap();
        let alpha = 0.3;
        let inv = AnalyticCoefficient::scalar(1, 2, 1.0).add_sin_sin_scalar(vec![vec![1], vec![0]], vec![vec![0], vec![1]], 2.0 * alpha);
        let f = build_field(&inv, &g).unwrap();
        let a = TorusField::from_components(&g, &[1, 1], vec![f.data().iter().map(|v| 1.0 / v).collect()]);
        let a0 = reiterated_matrix(&a, &SolveOptions::default()).unwrap();
        assert!((a0[0][0] - 1.0).abs() < 1e-9, "{}", a0[0][0]);
    }

    #[test]
    fn tau_matrix_converges_quadratically() {
        let g = GridSpec::uniform(1, 1, 64).unwrap();
        let c = AnalyticCoefficient::scalar(1, 1, 3.0).add_sin_scalar(vec![vec![1]], 1.0);
        let a1 = build_field(&c, &g).unwrap();
        let opts = SolveOptions::default();
        let exact = 8f64.sqrt();
        assert!((tau_matrix(&a1, 0.0, &opts).unwrap()[0][0] - exact).abs() < 1e-12);
        let taus = [1e-1, 1e-2, 1e-3];
        let gaps: Vec<f64> = taus
            .iter()
            .map(|&t| (tau_matrix(&a1, t, &opts).unwrap()[0][0] - exact).abs())
            .collect();
        let slope = (gaps[0].ln() - gaps[1].ln()) / (taus[0].ln() - taus[1].ln());
        assert!((slope - 2.0).abs() < 0.1, "slope {slope} gaps {gaps:?}");
    }

    #[test]
    fn supercell_matches_lifted_effective_matrix() {
        let g = GridSpec::uniform(1, 2, 32).unwrap();
        let a = build_field(&coef(), &g).unwrap();
        let s = ScaleVector::new(vec![1.0, 1.0 / 16.0]).unwrap();
        let plan = choose_parameters(&s, &Calibration::default());
        let set = build_corrector(&a, &s, &plan).unwrap();
        let abar = effective_matrix(&a, &set.x, &s, Some(1.0)).unwrap();
        let opts = SolveOptions::default();
        let sc = supercell(&a, &[1, 16], 32, plan.tau, &opts).unwrap();
        assert!((abar[0][0] - sc.matrix[0][0]).abs() < 1e-3 + plan.tau * plan.tau);
        let m = 8192;
        let hm = m as f64
            / (0..m)
                .map(|i| {
                    let t = i as f64 / m as f64;
                    1.0 / a3(t, 16.0 * t)
                })
                .sum::<f64>();
        assert!((sc.matrix[0][0] - hm).abs() < 1e-6 + 2.0 * plan.tau * plan.tau);
    }

    #[test]
    fn trend_flags_detect_non_shrinking_gap() {
        let g = GridSpec::uniform(1, 2, 8).unwrap();
        let a = build_field(&AnalyticCoefficient::scalar(1, 2, 2.0), &g).unwrap();
        let s = ScaleVector::new(vec![1.0, 0.125]).unwrap();
        let mut r1 = gap_report(&a, &s, &choose_parameters(&s, &Calibration::default().with_c_sep(0.25)), None).unwrap();
        let mut r2 = r1.clone();
        r1.predicted_bound = 0.2;
        r1.gap_bar_0 = 0.01;
        r2.predicted_bound = 0.05;
        r2.gap_bar_0 = 0.02;
        assert_eq!(gap_trend_flags(&[r1.clone(), r2.clone()]), vec![(0, 1)]);
        r2.gap_bar_0 = 0.001;
        assert!(gap_trend_flags(&[r1, r2]).is_empty());
        let _ = serde_json::to_string(&gap_report(&a, &s, &choose_parameters(&s, &Calibration::default().with_c_sep(0.25)), None).unwrap()).unwrap();
    }
}
