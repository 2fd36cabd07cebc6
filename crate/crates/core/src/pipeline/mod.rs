//! End-to-end homogenization for arbitrary scale vectors: grouping of the scales
//! into a simultaneously homogenized inner group and reiterated breaks, the staged
//! driver with its error budget, and the experiment runners.

mod experiments;
mod toy;

pub use experiments::{
    calibrate_supercell, run_experiment, write_report, CalibrationPoint, CalibrationReport, Check, ExperimentConfig,
    ExperimentReport, Table, EXPERIMENTS, SCHEMA_VERSION,
};
pub use toy::{exp_integral, toy_averaging, Mode};

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::bvp::{l2_distance_1d, solve_effective_1d, solve_fine_1d};
use crate::cell_solver::SolveOptions;
use crate::config::Calibration;
use crate::corrector::{build_corrector_parametric, choose_parameters, hat_matrix, one_scale_corrector};
use crate::effective::{effective_matrix_field, ellipticity_margin, Matrix};
use crate::error::{Error, Result};
use crate::spectral::freq0;
use crate::torus_field::{build_field, AnalyticCoefficient, GridSpec, ScaleVector, TorusField};

/// Which alternative of the grouping dichotomy holds at the break.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    /// Every scale belongs to one separated group.
    Separated,
    /// The break gap itself is poorly separated: `eps_{n-m+1} > 2^{m+1-n} c eps_{n-m}`.
    Adjacent,
    /// Some inner gap `p` is exponentially worse than the break gap.
    Witness { p: usize },
    /// Even the innermost pair fails: pure reiteration with a trivial rate.
    Trivial,
    /// Single scale.
    Single,
}

/// One evaluated inequality of the grouping scheme.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupCheck {
    /// Candidate group size.
    pub m: usize,
    /// 1-based index of the smaller scale of the gap.
    pub j: usize,
    pub lhs: f64,
    pub rhs: f64,
    /// Constant `2^{m-n} c_j` used on the right side.
    pub constant: f64,
    pub passed: bool,
    /// `lhs / rhs` within a factor 2 of the threshold.
    pub near_threshold: bool,
}

/// Grouping of `(eps_1, .., eps_n)` into an inner simultaneous group and the rest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleGrouping {
    pub n: usize,
    /// Size of the inner simultaneous group.
    pub m: usize,
    /// Partition into contiguous groups of 1-based scale indices, outermost first.
    pub groups: Vec<Vec<usize>>,
    /// 1-based index `n - m` of the larger scale at the break, if any.
    pub break_gap: Option<usize>,
    pub branch: Branch,
    pub checks: Vec<GroupCheck>,
    pub warnings: Vec<String>,
}

fn group_check(e: &[f64], cfg: &Calibration, m: usize, j: usize, first: usize) -> GroupCheck {
    let n = e.len();
    let constant = 2f64.powi(m as i32 - n as i32) * cfg.c_j(j);
    let lhs = e[j - 1];
    let rhs = constant * e[j - 2] / (1.0 + (e[first - 1] / e[j - 2]).ln());
    let q = lhs / rhs;
    GroupCheck {
        m,
        j,
        lhs,
        rhs,
        constant,
        passed: lhs <= rhs,
        near_threshold: (0.5..=2.0).contains(&q),
    }
}

/// Checks of group size `m`: gaps `j = n-m+2..=n` relative to `eps_{n-m+1}`.
fn checks_for(e: &[f64], cfg: &Calibration, m: usize) -> Vec<GroupCheck> {
    let n = e.len();
    (n - m + 2..=n).map(|j| group_check(e, cfg, m, j, n - m + 1)).collect()
}

/// Group the scales: starting from the innermost pair, add larger scales while the
/// doubled-constant separation scheme `eps_j <= 2^{m-n} c_j eps_{j-1} / (1 + ln(eps_{n-m+1}/eps_{j-1}))`
/// keeps holding; the remaining outer scales are grouped recursively.
pub fn group_scales(scales: &ScaleVector, cfg: &Calibration) -> ScaleGrouping {
    let e = &scales.epsilons;
    let n = e.len();
    let mut warnings = Vec::new();
    if n == 1 {
        return ScaleGrouping {
            n,
            m: 1,
            groups: vec![vec![1]],
            break_gap: None,
            branch: Branch::Single,
            checks: Vec::new(),
            warnings,
        };
    }
    let mut checks = Vec::new();
    let mut m = 1;
    for cand in 2..=n {
        let c = checks_for(e, cfg, cand);
        let ok = c.iter().all(|g| g.passed);
        checks.extend(c);
        if !ok {
            break;
        }
        m = cand;
    }
    let branch = if m == n {
        Branch::Separated
    } else if m == 1 {
        warnings.push(format!(
            "innermost gap eps_{} / eps_{} = {:.4} is not separated: pure reiteration, trivial rate",
            n,
            n - 1,
            e[n - 1] / e[n - 2]
        ));
        Branch::Trivial
    } else {
        let b = n - m;
        let c_adj = 2f64.powi(m as i32 + 1 - n as i32) * cfg.c_j(b + 1);
        if e[b] > c_adj * e[b - 1] {
            Branch::Adjacent
        } else {
            let log = 1.0 + (e[b - 1] / e[b]).ln();
            match (b + 2..=n).find(|&p| e[p - 1] > 2f64.powi(m as i32 - n as i32) * cfg.c_j(p) * e[p - 2] / log) {
                Some(p) => Branch::Witness { p },
                None => {
                    warnings.push("no witness gap found for the break".into());
                    Branch::Adjacent
                }
            }
        }
    };
    for c in checks.iter().filter(|c| c.near_threshold) {
        warnings.push(format!(
            "near-threshold gap j = {} at m = {}: lhs / rhs = {:.3}",
            c.j,
            c.m,
            c.lhs / c.rhs
        ));
    }
    let b = n - m;
    let mut groups = if b == 0 {
        Vec::new()
    } else {
        let outer = ScaleVector::new(e[..b].to_vec()).expect("prefix of a valid scale vector");
        group_scales(&outer, cfg).groups
    };
    groups.push((b + 1..=n).collect());
    ScaleGrouping {
        n,
        m,
        groups,
        break_gap: if b > 0 { Some(b) } else { None },
        branch,
        checks,
        warnings,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    /// Several scales homogenized in one step with multiscale correctors.
    Simultaneous,
    /// One scale homogenized with a classical cell corrector.
    Reiterated,
    /// Constant coefficient: nothing to homogenize.
    Constant,
}

/// One step of the staged homogenization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub kind: StageKind,
    /// 1-based scale indices homogenized in this stage.
    pub scales: Vec<usize>,
    /// Blocks of the produced coefficient (0 for a constant matrix).
    pub remaining_blocks: usize,
    pub tau: f64,
    pub k: Vec<usize>,
    /// Mean of the produced coefficient.
    pub mean_matrix: Matrix,
    /// Smallest `xi.A xi` of the produced coefficient over its grid.
    pub margin: f64,
    /// Relative spectral energy in the upper half of the resolved band.
    pub spectral_tail: f64,
    pub residual_l2: Vec<f64>,
}

/// `eps_1 + max_i exp(-c eps_i / eps_{i+1})`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBudget {
    pub eps1: f64,
    pub exp_terms: Vec<f64>,
    pub c: f64,
    pub total: f64,
}

/// Breakpoint inequality `eps_{n-m+1}/eps_{n-m} <= C_0 exp(-c_p eps_{p-1}/eps_p)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BreakpointCheck {
    pub p: usize,
    pub ratio: f64,
    pub bound: f64,
    pub holds: bool,
}

/// Errors against a fine reference solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasuredError {
    pub l2_error: f64,
    pub budget: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub abar: Matrix,
    pub grouping: ScaleGrouping,
    pub stages: Vec<Stage>,
    pub budget: ErrorBudget,
    pub breakpoints: Vec<BreakpointCheck>,
    pub measured: Option<MeasuredError>,
    pub warnings: Vec<String>,
}

/// Predicted budget with the calibrated exponent constant.
pub fn error_budget(scales: &ScaleVector, cfg: &Calibration, constant: bool) -> ErrorBudget {
    let e = &scales.epsilons;
    let exp_terms: Vec<f64> = if constant {
        Vec::new()
    } else {
        e.windows(2).map(|w| (-cfg.c_tau * w[0] / w[1]).exp()).collect()
    };
    let total = e[0] + exp_terms.iter().cloned().fold(0.0, f64::max);
    ErrorBudget {
        eps1: e[0],
        exp_terms,
        c: cfg.c_tau,
        total,
    }
}

/// Relative spectral energy of the modes with some `|k| > N/4`, a proxy for
/// the energy the grid cannot resolve.
pub fn spectral_tail(field: &TorusField) -> f64 {
    let dims = field.grid().dims();
    if dims.is_empty() {
        return 0.0;
    }
    let mut ix = vec![0; dims.len()];
    let (mut tail, mut total) = (0.0, 0.0);
    for z in field.spectrum() {
        for (i, c) in z.iter().enumerate() {
            crate::spectral::unravel(i, &dims, &mut ix);
            let e = c.norm_sqr();
            total += e;
            if ix.iter().zip(&dims).any(|(&k, &n)| 4 * freq0(k, n).unsigned_abs() as usize > n) {
                tail += e;
            }
        }
    }
    if total > 0.0 {
        tail / total
    } else {
        0.0
    }
}

fn is_constant(a: &TorusField) -> bool {
    (0..a.ncomp()).all(|c| {
        let v = a.comp(c);
        v.iter().all(|x| *x == v[0])
    })
}

fn to_matrix(v: &[f64], d: usize) -> Matrix {
    (0..d).map(|i| v[i * d..(i + 1) * d].to_vec()).collect()
}

fn sub_calibration(cfg: &Calibration, offset: usize, n: usize) -> Calibration {
    let mut c = cfg.clone();
    c.c_sep = (2..=n).map(|j| cfg.c_j(j + offset)).collect();
    if c.c_sep.is_empty() {
        c.c_sep = vec![cfg.c_j(2 + offset)];
    }
    c
}

/// Homogenize a sampled coefficient on `T^{d x n}` stage by stage.
pub fn homogenize(a: &TorusField, scales: &ScaleVector, cfg: &Calibration) -> Result<PipelineReport> {
    let g = a.grid();
    let n = scales.n();
    if g.n() != n {
        return Err(Error::Validation(format!("coefficient has {} blocks but {} scales were given", g.n(), n)));
    }
    if n > 3 {
        return Err(Error::Validation(format!("n = {n} scales exceeds the supported maximum of 3")));
    }
    if a.shape() != [g.d, g.d] {
        return Err(Error::Validation("coefficient must be a d x d matrix field".into()));
    }
    let d = g.d;
    let opts = SolveOptions::from(cfg);
    let grouping = group_scales(scales, cfg);
    let mut warnings = grouping.warnings.clone();
    if is_constant(a) {
        let abar = to_matrix(&a.at(0), d);
        let margin = ellipticity_margin(&abar);
        return Ok(PipelineReport {
            stages: vec![Stage {
                kind: StageKind::Constant,
                scales: (1..=n).collect(),
                remaining_blocks: 0,
                tau: 0.0,
                k: Vec::new(),
                mean_matrix: abar.clone(),
                margin,
                spectral_tail: 0.0,
                residual_l2: Vec::new(),
            }],
            abar,
            budget: error_budget(scales, cfg, true),
            breakpoints: Vec::new(),
            measured: None,
            grouping,
            warnings,
        });
    }
    let mut stages = Vec::new();
    let mut breakpoints = Vec::new();
    let mut cur = a.clone();
    let mut eps = scales.epsilons.clone();
    while !eps.is_empty() {
        let sv = ScaleVector::new(eps.clone())?;
        let gr = group_scales(&sv, cfg);
        let nc = eps.len();
        let m = gr.m;
        let n_param = nc - m;
        if let (Some(b), Branch::Witness { p }) = (gr.break_gap, gr.branch) {
            let ratio = eps[b] / eps[b - 1];
            let bound = cfg.c0_break * (-cfg.c_j(p) * eps[p - 2] / eps[p - 1]).exp();
            breakpoints.push(BreakpointCheck {
                p,
                ratio,
                bound,
                holds: ratio <= bound,
            });
        }
        let (next, kind, tau, k, residual_l2) = if m >= 2 {
            let mut sub = ScaleVector::new(eps[n_param..].to_vec())?;
            if let Some(t) = scales.tau {
                sub = sub.with_tau(t)?;
            }
            let plan = choose_parameters(&sub, &sub_calibration(cfg, n_param, m));
            let set = build_corrector_parametric(&cur, n_param, &sub, &plan, &opts)?;
            let next = effective_matrix_field(&cur, &set.x, &set.weights, n_param);
            (next, StageKind::Simultaneous, plan.tau, plan.k.clone(), set.residual_l2.clone())
        } else {
            let chi = one_scale_corrector(&cur, &opts)?;
            let next = if nc == 1 {
                let wl = [1.0];
                let full = cur.add(&cur.contract(&chi.weighted_grad(&wl)));
                TorusField::constant(&GridSpec { d, res: Vec::new() }, &[d, d], &full.full_average())
            } else {
                hat_matrix(&cur, &chi, None)?
            };
            (next, StageKind::Reiterated, 0.0, Vec::new(), Vec::new())
        };
        let (margin, _) = crate::torus_field::ellipticity_bounds(&next);
        if !(margin > 0.0) {
            return Err(Error::Consistency(format!(
                "stage {} produced a non-elliptic coefficient (margin {margin:.3e})",
                stages.len() + 1
            )));
        }
        let tail = if n_param > 0 { spectral_tail(&next) } else { 0.0 };
        if tail > 1e-6 {
            return Err(Error::Resolution(format!(
                "outer grid cannot resolve the stage {} coefficient: spectral tail {tail:.3e} > 1e-6",
                stages.len() + 1
            )));
        }
        stages.push(Stage {
            kind,
            scales: (n_param + 1..=nc).collect(),
            remaining_blocks: n_param,
            tau,
            k,
            mean_matrix: to_matrix(&next.full_average(), d),
            margin,
            spectral_tail: tail,
            residual_l2,
        });
        cur = next;
        eps.truncate(n_param);
    }
    let abar = to_matrix(cur.data(), d);
    let margin = ellipticity_margin(&abar);
    if !(margin > 0.0) {
        warnings.push(format!("final matrix has ellipticity margin {margin:.3e}"));
    }
    Ok(PipelineReport {
        abar,
        grouping,
        stages,
        budget: error_budget(scales, cfg, false),
        breakpoints,
        measured: None,
        warnings,
    })
}

/// Resolution per block from the calibration or the default for `d`.
pub fn pipeline_grid(d: usize, n: usize, cfg: &Calibration) -> Result<GridSpec> {
    match cfg.resolution {
        Some(r) => GridSpec::uniform(d, n, r),
        None => GridSpec::default_for(d, n),
    }
}

/// Sample an analytic coefficient and homogenize it; for `d = 1` and `reference`
/// the result is compared with a fine solve of `-(a_eps u')' = 1`, `u(0) = u(1) = 0`.
pub fn homogenize_coefficient(
    coef: &AnalyticCoefficient,
    scales: &ScaleVector,
    cfg: &Calibration,
    reference: bool,
) -> Result<PipelineReport> {
    if coef.n() != scales.n() {
        return Err(Error::Validation(format!(
            "coefficient has {} scale blocks but {} scales were given",
            coef.n(),
            scales.n()
        )));
    }
    let grid = pipeline_grid(coef.d(), coef.n(), cfg)?;
    let field = build_field(coef, &grid)?;
    let mut rep = homogenize(&field, scales, cfg)?;
    if reference {
        if coef.d() != 1 {
            rep.warnings.push("reference solve is only available for d = 1".into());
        } else {
            let c = coef.clone();
            let inv: Vec<f64> = scales.epsilons.iter().map(|e| 1.0 / e).collect();
            let fmax = c.max_freq().iter().map(|k| k.unsigned_abs()).max().unwrap_or(1).max(1) as f64;
            let eps_min = scales.epsilons.last().copied().unwrap_or(1.0) / fmax;
            let a = Arc::new(move |x: f64| {
                let y: Vec<f64> = inv.iter().map(|s| s * x).collect();
                c.eval(&y)[0]
            });
            let fine = solve_fine_1d(a, eps_min, 1.0, 0.0, 0.0)?;
            let err = l2_distance_1d(&fine, solve_effective_1d(rep.abar[0][0], 1.0, 0.0, 0.0));
            rep.measured = Some(MeasuredError {
                l2_error: err,
                budget: rep.budget.total,
            });
        }
    }
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corrector::build_corrector;
    use crate::effective::{effective_matrix, max_abs_diff};

    fn sv(e: &[f64]) -> ScaleVector {
        ScaleVector::new(e.to_vec()).unwrap()
    }

    #[test]
    fn grouping_examples() {
        let cfg = Calibration::default();
        let g = group_scales(&sv(&[0.1, 0.09, 1e-5]), &cfg);
        assert_eq!(g.m, 2);
        assert_eq!(g.break_gap, Some(1));
        assert_eq!(g.groups, vec![vec![1], vec![2, 3]]);
        assert_eq!(g.branch, Branch::Adjacent);
        let g = group_scales(&sv(&[0.1, 1e-3, 1e-7]), &cfg);
        assert_eq!((g.m, g.branch, g.break_gap), (3, Branch::Separated, None));
        assert_eq!(g.groups, vec![vec![1, 2, 3]]);
        let g = group_scales(&sv(&[0.1, 0.09]), &cfg);
        assert_eq!((g.m, g.branch), (1, Branch::Trivial));
        assert_eq!(g.groups, vec![vec![1], vec![2]]);
        assert!(g.warnings.iter().any(|w| w.contains("trivial")));
    }

    #[test]
    fn witness_branch_at_exponentially_better_break() {
        let cfg = Calibration::default();
        // eps_2/eps_1 = 1e-3 fails only because of the logarithm of the outer ratio.
        let g = group_scales(&sv(&[1.0, 0.004, 1e-4]), &cfg);
        assert_eq!(g.m, 2, "{g:?}");
        match g.branch {
            Branch::Witness { p } => assert_eq!(p, 3),
            b => panic!("{b:?}"),
        }
    }

    #[test]
    fn grouping_is_idempotent_and_order_free() {
        let a: Calibration = serde_json::from_str(r#"{"c_sep":[0.2,0.1],"c_tau":0.5}"#).unwrap();
        let b: Calibration = serde_json::from_str(r#"{"c_tau":0.5,"c_sep":[0.2,0.1]}"#).unwrap();
        let s = sv(&[0.1, 0.02, 1e-4]);
        let g1 = group_scales(&s, &a);
        assert_eq!(g1, group_scales(&s, &b));
        assert_eq!(g1, group_scales(&s, &a));
    }

    #[test]
    fn constant_coefficient_is_one_stage() {
        let m = vec![vec![2.0, 0.3], vec![0.3, 1.0]];
        let coef = AnalyticCoefficient::constant(2, 2, m.clone());
        let s = sv(&[0.1, 0.05]);
        let r = homogenize_coefficient(&coef, &s, &Calibration::default().with_c_sep(0.25), false).unwrap();
        assert_eq!(r.stages.len(), 1);
        assert_eq!(r.stages[0].kind, StageKind::Constant);
        assert!(max_abs_diff(&r.abar, &m) < 1e-14);
        assert_eq!(r.budget.total, 0.1);
    }

    #[test]
    fn two_scale_pipeline_equals_one_shot() {
        let coef = AnalyticCoefficient::scalar(1, 2, 3.0)
            .add_sin_scalar(vec![vec![1], vec![0]], 1.0)
            .add_sin_scalar(vec![vec![0], vec![1]], 1.0);
        let cfg = Calibration::default();
        let s = sv(&[1.0, 1.0 / 16.0]);
        let r = homogenize_coefficient(&coef, &s, &cfg, false).unwrap();
        assert_eq!(r.stages.len(), 1);
        assert_eq!(r.stages[0].kind, StageKind::Simultaneous);
        let a = build_field(&coef, &pipeline_grid(1, 2, &cfg).unwrap()).unwrap();
        let set = build_corrector(&a, &s, &choose_parameters(&s, &cfg)).unwrap();
        let one = effective_matrix(&a, &set.x, &s, None).unwrap();
        assert!(max_abs_diff(&r.abar, &one) < 1e-10);
        assert!(r.budget.exp_terms.iter().all(|t| *t > 0.0) && r.budget.eps1 > 0.0);
    }

    #[test]
    fn three_scale_break_matches_harmonic_mean() {
        let coef = AnalyticCoefficient::scalar(1, 3, 4.0)
            .add_sin_scalar(vec![vec![1], vec![0], vec![0]], 1.0)
            .add_cos_scalar(vec![vec![0], vec![1], vec![0]], 1.0)
            .add_sin_scalar(vec![vec![0], vec![0], vec![1]], 1.0);
        let cfg = Calibration {
            resolution: Some(16),
            ..Calibration::default()
        };
        let s = sv(&[0.1, 0.09, 1e-5]);
        let r = homogenize_coefficient(&coef, &s, &cfg, false).unwrap();
        let kinds: Vec<StageKind> = r.stages.iter().map(|s| s.kind).collect();
        assert_eq!(kinds, vec![StageKind::Simultaneous, StageKind::Reiterated]);
        assert_eq!(r.stages[0].scales, vec![2, 3]);
        let m = 64;
        let mut acc = 0.0;
        for i in 0..m {
            for j in 0..m {
                for k in 0..m {
                    let y = [i as f64 / m as f64, j as f64 / m as f64, k as f64 / m as f64];
                    acc += 1.0 / coef.eval(&y)[0];
                }
            }
        }
        let hm = (m * m * m) as f64 / acc;
        assert!((r.abar[0][0] - hm).abs() < 1e-3, "{} vs {hm}", r.abar[0][0]);
    }

    #[test]
    fn under_resolved_outer_grid_is_refused() {
        let coef = AnalyticCoefficient::scalar(1, 3, 3.0)
            .add_sin_scalar(vec![vec![3], vec![0], vec![0]], 1.4)
            .add_sin_scalar(vec![vec![0], vec![1], vec![0]], 0.5)
            .add_sin_scalar(vec![vec![0], vec![0], vec![1]], 0.5);
        let cfg = Calibration {
            resolution: Some(8),
            ..Calibration::default()
        };
        let r = homogenize_coefficient(&coef, &sv(&[0.1, 0.09, 1e-5]), &cfg, false);
        assert!(matches!(r, Err(Error::Resolution(_))), "{r:?}");
    }

    #[test]
    fn spectral_tail_of_band_limited_field_is_zero() {
        let g = GridSpec::uniform(1, 1, 16).unwrap();
        let f = build_field(&AnalyticCoefficient::scalar(1, 1, 2.0).add_cos_scalar(vec![vec![2]], 1.0), &g).unwrap();
        assert!(spectral_tail(&f) < 1e-28);
        let h = build_field(&AnalyticCoefficient::scalar(1, 1, 2.0).add_cos_scalar(vec![vec![6]], 1.0), &g).unwrap();
        assert!(spectral_tail(&h) > 0.1);
    }

    #[test]
    fn reference_error_is_within_budget() {
        let coef = AnalyticCoefficient::scalar(1, 2, 3.0)
            .add_sin_scalar(vec![vec![1], vec![0]], 1.0)
            .add_sin_scalar(vec![vec![0], vec![1]], 1.0);
        let r = homogenize_coefficient(&coef, &sv(&[1.0 / 32.0, 1.0 / 512.0]), &Calibration::default(), true).unwrap();
        let m = r.measured.unwrap();
        assert!(m.l2_error < m.budget, "{m:?}");
    }
}
