use serde::{Deserialize, Serialize};

/// Calibration constants and numerical knobs shared by all modules.
///
/// The separation constants are existence-only in the theory; the defaults
/// below are calibrations and can be swept with the `calibrate` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Calibration {
    /// Separation constants `c_j`, one per gap `j = 2..=n` (index `j - 2`);
    /// the last entry is reused for further gaps.
    pub c_sep: Vec<f64>,
    /// Exponent constant `c` in `tau^2 = exp(-c min_j eps_{j-1}/eps_j)` and in the error budget.
    pub c_tau: f64,
    /// `k_j = floor(gamma eps_{j-1}/eps_j)`.
    pub gamma: f64,
    /// Upper bound on truncation orders.
    pub k_cap: usize,
    /// Weak separation constant for flux correctors: `eps_{j+1} <= ctilde_inv eps_j`.
    pub ctilde_inv: f64,
    /// Derivative depth recorded in the truncation plan.
    pub ell0: usize,
    /// Prefactor `C_0` of the breakpoint inequality.
    pub c0_break: f64,
    /// Relative residual tolerance of the cell solver.
    pub tol: f64,
    pub max_iter: usize,
    /// 3/2-rule dealiasing of the variable-coefficient products.
    pub dealias: bool,
    /// Explicit regularization overriding the plan default.
    pub tau: Option<f64>,
    /// Explicit truncation order for every gap.
    pub k: Option<usize>,
    /// Resolution per block of the lifted grids.
    pub resolution: Option<usize>,
}

impl Default for Calibration {
    fn default() -> Self {
        Calibration {
            c_sep: vec![0.1],
            c_tau: 0.5,
            gamma: 1.0,
            k_cap: 12,
            ctilde_inv: 0.5,
            ell0: 4,
            c0_break: 1.0,
            tol: 1e-10,
            max_iter: 1000,
            dealias: true,
            tau: None,
            k: None,
            resolution: None,
        }
    }
}

impl Calibration {
    /// Separation constant of gap `j` (1-based scale index, `j >= 2`).
    pub fn c_j(&self, j: usize) -> f64 {
        let i = j.saturating_sub(2);
        *self
            .c_sep
            .get(i)
            .or(self.c_sep.last())
            .unwrap_or(&0.1)
    }

    pub fn with_c_sep(mut self, c: f64) -> Self {
        self.c_sep = vec![c];
        self
    }

    pub fn with_tau(mut self, tau: f64) -> Self {
        self.tau = Some(tau);
        self
    }

    pub fn with_k(mut self, k: usize) -> Self {
        self.k = Some(k);
        self
    }
}
