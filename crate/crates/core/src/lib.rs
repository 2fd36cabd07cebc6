//! Quantitative multiscale periodic homogenization on the lifted torus.
//!
//! The crate builds multiscale correctors for coefficients `A(x/eps_1, ..., x/eps_n)`
//! by a recursive two-scale expansion on `T^{d x n}`, the associated flux
//! correctors, the effective matrices, fine-scale reference solvers and the
//! end-to-end grouping pipeline.

pub mod bvp;
pub mod cell_solver;
pub mod config;
pub mod corrector;
pub mod effective;
pub mod error;
pub mod flux;
pub mod pipeline;
pub mod spectral;
pub mod torus_field;

pub use config::Calibration;
pub use corrector::{CorrectorSet, TruncationPlan};
pub use effective::EffectiveReport;
pub use flux::FluxSet;
pub use error::{Error, Result};
pub use pipeline::{PipelineReport, ScaleGrouping};
pub use torus_field::{AnalyticCoefficient, GridSpec, ScaleVector, TorusField};
