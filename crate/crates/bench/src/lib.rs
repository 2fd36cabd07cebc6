//! Fixtures shared by the solver benchmarks.

use homoscale::torus_field::build_field;
use homoscale::{AnalyticCoefficient, GridSpec, TorusField};

/// `3 + sin 2 pi y_1 + sin 2 pi y_2` on `T^{1 x 2}` at `res` points per block.
pub fn two_scale_1d(res: usize) -> TorusField {
    let coef = AnalyticCoefficient::scalar(1, 2, 3.0)
        .add_sin_scalar(vec![vec![1], vec![0]], 1.0)
        .add_sin_scalar(vec![vec![0], vec![1]], 1.0);
    build_field(&coef, &GridSpec::uniform(1, 2, res).unwrap()).unwrap()
}

/// A two-scale coefficient on `T^{2 x 2}` with a genuine cross-scale interaction.
pub fn two_scale_2d(res: usize) -> TorusField {
    let coef = AnalyticCoefficient::scalar(2, 2, 3.0)
        .add_sin_scalar(vec![vec![1, 0], vec![0, 0]], 1.0)
        .add_cos_scalar(vec![vec![0, 0], vec![0, 1]], 1.0)
        .add_sin_sin_scalar(vec![vec![0, 1], vec![0, 0]], vec![vec![0, 0], vec![1, 0]], 0.8);
    build_field(&coef, &GridSpec::uniform(2, 2, res).unwrap()).unwrap()
}

/// `3 + sin 2 pi y` on `T^{2 x 1}`.
pub fn one_scale_2d(res: usize) -> TorusField {
    let coef = AnalyticCoefficient::scalar(2, 1, 3.0).add_sin_scalar(vec![vec![1, 1]], 1.0);
    build_field(&coef, &GridSpec::uniform(2, 1, res).unwrap()).unwrap()
}
