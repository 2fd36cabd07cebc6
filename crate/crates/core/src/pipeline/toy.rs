//! Exact averaging of `f(x / (beta eps)) g(x / eps)` over `(0, 1)` for band-limited `f, g`.

use std::f64::consts::PI;

use num_complex::Complex64;

/// Fourier mode `coef exp(2 pi i k y)`.
pub type Mode = (i64, Complex64);

/// `int_0^1 exp(2 pi i w x) dx`.
pub fn exp_integral(w: f64) -> Complex64 {
    let t = 2.0 * PI * w;
    if t == 0.0 {
        return Complex64::new(1.0, 0.0);
    }
    let h = (0.5 * t).sin();
    Complex64::new(t.sin() / t, 2.0 * h * h / t)
}

fn mean(modes: &[Mode]) -> Complex64 {
    modes.iter().filter(|(k, _)| *k == 0).map(|(_, c)| *c).sum()
}

/// `rho(eps, beta) = |int_0^1 f(x/(beta eps)) g(x/eps) dx - mean(f) mean(g)|`, summed modewise
/// with each `int_0^1 exp(2 pi i w x) dx` in closed form.
pub fn toy_averaging(f_modes: &[Mode], g_modes: &[Mode], eps: f64, beta: f64) -> f64 {
    let mut s = Complex64::new(0.0, 0.0);
    for &(j, fj) in f_modes {
        for &(m, gm) in g_modes {
            let w = j as f64 / (beta * eps) + m as f64 / eps;
            s += fj * gm * exp_integral(w);
        }
    }
    (s - mean(f_modes) * mean(g_modes)).norm()
}
