//! Quadrature rules shared by shapes, controls and the representation audit.

use crate::error::Result;

/// Composite trapezoid rule on uniformly spaced samples over `[a, b]`.
pub fn trapezoid(samples: &[f64], a: f64, b: f64) -> f64 {
    let m = samples.len();
    if m < 2 {
        return 0.0;
    }
    let h = (b - a) / (m - 1) as f64;
    let inner: f64 = samples[1..m - 1].iter().sum();
    h * (0.5 * (samples[0] + samples[m - 1]) + inner)
}

/// Adaptive Simpson quadrature with absolute tolerance `tol`.
pub fn adaptive_simpson(mut f: impl FnMut(f64) -> Result<f64>, a: f64, b: f64, tol: f64) -> Result<f64> {
    if a == b {
        return Ok(0.0);
    }
    let fa = f(a)?;
    let fb = f(b)?;
    let m = 0.5 * (a + b);
    let fm = f(m)?;
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    simpson_rec(&mut f, a, b, fa, fm, fb, whole, tol, 50)
}

#[allow(clippy::too_many_arguments)]
fn simpson_rec(
    f: &mut impl FnMut(f64) -> Result<f64>,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> Result<f64> {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm)?;
    let frm = f(rm)?;
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        return Ok(left + right + delta / 15.0);
    }
    Ok(simpson_rec(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)?
        + simpson_rec(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)?)
}

/// Three-point Gauss–Legendre nodes and weights on `[-1, 1]`.
pub(crate) const GAUSS3: [(f64, f64); 3] = [
    (-0.774_596_669_241_483_4, 5.0 / 9.0),
    (0.0, 8.0 / 9.0),
    (0.774_596_669_241_483_4, 5.0 / 9.0),
];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trapezoid_is_exact_for_linear() {
        let xs: Vec<f64> = (0..17).map(|i| -0.5 + i as f64 / 16.0).map(|s| 1.0 + s).collect();
        assert!((trapezoid(&xs, -0.5, 0.5) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn simpson_handles_kinks() {
        let v = adaptive_simpson(|s: f64| Ok(2.0 - 4.0 * s.abs()), -0.5, 0.5, 1e-12).unwrap();
        assert!((v - 1.0).abs() < 1e-12);
        let v = adaptive_simpson(|s: f64| Ok(s.exp()), 0.0, 1.0, 1e-12).unwrap();
        assert!((v - (std::f64::consts::E - 1.0)).abs() < 1e-11);
    }
}
