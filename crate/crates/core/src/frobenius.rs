//! Lie brackets of the gain columns and the sampled Frobenius condition
//! `[g^m, g^l] = 0`, which makes jumps independent of the impulse shape.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::expr::DEFAULT_GRAD_STEP;
use crate::jump::jump_endpoint;
use crate::model::{norm, sub, DynamicTrajectory, ImpulseAtom, Shape, SystemSpec};

pub const DEFAULT_FROBENIUS_TOL: f64 = 1e-5;
pub const MIN_FROBENIUS_SAMPLES: usize = 100;
/// Fast times at which an `s`-dependent gain is also checked.
const S_GRID: [f64; 5] = [-0.5, -0.25, 0.0, 0.25, 0.5];

/// Central-difference Jacobian of column `m`, row-major.
pub fn column_jacobian(system: &SystemSpec, m: usize, t: f64, x: &[f64], s: Option<f64>, h: f64) -> Result<Vec<f64>> {
    let n = system.dim();
    if m >= n {
        return Err(Error::invalid(format!("column {m} out of range for dimension {n}")));
    }
    let mut jac = vec![0.0; n * n];
    let mut probe = x.to_vec();
    for j in 0..n {
        probe[j] = x[j] + h;
        let plus = system.g_column(m, t, &probe, s)?;
        probe[j] = x[j] - h;
        let minus = system.g_column(m, t, &probe, s)?;
        probe[j] = x[j];
        for i in 0..n {
            jac[i * n + j] = (plus[i] - minus[i]) / (2.0 * h);
        }
    }
    Ok(jac)
}

/// `[g^m, g^l](x) = (dg^l/dx) g^m - (dg^m/dx) g^l`.
pub fn lie_bracket(
    system: &SystemSpec,
    m: usize,
    l: usize,
    t: f64,
    x: &[f64],
    s: Option<f64>,
    h: f64,
) -> Result<Vec<f64>> {
    let n = system.dim();
    if m == l {
        if m >= n {
            return Err(Error::invalid(format!("column {m} out of range for dimension {n}")));
        }
        return Ok(vec![0.0; n]);
    }
    let jm = column_jacobian(system, m, t, x, s, h)?;
    let jl = column_jacobian(system, l, t, x, s, h)?;
    let gm = system.g_column(m, t, x, s)?;
    let gl = system.g_column(l, t, x, s)?;
    Ok((0..n)
        .map(|i| (0..n).map(|j| jl[i * n + j] * gm[j] - jm[i * n + j] * gl[j]).sum())
        .collect())
}

#[derive(Debug, Clone, Serialize)]
pub struct FrobeniusReport {
    pub pass: bool,
    pub tol: f64,
    pub max_norm: f64,
    /// `(t, x)` of the largest bracket, with the fast time when `g` depends on it.
    pub argmax_point: Option<BracketPoint>,
    pub samples: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct BracketPoint {
    pub t: f64,
    pub x: Vec<f64>,
    pub s: Option<f64>,
    pub columns: (usize, usize),
}

fn radical_inverse(mut k: usize, base: usize) -> f64 {
    let inv = 1.0 / base as f64;
    let mut out = 0.0;
    let mut f = inv;
    while k > 0 {
        out += f * (k % base) as f64;
        k /= base;
        f *= inv;
    }
    out
}

const PRIMES: [usize; 16] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53];

/// Point `k` of the Halton sequence in `[0, 1)^dim`.
pub(crate) fn halton(k: usize, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|d| radical_inverse(k + 1, PRIMES[d % PRIMES.len()]))
        .collect()
}

fn largest_bracket(system: &SystemSpec, t: f64, x: &[f64], h: f64) -> Result<(f64, BracketPoint)> {
    let n = system.dim();
    let s_values: Vec<Option<f64>> = if system.gain_uses_fast_time() {
        S_GRID.iter().map(|s| Some(*s)).collect()
    } else {
        vec![None]
    };
    let mut best = (
        0.0,
        BracketPoint {
            t,
            x: x.to_vec(),
            s: s_values[0],
            columns: (0, 0),
        },
    );
    for s in s_values {
        for m in 0..n {
            for l in m + 1..n {
                let b = norm(&lie_bracket(system, m, l, t, x, s, h)?);
                if b > best.0 {
                    best = (
                        b,
                        BracketPoint {
                            t,
                            x: x.to_vec(),
                            s,
                            columns: (m, l),
                        },
                    );
                }
            }
        }
    }
    Ok(best)
}

/// Checks the bracket condition at explicit `(t, x)` points.
pub fn frobenius_check_at(system: &SystemSpec, points: &[(f64, Vec<f64>)], tol: f64) -> Result<FrobeniusReport> {
    let h = DEFAULT_GRAD_STEP;
    let results = points
        .par_iter()
        .map(|(t, x)| largest_bracket(system, *t, x, h))
        .collect::<Result<Vec<_>>>()?;
    let mut max_norm = 0.0;
    let mut argmax = None;
    for (v, p) in results {
        if argmax.is_none() || v > max_norm {
            max_norm = v;
            argmax = Some(p);
        }
    }
    Ok(FrobeniusReport {
        pass: max_norm <= tol,
        tol,
        max_norm,
        argmax_point: argmax,
        samples: points.len(),
    })
}

/// Samples `samples` Halton points of the domain (kept `2h` away from its faces).
pub fn frobenius_check(system: &SystemSpec, samples: usize, tol: f64) -> Result<FrobeniusReport> {
    if samples < MIN_FROBENIUS_SAMPLES {
        return Err(Error::invalid(format!(
            "frobenius check needs at least {MIN_FROBENIUS_SAMPLES} samples, got {samples}"
        )));
    }
    let dom = system.domain();
    let inset = 2.0 * DEFAULT_GRAD_STEP;
    let points: Vec<(f64, Vec<f64>)> = (0..samples)
        .map(|k| {
            let u = halton(k, system.dim() + 1);
            let t = dom.t.0 + (dom.t.1 - dom.t.0) * u[0];
            let x = dom
                .x
                .iter()
                .zip(&u[1..])
                .map(|((lo, hi), u)| lo + inset + (hi - lo - 2.0 * inset) * u)
                .collect();
            (t, x)
        })
        .collect();
    frobenius_check_at(system, &points, tol)
}

/// All `(tau, gamma(s))` states visited by the fast transits of `traj`.
pub fn fast_curve_tube(traj: &DynamicTrajectory) -> Vec<(f64, Vec<f64>)> {
    traj.jumps
        .iter()
        .flat_map(|j| j.curve.gamma.iter().map(move |x| (j.tau, x.clone())))
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct ShapeSensitivity {
    pub max_difference: f64,
    /// Labels of the shapes (joined per component) and their post-jump states.
    pub endpoints: Vec<(String, Vec<f64>)>,
    pub worst_pair: (usize, usize),
}

/// Post-jump states for each member of `family` (one shape per component)
/// and their largest pairwise distance.
pub fn shape_sensitivity(
    system: &SystemSpec,
    tau: f64,
    x_minus: &[f64],
    c: &[f64],
    family: &[Vec<Shape>],
    steps: usize,
) -> Result<ShapeSensitivity> {
    if family.len() < 2 {
        return Err(Error::invalid("shape sensitivity needs at least two shapes"));
    }
    let endpoints = family
        .par_iter()
        .map(|shapes| {
            let atom = ImpulseAtom::new(tau, c.to_vec(), shapes.clone())?;
            let label = shapes.iter().map(Shape::label).collect::<Vec<_>>().join(",");
            Ok((label, jump_endpoint(system, tau, x_minus, &atom, steps)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut max_difference = 0.0;
    let mut worst_pair = (0, 1);
    for a in 0..endpoints.len() {
        for b in a + 1..endpoints.len() {
            let d = norm(&sub(&endpoints[a].1, &endpoints[b].1));
            if d > max_difference {
                max_difference = d;
                worst_pair = (a, b);
            }
        }
    }
    Ok(ShapeSensitivity {
        max_difference,
        endpoints,
        worst_pair,
    })
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::model::DomainBox;

    fn noncommuting() -> SystemSpec {
        SystemSpec::new(
            2,
            Arc::new(|_, _: &[f64]| Ok(vec![0.0, 0.0])),
            Arc::new(|_, x: &[f64], _| Ok(vec![1.0, 0.0, 0.0, x[0]])),
            DomainBox::new((-1.0, 1.0), vec![(-5.0, 5.0), (-5.0, 5.0)]).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn halton_is_in_unit_cube_and_spread() {
        let pts: Vec<Vec<f64>> = (0..64).map(|k| halton(k, 3)).collect();
        assert!(pts.iter().flatten().all(|u| (0.0..1.0).contains(u)));
        assert_eq!(halton(0, 2), vec![0.5, 1.0 / 3.0]);
    }

    #[test]
    fn jacobian_of_shear_column() {
        let j = column_jacobian(&noncommuting(), 1, 0.0, &[0.3, -0.2], None, 1e-6).unwrap();
        let expected = [0.0, 0.0, 1.0, 0.0];
        for (a, b) in j.iter().zip(expected) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn bracket_of_noncommuting_columns() {
        let sys = noncommuting();
        let b = lie_bracket(&sys, 0, 1, 0.0, &[0.7, 1.1], None, 1e-6).unwrap();
        assert!(b[0].abs() < 1e-5 && (b[1] - 1.0).abs() < 1e-5, "{b:?}");
        let r = lie_bracket(&sys, 1, 0, 0.0, &[0.7, 1.1], None, 1e-6).unwrap();
        assert!((b[1] + r[1]).abs() < 1e-9);
        assert_eq!(
            lie_bracket(&sys, 1, 1, 0.0, &[0.7, 1.1], None, 1e-6).unwrap(),
            vec![0.0, 0.0]
        );
    }

    #[test]
    fn check_fails_everywhere_for_shear() {
        let rep = frobenius_check(&noncommuting(), 128, DEFAULT_FROBENIUS_TOL).unwrap();
        assert!(!rep.pass);
        assert!((rep.max_norm - 1.0).abs() < 1e-5);
        assert!(frobenius_check(&noncommuting(), 50, 1e-5).is_err());
    }

    #[test]
    fn front_and_back_loading_differ() {
        let sys = noncommuting();
        let family = vec![vec![Shape::front(), Shape::back()], vec![Shape::back(), Shape::front()]];
        let rep = shape_sensitivity(&sys, 0.0, &[0.0, 0.0], &[1.0, 1.0], &family, 256).unwrap();
        // x2 gains ∫(2u - u^2) 2u du = 5/6 versus ∫u^2 (2 - 2u) du = 1/6
        assert!((rep.endpoints[0].1[1] - 5.0 / 6.0).abs() < 1e-8, "{rep:?}");
        assert!((rep.endpoints[1].1[1] - 1.0 / 6.0).abs() < 1e-8);
        assert!((rep.max_difference - 2.0 / 3.0).abs() < 1e-8);
    }
}
