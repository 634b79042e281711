//! Resolution of a single impulse through its fast-time limit system
//!
//! `gamma'(s) = g(tau, gamma(s))(s) <c, alpha(s)>`, `gamma(-1/2) = x(tau-)`,
//! integrated over `J` by fixed-step RK4. The post-jump state is `gamma(1/2)`.

use crate::error::{Error, Result};
use crate::model::{mat_vec, norm, sub, FastCurve, ImpulseAtom, SystemSpec, J_HI, J_LO};
use crate::ode::rk4_step;

pub const MIN_JUMP_STEPS: usize = 64;
pub const DEFAULT_JUMP_STEPS: usize = 256;
/// Largest endpoint change allowed when the step count is doubled.
pub const JUMP_CONVERGENCE_TOL: f64 = 1e-8;

pub(crate) struct Transit {
    pub curve: FastCurve,
    /// Fast time at which the transit left the domain box.
    pub exit: Option<f64>,
}

pub(crate) fn transit(
    system: &SystemSpec,
    tau: f64,
    x_minus: &[f64],
    atom: &ImpulseAtom,
    steps: usize,
) -> Result<Transit> {
    if steps < MIN_JUMP_STEPS {
        return Err(Error::invalid(format!(
            "jump needs at least {MIN_JUMP_STEPS} steps, got {steps}"
        )));
    }
    let n = system.dim();
    if x_minus.len() != n || atom.dim() != n {
        return Err(Error::invalid("jump state and atom dimension must match the system"));
    }
    let mut rhs = |s: f64, y: &[f64]| -> Result<Vec<f64>> {
        let g = system.g(tau, y, Some(s))?;
        Ok(mat_vec(&g, &atom.weights(s)?))
    };
    let h = (J_HI - J_LO) / steps as f64;
    let mut s_grid = Vec::with_capacity(steps + 1);
    let mut gamma = Vec::with_capacity(steps + 1);
    s_grid.push(J_LO);
    gamma.push(x_minus.to_vec());
    let mut y = x_minus.to_vec();
    for k in 0..steps {
        let s = J_LO + k as f64 * h;
        y = rk4_step(&mut rhs, s, &y, h)?;
        let s_next = if k + 1 == steps {
            J_HI
        } else {
            J_LO + (k + 1) as f64 * h
        };
        s_grid.push(s_next);
        gamma.push(y.clone());
        if !system.domain().contains(&y) {
            return Ok(Transit {
                curve: FastCurve { s: s_grid, gamma },
                exit: Some(s_next),
            });
        }
    }
    Ok(Transit {
        curve: FastCurve { s: s_grid, gamma },
        exit: None,
    })
}

/// Integrates the limit system of `atom` from `x_minus`, returning every RK4 node.
pub fn solve_limit_system(
    system: &SystemSpec,
    tau: f64,
    x_minus: &[f64],
    atom: &ImpulseAtom,
    steps: usize,
) -> Result<FastCurve> {
    let tr = transit(system, tau, x_minus, atom, steps)?;
    match tr.exit {
        Some(s) => Err(Error::JumpEscapesDomain { s }),
        None => Ok(tr.curve),
    }
}

/// Post-jump state `gamma(1/2)`, verified by a step-doubling check.
pub fn jump_endpoint(
    system: &SystemSpec,
    tau: f64,
    x_minus: &[f64],
    atom: &ImpulseAtom,
    steps: usize,
) -> Result<Vec<f64>> {
    let coarse = solve_limit_system(system, tau, x_minus, atom, steps)?;
    let fine = solve_limit_system(system, tau, x_minus, atom, 2 * steps)?;
    let end = fine.end().to_vec();
    let delta = norm(&sub(&end, coarse.end()));
    if delta > JUMP_CONVERGENCE_TOL * norm(&end).max(1.0) {
        return Err(Error::NotConverged { delta });
    }
    Ok(end)
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::model::{DomainBox, Shape};

    fn scalar_system(g: impl Fn(f64) -> f64 + Send + Sync + 'static) -> SystemSpec {
        SystemSpec::new(
            1,
            Arc::new(|_, _: &[f64]| Ok(vec![0.0])),
            Arc::new(move |_, x: &[f64], _| Ok(vec![g(x[0])])),
            DomainBox::new((-1.0, 1.0), vec![(-100.0, 100.0)]).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn exponential_jump_closed_form() {
        let sys = scalar_system(|x| x);
        let skew = Shape::from_fn("skew", |s| 1.0 + s);
        let atom = ImpulseAtom::shared(0.0, vec![1.0], skew.clone()).unwrap();
        let curve = solve_limit_system(&sys, 0.0, &[1.0], &atom, 256).unwrap();
        for (s, g) in curve.s.iter().zip(&curve.gamma) {
            // ∫_{-1/2}^s (1 + r) dr = (s + 1/2) + (s^2 - 1/4)/2
            let primitive = (s + 0.5) + 0.5 * (s * s - 0.25);
            assert!((g[0] - primitive.exp()).abs() < 1e-9, "s = {s}");
        }
        let xp = jump_endpoint(&sys, 0.0, &[2.0], &atom, 256).unwrap();
        assert!((xp[0] - 2.0 * std::f64::consts::E).abs() < 1e-8);
    }

    #[test]
    fn constant_negative_gain_is_linear_descent() {
        let sys = scalar_system(|_| -1.0);
        let atom = ImpulseAtom::shared(0.0, vec![0.5], Shape::flat()).unwrap();
        let curve = solve_limit_system(&sys, 0.0, &[1.0], &atom, 64).unwrap();
        for (s, g) in curve.s.iter().zip(&curve.gamma) {
            assert!((g[0] - (1.0 - 0.5 * (s + 0.5))).abs() < 1e-13);
        }
        assert!((curve.end()[0] - 0.5).abs() < 1e-13);
    }

    #[test]
    fn zero_gain_keeps_state() {
        let sys = scalar_system(|_| 0.0);
        let atom = ImpulseAtom::shared(0.0, vec![3.0], Shape::tent()).unwrap();
        let curve = solve_limit_system(&sys, 0.0, &[0.7], &atom, 64).unwrap();
        assert!(curve.gamma.iter().all(|g| g[0] == 0.7));
    }

    #[test]
    fn starts_exactly_at_left_limit() {
        let sys = scalar_system(|x| x);
        let atom = ImpulseAtom::shared(0.0, vec![1.0], Shape::tent()).unwrap();
        let curve = solve_limit_system(&sys, 0.0, &[0.123456789], &atom, 64).unwrap();
        assert_eq!(curve.start(), &[0.123456789]);
        assert_eq!(curve.s[0], J_LO);
        assert_eq!(*curve.s.last().unwrap(), J_HI);
    }

    #[test]
    fn escape_reports_fast_time() {
        let sys = scalar_system(|x| x);
        let atom = ImpulseAtom::shared(0.0, vec![10.0], Shape::flat()).unwrap();
        // 1 * e^{10 (s + 1/2)} crosses 100 at s = ln(100)/10 - 1/2
        match solve_limit_system(&sys, 0.0, &[1.0], &atom, 256) {
            Err(Error::JumpEscapesDomain { s }) => {
                let exact = 100f64.ln() / 10.0 - 0.5;
                assert!(s >= exact && s < exact + 2.0 / 256.0, "{s}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn too_few_steps_rejected() {
        let sys = scalar_system(|x| x);
        let atom = ImpulseAtom::shared(0.0, vec![1.0], Shape::flat()).unwrap();
        assert!(solve_limit_system(&sys, 0.0, &[1.0], &atom, 16).is_err());
    }

    #[test]
    fn non_convergence_is_reported() {
        let sys = SystemSpec::new(
            1,
            Arc::new(|_, _: &[f64]| Ok(vec![0.0])),
            Arc::new(|_, x: &[f64], _| Ok(vec![x[0] * x[0]])),
            DomainBox::new((-1.0, 1.0), vec![(-1e12, 1e12)]).unwrap(),
        )
        .unwrap();
        // gamma' = gamma^2 blows up at s = 1/2 - 1/(c x0) + ... ; close to the pole RK4 is inaccurate
        let atom = ImpulseAtom::shared(0.0, vec![0.999], Shape::flat()).unwrap();
        assert!(matches!(
            jump_endpoint(&sys, 0.0, &[1.0], &atom, 64),
            Err(Error::NotConverged { .. })
        ));
    }
}
