//! Delta-sequence approximations `omega_n(t) = n alpha(n (t - tau))` of impulse
//! controls, solved as ordinary ODEs and compared with the impulse solution.

use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{norm, sub, Density, DynamicTrajectory, ImpulseAtom, ImpulseControl, Side, SystemSpec};
use crate::solver::{solve_ivp, SolveOptions};

/// Regularized solves never ask the integrator for less than this.
const TOL_FLOOR: f64 = 1e-11;

/// Ordinary function `t -> <c, omega_n(t)>` replacing one atom.
#[derive(Debug, Clone)]
pub struct MollifiedAtom {
    pub atom: ImpulseAtom,
    pub n: usize,
}

impl MollifiedAtom {
    pub fn new(atom: ImpulseAtom, n: usize) -> Result<MollifiedAtom> {
        if n == 0 {
            return Err(Error::invalid("delta-sequence index must be at least 1"));
        }
        Ok(MollifiedAtom { atom, n })
    }

    /// Open support `(tau - 1/(2n), tau + 1/(2n))`.
    pub fn support(&self) -> (f64, f64) {
        let half = 0.5 / self.n as f64;
        (self.atom.tau - half, self.atom.tau + half)
    }

    /// Fast time `n (t - tau)` when `t` is inside the support.
    pub fn fast_time(&self, t: f64) -> Option<f64> {
        let (a, b) = self.support();
        (t > a && t < b).then_some(self.n as f64 * (t - self.atom.tau))
    }

    pub fn eval(&self, t: f64) -> Result<Vec<f64>> {
        match self.fast_time(t) {
            None => Ok(vec![0.0; self.atom.dim()]),
            Some(s) => {
                let w = self.atom.weights(s)?;
                Ok(w.into_iter().map(|v| self.n as f64 * v).collect())
            }
        }
    }
}

pub fn delta_sequence_term(atom: &ImpulseAtom, n: usize) -> Result<MollifiedAtom> {
    MollifiedAtom::new(atom.clone(), n)
}

/// Replaces every atom of `control` by its `n`-th mollification.
fn mollify(control: &ImpulseControl, n: usize, t0: f64, horizon: f64) -> Result<(Density, Vec<MollifiedAtom>)> {
    let terms = control
        .atoms()
        .iter()
        .map(|a| MollifiedAtom::new(a.clone(), n))
        .collect::<Result<Vec<_>>>()?;
    for (k, m) in terms.iter().enumerate() {
        let (a, b) = m.support();
        if a < t0 || b > horizon {
            return Err(Error::SupportOverlap(format!(
                "support ({a}, {b}) of the atom at {} leaves [{t0}, {horizon}] for n = {n}",
                m.atom.tau
            )));
        }
        if let Some(next) = terms.get(k + 1) {
            if next.support().0 < b {
                return Err(Error::SupportOverlap(format!(
                    "atoms at {} and {} overlap for n = {n}",
                    m.atom.tau, next.atom.tau
                )));
            }
        }
    }
    let dim = control.dim();
    let base = control.density().cloned();
    let mut breaks: Vec<f64> = base.as_ref().map(|d| d.breakpoints().to_vec()).unwrap_or_default();
    for m in &terms {
        let (a, b) = m.support();
        breaks.extend([a, m.atom.tau, b]);
    }
    let pieces = terms.clone();
    let density = Density::from_fn(
        dim,
        Arc::new(move |t| {
            let mut w = match &base {
                Some(d) => d.eval(t)?,
                None => vec![0.0; dim],
            };
            if let Some(m) = pieces.iter().find(|m| m.fast_time(t).is_some()) {
                for (slot, v) in w.iter_mut().zip(m.eval(t)?) {
                    *slot += v;
                }
            }
            Ok(w)
        }),
    )
    .with_breakpoints(breaks);
    Ok((density, terms))
}

/// Solves `x' = f + g (w + sum of mollified atoms)` with no jumps. Inside a
/// support the gain sees the fast time `n (t - tau)`.
pub fn regularized_solve(
    system: &SystemSpec,
    control: &ImpulseControl,
    n: usize,
    t0: f64,
    x0: &[f64],
    horizon: f64,
    opts: &SolveOptions,
) -> Result<DynamicTrajectory> {
    let (density, terms) = mollify(control, n, t0, horizon)?;
    let inner = system.clone();
    let gain_terms = terms.clone();
    let f_sys = system.clone();
    let mut classical = SystemSpec::new(
        system.dim(),
        Arc::new(move |t, x: &[f64]| f_sys.f(t, x)),
        Arc::new(move |t, x: &[f64], s| {
            let s = s.or_else(|| gain_terms.iter().find_map(|m| m.fast_time(t)));
            inner.g(t, x, s)
        }),
        system.domain().clone(),
    )?;
    if let Some(hint) = system.lipschitz() {
        classical = classical.with_lipschitz(hint);
    }
    let smooth = ImpulseControl::new(system.dim(), Some(density), vec![])?;
    let opts = SolveOptions {
        tol: (opts.tol / n as f64).max(TOL_FLOOR),
        ..opts.clone()
    };
    solve_ivp(&classical, &smooth, t0, x0, horizon, &opts)
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceRow {
    pub n: usize,
    pub t: f64,
    pub distance: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceReport {
    pub rows: Vec<ConvergenceRow>,
    /// Sup over probes, one entry per `n`.
    pub sup: Vec<(usize, f64)>,
    pub converged: bool,
}

/// Distances at or below this are treated as settled when checking monotonicity.
fn noise_floor(tol: f64) -> f64 {
    (100.0 * tol).max(1e-12)
}

/// Tabulates `|x_n(t) - x(t)|` at probe times away from every atom.
pub fn convergence_report(
    system: &SystemSpec,
    control: &ImpulseControl,
    t0: f64,
    x0: &[f64],
    horizon: f64,
    n_list: &[usize],
    probes: &[f64],
    opts: &SolveOptions,
) -> Result<ConvergenceReport> {
    if n_list.is_empty() || probes.is_empty() {
        return Err(Error::invalid("convergence study needs at least one n and one probe"));
    }
    let n_min = *n_list.iter().min().expect("nonempty");
    if n_min == 0 {
        return Err(Error::invalid("delta-sequence index must be at least 1"));
    }
    for p in probes {
        if *p < t0 || *p > horizon {
            return Err(Error::invalid(format!("probe {p} outside [{t0}, {horizon}]")));
        }
        if let Some(a) = control.atoms().iter().find(|a| (a.tau - p).abs() <= 0.5 / n_min as f64) {
            return Err(Error::invalid(format!(
                "probe {p} lies within 1/(2n) of the atom at {}",
                a.tau
            )));
        }
    }
    let opts = opts.clone().with_grid(probes.to_vec());
    let exact = solve_ivp(system, control, t0, x0, horizon, &opts)?;
    let reference = probe_values(&exact, probes)?;

    let per_n: Vec<Vec<ConvergenceRow>> = n_list
        .par_iter()
        .map(|&n| {
            let approx = regularized_solve(system, control, n, t0, x0, horizon, &opts)?;
            let values = probe_values(&approx, probes)?;
            Ok(probes
                .iter()
                .zip(values.iter().zip(&reference))
                .map(|(t, (a, b))| ConvergenceRow {
                    n,
                    t: *t,
                    distance: norm(&sub(a, b)),
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    let sup: Vec<(usize, f64)> = per_n
        .iter()
        .zip(n_list)
        .map(|(rows, n)| (*n, rows.iter().map(|r| r.distance).fold(0.0, f64::max)))
        .collect();
    let floor = noise_floor(opts.tol);
    let tail: Vec<f64> = sup.iter().rev().take(3).rev().map(|(_, d)| *d).collect();
    let decreasing = tail.windows(2).all(|w| w[1] < w[0] || w[1] <= floor);
    let converged = sup.last().map(|(_, d)| *d < 1e-3).unwrap_or(false) && decreasing;
    Ok(ConvergenceReport {
        rows: per_n.into_iter().flatten().collect(),
        sup,
        converged,
    })
}

fn probe_values(traj: &DynamicTrajectory, probes: &[f64]) -> Result<Vec<Vec<f64>>> {
    if traj.exit.is_some() {
        return Err(Error::invalid(format!("trajectory left the domain ({:?})", traj.exit)));
    }
    probes
        .iter()
        .map(|t| {
            traj.value_at(*t)
                .map(<[f64]>::to_vec)
                .ok_or_else(|| Error::invalid(format!("no sample at probe {t}")))
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct JumpRecovery {
    pub tau: f64,
    /// `x_n(tau + 1/(2n)) - x_n(tau - 1/(2n))`.
    pub regularized: Vec<f64>,
    /// `gamma(1/2) - gamma(-1/2)`.
    pub impulsive: Vec<f64>,
    pub error: f64,
}

/// Compares the increment of the mollified solution across each support with
/// the jump of the impulse solution.
pub fn jump_recovery(
    system: &SystemSpec,
    control: &ImpulseControl,
    n: usize,
    t0: f64,
    x0: &[f64],
    horizon: f64,
    opts: &SolveOptions,
) -> Result<Vec<JumpRecovery>> {
    let ends: Vec<f64> = control
        .atoms()
        .iter()
        .flat_map(|a| {
            let half = 0.5 / n as f64;
            [a.tau - half, a.tau + half]
        })
        .collect();
    let mut grid = opts.grid.clone();
    grid.extend(&ends);
    let opts = opts.clone().with_grid(grid);
    let approx = regularized_solve(system, control, n, t0, x0, horizon, &opts)?;
    let exact = solve_ivp(system, control, t0, x0, horizon, &opts)?;
    control
        .atoms()
        .iter()
        .map(|a| {
            let half = 0.5 / n as f64;
            let at = |t: f64| {
                approx
                    .value_at(t)
                    .map(<[f64]>::to_vec)
                    .ok_or_else(|| Error::invalid(format!("no sample at {t}")))
            };
            let regularized = sub(&at(a.tau + half)?, &at(a.tau - half)?);
            let rec = exact
                .jump_at(a.tau)
                .ok_or_else(|| Error::invalid(format!("impulse solution did not reach the atom at {}", a.tau)))?;
            let impulsive = sub(rec.curve.end(), rec.curve.start());
            let error = norm(&sub(&regularized, &impulsive));
            debug_assert!(exact.sample(a.tau, Side::Plus).is_some());
            Ok(JumpRecovery {
                tau: a.tau,
                regularized,
                impulsive,
                error,
            })
        })
        .collect()
}
