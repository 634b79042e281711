//! Avoidance of encounters: how long a controlled path stays in `M`, and
//! exhaustive searches for admissible controls that keep it there longest.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{
    check_admissible, ConstraintSet, Density, DomainExit, ImpulseAtom, ImpulseControl, Shape, SlowSample, SystemSpec,
};
use crate::solver::{solve_ivp, SolveOptions};
use crate::viability::trajectory_viability_audit;

/// Constraint values up to this count as inside `M`.
pub const ETA_TOL: f64 = 1e-9;
/// Width of the bracket left by the exit-time bisection.
pub const EXIT_TIME_TOL: f64 = 1e-6;
/// Atoms at the initial time count toward the budget.
const BUDGET_LEAD: f64 = 1e-9;
pub const MAX_SEARCH_ATOMS: usize = 3;
pub const MAX_REGULAR_BINS: usize = 8;

#[derive(Debug, Clone, Serialize)]
pub struct ViabilityTime {
    /// End of the viability interval `(t0, T)`.
    pub t: f64,
    pub survived: bool,
    pub exit: Option<DomainExit>,
}

/// Largest `T <= t_max` such that the solution (fast transits included) stays in `M` on `(t0, T)`.
pub fn viability_time(
    system: &SystemSpec,
    control: &ImpulseControl,
    t0: f64,
    x0: &[f64],
    m: &ConstraintSet,
    t_max: f64,
    opts: &SolveOptions,
) -> Result<ViabilityTime> {
    if !m.contains(x0, ETA_TOL)? {
        return Err(Error::invalid(format!("initial state {x0:?} is outside M")));
    }
    let traj = solve_ivp(system, control, t0, x0, t_max, opts)?;
    let audit = trajectory_viability_audit(&traj, m, ETA_TOL)?;
    let exit_t = match audit.exit {
        None => {
            return Ok(ViabilityTime {
                t: t_max,
                survived: true,
                exit: None,
            })
        }
        Some(DomainExit::Fast { tau, s }) => {
            return Ok(ViabilityTime {
                t: tau,
                survived: false,
                exit: Some(DomainExit::Fast { tau, s }),
            })
        }
        Some(DomainExit::Slow { t }) => t,
    };
    // last sample before the violation; atoms never lie strictly between it and the exit
    let good: &SlowSample = traj
        .slow
        .iter()
        .take_while(|p| p.t < exit_t)
        .last()
        .unwrap_or(&traj.slow[0]);
    let smooth = ImpulseControl::new(control.dim(), control.density().cloned(), vec![])?;
    let (mut lo, mut hi) = (good.t, exit_t);
    while hi - lo > EXIT_TIME_TOL {
        let mid = 0.5 * (lo + hi);
        let piece = solve_ivp(system, &smooth, good.t, &good.x, mid, opts)?;
        if trajectory_viability_audit(&piece, m, ETA_TOL)?.viable {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let t = 0.5 * (lo + hi);
    Ok(ViabilityTime {
        t,
        survived: false,
        exit: Some(DomainExit::Slow { t }),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct Candidate {
    pub taus: Vec<f64>,
    pub cs: Vec<Vec<f64>>,
    #[serde(rename = "T")]
    pub t: f64,
    pub survived: bool,
}

impl Candidate {
    fn total_magnitude(&self) -> f64 {
        self.cs
            .iter()
            .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
            .sum()
    }
}

/// Larger `T`, then earlier atoms, then smaller total `|c|`.
fn rank(a: &Candidate, b: &Candidate) -> Ordering {
    b.t.total_cmp(&a.t)
        .then_with(|| {
            a.taus
                .iter()
                .zip(&b.taus)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or_else(|| a.taus.len().cmp(&b.taus.len()))
        })
        .then_with(|| a.total_magnitude().total_cmp(&b.total_magnitude()))
}

#[derive(Debug, Clone, Serialize)]
pub struct SearchResult {
    pub best: Candidate,
    /// Every admissible candidate, the zero control first.
    pub table: Vec<Candidate>,
    pub rejected: usize,
}

/// The avoidance problem as posed: a system, a start, the set to stay in and a horizon.
#[derive(Clone, Copy)]
pub struct AvoidanceProblem<'a> {
    pub system: &'a SystemSpec,
    pub t0: f64,
    pub x0: &'a [f64],
    pub m: &'a ConstraintSet,
    pub budget: f64,
    pub t_max: f64,
    pub opts: &'a SolveOptions,
}

impl AvoidanceProblem<'_> {
    fn evaluate(&self, control: &ImpulseControl) -> Result<Option<ViabilityTime>> {
        let adm = check_admissible(control, self.budget, (self.t0 - BUDGET_LEAD, self.t_max))?;
        if !adm.admissible {
            return Ok(None);
        }
        viability_time(self.system, control, self.t0, self.x0, self.m, self.t_max, self.opts).map(Some)
    }

    fn search(&self, plans: Vec<Vec<(f64, Vec<f64>)>>, shape: &Shape) -> Result<SearchResult> {
        if !(self.budget >= 0.0) {
            return Err(Error::EmptyAdmissibleGrid);
        }
        let n = self.system.dim();
        let mut plans = plans;
        plans.insert(0, Vec::new());
        let evaluated = plans
            .par_iter()
            .map(|plan| {
                let atoms = plan
                    .iter()
                    .map(|(tau, c)| ImpulseAtom::shared(*tau, c.clone(), shape.clone()))
                    .collect::<Result<Vec<_>>>();
                let Ok(atoms) = atoms else { return Ok(None) };
                let control = ImpulseControl::atoms_only(n, atoms)?;
                Ok(self.evaluate(&control)?.map(|vt| Candidate {
                    taus: plan.iter().map(|(t, _)| *t).collect(),
                    cs: plan.iter().map(|(_, c)| c.clone()).collect(),
                    t: vt.t,
                    survived: vt.survived,
                }))
            })
            .collect::<Result<Vec<_>>>()?;
        let rejected = evaluated.iter().filter(|c| c.is_none()).count();
        let table: Vec<Candidate> = evaluated.into_iter().flatten().collect();
        let best = table
            .iter()
            .min_by(|a, b| rank(a, b))
            .cloned()
            .ok_or(Error::EmptyAdmissibleGrid)?;
        Ok(SearchResult { best, table, rejected })
    }
}

fn check_grids(taus: &[f64], cs: &[Vec<f64>]) -> Result<()> {
    if taus.is_empty() || cs.is_empty() {
        return Err(Error::EmptyAdmissibleGrid);
    }
    Ok(())
}

/// Exhaustive search over single atoms `c delta_tau` with the given shape.
/// The zero control is always evaluated as a baseline.
pub fn search_single_atom(
    problem: &AvoidanceProblem<'_>,
    tau_grid: &[f64],
    c_grid: &[Vec<f64>],
    shape: &Shape,
) -> Result<SearchResult> {
    check_grids(tau_grid, c_grid)?;
    let plans = tau_grid
        .iter()
        .filter(|t| **t >= problem.t0 && **t < problem.t_max)
        .flat_map(|tau| c_grid.iter().map(move |c| vec![(*tau, c.clone())]))
        .collect();
    problem.search(plans, shape)
}

/// Exhaustive search over up to `atoms` atoms at increasing grid times.
pub fn search_multi_atom(
    problem: &AvoidanceProblem<'_>,
    tau_grid: &[f64],
    c_grid: &[Vec<f64>],
    shape: &Shape,
    atoms: usize,
) -> Result<SearchResult> {
    check_grids(tau_grid, c_grid)?;
    if atoms == 0 || atoms > MAX_SEARCH_ATOMS {
        return Err(Error::invalid(format!(
            "multi-atom search supports 1 to {MAX_SEARCH_ATOMS} atoms"
        )));
    }
    let mut taus: Vec<f64> = tau_grid
        .iter()
        .copied()
        .filter(|t| *t >= problem.t0 && *t < problem.t_max)
        .collect();
    taus.sort_by(f64::total_cmp);
    taus.dedup();
    let mut plans: Vec<Vec<(f64, Vec<f64>)>> = Vec::new();
    let mut partial: Vec<Vec<(f64, Vec<f64>)>> = vec![Vec::new()];
    for _ in 0..atoms {
        let mut next = Vec::new();
        for plan in &partial {
            let after = plan.last().map(|(t, _)| *t);
            for tau in taus.iter().filter(|t| after.is_none_or(|a| **t > a)) {
                for c in c_grid {
                    let mut p = plan.clone();
                    p.push((*tau, c.clone()));
                    next.push(p);
                }
            }
        }
        plans.extend(next.iter().cloned());
        partial = next;
    }
    problem.search(plans, shape)
}

#[derive(Debug, Clone, Serialize)]
pub struct RegularCandidate {
    /// Mass placed in each bin.
    pub masses: Vec<f64>,
    #[serde(rename = "T")]
    pub t: f64,
    pub survived: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct RegularSearch {
    pub best: RegularCandidate,
    pub table: Vec<RegularCandidate>,
}

/// All ways to put at most `total` indistinguishable quanta into `bins` bins.
fn compositions(bins: usize, total: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = vec![0; bins];
    fn rec(k: usize, left: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if k == cur.len() {
            out.push(cur.clone());
            return;
        }
        for q in 0..=left {
            cur[k] = q;
            rec(k + 1, left - q, cur, out);
        }
        cur[k] = 0;
    }
    rec(0, total, &mut cur, &mut out);
    out
}

/// Piecewise-constant densities on `bins` equal bins of `window`, pointing
/// along `direction`, with bin masses on a simplex grid of `quanta` steps of
/// `budget / quanta`.
pub fn search_regular_controls(
    problem: &AvoidanceProblem<'_>,
    bins: usize,
    window: (f64, f64),
    quanta: usize,
    direction: &[f64],
) -> Result<RegularSearch> {
    if bins == 0 || bins > MAX_REGULAR_BINS {
        return Err(Error::invalid(format!(
            "regular search supports 1 to {MAX_REGULAR_BINS} bins"
        )));
    }
    if quanta == 0 || direction.len() != problem.system.dim() || !(window.0 < window.1) {
        return Err(Error::invalid(
            "regular search needs quanta >= 1, a direction of dimension n and a nonempty window",
        ));
    }
    let width = (window.1 - window.0) / bins as f64;
    let edges: Vec<f64> = (0..=bins).map(|k| window.0 + width * k as f64).collect();
    let unit = problem.budget / quanta as f64;
    let grid = compositions(bins, quanta);
    let evaluated = grid
        .par_iter()
        .map(|q| {
            let masses: Vec<f64> = q.iter().map(|k| *k as f64 * unit).collect();
            let control = if masses.iter().all(|m| *m == 0.0) {
                ImpulseControl::zero(problem.system.dim())
            } else {
                let values = masses
                    .iter()
                    .map(|m| direction.iter().map(|d| d * m / width).collect())
                    .collect();
                ImpulseControl::new(
                    problem.system.dim(),
                    Some(Density::piecewise_constant(edges.clone(), values)?),
                    vec![],
                )?
            };
            Ok(problem.evaluate(&control)?.map(|vt| RegularCandidate {
                masses,
                t: vt.t,
                survived: vt.survived,
            }))
        })
        .collect::<Result<Vec<_>>>()?;
    let table: Vec<RegularCandidate> = evaluated.into_iter().flatten().collect();
    let best = table
        .iter()
        .min_by(|a, b| {
            b.t.total_cmp(&a.t)
                .then_with(|| a.masses.iter().sum::<f64>().total_cmp(&b.masses.iter().sum::<f64>()))
        })
        .cloned()
        .ok_or(Error::EmptyAdmissibleGrid)?;
    Ok(RegularSearch { best, table })
}

/// Component `component` of `x(t_end-)` under a single atom (or none when `c = 0`).
pub fn terminal_value(
    system: &SystemSpec,
    t0: f64,
    x0: &[f64],
    t_end: f64,
    component: usize,
    atom: Option<&ImpulseAtom>,
    opts: &SolveOptions,
) -> Result<f64> {
    let control = ImpulseControl::atoms_only(system.dim(), atom.into_iter().cloned().collect())?;
    let traj = solve_ivp(system, &control, t0, x0, t_end, opts)?;
    if let Some(exit) = &traj.exit {
        return Err(Error::invalid(format!(
            "trajectory left the domain before {t_end} ({exit:?})"
        )));
    }
    traj.last()
        .x
        .get(component)
        .copied()
        .ok_or_else(|| Error::invalid(format!("component {component} out of range")))
}

#[derive(Debug, Clone, Serialize)]
pub struct ReachRow {
    pub tau: f64,
    /// Smallest coefficient reaching the target from this atom time, if any.
    pub c: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReachResult {
    pub tau: f64,
    pub c: f64,
    pub rows: Vec<ReachRow>,
}

/// Smallest single-atom coefficient `c` (along `direction`) such that
/// component `component` of `x(t_end-)` reaches `target`, per grid time,
/// by bisection on `[0, c_max]`. Assumes the terminal value grows with `c`.
#[allow(clippy::too_many_arguments)]
pub fn minimal_reaching_impulse(
    system: &SystemSpec,
    t0: f64,
    x0: &[f64],
    t_end: f64,
    component: usize,
    target: f64,
    tau_grid: &[f64],
    c_max: f64,
    direction: &[f64],
    shape: &Shape,
    opts: &SolveOptions,
) -> Result<ReachResult> {
    let value = |tau: f64, c: f64| -> Result<f64> {
        if c == 0.0 {
            return terminal_value(system, t0, x0, t_end, component, None, opts);
        }
        let atom = ImpulseAtom::shared(tau, direction.iter().map(|d| d * c).collect(), shape.clone())?;
        terminal_value(system, t0, x0, t_end, component, Some(&atom), opts)
    };
    let rows = tau_grid
        .par_iter()
        .filter(|t| **t >= t0 && **t < t_end)
        .map(|&tau| {
            if value(tau, 0.0)? >= target {
                return Ok(ReachRow { tau, c: Some(0.0) });
            }
            if value(tau, c_max)? < target {
                return Ok(ReachRow { tau, c: None });
            }
            let (mut lo, mut hi) = (0.0, c_max);
            while hi - lo > 1e-12 * c_max.max(1.0) {
                let mid = 0.5 * (lo + hi);
                if value(tau, mid)? >= target {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            Ok(ReachRow { tau, c: Some(hi) })
        })
        .collect::<Result<Vec<_>>>()?;
    let best = rows
        .iter()
        .filter_map(|r| r.c.map(|c| (r.tau, c)))
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.total_cmp(&b.0)))
        .ok_or(Error::EmptyAdmissibleGrid)?;
    Ok(ReachResult {
        tau: best.0,
        c: best.1,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::expr::Expr;
    use crate::model::DomainBox;

    fn escape_system() -> SystemSpec {
        SystemSpec::new(
            1,
            Arc::new(|_, x: &[f64]| Ok(vec![x[0]])),
            Arc::new(|_, _: &[f64], _| Ok(vec![-1.0])),
            DomainBox::new((-1.0, 3.0), vec![(-10.0, 10.0)]).unwrap(),
        )
        .unwrap()
    }

    fn band() -> ConstraintSet {
        ConstraintSet::from_exprs(
            1,
            vec![
                (Expr::parse("x1 - 1", 1).unwrap(), None),
                (Expr::parse("-1 - x1", 1).unwrap(), None),
            ],
        )
        .unwrap()
    }

    #[test]
    fn half_kick_survives_ln2() {
        let v =
            ImpulseControl::atoms_only(1, vec![ImpulseAtom::shared(0.0, vec![0.5], Shape::flat()).unwrap()]).unwrap();
        let vt = viability_time(&escape_system(), &v, 0.0, &[1.0], &band(), 2.0, &Default::default()).unwrap();
        assert!((vt.t - 2f64.ln()).abs() < 1e-4, "{vt:?}");
    }

    #[test]
    fn uncontrolled_exits_at_once() {
        let vt = viability_time(
            &escape_system(),
            &ImpulseControl::zero(1),
            0.0,
            &[1.0],
            &band(),
            2.0,
            &Default::default(),
        )
        .unwrap();
        assert!(vt.t <= 1e-6, "{vt:?}");
    }

    #[test]
    fn compositions_count() {
        // C(4 + 4, 4) ways to place at most 4 quanta in 4 bins
        assert_eq!(compositions(4, 4).len(), 70);
        assert!(compositions(3, 2).iter().all(|c| c.iter().sum::<usize>() <= 2));
    }

    #[test]
    fn cheapest_reach_is_inverse_e() {
        let sys = SystemSpec::new(
            1,
            Arc::new(|_, x: &[f64]| Ok(vec![x[0]])),
            Arc::new(|_, _: &[f64], _| Ok(vec![1.0])),
            DomainBox::new((-1.0, 2.0), vec![(-10.0, 10.0)]).unwrap(),
        )
        .unwrap();
        let taus: Vec<f64> = (0..5).map(|k| 0.2 * k as f64).collect();
        let r = minimal_reaching_impulse(
            &sys,
            0.0,
            &[0.0],
            1.0,
            0,
            1.0,
            &taus,
            2.0,
            &[1.0],
            &Shape::flat(),
            &Default::default(),
        )
        .unwrap();
        assert_eq!(r.tau, 0.0);
        assert!((r.c - (-1.0f64).exp()).abs() < 1e-6, "{r:?}");
    }
}
