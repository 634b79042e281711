//! Initial value problems `x' = f + g v`, `x(t0-) = x0`.
//!
//! Between atoms the ordinary solution follows `x' = f(t, x) + g(t, x) w(t)`;
//! at each atom the state is carried across by the limit system of
//! [`crate::jump`]. [`contraction_solve`] reaches the same solution by Picard
//! iteration of the integral equation and serves as an independent check.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::jump::{transit, DEFAULT_JUMP_STEPS};
use crate::model::{
    norm, sub, Density, DomainExit, DynamicTrajectory, ImpulseAtom, ImpulseControl, JumpRecord, Side, SlowSample,
    SystemSpec,
};
use crate::ode::{rk4_path, Dopri5, Flow};
use crate::quad::GAUSS3;

/// The slow integrator runs this much tighter than the requested tolerance so
/// that accumulated local errors stay below the audit bound.
const INTEGRATOR_SAFETY: f64 = 1e-2;

#[derive(Debug, Clone)]
pub struct SolveOptions {
    pub tol: f64,
    pub jump_steps: usize,
    /// Extra times at which the trajectory must be sampled.
    pub grid: Vec<f64>,
    pub initial_step: Option<f64>,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            tol: 1e-8,
            jump_steps: DEFAULT_JUMP_STEPS,
            grid: Vec::new(),
            initial_step: None,
        }
    }
}

impl SolveOptions {
    pub fn with_tol(tol: f64) -> Self {
        SolveOptions {
            tol,
            ..Default::default()
        }
    }

    pub fn with_grid(mut self, grid: Vec<f64>) -> Self {
        self.grid = grid;
        self
    }
}

/// Density evaluated as the limit from inside `[a, b)`, so a segment never
/// sees the value of the next piece at its right end.
pub(crate) fn density_in_segment(d: Option<&Density>, t: f64, a: f64, b: f64) -> Result<Option<Vec<f64>>> {
    match d {
        None => Ok(None),
        Some(d) => {
            let inset = 1e-12 * (b - a);
            Ok(Some(d.eval(t.clamp(a, b - inset))?))
        }
    }
}

fn check_setup(system: &SystemSpec, control: &ImpulseControl, t0: f64, x0: &[f64], t_end: f64) -> Result<()> {
    let n = system.dim();
    if control.dim() != n || x0.len() != n {
        return Err(Error::invalid(format!(
            "dimension mismatch: system {n}, control {}, state {}",
            control.dim(),
            x0.len()
        )));
    }
    if !(t0 < t_end) {
        return Err(Error::invalid(format!("empty horizon ({t0}, {t_end})")));
    }
    if !system.domain().contains(x0) {
        return Err(Error::invalid(format!("initial state {x0:?} is outside the domain")));
    }
    if let Some(a) = control.atoms().iter().find(|a| a.tau < t0) {
        return Err(Error::invalid(format!(
            "atom at {} precedes the initial time {t0}",
            a.tau
        )));
    }
    Ok(())
}

/// Solves on `[t0, t_end]`. A domain exit is not an error: the partial
/// trajectory is returned with [`DynamicTrajectory::exit`] set.
pub fn solve_ivp(
    system: &SystemSpec,
    control: &ImpulseControl,
    t0: f64,
    x0: &[f64],
    t_end: f64,
    opts: &SolveOptions,
) -> Result<DynamicTrajectory> {
    check_setup(system, control, t0, x0, t_end)?;
    let atoms: Vec<&ImpulseAtom> = control.atoms().iter().filter(|a| a.tau < t_end).collect();
    let mut traj = DynamicTrajectory {
        n: system.dim(),
        t0,
        x0: x0.to_vec(),
        slow: Vec::new(),
        jumps: Vec::new(),
        exit: None,
    };

    let mut cuts: Vec<f64> = vec![t0, t_end];
    cuts.extend(atoms.iter().map(|a| a.tau));
    if let Some(d) = control.density() {
        cuts.extend(d.breakpoints().iter().copied().filter(|b| *b > t0 && *b < t_end));
    }
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();

    let mut integrator = Dopri5::new(opts.tol * INTEGRATOR_SAFETY);
    integrator.initial_step = opts.initial_step;

    let mut x = x0.to_vec();
    let mut next_atom = 0;
    traj.slow.push(SlowSample {
        t: t0,
        side: Side::Interior,
        x: x.clone(),
    });
    for (k, &a) in cuts.iter().enumerate() {
        if next_atom < atoms.len() && atoms[next_atom].tau == a {
            let atom = atoms[next_atom];
            next_atom += 1;
            if let Some(last) = traj.slow.last_mut() {
                last.side = Side::Minus;
            }
            let tr = transit(system, a, &x, atom, opts.jump_steps)?;
            let x_plus = tr.curve.end().to_vec();
            traj.jumps.push(JumpRecord {
                tau: a,
                x_minus: x.clone(),
                x_plus: x_plus.clone(),
                curve: tr.curve,
            });
            if let Some(s) = tr.exit {
                traj.exit = Some(DomainExit::Fast { tau: a, s });
                return Ok(traj);
            }
            x = x_plus;
            traj.slow.push(SlowSample {
                t: a,
                side: Side::Plus,
                x: x.clone(),
            });
        }
        let Some(&b) = cuts.get(k + 1) else { break };
        let stops: Vec<f64> = opts.grid.iter().copied().filter(|g| *g > a && *g < b).collect();
        let density = control.density();
        let mut rhs = |t: f64, y: &[f64]| -> Result<Vec<f64>> {
            let w = density_in_segment(density, t, a, b)?;
            system.slow_rhs(t, y, w.as_deref())
        };
        let domain = system.domain();
        let mut exit_at = None;
        let slow = &mut traj.slow;
        let end = integrator.integrate(&mut rhs, a, &x, b, &stops, &mut |t, y| {
            if !domain.contains(y) {
                exit_at = Some(t);
                return Flow::Stop;
            }
            slow.push(SlowSample {
                t,
                side: Side::Interior,
                x: y.to_vec(),
            });
            Flow::Continue
        })?;
        if end.stopped {
            traj.exit = Some(DomainExit::Slow {
                t: exit_at.unwrap_or(b),
            });
            return Ok(traj);
        }
        x = end.y;
    }
    Ok(traj)
}

#[derive(Debug, Clone, Serialize)]
pub struct RepresentationAudit {
    pub max_residual: f64,
    pub worst_t: f64,
    pub points: usize,
    pub bound: f64,
    pub pass: bool,
}

/// Checks `x(t) - x0 = ∫ (f + g w) dt + Σ_{tau < t} (gamma_tau(1/2) - x(tau-))`
/// at every slow sample. Integrals use 3-point Gauss–Legendre per sample
/// interval with interior states re-integrated by RK4 from the left sample.
pub fn representation_audit(
    system: &SystemSpec,
    control: &ImpulseControl,
    traj: &DynamicTrajectory,
    tol: f64,
) -> Result<RepresentationAudit> {
    let n = system.dim();
    let mut integral = vec![0.0; n];
    let mut jumps = vec![0.0; n];
    let mut max_residual = 0.0f64;
    let mut worst_t = traj.t0;
    let density = control.density();
    for pair in traj.slow.windows(2) {
        let (p, q) = (&pair[0], &pair[1]);
        if p.t == q.t {
            let rec = traj
                .jump_at(p.t)
                .ok_or_else(|| Error::invalid(format!("paired samples at {} without a jump record", p.t)))?;
            for ((slot, end), start) in jumps.iter_mut().zip(rec.curve.end()).zip(rec.curve.start()) {
                *slot += end - start;
            }
        } else {
            let (a, b) = (p.t, q.t);
            let mut rhs = |t: f64, y: &[f64]| -> Result<Vec<f64>> {
                let w = density_in_segment(density, t, a, b)?;
                system.slow_rhs(t, y, w.as_deref())
            };
            let mid = 0.5 * (a + b);
            let half = 0.5 * (b - a);
            for (node, weight) in GAUSS3 {
                let tn = mid + half * node;
                let y = rk4_path(&mut rhs, a, &p.x, tn, 8)?.pop().expect("rk4 path is nonempty");
                let fv = rhs(tn, &y)?;
                for i in 0..n {
                    integral[i] += half * weight * fv[i];
                }
            }
        }
        let residual = (0..n)
            .map(|i| (q.x[i] - traj.x0[i] - integral[i] - jumps[i]).powi(2))
            .sum::<f64>()
            .sqrt();
        if residual > max_residual {
            max_residual = residual;
            worst_t = q.t;
        }
    }
    let bound = 10.0 * tol;
    Ok(RepresentationAudit {
        max_residual,
        worst_t,
        points: traj.slow.len(),
        bound,
        pass: max_residual <= bound,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ContractionResult {
    pub h: f64,
    pub lambda: f64,
    pub iterations: usize,
    /// Sup-norm distances between successive iterates.
    pub increments: Vec<f64>,
    pub trajectory: DynamicTrajectory,
}

impl ContractionResult {
    /// Largest ratio of successive increments, ignoring increments at round-off level.
    pub fn observed_ratio(&self) -> f64 {
        self.increments
            .windows(2)
            .filter(|w| w[0] > 1e-12)
            .map(|w| w[1] / w[0])
            .fold(0.0, f64::max)
    }

    /// Sup distance to `other` over the shared `(t, side)` samples.
    pub fn deviation_from(&self, other: &DynamicTrajectory) -> f64 {
        self.trajectory
            .slow
            .iter()
            .filter_map(|p| {
                let q = other.sample(p.t, p.side).or_else(|| match p.side {
                    Side::Interior => other.value_at(p.t),
                    _ => None,
                })?;
                Some(norm(&sub(&p.x, q)))
            })
            .fold(0.0, f64::max)
    }
}

const PICARD_TOL: f64 = 1e-10;
const PICARD_MAX_ITER: usize = 500;
const PICARD_NODES: usize = 1024;

/// Contraction constant `K_f h + K_g var(u) h + K_g var(u)^2` on `(t0, t0 + h)`.
pub fn contraction_constant(system: &SystemSpec, control: &ImpulseControl, t0: f64, h: f64) -> Result<f64> {
    let hint = system
        .lipschitz()
        .ok_or_else(|| Error::NoContractionWindow("system has no Lipschitz hints".into()))?;
    let var = control.variation(t0, t0 + h)?;
    Ok(hint.f * h + hint.g * var * h + hint.g * var * var)
}

fn self_map_bound(
    system: &SystemSpec,
    control: &ImpulseControl,
    t0: f64,
    x0: &[f64],
    h: f64,
    n_bound: f64,
) -> Result<f64> {
    let n = system.dim();
    let (mut mf, mut mg) = (0.0f64, 0.0f64);
    let probes = 9usize;
    let corners = 3usize.pow(n.min(6) as u32);
    for it in 0..probes {
        let t = t0 + h * it as f64 / (probes - 1) as f64;
        for c in 0..corners {
            let mut code = c;
            let x: Vec<f64> = x0
                .iter()
                .map(|v| {
                    let digit = code % 3;
                    code /= 3;
                    v + n_bound * (digit as f64 - 1.0)
                })
                .collect();
            mf = mf.max(norm(&system.f(t, &x)?));
            let s_values: &[Option<f64>] = if system.gain_uses_fast_time() {
                &[Some(-0.5), Some(0.0), Some(0.5)]
            } else {
                &[None]
            };
            for s in s_values {
                mg = mg.max(norm(&system.g(t, &x, *s)?));
            }
        }
    }
    let var = control.variation(t0, t0 + h)?;
    Ok(mf * h + mg * var * var + mg * var)
}

/// Picard iteration of the integral equation on the largest window
/// `[t0, t0 + h)` whose contraction constant is below one.
pub fn contraction_solve(
    system: &SystemSpec,
    control: &ImpulseControl,
    t0: f64,
    x0: &[f64],
    n_bound: f64,
    jump_steps: usize,
) -> Result<ContractionResult> {
    let domain = system.domain();
    if domain.margin(x0) <= n_bound {
        return Err(Error::NoContractionWindow(format!(
            "state {x0:?} is within {n_bound} of the domain boundary"
        )));
    }
    let h_max = domain.t.1 - t0;
    if !(h_max > 0.0) {
        return Err(Error::NoContractionWindow(
            "initial time at the end of the domain".into(),
        ));
    }
    let mut chosen = None;
    let mut h = h_max;
    for _ in 0..80 {
        let lambda = contraction_constant(system, control, t0, h)?;
        if lambda < 1.0 && self_map_bound(system, control, t0, x0, h, n_bound)? <= n_bound {
            chosen = Some((h, lambda));
            break;
        }
        h *= 0.75;
    }
    let (h, lambda) = chosen.ok_or_else(|| Error::NoContractionWindow(format!("no h <= {h_max} gives lambda < 1")))?;
    let t1 = t0 + h;

    let atom_at_start = control.atoms().iter().find(|a| a.tau == t0);
    let inner: Vec<&ImpulseAtom> = control.atoms().iter().filter(|a| a.tau > t0 && a.tau < t1).collect();
    let mut cuts = vec![t0];
    cuts.extend(inner.iter().map(|a| a.tau));
    if let Some(d) = control.density() {
        cuts.extend(d.breakpoints().iter().copied().filter(|b| *b > t0 && *b < t1));
    }
    cuts.push(t1);
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();

    let spacing = h / PICARD_NODES as f64;
    let segments: Vec<Vec<f64>> = cuts
        .windows(2)
        .map(|w| {
            let m = (((w[1] - w[0]) / spacing).ceil() as usize).max(32);
            (0..=m)
                .map(|j| {
                    if j == m {
                        w[1]
                    } else {
                        w[0] + (w[1] - w[0]) * j as f64 / m as f64
                    }
                })
                .collect()
        })
        .collect();

    let n = system.dim();
    let density = control.density();
    let mut states: Vec<Vec<Vec<f64>>> = segments.iter().map(|seg| vec![x0.to_vec(); seg.len()]).collect();
    let mut increments = Vec::new();
    let mut jump_records: Vec<JumpRecord> = Vec::new();
    let mut iterations = 0;
    loop {
        iterations += 1;
        jump_records.clear();
        let mut jump_sum = vec![0.0; n];
        if let Some(atom) = atom_at_start {
            let tr = transit(system, t0, x0, atom, jump_steps)?;
            if let Some(s) = tr.exit {
                return Err(Error::JumpEscapesDomain { s });
            }
            for i in 0..n {
                jump_sum[i] += tr.curve.end()[i] - x0[i];
            }
            jump_records.push(JumpRecord {
                tau: t0,
                x_minus: x0.to_vec(),
                x_plus: tr.curve.end().to_vec(),
                curve: tr.curve,
            });
        }
        let mut acc = vec![0.0; n];
        let mut next: Vec<Vec<Vec<f64>>> = Vec::with_capacity(segments.len());
        for (seg, xs) in segments.iter().zip(&states) {
            let (a, b) = (seg[0], seg[seg.len() - 1]);
            let fvals = seg
                .iter()
                .zip(xs)
                .map(|(t, x)| {
                    let w = density_in_segment(density, *t, a, b)?;
                    system.slow_rhs(*t, x, w.as_deref())
                })
                .collect::<Result<Vec<_>>>()?;
            let cum = cumulative_quadrature(&fvals, (b - a) / (seg.len() - 1) as f64);
            let mut out = Vec::with_capacity(seg.len());
            for c in &cum {
                out.push(
                    (0..n)
                        .map(|i| x0[i] + acc[i] + c[i] + jump_sum[i])
                        .collect::<Vec<f64>>(),
                );
            }
            for i in 0..n {
                acc[i] += cum[cum.len() - 1][i];
            }
            if let Some(atom) = inner.iter().find(|a| a.tau == b) {
                let x_minus = &xs[xs.len() - 1];
                let tr = transit(system, b, x_minus, atom, jump_steps)?;
                if let Some(s) = tr.exit {
                    return Err(Error::JumpEscapesDomain { s });
                }
                for i in 0..n {
                    jump_sum[i] += tr.curve.end()[i] - x_minus[i];
                }
                jump_records.push(JumpRecord {
                    tau: b,
                    x_minus: x_minus.clone(),
                    x_plus: tr.curve.end().to_vec(),
                    curve: tr.curve,
                });
            }
            next.push(out);
        }
        let inc = next
            .iter()
            .flatten()
            .zip(states.iter().flatten())
            .map(|(a, b)| norm(&sub(a, b)))
            .fold(0.0, f64::max);
        states = next;
        increments.push(inc);
        if inc < PICARD_TOL {
            break;
        }
        if iterations >= PICARD_MAX_ITER {
            return Err(Error::NoContractionWindow(format!(
                "Picard iteration did not settle after {PICARD_MAX_ITER} passes (last increment {inc:e})"
            )));
        }
    }

    let mut slow = Vec::new();
    if atom_at_start.is_some() {
        slow.push(SlowSample {
            t: t0,
            side: Side::Minus,
            x: x0.to_vec(),
        });
    }
    for (k, (seg, xs)) in segments.iter().zip(&states).enumerate() {
        for (j, (t, x)) in seg.iter().zip(xs).enumerate() {
            let last = j + 1 == seg.len();
            let first = j == 0;
            if first && k > 0 && slow.last().map(|p: &SlowSample| p.t) == Some(*t) {
                let prev_is_atom = inner.iter().any(|a| a.tau == *t);
                if !prev_is_atom {
                    continue;
                }
            }
            let side = if first && (k > 0 && inner.iter().any(|a| a.tau == *t) || k == 0 && atom_at_start.is_some()) {
                Side::Plus
            } else if last && inner.iter().any(|a| a.tau == *t) {
                Side::Minus
            } else {
                Side::Interior
            };
            slow.push(SlowSample {
                t: *t,
                side,
                x: x.clone(),
            });
        }
    }
    // the final node t0 + h lies outside the open window
    slow.pop();
    Ok(ContractionResult {
        h,
        lambda,
        iterations,
        increments,
        trajectory: DynamicTrajectory {
            n,
            t0,
            x0: x0.to_vec(),
            slow,
            jumps: jump_records,
            exit: None,
        },
    })
}

/// Fourth-order cumulative integral of uniformly spaced samples.
fn cumulative_quadrature(f: &[Vec<f64>], h: f64) -> Vec<Vec<f64>> {
    let m = f.len() - 1;
    let n = f[0].len();
    let mut out = vec![vec![0.0; n]; m + 1];
    for j in 0..m {
        for i in 0..n {
            let piece = if j == 0 {
                9.0 * f[0][i] + 19.0 * f[1][i] - 5.0 * f[2][i] + f[3][i]
            } else if j == m - 1 {
                f[m - 3][i] - 5.0 * f[m - 2][i] + 19.0 * f[m - 1][i] + 9.0 * f[m][i]
            } else {
                -f[j - 1][i] + 13.0 * f[j][i] + 13.0 * f[j + 1][i] - f[j + 2][i]
            };
            out[j + 1][i] = out[j][i] + h / 24.0 * piece;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct DependenceReport {
    /// Sup distance of the ordinary parts over the shared grid.
    pub slow: f64,
    /// Sup distance of the fast transits, atom by atom.
    pub fast: f64,
}

impl DependenceReport {
    pub fn total(&self) -> f64 {
        self.slow.max(self.fast)
    }
}

/// Distance between the solutions driven by `control` and `perturbed`, which
/// must share atom times.
pub fn continuous_dependence_probe(
    system: &SystemSpec,
    control: &ImpulseControl,
    perturbed: &ImpulseControl,
    t0: f64,
    x0: &[f64],
    t_end: f64,
    opts: &SolveOptions,
) -> Result<DependenceReport> {
    let taus = |c: &ImpulseControl| c.atoms().iter().map(|a| a.tau).collect::<Vec<_>>();
    if taus(control) != taus(perturbed) {
        return Err(Error::invalid("perturbed control must keep the atom times"));
    }
    let mut grid: Vec<f64> = (0..=200).map(|k| t0 + (t_end - t0) * k as f64 / 200.0).collect();
    grid.extend_from_slice(&opts.grid);
    let opts = SolveOptions {
        grid: grid.clone(),
        ..opts.clone()
    };
    let a = solve_ivp(system, control, t0, x0, t_end, &opts)?;
    let b = solve_ivp(system, perturbed, t0, x0, t_end, &opts)?;
    let mut slow = 0.0f64;
    for t in &grid {
        if let (Some(x), Some(y)) = (a.value_at(*t), b.value_at(*t)) {
            slow = slow.max(norm(&sub(x, y)));
        }
    }
    for ja in &a.jumps {
        if let Some(x) = b.sample(ja.tau, Side::Minus) {
            slow = slow.max(norm(&sub(&ja.x_minus, x)));
        }
    }
    let mut fast = 0.0f64;
    for (ja, jb) in a.jumps.iter().zip(&b.jumps) {
        for (x, y) in ja.curve.gamma.iter().zip(&jb.curve.gamma) {
            fast = fast.max(norm(&sub(x, y)));
        }
    }
    Ok(DependenceReport { slow, fast })
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::model::{DomainBox, LipschitzHint, Shape};

    fn linear(a: f64, b: f64) -> SystemSpec {
        SystemSpec::new(
            1,
            Arc::new(move |_, x: &[f64]| Ok(vec![a * x[0]])),
            Arc::new(move |_, _: &[f64], _| Ok(vec![b])),
            DomainBox::new((-1.0, 5.0), vec![(-50.0, 50.0)]).unwrap(),
        )
        .unwrap()
        .with_lipschitz(LipschitzHint { f: a.abs(), g: 0.0 })
    }

    fn atom(tau: f64, c: f64) -> ImpulseAtom {
        ImpulseAtom::shared(tau, vec![c], Shape::flat()).unwrap()
    }

    #[test]
    fn growth_after_initial_kick() {
        // x' = x + v, v = e^{-1} delta_0: x(t) = e^{t-1} after the jump
        let sys = linear(1.0, 1.0);
        let v = ImpulseControl::atoms_only(1, vec![atom(0.0, (-1.0f64).exp())]).unwrap();
        let traj = solve_ivp(
            &sys,
            &v,
            0.0,
            &[0.0],
            1.0,
            &SolveOptions::default().with_grid(vec![0.5]),
        )
        .unwrap();
        assert_eq!(traj.sample(0.0, Side::Minus).unwrap(), &[0.0]);
        assert!((traj.sample(0.0, Side::Plus).unwrap()[0] - (-1.0f64).exp()).abs() < 1e-12);
        assert!((traj.value_at(0.5).unwrap()[0] - (-0.5f64).exp()).abs() < 1e-8);
        assert!((traj.last().x[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn jump_then_growth_reaches_boundary_at_ln2() {
        let sys = linear(1.0, -1.0);
        let v = ImpulseControl::atoms_only(1, vec![atom(0.0, 0.5)]).unwrap();
        let ln2 = 2f64.ln();
        let traj = solve_ivp(
            &sys,
            &v,
            0.0,
            &[1.0],
            ln2,
            &SolveOptions::default().with_grid(vec![0.3]),
        )
        .unwrap();
        assert!((traj.value_at(0.3).unwrap()[0] - 0.5 * 0.3f64.exp()).abs() < 1e-8);
        assert!((traj.last().x[0] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn uncontrolled_matches_reference() {
        let sys = linear(-0.7, 1.0);
        let traj = solve_ivp(
            &sys,
            &ImpulseControl::zero(1),
            0.0,
            &[2.0],
            3.0,
            &SolveOptions::default(),
        )
        .unwrap();
        for p in &traj.slow {
            assert!((p.x[0] - 2.0 * (-0.7 * p.t).exp()).abs() < 1e-8);
        }
    }

    #[test]
    fn slow_domain_exit_is_partial() {
        let sys = linear(1.0, 0.0);
        let traj = solve_ivp(
            &sys,
            &ImpulseControl::zero(1),
            0.0,
            &[1.0],
            5.0,
            &SolveOptions::default(),
        )
        .unwrap();
        match traj.exit {
            Some(DomainExit::Slow { t }) => assert!(t > 50f64.ln() - 0.5 && t < 50f64.ln() + 0.5),
            ref other => panic!("{other:?}"),
        }
        assert!(traj.slow.iter().all(|p| p.x[0] < 50.0));
    }

    #[test]
    fn atom_before_start_rejected() {
        let sys = linear(1.0, 1.0);
        let v = ImpulseControl::atoms_only(1, vec![atom(-0.5, 1.0)]).unwrap();
        assert!(solve_ivp(&sys, &v, 0.0, &[0.0], 1.0, &SolveOptions::default()).is_err());
    }

    #[test]
    fn piecewise_density_is_integrated_exactly() {
        // x' = -w with w = 2 on [0, 0.25): x drops by 0.5
        let sys = linear(0.0, -1.0);
        let w = Density::piecewise_constant(vec![0.0, 0.25], vec![vec![2.0]]).unwrap();
        let v = ImpulseControl::new(1, Some(w), vec![]).unwrap();
        let traj = solve_ivp(&sys, &v, 0.0, &[1.0], 1.0, &SolveOptions::default()).unwrap();
        assert!((traj.last().x[0] - 0.5).abs() < 1e-12);
        let audit = representation_audit(&sys, &v, &traj, 1e-8).unwrap();
        assert!(audit.pass, "{audit:?}");
    }

    #[test]
    fn cumulative_rule_is_exact_for_cubics() {
        let h = 0.1;
        let f: Vec<Vec<f64>> = (0..=10).map(|j| vec![(j as f64 * h).powi(3)]).collect();
        let cum = cumulative_quadrature(&f, h);
        for (j, c) in cum.iter().enumerate() {
            let t = j as f64 * h;
            assert!((c[0] - t.powi(4) / 4.0).abs() < 1e-14);
        }
    }

    #[test]
    fn contraction_without_hint_fails() {
        let sys = SystemSpec::new(
            1,
            Arc::new(|_, x: &[f64]| Ok(vec![x[0]])),
            Arc::new(|_, _: &[f64], _| Ok(vec![0.0])),
            DomainBox::new((0.0, 1.0), vec![(-5.0, 5.0)]).unwrap(),
        )
        .unwrap();
        assert!(matches!(
            contraction_solve(&sys, &ImpulseControl::zero(1), 0.0, &[0.0], 1.0, 64),
            Err(Error::NoContractionWindow(_))
        ));
    }

    #[test]
    fn contraction_agrees_with_direct_solve() {
        let sys = linear(1.0, -1.0);
        let v = ImpulseControl::atoms_only(1, vec![atom(0.0, 0.5)]).unwrap();
        let res = contraction_solve(&sys, &v, 0.0, &[1.0], 4.0, 256).unwrap();
        assert!(res.lambda < 1.0 && res.h > 0.5);
        let grid: Vec<f64> = res.trajectory.slow.iter().map(|p| p.t).collect();
        let direct = solve_ivp(
            &sys,
            &v,
            0.0,
            &[1.0],
            res.h,
            &SolveOptions::with_tol(1e-10).with_grid(grid),
        )
        .unwrap();
        assert!(res.deviation_from(&direct) < 1e-8, "{}", res.deviation_from(&direct));
    }
}
