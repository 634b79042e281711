//! Sampled viability and stability certificates for `M = {x : eta_i(x) <= 0}`
//! and the empirical audit of trajectories, fast transits included.
//!
//! Certificates are one-sided: a pass means no violation was found on the
//! sampled grid, a failure carries an exact witness.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::frobenius::halton;
use crate::model::{
    dot, mat_vec, norm, smallest_singular_value, sub, ConstraintSet, DomainExit, DynamicTrajectory, ImpulseControl,
    Side, SystemSpec, J_HI, J_LO,
};

pub const ACTIVE_EPS: f64 = 1e-7;
pub const INDEPENDENCE_TOL: f64 = 1e-8;
pub const CERTIFICATE_SLACK: f64 = 1e-9;
pub const DEFAULT_S_GRID: usize = 65;
pub const DEFAULT_T_GRID: usize = 17;
const PROJECTION_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Serialize)]
pub struct ActiveSet {
    pub indices: Vec<usize>,
    /// Smallest singular value of the active gradients (infinite when empty).
    pub smallest_singular_value: f64,
    /// Whether the active gradients are linearly independent.
    pub independent: bool,
}

/// `{i : |eta_i(x)| <= eps}` and the independence of the active gradients.
pub fn active_set(m: &ConstraintSet, x: &[f64], eps: f64) -> Result<ActiveSet> {
    if !(eps > 0.0) {
        return Err(Error::invalid("active-set tolerance must be positive"));
    }
    let mut indices = Vec::new();
    for i in 0..m.len() {
        if m.eta(i, x)?.abs() <= eps {
            indices.push(i);
        }
    }
    let grads = indices.iter().map(|i| m.grad(*i, x)).collect::<Result<Vec<_>>>()?;
    let sigma = smallest_singular_value(&grads);
    Ok(ActiveSet {
        indices,
        smallest_singular_value: sigma,
        independent: sigma > INDEPENDENCE_TOL,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ConeMembership {
    pub member: bool,
    /// `(i, <grad eta_i(x), y>)` for every active constraint.
    pub products: Vec<(usize, f64)>,
    pub note: Option<String>,
}

/// Whether `y` lies in the contingent cone `{y : <grad eta_i(x), y> <= 0, i active}`.
pub fn contingent_membership(m: &ConstraintSet, x: &[f64], y: &[f64], eps: f64) -> Result<ConeMembership> {
    let active = active_set(m, x, eps)?;
    if active.indices.is_empty() {
        return Ok(ConeMembership {
            member: true,
            products: Vec::new(),
            note: Some("interior direction test vacuous".into()),
        });
    }
    if !active.independent {
        return Err(Error::invalid(format!(
            "active gradients at {x:?} are linearly dependent (smallest singular value {:e})",
            active.smallest_singular_value
        )));
    }
    let products = active
        .indices
        .iter()
        .map(|i| Ok((*i, dot(&m.grad(*i, x)?, y))))
        .collect::<Result<Vec<_>>>()?;
    Ok(ConeMembership {
        member: products.iter().all(|(_, p)| *p <= CERTIFICATE_SLACK),
        products,
        note: None,
    })
}

fn default_count(n: usize) -> usize {
    if n <= 2 {
        256
    } else {
        1024
    }
}

/// Damped Newton projection onto `{eta_i = 0, i in subset}`.
fn project(m: &ConstraintSet, subset: &[usize], seed: &[f64]) -> Result<Option<Vec<f64>>> {
    let residual = |x: &[f64]| -> Result<Vec<f64>> { subset.iter().map(|i| m.eta(*i, x)).collect() };
    let mut x = seed.to_vec();
    let mut r = residual(&x)?;
    for _ in 0..60 {
        let rn = norm(&r);
        if rn <= PROJECTION_TOL {
            return Ok(Some(x));
        }
        let grads = subset.iter().map(|i| m.grad(*i, &x)).collect::<Result<Vec<_>>>()?;
        let jac = DMatrix::from_fn(subset.len(), x.len(), |a, b| grads[a][b]);
        let Ok(pinv) = jac.pseudo_inverse(1e-14) else {
            return Ok(None);
        };
        let step = pinv * DVector::from_column_slice(&r);
        let mut damping = 1.0;
        let mut improved = false;
        for _ in 0..30 {
            let trial: Vec<f64> = x.iter().zip(step.iter()).map(|(v, d)| v - damping * d).collect();
            if let Ok(rt) = residual(&trial) {
                if norm(&rt) < rn {
                    x = trial;
                    r = rt;
                    improved = true;
                    break;
                }
            }
            damping *= 0.5;
        }
        if !improved {
            break;
        }
    }
    Ok((norm(&r) <= PROJECTION_TOL).then_some(x))
}

/// Points of `∂M` inside `region`, from Halton seeds projected onto single
/// constraints and, when `n >= 2`, onto pairs. Duplicates are dropped.
pub fn boundary_sample(m: &ConstraintSet, region: &[(f64, f64)], count: usize) -> Result<Vec<Vec<f64>>> {
    let n = m.dim();
    if region.len() != n {
        return Err(Error::invalid("sampling region must match the constraint dimension"));
    }
    let mut subsets: Vec<Vec<usize>> = (0..m.len()).map(|i| vec![i]).collect();
    if n >= 2 {
        for a in 0..m.len() {
            for b in a + 1..m.len() {
                subsets.push(vec![a, b]);
            }
        }
    }
    let inside = |x: &[f64]| x.iter().zip(region).all(|(v, (lo, hi))| v > lo && v < hi);
    let mut out: Vec<Vec<f64>> = Vec::new();
    for k in 0..4 * count {
        if out.len() >= count {
            break;
        }
        let u = halton(k, n);
        let seed: Vec<f64> = region.iter().zip(&u).map(|((lo, hi), u)| lo + (hi - lo) * u).collect();
        let subset = &subsets[k % subsets.len()];
        let Some(x) = project(m, subset, &seed)? else { continue };
        if !inside(&x) || m.max_eta(&x)?.abs() > ACTIVE_EPS {
            continue;
        }
        if out.iter().any(|p| norm(&sub(p, &x)) < 1e-9) {
            continue;
        }
        out.push(x);
    }
    if out.is_empty() {
        return Err(Error::EmptyBoundarySample);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CertificateMode {
    Nagumo,
    Impulse,
    Stability,
}

/// Which inequality a witness violates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    /// Drift plus density term at slow time `t`.
    Slow,
    /// Gain times shaped atom at fast time `s`.
    Fast,
}

#[derive(Debug, Clone, Serialize)]
pub struct Witness {
    pub x: Vec<f64>,
    /// Constraint index; absent for sphere conditions.
    pub constraint: Option<usize>,
    pub condition: Condition,
    pub t: Option<f64>,
    pub atom: Option<usize>,
    pub s: Option<f64>,
    pub value: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SampleRecord {
    pub x: Vec<f64>,
    pub active: Vec<usize>,
    pub worst: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ViabilityCertificate {
    pub mode: CertificateMode,
    pub slack: f64,
    pub t_grid: usize,
    pub s_grid: usize,
    pub samples: Vec<SampleRecord>,
    /// Boundary points where the active gradients are dependent.
    pub hypothesis_failures: Vec<Vec<f64>>,
    pub pass: bool,
    pub counterexample: Option<Witness>,
}

impl ViabilityCertificate {
    fn assemble(
        mode: CertificateMode,
        t_grid: usize,
        s_grid: usize,
        results: Vec<(SampleRecord, Option<Witness>, bool)>,
    ) -> ViabilityCertificate {
        let mut samples = Vec::with_capacity(results.len());
        let mut hypothesis_failures = Vec::new();
        let mut worst: Option<Witness> = None;
        for (rec, w, independent) in results {
            if !independent {
                hypothesis_failures.push(rec.x.clone());
            }
            if let Some(w) = w {
                if worst.as_ref().is_none_or(|b| w.value > b.value) {
                    worst = Some(w);
                }
            }
            samples.push(rec);
        }
        let pass = samples.iter().all(|r| r.worst <= CERTIFICATE_SLACK);
        ViabilityCertificate {
            mode,
            slack: CERTIFICATE_SLACK,
            t_grid,
            s_grid,
            samples,
            hypothesis_failures,
            pass,
            counterexample: if pass { None } else { worst },
        }
    }

    /// Pass with the independence hypothesis holding at every sample.
    pub fn certified(&self) -> bool {
        self.pass && self.hypothesis_failures.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct CertificateOptions {
    /// Boundary sample count; `None` picks 256 for `n <= 2` and 1024 otherwise.
    pub samples: Option<usize>,
    pub t_grid: usize,
    pub s_grid: usize,
    pub eps: f64,
}

impl Default for CertificateOptions {
    fn default() -> Self {
        CertificateOptions {
            samples: None,
            t_grid: DEFAULT_T_GRID,
            s_grid: DEFAULT_S_GRID,
            eps: ACTIVE_EPS,
        }
    }
}

fn open_grid(lo: f64, hi: f64, m: usize) -> Vec<f64> {
    (0..m).map(|k| lo + (hi - lo) * (k as f64 + 0.5) / m as f64).collect()
}

fn closed_grid(lo: f64, hi: f64, m: usize) -> Vec<f64> {
    (0..m)
        .map(|k| lo + (hi - lo) * k as f64 / (m - 1).max(1) as f64)
        .collect()
}

/// Directions a state may be pushed in at `x`: the slow field over `t_grid`
/// and every atom's fast field over `s_grid`.
struct Pushes<'a> {
    system: &'a SystemSpec,
    control: Option<&'a ImpulseControl>,
    t_grid: Vec<f64>,
    s_grid: Vec<f64>,
}

impl Pushes<'_> {
    fn visit(
        &self,
        x: &[f64],
        mut each: impl FnMut(Condition, Option<f64>, Option<usize>, Option<f64>, &[f64]),
    ) -> Result<()> {
        for t in &self.t_grid {
            let w = match self.control.and_then(|c| c.density()) {
                Some(d) => Some(d.eval(*t)?),
                None => None,
            };
            let v = self.system.slow_rhs(*t, x, w.as_deref())?;
            each(Condition::Slow, Some(*t), None, None, &v);
        }
        if let Some(control) = self.control {
            for (k, atom) in control.atoms().iter().enumerate() {
                for s in &self.s_grid {
                    let g = self.system.g(atom.tau, x, Some(*s))?;
                    let v = mat_vec(&g, &atom.weights(*s)?);
                    each(Condition::Fast, Some(atom.tau), Some(k), Some(*s), &v);
                }
            }
        }
        Ok(())
    }
}

fn certify_boundary(
    mode: CertificateMode,
    pushes: &Pushes<'_>,
    m: &ConstraintSet,
    opts: &CertificateOptions,
) -> Result<ViabilityCertificate> {
    let count = opts.samples.unwrap_or_else(|| default_count(m.dim()));
    let points = boundary_sample(m, &pushes.system.domain().x, count)?;
    let results = points
        .par_iter()
        .map(|x| {
            let active = active_set(m, x, opts.eps)?;
            let grads = active
                .indices
                .iter()
                .map(|i| m.grad(*i, x))
                .collect::<Result<Vec<_>>>()?;
            let mut worst = f64::NEG_INFINITY;
            let mut witness = None;
            pushes.visit(x, |condition, t, atom, s, v| {
                for (i, grad) in active.indices.iter().zip(&grads) {
                    let p = dot(grad, v);
                    if p > worst {
                        worst = p;
                        witness = Some(Witness {
                            x: x.clone(),
                            constraint: Some(*i),
                            condition,
                            t,
                            atom,
                            s,
                            value: p,
                        });
                    }
                }
            })?;
            Ok((
                SampleRecord {
                    x: x.clone(),
                    active: active.indices,
                    worst,
                },
                witness,
                active.independent,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ViabilityCertificate::assemble(
        mode,
        pushes.t_grid.len(),
        pushes.s_grid.len(),
        results,
    ))
}

/// `<grad eta_i(x), f(t, x)> <= 0` on sampled boundary points and times in `omega`.
pub fn nagumo_check(
    system: &SystemSpec,
    m: &ConstraintSet,
    omega: (f64, f64),
    opts: &CertificateOptions,
) -> Result<ViabilityCertificate> {
    let pushes = Pushes {
        system,
        control: None,
        t_grid: open_grid(omega.0, omega.1, opts.t_grid),
        s_grid: Vec::new(),
    };
    certify_boundary(CertificateMode::Nagumo, &pushes, m, opts)
}

/// Slow condition `<grad eta_i, f + g w> <= 0` over `omega` and fast
/// condition `<grad eta_i, g(tau_k, x)(s) <c_k, alpha_k(s)>> <= 0` over `J`.
pub fn impulse_viability_check(
    system: &SystemSpec,
    control: &ImpulseControl,
    m: &ConstraintSet,
    omega: (f64, f64),
    opts: &CertificateOptions,
) -> Result<ViabilityCertificate> {
    if control.density().is_some_and(|d| !d.breakpoints().is_empty()) {
        return Err(Error::invalid("viability certificates require a continuous density"));
    }
    let pushes = Pushes {
        system,
        control: Some(control),
        t_grid: open_grid(omega.0, omega.1, opts.t_grid),
        s_grid: closed_grid(J_LO, J_HI, opts.s_grid),
    };
    certify_boundary(CertificateMode::Impulse, &pushes, m, opts)
}

#[derive(Debug, Clone, Serialize)]
pub struct RadiusCertificate {
    pub l: usize,
    pub radius: f64,
    pub certificate: ViabilityCertificate,
}

#[derive(Debug, Clone, Serialize)]
pub struct StabilityReport {
    pub x_star: Vec<f64>,
    pub radii: Vec<RadiusCertificate>,
    pub pass: bool,
}

fn sphere_points(center: &[f64], r: f64) -> Vec<Vec<f64>> {
    match center.len() {
        1 => vec![vec![center[0] - r], vec![center[0] + r]],
        2 => (0..64)
            .map(|k| {
                let a = std::f64::consts::TAU * k as f64 / 64.0;
                vec![center[0] + r * a.cos(), center[1] + r * a.sin()]
            })
            .collect(),
        n => (0..256)
            .filter_map(|k| {
                // Box–Muller on Halton pairs gives a direction; normalise it.
                let u = halton(k, 2 * n);
                let dir: Vec<f64> = (0..n)
                    .map(|i| {
                        let (a, b) = (u[2 * i].max(1e-12), u[2 * i + 1]);
                        (-2.0 * a.ln()).sqrt() * (std::f64::consts::TAU * b).cos()
                    })
                    .collect();
                let len = norm(&dir);
                (len > 1e-12).then(|| center.iter().zip(&dir).map(|(c, d)| c + r * d / len).collect())
            })
            .collect(),
    }
}

/// Uniform-stability conditions `<x - x*, f + g w> <= 0` and
/// `<x - x*, g(tau_k, x)(s) <c_k, alpha_k(s)>> <= 0` on spheres `|x - x*| = 1/l`.
pub fn stability_check(
    system: &SystemSpec,
    x_star: &[f64],
    control: &ImpulseControl,
    l_list: &[usize],
    opts: &CertificateOptions,
) -> Result<StabilityReport> {
    let dom = system.domain();
    let t_grid = open_grid(dom.t.0, dom.t.1, opts.t_grid);
    let s_values: Vec<Option<f64>> = if system.gain_uses_fast_time() {
        closed_grid(J_LO, J_HI, opts.s_grid).into_iter().map(Some).collect()
    } else {
        vec![None]
    };
    let (mut f_res, mut g_res) = (0.0f64, 0.0f64);
    for t in &t_grid {
        f_res = f_res.max(norm(&system.f(*t, x_star)?));
        for s in &s_values {
            g_res = g_res.max(norm(&system.g(*t, x_star, *s)?));
        }
    }
    if f_res > 1e-9 || g_res > 1e-9 {
        return Err(Error::NotEquilibrium {
            f_residual: f_res,
            g_residual: g_res,
        });
    }
    if control.density().is_some_and(|d| !d.breakpoints().is_empty()) {
        return Err(Error::invalid("stability certificates require a continuous density"));
    }
    let pushes = Pushes {
        system,
        control: Some(control),
        t_grid,
        s_grid: closed_grid(J_LO, J_HI, opts.s_grid),
    };
    let mut radii = Vec::with_capacity(l_list.len());
    for &l in l_list {
        if l == 0 {
            return Err(Error::invalid("sphere index l must be at least 1"));
        }
        let r = 1.0 / l as f64;
        let points: Vec<Vec<f64>> = sphere_points(x_star, r)
            .into_iter()
            .filter(|p| dom.contains(p))
            .collect();
        if points.is_empty() {
            return Err(Error::EmptyBoundarySample);
        }
        let results = points
            .par_iter()
            .map(|x| {
                let radial = sub(x, x_star);
                let mut worst = f64::NEG_INFINITY;
                let mut witness = None;
                pushes.visit(x, |condition, t, atom, s, v| {
                    let p = dot(&radial, v);
                    if p > worst {
                        worst = p;
                        witness = Some(Witness {
                            x: x.clone(),
                            constraint: None,
                            condition,
                            t,
                            atom,
                            s,
                            value: p,
                        });
                    }
                })?;
                Ok((
                    SampleRecord {
                        x: x.clone(),
                        active: Vec::new(),
                        worst,
                    },
                    witness,
                    true,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        radii.push(RadiusCertificate {
            l,
            radius: r,
            certificate: ViabilityCertificate::assemble(
                CertificateMode::Stability,
                pushes.t_grid.len(),
                pushes.s_grid.len(),
                results,
            ),
        });
    }
    let pass = radii.iter().all(|r| r.certificate.pass);
    Ok(StabilityReport {
        x_star: x_star.to_vec(),
        radii,
        pass,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct TrajectoryAudit {
    pub viable: bool,
    /// First place the path leaves `M` (or the domain box).
    pub exit: Option<DomainExit>,
    /// Largest constraint value seen before the exit.
    pub max_eta: f64,
}

/// Walks the slow samples in time order, checking each fast transit between
/// its one-sided limits, and reports the first point with `max_i eta_i > tol`.
pub fn trajectory_viability_audit(traj: &DynamicTrajectory, m: &ConstraintSet, tol: f64) -> Result<TrajectoryAudit> {
    if traj.n != m.dim() {
        return Err(Error::invalid("trajectory and constraint dimensions differ"));
    }
    let mut max_eta = f64::NEG_INFINITY;
    for p in &traj.slow {
        let e = m.max_eta(&p.x)?;
        if e > tol {
            let exit = if p.side == Side::Plus {
                traj.jump_at(p.t).map(|_| DomainExit::Fast { tau: p.t, s: J_HI })
            } else {
                None
            };
            return Ok(TrajectoryAudit {
                viable: false,
                exit: exit.or(Some(DomainExit::Slow { t: p.t })),
                max_eta,
            });
        }
        max_eta = max_eta.max(e);
        if p.side == Side::Minus {
            if let Some(j) = traj.jump_at(p.t) {
                for (s, x) in j.curve.s.iter().zip(&j.curve.gamma) {
                    let e = m.max_eta(x)?;
                    if e > tol {
                        return Ok(TrajectoryAudit {
                            viable: false,
                            exit: Some(DomainExit::Fast { tau: j.tau, s: *s }),
                            max_eta,
                        });
                    }
                    max_eta = max_eta.max(e);
                }
            }
        }
    }
    Ok(TrajectoryAudit {
        viable: traj.exit.is_none(),
        exit: traj.exit.clone(),
        max_eta,
    })
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::expr::Expr;
    use crate::model::{DomainBox, ImpulseAtom, Shape};

    fn unit_interval() -> ConstraintSet {
        ConstraintSet::from_exprs(1, vec![(Expr::parse("(x1 - 0.5)^2 - 0.25", 1).unwrap(), None)]).unwrap()
    }

    fn scalar(f: fn(f64) -> f64, g: fn(f64) -> f64) -> SystemSpec {
        SystemSpec::new(
            1,
            Arc::new(move |_, x: &[f64]| Ok(vec![f(x[0])])),
            Arc::new(move |_, x: &[f64], _| Ok(vec![g(x[0])])),
            DomainBox::new((0.0, 1.0), vec![(-2.0, 3.0)]).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn active_set_on_interval() {
        let m = unit_interval();
        assert_eq!(active_set(&m, &[1.0], ACTIVE_EPS).unwrap().indices, vec![0]);
        assert!(active_set(&m, &[0.5], ACTIVE_EPS).unwrap().indices.is_empty());
    }

    #[test]
    fn dependent_gradients_are_reported() {
        let m = ConstraintSet::from_exprs(
            2,
            vec![
                (Expr::parse("x1 + x2", 2).unwrap(), None),
                (Expr::parse("2*x1 + 2*x2", 2).unwrap(), None),
            ],
        )
        .unwrap();
        let a = active_set(&m, &[0.0, 0.0], ACTIVE_EPS).unwrap();
        assert_eq!(a.indices, vec![0, 1]);
        assert!(!a.independent);
    }

    #[test]
    fn cone_membership_at_right_end() {
        let m = unit_interval();
        assert!(contingent_membership(&m, &[1.0], &[-1.0], ACTIVE_EPS).unwrap().member);
        assert!(!contingent_membership(&m, &[1.0], &[1.0], ACTIVE_EPS).unwrap().member);
        assert!(contingent_membership(&m, &[1.0], &[0.0], ACTIVE_EPS).unwrap().member);
        let inner = contingent_membership(&m, &[0.5], &[1.0], ACTIVE_EPS).unwrap();
        assert!(inner.member && inner.note.is_some());
    }

    #[test]
    fn boundary_of_interval_is_both_ends() {
        let pts = boundary_sample(&unit_interval(), &[(-2.0, 3.0)], 256).unwrap();
        assert_eq!(pts.len(), 2);
        for p in pts {
            assert!(p[0].abs() < 1e-9 || (p[0] - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn nagumo_on_interval() {
        let m = unit_interval();
        let opts = CertificateOptions::default();
        assert!(
            nagumo_check(&scalar(|x| -x, |_| 0.0), &m, (0.0, 1.0), &opts)
                .unwrap()
                .pass
        );
        let bad = nagumo_check(&scalar(|_| 1.0, |_| 0.0), &m, (0.0, 1.0), &opts).unwrap();
        assert!(!bad.pass);
        assert!((bad.counterexample.unwrap().x[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn stability_rejects_outward_field() {
        let rep = stability_check(
            &scalar(|x| x, |_| 0.0),
            &[0.0],
            &ImpulseControl::zero(1),
            &[1, 2],
            &Default::default(),
        )
        .unwrap();
        assert!(!rep.pass);
        let err = stability_check(
            &scalar(|x| x - 1.0, |_| 0.0),
            &[0.0],
            &ImpulseControl::zero(1),
            &[1],
            &Default::default(),
        );
        assert!(matches!(err, Err(Error::NotEquilibrium { .. })));
    }

    #[test]
    fn audit_finds_fast_exit() {
        let sys = scalar(|x| x, |_| -1.0);
        let v =
            ImpulseControl::atoms_only(1, vec![ImpulseAtom::shared(0.25, vec![1.5], Shape::flat()).unwrap()]).unwrap();
        let traj = crate::solver::solve_ivp(&sys, &v, 0.0, &[0.1], 0.5, &Default::default()).unwrap();
        let audit = trajectory_viability_audit(&traj, &unit_interval(), 1e-9).unwrap();
        match audit.exit {
            Some(DomainExit::Fast { tau, s }) => {
                assert_eq!(tau, 0.25);
                assert!(s < 0.5);
            }
            other => panic!("{other:?}"),
        }
    }
}
