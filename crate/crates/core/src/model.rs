//! Domain types and the distribution calculus built on them.
//!
//! An impulse control is an absolutely continuous density `w` plus finitely
//! many shaped delta atoms `(tau, c, alpha)`. Every shape is a profile on the
//! fast interval `J = [-1/2, 1/2]` integrating to one.

use std::fmt;
use std::sync::Arc;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::expr::{central_gradient, Expr, DEFAULT_GRAD_STEP};
use crate::quad::{adaptive_simpson, trapezoid};

/// Left end of the fast interval.
pub const J_LO: f64 = -0.5;
/// Right end of the fast interval.
pub const J_HI: f64 = 0.5;

/// Default tolerance on `|∫_J alpha - 1|`.
pub const SHAPE_TOL: f64 = 1e-8;

const EXPR_QUAD_TOL: f64 = 1e-10;
const MIN_SHAPE_SAMPLES: usize = 16;
const FUNCTION_PROBES: usize = 1025;

pub type ScalarFn = Arc<dyn Fn(f64) -> Result<f64> + Send + Sync>;
pub type VecField = Arc<dyn Fn(f64, &[f64]) -> Result<Vec<f64>> + Send + Sync>;
/// Row-major `n x n` gain, optionally depending on fast time.
pub type GainField = Arc<dyn Fn(f64, &[f64], Option<f64>) -> Result<Vec<f64>> + Send + Sync>;
pub type DensityFn = Arc<dyn Fn(f64) -> Result<Vec<f64>> + Send + Sync>;
pub type StateScalar = Arc<dyn Fn(&[f64]) -> Result<f64> + Send + Sync>;
pub type StateGradient = Arc<dyn Fn(&[f64]) -> Result<Vec<f64>> + Send + Sync>;

#[derive(Clone)]
pub enum Profile {
    Function(ScalarFn),
    /// Values on a uniform grid from `J_LO` to `J_HI`, linearly interpolated.
    Sampled(Vec<f64>),
}

#[derive(Clone)]
pub struct Shape {
    label: String,
    profile: Profile,
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.profile {
            Profile::Function(_) => write!(f, "Shape({})", self.label),
            Profile::Sampled(v) => write!(f, "Shape({}, {} samples)", self.label, v.len()),
        }
    }
}

/// Names of the built-in shapes.
pub const SHAPE_PRESETS: [&str; 4] = ["flat", "tent", "front", "back"];

impl Shape {
    pub fn from_fn(label: impl Into<String>, f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Shape {
        Shape {
            label: label.into(),
            profile: Profile::Function(Arc::new(move |s| Ok(f(s)))),
        }
    }

    pub fn from_fallible_fn(label: impl Into<String>, f: ScalarFn) -> Shape {
        Shape {
            label: label.into(),
            profile: Profile::Function(f),
        }
    }

    /// Shape given by an expression in `s`.
    pub fn from_expr(expr: Expr) -> Result<Shape> {
        if expr.uses_x() || expr.uses_t() {
            return Err(Error::invalid(format!("shape `{expr}` may only reference s")));
        }
        let label = expr.to_string();
        Ok(Shape::from_fallible_fn(
            label,
            Arc::new(move |s| expr.eval(0.0, &[], Some(s))),
        ))
    }

    pub fn sampled(label: impl Into<String>, values: Vec<f64>) -> Result<Shape> {
        if values.len() < MIN_SHAPE_SAMPLES {
            return Err(Error::invalid(format!(
                "sampled shape needs at least {MIN_SHAPE_SAMPLES} grid values, got {}",
                values.len()
            )));
        }
        Ok(Shape {
            label: label.into(),
            profile: Profile::Sampled(values),
        })
    }

    /// Sampled shape rescaled so its trapezoid integral is one.
    pub fn normalized_samples(label: impl Into<String>, values: Vec<f64>) -> Result<Shape> {
        let total = trapezoid(&values, J_LO, J_HI);
        if !total.is_finite() || total.abs() < 1e-300 {
            return Err(Error::invalid("cannot normalize a shape with zero integral"));
        }
        Shape::sampled(label, values.into_iter().map(|v| v / total).collect())
    }

    /// `alpha ≡ 1`.
    pub fn flat() -> Shape {
        Shape::from_fn("flat", |_| 1.0)
    }

    /// `alpha(s) = 2 - 4|s|`.
    pub fn tent() -> Shape {
        Shape::from_fn("tent", |s| 2.0 - 4.0 * s.abs())
    }

    /// `alpha(s) = 1 - 2s`, mass concentrated near `s = -1/2`.
    pub fn front() -> Shape {
        Shape::from_fn("front", |s| 1.0 - 2.0 * s)
    }

    /// `alpha(s) = 1 + 2s`, mass concentrated near `s = 1/2`.
    pub fn back() -> Shape {
        Shape::from_fn("back", |s| 1.0 + 2.0 * s)
    }

    pub fn preset(name: &str) -> Option<Shape> {
        match name {
            "flat" => Some(Shape::flat()),
            "tent" => Some(Shape::tent()),
            "front" => Some(Shape::front()),
            "back" => Some(Shape::back()),
            _ => None,
        }
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn profile(&self) -> &Profile {
        &self.profile
    }

    pub fn eval(&self, s: f64) -> Result<f64> {
        let v = match &self.profile {
            Profile::Function(f) => f(s)?,
            Profile::Sampled(values) => interpolate(values, s),
        };
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::eval(format!("shape `{}` is not finite at s = {s}", self.label)))
        }
    }

    /// `∫_J alpha` by the shape's native rule.
    pub fn integral(&self) -> Result<f64> {
        self.integral_to(J_HI)
    }

    /// `∫_{-1/2}^{upper} alpha`.
    pub fn integral_to(&self, upper: f64) -> Result<f64> {
        match &self.profile {
            Profile::Function(_) => adaptive_simpson(|s| self.eval(s), J_LO, upper, EXPR_QUAD_TOL),
            Profile::Sampled(values) => {
                let m = values.len() - 1;
                let h = (J_HI - J_LO) / m as f64;
                let pos = ((upper - J_LO) / h).clamp(0.0, m as f64);
                let k = (pos.floor() as usize).min(m);
                let mut acc = trapezoid(&values[..=k], J_LO, J_LO + k as f64 * h);
                if k < m {
                    let frac = (pos - k as f64) * h;
                    let end = interpolate(values, upper);
                    acc += 0.5 * (values[k] + end) * frac;
                }
                Ok(acc)
            }
        }
    }

    fn probe_points(&self) -> Vec<f64> {
        let m = match &self.profile {
            Profile::Function(_) => FUNCTION_PROBES,
            Profile::Sampled(v) => v.len(),
        };
        (0..m)
            .map(|i| J_LO + (J_HI - J_LO) * i as f64 / (m - 1) as f64)
            .collect()
    }

    /// Smallest and largest profile value over the probe grid.
    pub fn range(&self) -> Result<(f64, f64)> {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for s in self.probe_points() {
            let v = self.eval(s)?;
            lo = lo.min(v);
            hi = hi.max(v);
        }
        Ok((lo, hi))
    }
}

fn interpolate(values: &[f64], s: f64) -> f64 {
    let m = values.len() - 1;
    let pos = ((s - J_LO) / (J_HI - J_LO) * m as f64).clamp(0.0, m as f64);
    let k = (pos.floor() as usize).min(m - 1);
    let frac = pos - k as f64;
    values[k] * (1.0 - frac) + values[k + 1] * frac
}

#[derive(Debug, Clone, Serialize)]
pub struct ShapeReport {
    pub integral: f64,
    pub pass: bool,
    pub min: f64,
    pub max: f64,
}

/// Checks the normalization `∫_J alpha = 1` within `tol`.
pub fn validate_shape(shape: &Shape, tol: f64) -> Result<ShapeReport> {
    let (min, max) = shape.range()?;
    let integral = shape.integral()?;
    Ok(ShapeReport {
        integral,
        pass: (integral - 1.0).abs() <= tol,
        min,
        max,
    })
}

/// A vector delta atom `<c, delta_tau^alpha>` with one shape per component.
#[derive(Debug, Clone)]
pub struct ImpulseAtom {
    pub tau: f64,
    pub c: Vec<f64>,
    pub shapes: Vec<Shape>,
}

impl ImpulseAtom {
    pub fn new(tau: f64, c: Vec<f64>, shapes: Vec<Shape>) -> Result<ImpulseAtom> {
        if !tau.is_finite() {
            return Err(Error::invalid("atom time must be finite"));
        }
        if c.is_empty() || c.len() != shapes.len() {
            return Err(Error::invalid(format!(
                "atom at {tau}: {} magnitudes but {} shapes",
                c.len(),
                shapes.len()
            )));
        }
        if c.iter().all(|v| *v == 0.0) || c.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "atom at {tau}: magnitude must be finite and nonzero"
            )));
        }
        for shape in &shapes {
            let report = validate_shape(shape, SHAPE_TOL)?;
            if !report.pass {
                return Err(Error::invalid(format!(
                    "atom at {tau}: shape `{}` integrates to {}",
                    shape.label(),
                    report.integral
                )));
            }
        }
        Ok(ImpulseAtom { tau, c, shapes })
    }

    /// All components share one profile.
    pub fn shared(tau: f64, c: Vec<f64>, shape: Shape) -> Result<ImpulseAtom> {
        let shapes = vec![shape; c.len()];
        ImpulseAtom::new(tau, c, shapes)
    }

    pub fn dim(&self) -> usize {
        self.c.len()
    }

    /// `<c, alpha(s)>`, the componentwise product.
    pub fn weights(&self, s: f64) -> Result<Vec<f64>> {
        self.c
            .iter()
            .zip(&self.shapes)
            .map(|(c, a)| Ok(c * a.eval(s)?))
            .collect()
    }

    pub fn magnitude(&self) -> f64 {
        self.c.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Density of the absolutely continuous part of a control.
#[derive(Clone)]
pub struct Density {
    n: usize,
    f: DensityFn,
    breakpoints: Vec<f64>,
}

impl fmt::Debug for Density {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Density(n = {}, breakpoints = {:?})", self.n, self.breakpoints)
    }
}

impl Density {
    pub fn from_fn(n: usize, f: DensityFn) -> Density {
        Density {
            n,
            f,
            breakpoints: Vec::new(),
        }
    }

    pub fn constant(value: Vec<f64>) -> Density {
        let n = value.len();
        Density::from_fn(n, Arc::new(move |_| Ok(value.clone())))
    }

    pub fn from_exprs(exprs: Vec<Expr>) -> Result<Density> {
        if exprs.iter().any(|e| e.uses_x() || e.uses_s()) {
            return Err(Error::invalid("control density may only reference t"));
        }
        let n = exprs.len();
        Ok(Density::from_fn(
            n,
            Arc::new(move |t| exprs.iter().map(|e| e.eval(t, &[], None)).collect()),
        ))
    }

    /// Piecewise-constant density: `values[k]` on `[edges[k], edges[k+1])`,
    /// zero outside `[edges[0], edges[last])`.
    pub fn piecewise_constant(edges: Vec<f64>, values: Vec<Vec<f64>>) -> Result<Density> {
        if edges.len() != values.len() + 1 || values.is_empty() {
            return Err(Error::invalid("piecewise density needs one more edge than values"));
        }
        if edges.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("density edges must be increasing"));
        }
        let n = values[0].len();
        let zero = vec![0.0; n];
        let e = edges.clone();
        let f: DensityFn = Arc::new(move |t| {
            if t < e[0] || t >= e[e.len() - 1] {
                return Ok(zero.clone());
            }
            let k = e.partition_point(|edge| *edge <= t) - 1;
            Ok(values[k].clone())
        });
        Ok(Density {
            n,
            f,
            breakpoints: edges,
        })
    }

    pub fn with_breakpoints(mut self, mut points: Vec<f64>) -> Density {
        points.sort_by(f64::total_cmp);
        self.breakpoints = points;
        self
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Times where the density may be discontinuous.
    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn eval(&self, t: f64) -> Result<Vec<f64>> {
        let v = (self.f)(t)?;
        if v.len() != self.n || v.iter().any(|x| !x.is_finite()) {
            return Err(Error::eval(format!(
                "density is not a finite {}-vector at t = {t}",
                self.n
            )));
        }
        Ok(v)
    }
}

/// `v = w + Σ <c_k, delta_{tau_k}^{alpha_k}>`.
#[derive(Debug, Clone)]
pub struct ImpulseControl {
    n: usize,
    density: Option<Density>,
    atoms: Vec<ImpulseAtom>,
}

impl ImpulseControl {
    pub fn new(n: usize, density: Option<Density>, atoms: Vec<ImpulseAtom>) -> Result<ImpulseControl> {
        if let Some(d) = &density {
            if d.dim() != n {
                return Err(Error::invalid(format!(
                    "density has dimension {}, expected {n}",
                    d.dim()
                )));
            }
        }
        for a in &atoms {
            if a.dim() != n {
                return Err(Error::invalid(format!(
                    "atom at {} has dimension {}, expected {n}",
                    a.tau,
                    a.dim()
                )));
            }
        }
        if atoms.windows(2).any(|w| w[1].tau <= w[0].tau) {
            return Err(Error::invalid("atom times must be strictly increasing"));
        }
        Ok(ImpulseControl { n, density, atoms })
    }

    pub fn zero(n: usize) -> ImpulseControl {
        ImpulseControl {
            n,
            density: None,
            atoms: Vec::new(),
        }
    }

    pub fn atoms_only(n: usize, atoms: Vec<ImpulseAtom>) -> Result<ImpulseControl> {
        ImpulseControl::new(n, None, atoms)
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn density(&self) -> Option<&Density> {
        self.density.as_ref()
    }

    pub fn atoms(&self) -> &[ImpulseAtom] {
        &self.atoms
    }

    pub fn density_at(&self, t: f64) -> Result<Vec<f64>> {
        match &self.density {
            Some(d) => d.eval(t),
            None => Ok(vec![0.0; self.n]),
        }
    }

    pub fn with_atoms(&self, atoms: Vec<ImpulseAtom>) -> Result<ImpulseControl> {
        ImpulseControl::new(self.n, self.density.clone(), atoms)
    }

    /// Sum of two controls; atom times must not collide.
    pub fn combine(&self, other: &ImpulseControl) -> Result<ImpulseControl> {
        if other.n != self.n {
            return Err(Error::invalid("cannot combine controls of different dimension"));
        }
        let density = match (&self.density, &other.density) {
            (None, None) => None,
            (Some(a), None) => Some(a.clone()),
            (None, Some(b)) => Some(b.clone()),
            (Some(a), Some(b)) => {
                let (a, b) = (a.clone(), b.clone());
                let mut bps = a.breakpoints.clone();
                bps.extend_from_slice(&b.breakpoints);
                let f: DensityFn = Arc::new(move |t| {
                    let (x, y) = (a.eval(t)?, b.eval(t)?);
                    Ok(x.iter().zip(&y).map(|(p, q)| p + q).collect())
                });
                Some(Density::from_fn(self.n, f).with_breakpoints(bps))
            }
        };
        let mut atoms: Vec<ImpulseAtom> = self.atoms.iter().chain(&other.atoms).cloned().collect();
        atoms.sort_by(|a, b| a.tau.total_cmp(&b.tau));
        ImpulseControl::new(self.n, density, atoms)
    }

    /// Total variation of the primitive on `(lo, hi)`: `∫|w|` plus `Σ|c_k|`.
    pub fn variation(&self, lo: f64, hi: f64) -> Result<f64> {
        let mut total = 0.0;
        if let Some(d) = &self.density {
            total += integrate_density(d, lo, hi, |v| v.iter().map(|x| x * x).sum::<f64>().sqrt())?;
        }
        total += self
            .atoms
            .iter()
            .filter(|a| a.tau > lo && a.tau < hi)
            .map(ImpulseAtom::magnitude)
            .sum::<f64>();
        Ok(total)
    }
}

fn integrate_density(d: &Density, lo: f64, hi: f64, reduce: impl Fn(&[f64]) -> f64) -> Result<f64> {
    let mut cuts = vec![lo];
    cuts.extend(d.breakpoints().iter().copied().filter(|b| *b > lo && *b < hi));
    cuts.push(hi);
    let mut total = 0.0;
    for w in cuts.windows(2) {
        total += adaptive_simpson(|t| Ok(reduce(&d.eval(t)?)), w[0], w[1], EXPR_QUAD_TOL)?;
    }
    Ok(total)
}

#[derive(Debug, Clone, Serialize)]
pub struct ControlIntegral {
    pub value: Vec<f64>,
    /// Atom times lying exactly on a window endpoint; their mass is excluded.
    pub boundary_atoms: Vec<f64>,
}

impl ControlIntegral {
    pub fn boundary_warning(&self) -> bool {
        !self.boundary_atoms.is_empty()
    }
}

/// `∫_{(t0, t1)} v`: the density integral plus atoms strictly inside.
pub fn control_integral(control: &ImpulseControl, t0: f64, t1: f64) -> Result<ControlIntegral> {
    if !(t0 < t1) {
        return Err(Error::invalid(format!("empty window ({t0}, {t1})")));
    }
    let mut value = vec![0.0; control.n];
    if let Some(d) = &control.density {
        for (i, slot) in value.iter_mut().enumerate() {
            *slot = integrate_density(d, t0, t1, |v| v[i])?;
        }
    }
    let mut boundary_atoms = Vec::new();
    for a in &control.atoms {
        if a.tau == t0 || a.tau == t1 {
            boundary_atoms.push(a.tau);
        } else if a.tau > t0 && a.tau < t1 {
            for (slot, c) in value.iter_mut().zip(&a.c) {
                *slot += c;
            }
        }
    }
    Ok(ControlIntegral { value, boundary_atoms })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    NegativeDensity {
        component: usize,
        t: f64,
        value: f64,
    },
    NegativeAtom {
        atom: usize,
        component: usize,
        value: f64,
    },
    NegativeShape {
        atom: usize,
        component: usize,
        s: f64,
        value: f64,
    },
    BudgetExceeded {
        component: usize,
        integral: f64,
        budget: f64,
    },
    BoundaryAtom {
        tau: f64,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NegativeDensity { component, t, value } => {
                write!(f, "negative density component {} at t = {t} ({value})", component + 1)
            }
            Violation::NegativeAtom { atom, component, value } => {
                write!(f, "negative atom {} component {} ({value})", atom + 1, component + 1)
            }
            Violation::NegativeShape {
                atom,
                component,
                s,
                value,
            } => write!(
                f,
                "negative shape on atom {} component {} at s = {s} ({value})",
                atom + 1,
                component + 1
            ),
            Violation::BudgetExceeded {
                component,
                integral,
                budget,
            } => write!(f, "budget exceeded component {} ({integral} > {budget})", component + 1),
            Violation::BoundaryAtom { tau } => write!(f, "atom at window endpoint {tau}"),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Admissibility {
    pub admissible: bool,
    pub violations: Vec<Violation>,
}

const DENSITY_SIGN_SAMPLES: usize = 1001;

/// Nonnegativity of every part of the control and the componentwise budget.
pub fn check_admissible(control: &ImpulseControl, budget: f64, window: (f64, f64)) -> Result<Admissibility> {
    let (t0, t1) = window;
    let mut violations = Vec::new();
    if let Some(d) = &control.density {
        'grid: for k in 0..DENSITY_SIGN_SAMPLES {
            let t = t0 + (t1 - t0) * k as f64 / (DENSITY_SIGN_SAMPLES - 1) as f64;
            for (i, v) in d.eval(t)?.into_iter().enumerate() {
                if v < 0.0 {
                    violations.push(Violation::NegativeDensity {
                        component: i,
                        t,
                        value: v,
                    });
                    break 'grid;
                }
            }
        }
    }
    for (k, atom) in control.atoms.iter().enumerate() {
        for (i, c) in atom.c.iter().enumerate() {
            if *c < 0.0 {
                violations.push(Violation::NegativeAtom {
                    atom: k,
                    component: i,
                    value: *c,
                });
            }
        }
        for (i, shape) in atom.shapes.iter().enumerate() {
            if let Some((s, v)) = shape
                .probe_points()
                .into_iter()
                .map(|s| shape.eval(s).map(|v| (s, v)))
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .find(|(_, v)| *v < 0.0)
            {
                violations.push(Violation::NegativeShape {
                    atom: k,
                    component: i,
                    s,
                    value: v,
                });
            }
        }
    }
    let integral = control_integral(control, t0, t1)?;
    for tau in &integral.boundary_atoms {
        violations.push(Violation::BoundaryAtom { tau: *tau });
    }
    for (i, v) in integral.value.iter().enumerate() {
        if *v > budget + 1e-12 {
            violations.push(Violation::BudgetExceeded {
                component: i,
                integral: *v,
                budget,
            });
        }
    }
    Ok(Admissibility {
        admissible: violations.is_empty(),
        violations,
    })
}

#[derive(Debug, Clone)]
pub struct HeavisideDeltaProduct {
    pub coefficient: f64,
    /// `None` when the coefficient vanishes and the product shape is undefined.
    pub shape: Option<Shape>,
}

/// `theta^beta · delta^alpha = (∫ beta alpha) delta^gamma`, `gamma = alpha beta / ∫ beta alpha`.
pub fn heaviside_delta_product(
    beta: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    alpha: &Shape,
) -> Result<HeavisideDeltaProduct> {
    let b = beta.clone();
    let coefficient = adaptive_simpson(|s| Ok(b(s) * alpha.eval(s)?), J_LO, J_HI, EXPR_QUAD_TOL * 1e-2)?;
    if coefficient.abs() < 1e-12 {
        return Ok(HeavisideDeltaProduct {
            coefficient,
            shape: None,
        });
    }
    let a = alpha.clone();
    let label = format!("product[{}]", alpha.label());
    let shape = Shape::from_fallible_fn(label, Arc::new(move |s| Ok(a.eval(s)? * beta(s) / coefficient)));
    Ok(HeavisideDeltaProduct {
        coefficient,
        shape: Some(shape),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DomainBox {
    pub t: (f64, f64),
    pub x: Vec<(f64, f64)>,
}

impl DomainBox {
    pub fn new(t: (f64, f64), x: Vec<(f64, f64)>) -> Result<DomainBox> {
        if !(t.0 < t.1) || x.iter().any(|(lo, hi)| !(lo < hi)) {
            return Err(Error::invalid("domain box bounds must be increasing"));
        }
        Ok(DomainBox { t, x })
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter().zip(&self.x).all(|(v, (lo, hi))| v > lo && v < hi)
    }

    pub fn contains_time(&self, t: f64) -> bool {
        t > self.t.0 && t < self.t.1
    }

    /// Distance from `x` to the box boundary (negative outside).
    pub fn margin(&self, x: &[f64]) -> f64 {
        x.iter()
            .zip(&self.x)
            .map(|(v, (lo, hi))| (v - lo).min(hi - v))
            .fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LipschitzHint {
    pub f: f64,
    pub g: f64,
}

/// `x' = f(t, x) + g(t, x) v` on a box domain.
#[derive(Clone)]
pub struct SystemSpec {
    n: usize,
    f: VecField,
    g: GainField,
    gain_uses_fast_time: bool,
    domain: DomainBox,
    lipschitz: Option<LipschitzHint>,
}

impl fmt::Debug for SystemSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SystemSpec")
            .field("n", &self.n)
            .field("domain", &self.domain)
            .field("lipschitz", &self.lipschitz)
            .finish_non_exhaustive()
    }
}

impl SystemSpec {
    pub fn new(n: usize, f: VecField, g: GainField, domain: DomainBox) -> Result<SystemSpec> {
        if n == 0 || domain.x.len() != n {
            return Err(Error::invalid(format!(
                "domain has {} state bounds, expected {n}",
                domain.x.len()
            )));
        }
        Ok(SystemSpec {
            n,
            f,
            g,
            gain_uses_fast_time: false,
            domain,
            lipschitz: None,
        })
    }

    /// Builds a system from DSL expressions (`g` given row by row).
    pub fn from_exprs(f: Vec<Expr>, g: Vec<Vec<Expr>>, domain: DomainBox) -> Result<SystemSpec> {
        let n = f.len();
        if g.len() != n || g.iter().any(|row| row.len() != n) {
            return Err(Error::invalid(format!("g must be {n} x {n}")));
        }
        if f.iter().any(Expr::uses_s) {
            return Err(Error::invalid("f may not reference fast time s"));
        }
        let uses_s = g.iter().flatten().any(Expr::uses_s);
        let flat: Vec<Expr> = g.into_iter().flatten().collect();
        let ff: VecField = Arc::new(move |t, x| f.iter().map(|e| e.eval(t, x, None)).collect());
        let gg: GainField = Arc::new(move |t, x, s| flat.iter().map(|e| e.eval(t, x, s)).collect());
        let mut sys = SystemSpec::new(n, ff, gg, domain)?;
        sys.gain_uses_fast_time = uses_s;
        Ok(sys)
    }

    pub fn with_lipschitz(mut self, hint: LipschitzHint) -> SystemSpec {
        self.lipschitz = Some(hint);
        self
    }

    pub fn with_fast_time_gain(mut self, uses_s: bool) -> SystemSpec {
        self.gain_uses_fast_time = uses_s;
        self
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn domain(&self) -> &DomainBox {
        &self.domain
    }

    pub fn lipschitz(&self) -> Option<LipschitzHint> {
        self.lipschitz
    }

    pub fn gain_uses_fast_time(&self) -> bool {
        self.gain_uses_fast_time
    }

    pub fn f(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        let v = (self.f)(t, x)?;
        check_finite(&v, self.n, "f", t, x)?;
        Ok(v)
    }

    /// Row-major gain matrix.
    pub fn g(&self, t: f64, x: &[f64], s: Option<f64>) -> Result<Vec<f64>> {
        let v = (self.g)(t, x, s)?;
        check_finite(&v, self.n * self.n, "g", t, x)?;
        Ok(v)
    }

    /// Column `m` of the gain matrix.
    pub fn g_column(&self, m: usize, t: f64, x: &[f64], s: Option<f64>) -> Result<Vec<f64>> {
        let g = self.g(t, x, s)?;
        Ok((0..self.n).map(|i| g[i * self.n + m]).collect())
    }

    /// Slow right-hand side `f + g w`.
    pub fn slow_rhs(&self, t: f64, x: &[f64], w: Option<&[f64]>) -> Result<Vec<f64>> {
        let mut out = self.f(t, x)?;
        if let Some(w) = w {
            if w.iter().any(|v| *v != 0.0) {
                let g = self.g(t, x, None)?;
                for (i, slot) in out.iter_mut().enumerate() {
                    *slot += (0..self.n).map(|j| g[i * self.n + j] * w[j]).sum::<f64>();
                }
            }
        }
        Ok(out)
    }

    /// Samples the domain, checks finiteness and estimates Lipschitz slopes.
    pub fn validate(&self, pairs: usize, seed: u64) -> Result<SystemReport> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let draw = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
            self.domain.x.iter().map(|(lo, hi)| rng.gen_range(*lo..*hi)).collect()
        };
        let (mut kf, mut kg) = (0.0f64, 0.0f64);
        for _ in 0..pairs {
            let t = rng.gen_range(self.domain.t.0..self.domain.t.1);
            let x = draw(&mut rng);
            let y = draw(&mut rng);
            let s = self.gain_uses_fast_time.then(|| rng.gen_range(J_LO..=J_HI));
            let dist = norm(&sub(&x, &y));
            if dist == 0.0 {
                continue;
            }
            kf = kf.max(norm(&sub(&self.f(t, &x)?, &self.f(t, &y)?)) / dist);
            kg = kg.max(norm(&sub(&self.g(t, &x, s)?, &self.g(t, &y, s)?)) / dist);
        }
        let within_hint = self
            .lipschitz
            .map(|h| kf <= 10.0 * h.f + 1e-12 && kg <= 10.0 * h.g + 1e-12);
        Ok(SystemReport {
            lipschitz_f: kf,
            lipschitz_g: kg,
            within_hint,
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SystemReport {
    pub lipschitz_f: f64,
    pub lipschitz_g: f64,
    /// `None` when no hint was given.
    pub within_hint: Option<bool>,
}

fn check_finite(v: &[f64], len: usize, what: &str, t: f64, x: &[f64]) -> Result<()> {
    if v.len() != len {
        return Err(Error::eval(format!(
            "{what} returned {} values, expected {len}",
            v.len()
        )));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::eval(format!("{what} is not finite at t = {t}, x = {x:?}")));
    }
    Ok(())
}

pub(crate) fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `g v` for a row-major square matrix.
pub(crate) fn mat_vec(g: &[f64], v: &[f64]) -> Vec<f64> {
    let n = v.len();
    (0..n).map(|i| (0..n).map(|j| g[i * n + j] * v[j]).sum()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Side {
    #[serde(rename = "-")]
    Minus,
    #[serde(rename = "+")]
    Plus,
    #[serde(rename = "interior")]
    Interior,
}

impl Side {
    pub fn symbol(self) -> &'static str {
        match self {
            Side::Minus => "-",
            Side::Plus => "+",
            Side::Interior => "interior",
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SlowSample {
    pub t: f64,
    pub side: Side,
    pub x: Vec<f64>,
}

/// Fast-time transit `gamma(s)` sampled on a uniform grid over `J`.
#[derive(Debug, Clone, Serialize)]
pub struct FastCurve {
    pub s: Vec<f64>,
    pub gamma: Vec<Vec<f64>>,
}

impl FastCurve {
    pub fn start(&self) -> &[f64] {
        &self.gamma[0]
    }

    pub fn end(&self) -> &[f64] {
        &self.gamma[self.gamma.len() - 1]
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct JumpRecord {
    pub tau: f64,
    pub x_minus: Vec<f64>,
    pub x_plus: Vec<f64>,
    pub curve: FastCurve,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DomainExit {
    /// The slow solution left the domain box between the last sample and `t`.
    Slow { t: f64 },
    /// The transit of the atom at `tau` left the box at fast time `s`.
    Fast { tau: f64, s: f64 },
}

/// Ordinary path plus the fast transits at every atom.
#[derive(Debug, Clone, Serialize)]
pub struct DynamicTrajectory {
    pub n: usize,
    pub t0: f64,
    pub x0: Vec<f64>,
    pub slow: Vec<SlowSample>,
    pub jumps: Vec<JumpRecord>,
    pub exit: Option<DomainExit>,
}

impl DynamicTrajectory {
    pub fn last(&self) -> &SlowSample {
        self.slow.last().expect("trajectory has at least the initial sample")
    }

    /// First sample at exactly `t` with the given side.
    pub fn sample(&self, t: f64, side: Side) -> Option<&[f64]> {
        self.slow
            .iter()
            .find(|p| p.t == t && p.side == side)
            .map(|p| p.x.as_slice())
    }

    /// Value at `t` taken from the right (post-jump at atom times).
    pub fn value_at(&self, t: f64) -> Option<&[f64]> {
        self.slow.iter().rev().find(|p| p.t == t).map(|p| p.x.as_slice())
    }

    pub fn jump_at(&self, tau: f64) -> Option<&JumpRecord> {
        self.jumps.iter().find(|j| j.tau == tau)
    }

    /// Fast-curve endpoints equal the recorded one-sided limits.
    pub fn limits_consistent(&self, tol: f64) -> bool {
        self.jumps.iter().all(|j| {
            let ok_start = norm(&sub(j.curve.start(), &j.x_minus)) <= tol;
            let ok_end = self.exit.is_some() || norm(&sub(j.curve.end(), &j.x_plus)) <= tol;
            ok_start && ok_end
        })
    }
}

#[derive(Clone)]
pub struct Constraint {
    pub label: String,
    eta: StateScalar,
    grad: Option<StateGradient>,
}

impl fmt::Debug for Constraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Constraint({})", self.label)
    }
}

impl Constraint {
    pub fn new(label: impl Into<String>, eta: StateScalar) -> Constraint {
        Constraint {
            label: label.into(),
            eta,
            grad: None,
        }
    }

    pub fn with_gradient(mut self, grad: StateGradient) -> Constraint {
        self.grad = Some(grad);
        self
    }
}

/// `M = {x : eta_i(x) <= 0}`.
#[derive(Debug, Clone)]
pub struct ConstraintSet {
    n: usize,
    constraints: Vec<Constraint>,
    fd_step: f64,
}

impl ConstraintSet {
    pub fn new(n: usize, constraints: Vec<Constraint>) -> Result<ConstraintSet> {
        if constraints.is_empty() {
            return Err(Error::invalid("constraint set needs at least one constraint"));
        }
        Ok(ConstraintSet {
            n,
            constraints,
            fd_step: DEFAULT_GRAD_STEP,
        })
    }

    /// Constraints from expressions, with optional analytic gradient expressions.
    pub fn from_exprs(n: usize, items: Vec<(Expr, Option<Vec<Expr>>)>) -> Result<ConstraintSet> {
        let mut cs = Vec::with_capacity(items.len());
        for (eta, grad) in items {
            if eta.uses_s() || eta.uses_t() {
                return Err(Error::invalid(format!("constraint `{eta}` may only reference x")));
            }
            let label = eta.to_string();
            let mut c = Constraint::new(label, Arc::new(move |x: &[f64]| eta.eval(0.0, x, None)));
            if let Some(grad) = grad {
                if grad.len() != n {
                    return Err(Error::invalid(format!("gradient must have {n} entries")));
                }
                c = c.with_gradient(Arc::new(move |x: &[f64]| {
                    grad.iter().map(|e| e.eval(0.0, x, None)).collect()
                }));
            }
            cs.push(c);
        }
        ConstraintSet::new(n, cs)
    }

    pub fn with_fd_step(mut self, h: f64) -> ConstraintSet {
        self.fd_step = h;
        self
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.constraints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.constraints.is_empty()
    }

    pub fn constraints(&self) -> &[Constraint] {
        &self.constraints
    }

    pub fn eta(&self, i: usize, x: &[f64]) -> Result<f64> {
        (self.constraints[i].eta)(x)
    }

    pub fn grad(&self, i: usize, x: &[f64]) -> Result<Vec<f64>> {
        match &self.constraints[i].grad {
            Some(g) => g(x),
            None => central_gradient(|p| self.eta(i, p), x, self.fd_step),
        }
    }

    pub fn max_eta(&self, x: &[f64]) -> Result<f64> {
        let mut worst = f64::NEG_INFINITY;
        for i in 0..self.len() {
            worst = worst.max(self.eta(i, x)?);
        }
        Ok(worst)
    }

    pub fn contains(&self, x: &[f64], tol: f64) -> Result<bool> {
        Ok(self.max_eta(x)? <= tol)
    }
}

/// Smallest singular value of the matrix whose rows are `grads`.
pub fn smallest_singular_value(grads: &[Vec<f64>]) -> f64 {
    if grads.is_empty() {
        return f64::INFINITY;
    }
    let n = grads[0].len();
    let m = nalgebra::DMatrix::from_fn(grads.len(), n, |i, j| grads[i][j]);
    if grads.len() > n {
        return 0.0;
    }
    m.singular_values().iter().copied().fold(f64::INFINITY, f64::min)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn atom(tau: f64, c: f64) -> ImpulseAtom {
        ImpulseAtom::shared(tau, vec![c], Shape::flat()).unwrap()
    }

    #[test]
    fn presets_are_normalized() {
        for name in SHAPE_PRESETS {
            let r = validate_shape(&Shape::preset(name).unwrap(), SHAPE_TOL).unwrap();
            assert!(r.pass, "{name}: {}", r.integral);
        }
        let r = validate_shape(&Shape::tent(), SHAPE_TOL).unwrap();
        assert!((r.integral - 1.0).abs() < 1e-10);
        assert_eq!((r.min, r.max), (0.0, 2.0));
    }

    #[test]
    fn skewed_shape_range() {
        let r = validate_shape(&Shape::from_fn("skew", |s| 1.0 + s), SHAPE_TOL).unwrap();
        assert!(r.pass && (r.integral - 1.0).abs() < 1e-12);
        assert!((r.min - 0.5).abs() < 1e-15 && (r.max - 1.5).abs() < 1e-15);
    }

    #[test]
    fn non_normalized_shape_fails() {
        let r = validate_shape(&Shape::from_fn("double", |_| 2.0), SHAPE_TOL).unwrap();
        assert!(!r.pass);
        assert!(ImpulseAtom::shared(0.0, vec![1.0], Shape::from_fn("double", |_| 2.0)).is_err());
    }

    #[test]
    fn non_finite_shape_reports_location() {
        let s = Shape::from_fn("pole", |s| 1.0 / s);
        let err = validate_shape(&s, SHAPE_TOL).unwrap_err();
        assert!(err.to_string().contains("s = 0"), "{err}");
    }

    #[test]
    fn sampled_shapes() {
        assert!(Shape::sampled("short", vec![1.0; 8]).is_err());
        let s = Shape::normalized_samples("ramp", (0..17).map(|i| i as f64).collect()).unwrap();
        assert!((s.integral().unwrap() - 1.0).abs() < 1e-14);
        assert!((s.integral_to(0.0).unwrap() - 0.25).abs() < 1e-14);
        // midpoint of the grid interpolates linearly
        let v = s.eval(J_LO + 0.5 / 16.0).unwrap();
        assert!((v - 0.5 * 2.0 / 16.0).abs() < 1e-14);
    }

    #[test]
    fn zero_atom_rejected() {
        assert!(ImpulseAtom::shared(0.0, vec![0.0], Shape::flat()).is_err());
        assert!(ImpulseAtom::new(0.0, vec![1.0, 1.0], vec![Shape::flat()]).is_err());
    }

    #[test]
    fn atom_order_enforced() {
        assert!(ImpulseControl::atoms_only(1, vec![atom(1.0, 1.0), atom(0.0, 1.0)]).is_err());
        assert!(ImpulseControl::atoms_only(1, vec![atom(1.0, 1.0), atom(1.0, 1.0)]).is_err());
    }

    #[test]
    fn control_integral_examples() {
        let v = ImpulseControl::atoms_only(1, vec![atom(0.0, 0.5)]).unwrap();
        let r = control_integral(&v, -1.0, 1.0).unwrap();
        assert_eq!(r.value, vec![0.5]);
        assert!(!r.boundary_warning());

        let r = control_integral(&ImpulseControl::zero(1), -1.0, 1.0).unwrap();
        assert_eq!(r.value, vec![0.0]);

        let v = ImpulseControl::new(1, Some(Density::constant(vec![1.0])), vec![atom(1.0, 3.0)]).unwrap();
        let r = control_integral(&v, 0.0, 2.0).unwrap();
        assert!((r.value[0] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn endpoint_atom_is_flagged() {
        let v = ImpulseControl::atoms_only(1, vec![atom(0.0, 0.5)]).unwrap();
        let r = control_integral(&v, 0.0, 1.0).unwrap();
        assert!(r.boundary_warning());
        assert_eq!(r.boundary_atoms, vec![0.0]);
        assert_eq!(r.value, vec![0.0]);
    }

    #[test]
    fn admissibility_examples() {
        let v = ImpulseControl::atoms_only(1, vec![atom(0.0, 0.5)]).unwrap();
        assert!(check_admissible(&v, 0.5, (-1.0, 1.0)).unwrap().admissible);

        let v = ImpulseControl::atoms_only(1, vec![atom(0.0, -1.0)]).unwrap();
        let r = check_admissible(&v, 10.0, (-1.0, 1.0)).unwrap();
        assert!(!r.admissible);
        assert!(r.violations[0].to_string().starts_with("negative atom"));

        let w = Density::piecewise_constant(vec![0.0, 1.0], vec![vec![1.0]]).unwrap();
        let v = ImpulseControl::new(1, Some(w), vec![]).unwrap();
        let r = check_admissible(&v, 0.5, (0.0, 1.0)).unwrap();
        assert!(!r.admissible);
        assert_eq!(r.violations.len(), 1);
        assert!(r.violations[0].to_string().starts_with("budget exceeded component 1"));
    }

    #[test]
    fn negative_shape_is_inadmissible() {
        let bad = Shape::from_fn("signed", |s| 1.0 + 3.0 * s);
        let a = ImpulseAtom::shared(0.0, vec![0.5], bad).unwrap();
        let v = ImpulseControl::atoms_only(1, vec![a]).unwrap();
        let r = check_admissible(&v, 1.0, (-1.0, 1.0)).unwrap();
        assert!(matches!(r.violations[0], Violation::NegativeShape { .. }));
    }

    #[test]
    fn heaviside_product_examples() {
        let p = heaviside_delta_product(Arc::new(|s| s + 0.5), &Shape::flat()).unwrap();
        assert!((p.coefficient - 0.5).abs() < 1e-12);
        let shape = p.shape.unwrap();
        assert!(validate_shape(&shape, SHAPE_TOL).unwrap().pass);

        let p = heaviside_delta_product(Arc::new(|_| 1.0), &Shape::flat()).unwrap();
        assert!((p.coefficient - 1.0).abs() < 1e-12);
        assert!((p.shape.unwrap().eval(0.3).unwrap() - 1.0).abs() < 1e-12);

        let p = heaviside_delta_product(Arc::new(|_| 0.0), &Shape::flat()).unwrap();
        assert!(p.shape.is_none());
    }

    #[test]
    fn domain_box_margin() {
        let d = DomainBox::new((0.0, 1.0), vec![(-1.0, 1.0), (0.0, 4.0)]).unwrap();
        assert!(d.contains(&[0.0, 1.0]));
        assert!(!d.contains(&[0.0, 4.0]));
        assert_eq!(d.margin(&[0.5, 1.0]), 0.5);
        assert!(DomainBox::new((1.0, 0.0), vec![]).is_err());
    }

    #[test]
    fn lipschitz_estimate_respects_hint() {
        let d = DomainBox::new((0.0, 1.0), vec![(-2.0, 2.0)]).unwrap();
        let sys = SystemSpec::new(
            1,
            Arc::new(|_, x: &[f64]| Ok(vec![3.0 * x[0]])),
            Arc::new(|_, x: &[f64], _| Ok(vec![x[0]])),
            d,
        )
        .unwrap()
        .with_lipschitz(LipschitzHint { f: 3.0, g: 1.0 });
        let r = sys.validate(200, 7).unwrap();
        assert!((r.lipschitz_f - 3.0).abs() < 1e-9);
        assert_eq!(r.within_hint, Some(true));
    }

    #[test]
    fn singular_values_detect_dependence() {
        assert!(smallest_singular_value(&[vec![1.0, 0.0], vec![0.0, 1.0]]) > 0.9);
        assert!(smallest_singular_value(&[vec![1.0, 1.0], vec![1.0, 1.0]]) < 1e-12);
    }
}
