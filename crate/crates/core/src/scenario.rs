//! Declarative JSON scenarios: parsing, compilation to model objects and task
//! execution. Outputs are plain data ([`RunOutput`]); writing files is left
//! to the caller.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::avoidance::{
    minimal_reaching_impulse, search_multi_atom, search_regular_controls, search_single_atom, terminal_value,
    AvoidanceProblem, SearchResult,
};
use crate::error::Error;
use crate::expr::Expr;
use crate::frobenius::{fast_curve_tube, frobenius_check, frobenius_check_at, shape_sensitivity};
use crate::model::{
    norm, sub, validate_shape, ConstraintSet, Density, DomainBox, DynamicTrajectory, ImpulseAtom, ImpulseControl,
    LipschitzHint, Shape, SystemSpec, SHAPE_PRESETS, SHAPE_TOL,
};
use crate::regularization::{convergence_report, regularized_solve};
use crate::solver::{contraction_solve, representation_audit, solve_ivp, SolveOptions};
use crate::viability::{
    impulse_viability_check, stability_check, trajectory_viability_audit, CertificateOptions, DEFAULT_S_GRID,
};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("malformed JSON: {0}")]
    Json(#[from] serde_json::Error),

    #[error("schema violation at {pointer}: {message}")]
    Schema { pointer: String, message: String },

    #[error("invalid value at {pointer}: {source}")]
    Field {
        pointer: String,
        #[source]
        source: Error,
    },

    #[error("{task} task failed: {source}")]
    Task {
        task: &'static str,
        #[source]
        source: Error,
    },
}

type SResult<T> = std::result::Result<T, ScenarioError>;

fn field<T>(pointer: impl Into<String>, r: crate::error::Result<T>) -> SResult<T> {
    r.map_err(|source| ScenarioError::Field {
        pointer: pointer.into(),
        source,
    })
}

fn schema(pointer: impl Into<String>, message: impl Into<String>) -> ScenarioError {
    ScenarioError::Schema {
        pointer: pointer.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Expectation {
    #[default]
    Pass,
    Fail,
}

/// A shape: preset name, expression in `s`, or a uniform sample grid on `J`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ShapeSpec {
    Named(String),
    Samples {
        samples: Vec<f64>,
        #[serde(default)]
        normalize: bool,
    },
}

impl Default for ShapeSpec {
    fn default() -> Self {
        ShapeSpec::Named("flat".into())
    }
}

impl ShapeSpec {
    fn build(&self, pointer: &str) -> SResult<Shape> {
        let shape = match self {
            ShapeSpec::Named(name) => match Shape::preset(name) {
                Some(s) => s,
                None => field(pointer, Expr::parse(name, 0).and_then(Shape::from_expr))?,
            },
            ShapeSpec::Samples { samples, normalize } => {
                let label = format!("samples[{}]", samples.len());
                if *normalize {
                    field(pointer, Shape::normalized_samples(label, samples.clone()))?
                } else {
                    field(pointer, Shape::sampled(label, samples.clone()))?
                }
            }
        };
        let report = field(pointer, validate_shape(&shape, SHAPE_TOL))?;
        if !report.pass {
            return Err(ScenarioError::Field {
                pointer: pointer.into(),
                source: Error::invalid(format!("shape integrates to {} instead of 1", report.integral)),
            });
        }
        Ok(shape)
    }
}

/// One shape shared by every component, or one per component.
fn build_shapes(specs: &[ShapeSpec], n: usize, pointer: &str) -> SResult<Vec<Shape>> {
    match specs.len() {
        1 => Ok(vec![specs[0].build(pointer)?; n]),
        k if k == n => specs
            .iter()
            .enumerate()
            .map(|(i, s)| s.build(&format!("{pointer}/{i}")))
            .collect(),
        k => Err(schema(pointer, format!("expected 1 or {n} shapes, got {k}"))),
    }
}

/// A scalar or a vector; scalars are accepted where `n = 1`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum VectorSpec {
    Scalar(f64),
    Vector(Vec<f64>),
}

impl VectorSpec {
    fn to_vec(&self, n: usize, pointer: &str) -> SResult<Vec<f64>> {
        let v = match self {
            VectorSpec::Scalar(x) => vec![*x],
            VectorSpec::Vector(v) => v.clone(),
        };
        if v.len() != n {
            return Err(schema(pointer, format!("expected {n} entries, got {}", v.len())));
        }
        Ok(v)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AtomSpec {
    pub tau: f64,
    pub c: VectorSpec,
    #[serde(default)]
    pub shape: Option<ShapeSpec>,
    #[serde(default)]
    pub shapes: Option<Vec<ShapeSpec>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintSpec {
    pub eta: String,
    #[serde(default)]
    pub grad: Option<Vec<String>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub t: [f64; 2],
    pub x: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LipschitzSpec {
    pub f: f64,
    pub g: f64,
}

fn default_tol() -> f64 {
    1e-8
}

fn default_steps() -> usize {
    crate::jump::DEFAULT_JUMP_STEPS
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tolerances {
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_steps")]
    pub jump_steps: usize,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            tol: default_tol(),
            jump_steps: default_steps(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensitivitySpec {
    pub tau: f64,
    pub x_minus: VectorSpec,
    pub c: VectorSpec,
    /// Each member lists one shape (shared) or one per component.
    pub family: Vec<Vec<ShapeSpec>>,
}

fn default_simulations() -> usize {
    200
}

fn default_audit_tol() -> f64 {
    1e-6
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSpec {
    #[serde(default = "default_simulations")]
    pub count: usize,
    #[serde(default)]
    pub seed: u64,
    /// Box the random starts are drawn from (rejected when outside `M`).
    pub x0_box: Vec<[f64; 2]>,
    #[serde(default = "default_audit_tol")]
    pub tol: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegularSpec {
    pub bins: usize,
    pub window: [f64; 2],
    pub quanta: usize,
    #[serde(default)]
    pub direction: Option<Vec<f64>>,
}

fn default_frobenius_samples() -> usize {
    128
}

fn default_frobenius_tol() -> f64 {
    crate::frobenius::DEFAULT_FROBENIUS_TOL
}

fn default_s_grid() -> usize {
    DEFAULT_S_GRID
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskSpec {
    Solve {
        #[serde(default)]
        grid: Vec<f64>,
        /// Margin `N` of the contraction cross-check; omitted to skip it.
        #[serde(default)]
        contraction: Option<f64>,
    },
    Regularize {
        n: Vec<usize>,
        probes: Vec<f64>,
        #[serde(default)]
        families: Vec<Vec<ShapeSpec>>,
    },
    Frobenius {
        #[serde(default = "default_frobenius_samples")]
        samples: usize,
        #[serde(default = "default_frobenius_tol")]
        tol: f64,
        #[serde(default)]
        sensitivity: Option<SensitivitySpec>,
    },
    Viability {
        #[serde(default)]
        omega: Option<[f64; 2]>,
        #[serde(default)]
        samples: Option<usize>,
        #[serde(default = "default_s_grid")]
        s_grid: usize,
        #[serde(default)]
        simulations: Option<SimulationSpec>,
    },
    Stability {
        x_star: VectorSpec,
        l: Vec<usize>,
        #[serde(default)]
        simulate: bool,
    },
    Avoid {
        budget: f64,
        tau_grid: Vec<f64>,
        c_grid: Vec<VectorSpec>,
        #[serde(default)]
        shape: ShapeSpec,
        t_max: f64,
        #[serde(default)]
        multi_atom: Option<usize>,
        #[serde(default)]
        regular: Option<RegularSpec>,
    },
    Reach {
        t_end: f64,
        /// 1-based state component that must reach `target`.
        component: usize,
        target: f64,
        tau_grid: Vec<f64>,
        c_max: f64,
        #[serde(default)]
        direction: Option<Vec<f64>>,
        #[serde(default)]
        shape: ShapeSpec,
        /// A coefficient to compare against the minimum (e.g. a claimed optimum).
        #[serde(default)]
        compare_c: Option<f64>,
    },
}

impl TaskSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            TaskSpec::Solve { .. } => "solve",
            TaskSpec::Regularize { .. } => "regularize",
            TaskSpec::Frobenius { .. } => "frobenius",
            TaskSpec::Viability { .. } => "viability",
            TaskSpec::Stability { .. } => "stability",
            TaskSpec::Avoid { .. } => "avoid",
            TaskSpec::Reach { .. } => "reach",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub description: Option<String>,
    pub dimension: usize,
    pub f: Vec<String>,
    pub g: Vec<Vec<String>>,
    #[serde(default)]
    pub w: Option<Vec<String>>,
    #[serde(default)]
    pub atoms: Vec<AtomSpec>,
    #[serde(default)]
    pub constraints: Vec<ConstraintSpec>,
    pub domain: DomainSpec,
    #[serde(default)]
    pub lipschitz: Option<LipschitzSpec>,
    pub t0: f64,
    pub x0: VectorSpec,
    pub horizon: f64,
    #[serde(default)]
    pub tolerances: Tolerances,
    pub task: TaskSpec,
    #[serde(default)]
    pub expect: Expectation,
}

/// A validated scenario with its model objects built.
pub struct Scenario {
    pub file: ScenarioFile,
    pub system: SystemSpec,
    pub control: ImpulseControl,
    pub constraints: Option<ConstraintSet>,
    pub x0: Vec<f64>,
    pub opts: SolveOptions,
}

fn to_pointer(path: &serde_path_to_error::Path) -> String {
    let mut out = String::new();
    for seg in path.iter() {
        use serde_path_to_error::Segment;
        match seg {
            Segment::Seq { index } => out.push_str(&format!("/{index}")),
            Segment::Map { key } => out.push_str(&format!("/{key}")),
            Segment::Enum { variant } => out.push_str(&format!("/{variant}")),
            Segment::Unknown => out.push_str("/?"),
        }
    }
    if out.is_empty() {
        out.push('/');
    }
    out
}

fn parse_expr(src: &str, n: usize, pointer: &str) -> SResult<Expr> {
    field(pointer, Expr::parse(src, n))
}

impl Scenario {
    pub fn from_json(text: &str) -> SResult<Scenario> {
        let value: Value = serde_json::from_str(text)?;
        let file: ScenarioFile = serde_path_to_error::deserialize(value).map_err(|e| {
            let pointer = to_pointer(e.path());
            schema(pointer, e.into_inner().to_string())
        })?;
        Scenario::build(file)
    }

    pub fn build(file: ScenarioFile) -> SResult<Scenario> {
        let n = file.dimension;
        if n == 0 {
            return Err(schema("/dimension", "dimension must be at least 1"));
        }
        if file.f.len() != n {
            return Err(schema("/f", format!("expected {n} entries, got {}", file.f.len())));
        }
        if file.g.len() != n {
            return Err(schema("/g", format!("expected {n} rows, got {}", file.g.len())));
        }
        let f = file
            .f
            .iter()
            .enumerate()
            .map(|(i, s)| parse_expr(s, n, &format!("/f/{i}")))
            .collect::<SResult<Vec<_>>>()?;
        let mut g = Vec::with_capacity(n);
        for (i, row) in file.g.iter().enumerate() {
            if row.len() != n {
                return Err(schema(
                    format!("/g/{i}"),
                    format!("expected {n} entries, got {}", row.len()),
                ));
            }
            g.push(
                row.iter()
                    .enumerate()
                    .map(|(j, s)| parse_expr(s, n, &format!("/g/{i}/{j}")))
                    .collect::<SResult<Vec<_>>>()?,
            );
        }
        if file.domain.x.len() != n {
            return Err(schema("/domain/x", format!("expected {n} intervals")));
        }
        let domain = field(
            "/domain",
            DomainBox::new(
                (file.domain.t[0], file.domain.t[1]),
                file.domain.x.iter().map(|[a, b]| (*a, *b)).collect(),
            ),
        )?;
        let mut system = field("/g", SystemSpec::from_exprs(f, g, domain))?;
        if let Some(l) = &file.lipschitz {
            system = system.with_lipschitz(LipschitzHint { f: l.f, g: l.g });
        }

        let density = match &file.w {
            None => None,
            Some(w) => {
                if w.len() != n {
                    return Err(schema("/w", format!("expected {n} entries, got {}", w.len())));
                }
                let exprs = w
                    .iter()
                    .enumerate()
                    .map(|(i, s)| parse_expr(s, n, &format!("/w/{i}")))
                    .collect::<SResult<Vec<_>>>()?;
                Some(field("/w", Density::from_exprs(exprs))?)
            }
        };
        let mut atoms = Vec::with_capacity(file.atoms.len());
        for (k, a) in file.atoms.iter().enumerate() {
            let p = format!("/atoms/{k}");
            let c = a.c.to_vec(n, &format!("{p}/c"))?;
            let shapes = match (&a.shape, &a.shapes) {
                (Some(_), Some(_)) => return Err(schema(&p, "give either `shape` or `shapes`, not both")),
                (Some(s), None) => vec![s.build(&format!("{p}/shape"))?; n],
                (None, Some(list)) => build_shapes(list, n, &format!("{p}/shapes"))?,
                (None, None) => vec![Shape::flat(); n],
            };
            atoms.push(field(&p, ImpulseAtom::new(a.tau, c, shapes))?);
        }
        let control = field("/atoms", ImpulseControl::new(n, density, atoms))?;

        let constraints = if file.constraints.is_empty() {
            None
        } else {
            let mut items = Vec::new();
            for (i, c) in file.constraints.iter().enumerate() {
                let p = format!("/constraints/{i}");
                let eta = parse_expr(&c.eta, n, &format!("{p}/eta"))?;
                let grad = match &c.grad {
                    None => None,
                    Some(gs) => Some(
                        gs.iter()
                            .enumerate()
                            .map(|(j, s)| parse_expr(s, n, &format!("{p}/grad/{j}")))
                            .collect::<SResult<Vec<_>>>()?,
                    ),
                };
                items.push((eta, grad));
            }
            Some(field("/constraints", ConstraintSet::from_exprs(n, items))?)
        };
        let x0 = file.x0.to_vec(n, "/x0")?;
        if !(file.t0 < file.horizon) {
            return Err(schema("/horizon", "horizon must exceed t0"));
        }
        let opts = SolveOptions {
            tol: file.tolerances.tol,
            jump_steps: file.tolerances.jump_steps,
            ..Default::default()
        };
        Ok(Scenario {
            file,
            system,
            control,
            constraints,
            x0,
            opts,
        })
    }

    pub fn name(&self) -> &str {
        self.file.name.as_deref().unwrap_or("scenario")
    }

    pub fn with_overrides(mut self, tol: Option<f64>, steps: Option<usize>) -> Scenario {
        if let Some(t) = tol {
            self.opts.tol = t;
            self.file.tolerances.tol = t;
        }
        if let Some(s) = steps {
            self.opts.jump_steps = s;
            self.file.tolerances.jump_steps = s;
        }
        self
    }

    fn constraints(&self, task: &'static str) -> SResult<&ConstraintSet> {
        self.constraints.as_ref().ok_or_else(|| ScenarioError::Task {
            task,
            source: Error::invalid("task needs `constraints`"),
        })
    }

    /// Solves the scenario's own initial value problem on `[t0, horizon]`.
    pub fn solve(&self, grid: &[f64]) -> crate::error::Result<DynamicTrajectory> {
        let opts = self.opts.clone().with_grid(grid.to_vec());
        solve_ivp(
            &self.system,
            &self.control,
            self.file.t0,
            &self.x0,
            self.file.horizon,
            &opts,
        )
    }

    pub fn run(&self) -> SResult<RunOutput> {
        let task = self.file.task.kind();
        let wrap = |source| ScenarioError::Task { task, source };
        let grid = match &self.file.task {
            TaskSpec::Solve { grid, .. } => grid.clone(),
            _ => Vec::new(),
        };
        let traj = self.solve(&grid).map_err(wrap)?;
        let audit = representation_audit(&self.system, &self.control, &traj, self.opts.tol).map_err(wrap)?;
        let mut out = RunOutput {
            name: self.name().to_string(),
            task,
            report: json!({}),
            tables: trajectory_tables(&traj),
            documents: Vec::new(),
            passed: true,
            expect: self.file.expect.clone(),
        };
        let mut report = serde_json::Map::new();
        report.insert("scenario".into(), json!(self.name()));
        report.insert("task".into(), json!(task));
        report.insert(
            "trajectory".into(),
            json!({
                "final": traj.last(),
                "exit": traj.exit,
                "jumps": traj.jumps.iter().map(|j| json!({"tau": j.tau, "x_minus": j.x_minus, "x_plus": j.x_plus})).collect::<Vec<_>>(),
            }),
        );
        report.insert("representation_audit".into(), json!(audit));
        if let Some(m) = &self.constraints {
            let va = trajectory_viability_audit(&traj, m, default_audit_tol()).map_err(wrap)?;
            report.insert("viability_audit".into(), json!(va));
        }
        let passed = match &self.file.task {
            TaskSpec::Solve { contraction, .. } => {
                let mut ok = audit.pass;
                if let Some(n_bound) = contraction {
                    let res = contraction_solve(
                        &self.system,
                        &self.control,
                        self.file.t0,
                        &self.x0,
                        *n_bound,
                        self.opts.jump_steps,
                    )
                    .map_err(wrap)?;
                    let nodes: Vec<f64> = res.trajectory.slow.iter().map(|p| p.t).collect();
                    let direct = solve_ivp(
                        &self.system,
                        &self.control,
                        self.file.t0,
                        &self.x0,
                        self.file.t0 + res.h,
                        &SolveOptions {
                            tol: 1e-10,
                            grid: nodes,
                            ..self.opts.clone()
                        },
                    )
                    .map_err(wrap)?;
                    let deviation = res.deviation_from(&direct);
                    ok &= res.lambda < 1.0 && deviation <= 1e-8;
                    report.insert(
                        "contraction".into(),
                        json!({
                            "h": res.h,
                            "lambda": res.lambda,
                            "iterations": res.iterations,
                            "observed_ratio": res.observed_ratio(),
                            "deviation_from_direct": deviation,
                        }),
                    );
                }
                ok
            }
            TaskSpec::Regularize { n, probes, families } => {
                self.run_regularize(n, probes, families, &mut report, &mut out)?
            }
            TaskSpec::Frobenius {
                samples,
                tol,
                sensitivity,
            } => {
                let rep = frobenius_check(&self.system, *samples, *tol).map_err(wrap)?;
                let tube = frobenius_check_at(&self.system, &fast_curve_tube(&traj), *tol).map_err(wrap)?;
                report.insert("frobenius".into(), json!(rep));
                report.insert("frobenius_on_fast_curves".into(), json!(tube));
                if let Some(sens) = sensitivity {
                    let n = self.system.dim();
                    let x_minus = sens.x_minus.to_vec(n, "/task/sensitivity/x_minus")?;
                    let c = sens.c.to_vec(n, "/task/sensitivity/c")?;
                    let family = sens
                        .family
                        .iter()
                        .enumerate()
                        .map(|(i, f)| build_shapes(f, n, &format!("/task/sensitivity/family/{i}")))
                        .collect::<SResult<Vec<_>>>()?;
                    let s = shape_sensitivity(&self.system, sens.tau, &x_minus, &c, &family, self.opts.jump_steps)
                        .map_err(wrap)?;
                    report.insert("shape_sensitivity".into(), json!(s));
                }
                out.documents.push(("certificate.json".into(), json!(rep)));
                rep.pass
            }
            TaskSpec::Viability {
                omega,
                samples,
                s_grid,
                simulations,
            } => {
                let m = self.constraints(task)?;
                let omega = omega.map(|[a, b]| (a, b)).unwrap_or((self.file.t0, self.file.horizon));
                let copts = CertificateOptions {
                    samples: *samples,
                    s_grid: *s_grid,
                    ..Default::default()
                };
                let cert = impulse_viability_check(&self.system, &self.control, m, omega, &copts).map_err(wrap)?;
                let mut ok = cert.certified();
                report.insert("certificate".into(), json!(cert));
                out.documents.push(("certificate.json".into(), json!(cert)));
                if let Some(sim) = simulations {
                    let res = self.random_simulations(m, sim).map_err(wrap)?;
                    ok &= res.failures == 0;
                    report.insert("simulations".into(), json!(res));
                }
                ok
            }
            TaskSpec::Stability { x_star, l, simulate } => {
                let n = self.system.dim();
                let x_star = x_star.to_vec(n, "/task/x_star")?;
                let rep = stability_check(&self.system, &x_star, &self.control, l, &CertificateOptions::default())
                    .map_err(wrap)?;
                let mut ok = rep.pass;
                report.insert("stability".into(), json!(rep));
                out.documents.push(("certificate.json".into(), json!(rep)));
                if *simulate {
                    let sims = self.sphere_simulations(&x_star, l).map_err(wrap)?;
                    ok &= sims.iter().all(|s| s.contained);
                    report.insert("simulations".into(), json!(sims));
                }
                ok
            }
            TaskSpec::Avoid {
                budget,
                tau_grid,
                c_grid,
                shape,
                t_max,
                multi_atom,
                regular,
            } => {
                let m = self.constraints(task)?;
                let n = self.system.dim();
                let cs = c_grid
                    .iter()
                    .enumerate()
                    .map(|(i, c)| c.to_vec(n, &format!("/task/c_grid/{i}")))
                    .collect::<SResult<Vec<_>>>()?;
                let shape = shape.build("/task/shape")?;
                let problem = AvoidanceProblem {
                    system: &self.system,
                    t0: self.file.t0,
                    x0: &self.x0,
                    m,
                    budget: *budget,
                    t_max: *t_max,
                    opts: &self.opts,
                };
                let single = search_single_atom(&problem, tau_grid, &cs, &shape).map_err(wrap)?;
                out.tables.push(search_table("search.csv", &single));
                report.insert("best_single_atom".into(), json!(single.best));
                report.insert("rejected".into(), json!(single.rejected));
                let mut best = json!({"single_atom": single.best});
                if let Some(k) = multi_atom {
                    let multi = search_multi_atom(&problem, tau_grid, &cs, &shape, *k).map_err(wrap)?;
                    out.tables.push(search_table("search_multi.csv", &multi));
                    report.insert("best_multi_atom".into(), json!(multi.best));
                    best["multi_atom"] = json!(multi.best);
                }
                if let Some(r) = regular {
                    let dir = r.direction.clone().unwrap_or_else(|| {
                        let mut d = vec![0.0; n];
                        d[0] = 1.0;
                        d
                    });
                    let reg = search_regular_controls(&problem, r.bins, (r.window[0], r.window[1]), r.quanta, &dir)
                        .map_err(wrap)?;
                    let mut header: Vec<String> = (1..=r.bins).map(|k| format!("mass_{k}")).collect();
                    header.push("T".into());
                    out.tables.push(Table {
                        name: "regular.csv".into(),
                        header,
                        rows: reg
                            .table
                            .iter()
                            .map(|c| c.masses.iter().chain([&c.t]).map(|v| num(*v)).collect())
                            .collect(),
                    });
                    report.insert("best_regular".into(), json!(reg.best));
                    report.insert("impulse_gap".into(), json!(single.best.t - reg.best.t));
                    best["regular"] = json!(reg.best);
                }
                out.documents.push(("best.json".into(), best));
                true
            }
            TaskSpec::Reach {
                t_end,
                component,
                target,
                tau_grid,
                c_max,
                direction,
                shape,
                compare_c,
            } => {
                let n = self.system.dim();
                if *component == 0 || *component > n {
                    return Err(schema("/task/component", format!("component must be in 1..={n}")));
                }
                let dir = direction.clone().unwrap_or_else(|| {
                    let mut d = vec![0.0; n];
                    d[component - 1] = 1.0;
                    d
                });
                let shape = shape.build("/task/shape")?;
                let res = minimal_reaching_impulse(
                    &self.system,
                    self.file.t0,
                    &self.x0,
                    *t_end,
                    component - 1,
                    *target,
                    tau_grid,
                    *c_max,
                    &dir,
                    &shape,
                    &self.opts,
                )
                .map_err(wrap)?;
                out.tables.push(Table {
                    name: "reach.csv".into(),
                    header: vec!["tau".into(), "c".into()],
                    rows: res
                        .rows
                        .iter()
                        .map(|r| vec![num(r.tau), r.c.map(num).unwrap_or_default()])
                        .collect(),
                });
                report.insert("minimal".into(), json!({"tau": res.tau, "c": res.c}));
                if let Some(c) = compare_c {
                    let atom = ImpulseAtom::shared(res.tau, dir.iter().map(|d| d * c).collect(), shape.clone())
                        .map_err(wrap)?;
                    let reached = terminal_value(
                        &self.system,
                        self.file.t0,
                        &self.x0,
                        *t_end,
                        component - 1,
                        Some(&atom),
                        &self.opts,
                    )
                    .map_err(wrap)?;
                    report.insert(
                        "comparison".into(),
                        json!({
                            "c": c,
                            "terminal_value": reached,
                            "target": target,
                            "reaches_target": (reached - target).abs() <= 1e-6,
                            "note": format!(
                                "c = {c} at tau = {} gives x_{component}({t_end}-) = {reached:.6}, not {target}; the minimal coefficient is {:.6}",
                                res.tau, res.c
                            ),
                        }),
                    );
                }
                out.documents
                    .push(("best.json".into(), json!({"tau": res.tau, "c": res.c})));
                true
            }
        };
        report.insert("passed".into(), json!(passed));
        out.passed = passed;
        out.report = Value::Object(report);
        Ok(out)
    }

    fn run_regularize(
        &self,
        n_list: &[usize],
        probes: &[f64],
        families: &[Vec<ShapeSpec>],
        report: &mut serde_json::Map<String, Value>,
        out: &mut RunOutput,
    ) -> SResult<bool> {
        let wrap = |source| ScenarioError::Task {
            task: "regularize",
            source,
        };
        let (t0, horizon) = (self.file.t0, self.file.horizon);
        let n = self.system.dim();
        if families.is_empty() {
            let rep = convergence_report(
                &self.system,
                &self.control,
                t0,
                &self.x0,
                horizon,
                n_list,
                probes,
                &self.opts,
            )
            .map_err(wrap)?;
            out.tables.push(Table {
                name: "convergence.csv".into(),
                header: vec!["n".into(), "t".into(), "distance".into()],
                rows: rep
                    .rows
                    .iter()
                    .map(|r| vec![r.n.to_string(), num(r.t), num(r.distance)])
                    .collect(),
            });
            let ok = rep.converged;
            report.insert("convergence".into(), json!(rep));
            return Ok(ok);
        }
        let n_max = *n_list.iter().max().ok_or_else(|| schema("/task/n", "empty list"))?;
        let mut rows = Vec::new();
        let mut limits = Vec::new();
        let mut all_converged = true;
        for (i, fam) in families.iter().enumerate() {
            let shapes = build_shapes(fam, n, &format!("/task/families/{i}"))?;
            let atoms = self
                .control
                .atoms()
                .iter()
                .map(|a| ImpulseAtom::new(a.tau, a.c.clone(), shapes.clone()))
                .collect::<crate::error::Result<Vec<_>>>()
                .map_err(wrap)?;
            let control = self.control.with_atoms(atoms).map_err(wrap)?;
            let rep = convergence_report(
                &self.system,
                &control,
                t0,
                &self.x0,
                horizon,
                n_list,
                probes,
                &self.opts,
            )
            .map_err(wrap)?;
            all_converged &= rep.converged;
            let label = shapes.iter().map(Shape::label).collect::<Vec<_>>().join("+");
            rows.extend(
                rep.rows
                    .iter()
                    .map(|r| vec![label.clone(), r.n.to_string(), num(r.t), num(r.distance)]),
            );
            let limit = regularized_solve(&self.system, &control, n_max, t0, &self.x0, horizon, &self.opts)
                .map_err(wrap)?
                .last()
                .x
                .clone();
            limits.push(json!({"family": label, "converged": rep.converged, "sup": rep.sup, "limit": limit}));
        }
        let values: Vec<Vec<f64>> = limits
            .iter()
            .map(|l| serde_json::from_value(l["limit"].clone()).unwrap_or_default())
            .collect();
        let mut gap = 0.0f64;
        for a in 0..values.len() {
            for b in a + 1..values.len() {
                gap = gap.max(norm(&sub(&values[a], &values[b])));
            }
        }
        out.tables.push(Table {
            name: "convergence.csv".into(),
            header: vec!["family".into(), "n".into(), "t".into(), "distance".into()],
            rows,
        });
        report.insert("families".into(), json!(limits));
        report.insert("limit_gap".into(), json!(gap));
        Ok(all_converged)
    }

    fn random_simulations(&self, m: &ConstraintSet, sim: &SimulationSpec) -> crate::error::Result<SimulationSummary> {
        let n = self.system.dim();
        if sim.x0_box.len() != n {
            return Err(Error::invalid(format!("x0_box must have {n} intervals")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(sim.seed);
        let mut runs = Vec::with_capacity(sim.count);
        while runs.len() < sim.count {
            let x0: Vec<f64> = sim.x0_box.iter().map(|[a, b]| rng.gen_range(*a..=*b)).collect();
            if !m.contains(&x0, 0.0)? || !self.system.domain().contains(&x0) {
                continue;
            }
            let mut atoms = Vec::with_capacity(self.control.atoms().len());
            for a in self.control.atoms() {
                let shapes = (0..n)
                    .map(|_| {
                        let values: Vec<f64> = (0..17).map(|_| rng.gen_range(0.0..1.0)).collect();
                        Shape::normalized_samples("random", values)
                    })
                    .collect::<crate::error::Result<Vec<_>>>()?;
                atoms.push(ImpulseAtom::new(a.tau, a.c.clone(), shapes)?);
            }
            runs.push((x0, atoms));
        }
        let results = runs
            .par_iter()
            .map(|(x0, atoms)| {
                let control = self.control.with_atoms(atoms.clone())?;
                let traj = solve_ivp(&self.system, &control, self.file.t0, x0, self.file.horizon, &self.opts)?;
                let audit = trajectory_viability_audit(&traj, m, sim.tol)?;
                Ok((x0.clone(), audit))
            })
            .collect::<crate::error::Result<Vec<_>>>()?;
        let failures: Vec<Value> = results
            .iter()
            .filter(|(_, a)| !a.viable)
            .map(|(x0, a)| json!({"x0": x0, "exit": a.exit}))
            .collect();
        Ok(SimulationSummary {
            count: results.len(),
            failures: failures.len(),
            tol: sim.tol,
            seed: sim.seed,
            worst_eta: results.iter().map(|(_, a)| a.max_eta).fold(f64::NEG_INFINITY, f64::max),
            counterexamples: failures.into_iter().take(5).collect(),
        })
    }

    fn sphere_simulations(&self, x_star: &[f64], l_list: &[usize]) -> crate::error::Result<Vec<SphereSimulation>> {
        let n = x_star.len();
        l_list
            .iter()
            .map(|&l| {
                let r = 1.0 / l as f64;
                let starts: Vec<Vec<f64>> = if n == 1 {
                    [-0.5, -0.25, 0.25, 0.5]
                        .iter()
                        .map(|f| vec![x_star[0] + f * r])
                        .collect()
                } else {
                    (0..16)
                        .map(|k| {
                            let a = std::f64::consts::TAU * k as f64 / 16.0;
                            let mut x = x_star.to_vec();
                            x[0] += 0.5 * r * a.cos();
                            x[1] += 0.5 * r * a.sin();
                            x
                        })
                        .collect()
                };
                let mut worst = 0.0f64;
                for x0 in &starts {
                    let traj = solve_ivp(
                        &self.system,
                        &self.control,
                        self.file.t0,
                        x0,
                        self.file.horizon,
                        &self.opts,
                    )?;
                    let radius = |x: &[f64]| norm(&sub(x, x_star));
                    for p in &traj.slow {
                        worst = worst.max(radius(&p.x));
                    }
                    for j in &traj.jumps {
                        for x in &j.curve.gamma {
                            worst = worst.max(radius(x));
                        }
                    }
                }
                Ok(SphereSimulation {
                    l,
                    radius: r,
                    starts: starts.len(),
                    max_distance: worst,
                    contained: worst <= r + 1e-9,
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SimulationSummary {
    pub count: usize,
    pub failures: usize,
    pub tol: f64,
    pub seed: u64,
    pub worst_eta: f64,
    pub counterexamples: Vec<Value>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SphereSimulation {
    pub l: usize,
    pub radius: f64,
    pub starts: usize,
    pub max_distance: f64,
    pub contained: bool,
}

/// A CSV-shaped table.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

/// Everything a run produces, ready to be written out.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub name: String,
    pub task: &'static str,
    pub report: Value,
    pub tables: Vec<Table>,
    /// Extra JSON documents (file name, content).
    pub documents: Vec<(String, Value)>,
    pub passed: bool,
    pub expect: Expectation,
}

impl RunOutput {
    /// Whether the outcome is the one the scenario declares.
    pub fn as_expected(&self) -> bool {
        self.passed == (self.expect == Expectation::Pass)
    }
}

/// Shortest round-trip decimal form.
pub fn num(v: f64) -> String {
    format!("{v}")
}

pub fn trajectory_tables(traj: &DynamicTrajectory) -> Vec<Table> {
    let mut header = vec!["t".to_string(), "side".to_string()];
    header.extend((1..=traj.n).map(|i| format!("x_{i}")));
    let mut tables = vec![Table {
        name: "trajectory.csv".into(),
        header,
        rows: traj
            .slow
            .iter()
            .map(|p| {
                let mut row = vec![num(p.t), p.side.symbol().to_string()];
                row.extend(p.x.iter().map(|v| num(*v)));
                row
            })
            .collect(),
    }];
    for (k, j) in traj.jumps.iter().enumerate() {
        let mut header = vec!["s".to_string()];
        header.extend((1..=traj.n).map(|i| format!("gamma_{i}")));
        tables.push(Table {
            name: format!("fast_{}.csv", k + 1),
            header,
            rows: j
                .curve
                .s
                .iter()
                .zip(&j.curve.gamma)
                .map(|(s, g)| {
                    let mut row = vec![num(*s)];
                    row.extend(g.iter().map(|v| num(*v)));
                    row
                })
                .collect(),
        });
    }
    tables
}

fn join(values: impl IntoIterator<Item = f64>) -> String {
    values.into_iter().map(num).collect::<Vec<_>>().join(";")
}

fn search_table(name: &str, res: &SearchResult) -> Table {
    Table {
        name: name.into(),
        header: vec!["tau".into(), "c".into(), "T".into()],
        rows: res
            .table
            .iter()
            .map(|c| {
                vec![
                    join(c.taus.iter().copied()),
                    c.cs.iter()
                        .map(|v| join(v.iter().copied()))
                        .collect::<Vec<_>>()
                        .join("|"),
                    num(c.t),
                ]
            })
            .collect(),
    }
}

pub struct GalleryEntry {
    pub name: &'static str,
    pub source: &'static str,
}

macro_rules! gallery_entry {
    ($name:literal) => {
        GalleryEntry {
            name: $name,
            source: include_str!(concat!("../gallery/", $name, ".json")),
        }
    };
}

static GALLERY: &[GalleryEntry] = &[
    gallery_entry!("exponential_jump"),
    gallery_entry!("contraction_window"),
    gallery_entry!("regularization_limit"),
    gallery_entry!("viability_interval"),
    gallery_entry!("viability_signed_shape"),
    gallery_entry!("stability_spheres"),
    gallery_entry!("stability_outward"),
    gallery_entry!("avoidance_budget"),
    gallery_entry!("oversized_atom"),
    gallery_entry!("minimal_reach"),
    gallery_entry!("frobenius_commuting"),
    gallery_entry!("frobenius_noncommuting"),
    gallery_entry!("regularization_noncommuting"),
];

/// Bundled scenarios, one per worked example.
pub fn gallery() -> &'static [GalleryEntry] {
    GALLERY
}

pub fn gallery_entry(name: &str) -> Option<&'static GalleryEntry> {
    let stem = name.strip_suffix(".json").unwrap_or(name);
    GALLERY.iter().find(|e| e.name == stem)
}

#[derive(Debug, Clone, Serialize)]
pub struct Presets {
    pub shapes: Vec<(String, f64)>,
    pub scenarios: Vec<String>,
}

/// Built-in shape names with their integrals, and the gallery names.
pub fn list_presets() -> Presets {
    Presets {
        shapes: SHAPE_PRESETS
            .iter()
            .map(|n| {
                let integral = Shape::preset(n).and_then(|s| s.integral().ok()).unwrap_or(f64::NAN);
                (n.to_string(), integral)
            })
            .collect(),
        scenarios: GALLERY.iter().map(|e| e.name.to_string()).collect(),
    }
}
