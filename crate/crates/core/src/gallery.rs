//! Ready-made problems on the unit square with zero boundary values.
//!
//! The trained examples solve `k Δu + 1 = 0`; the network output is
//! multiplied by `x(1−x)y(1−y)` so the boundary condition holds exactly.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::domain::Domain;
use crate::evaluator::Evaluator;
use crate::fem::VOLUME_REGION;
use crate::nn::{Activation, Model, OptimizerSpec, Schedule};
use crate::solver::persist::{Artifact, ArtifactKind};
use crate::solver::{Core, HistoryRow, Result, SolveOptions, SolverError, TrainHistory, Value};
use crate::tensor::Tensor;
use crate::trace::Expr;

pub const EXAMPLES: [&str; 5] = [
    "poisson-pinn",
    "poisson-deeponet",
    "poisson-fem",
    "heat-fem-time",
    "poisson-vpinn",
];

const WALLS: [&str; 4] = ["left", "right", "top", "bottom"];

/// Overrides for a gallery run. `params` accepts `lr`, `width`, `depth`
/// and, for the operator example, `basis`.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub epochs: Option<u64>,
    pub batchsize: Option<usize>,
    pub seed: u64,
    pub mesh_size: f64,
    pub params: BTreeMap<String, Value>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            epochs: None,
            batchsize: None,
            seed: 0,
            mesh_size: 0.1,
            params: BTreeMap::new(),
        }
    }
}

impl RunConfig {
    fn float(&self, key: &str, default: f64) -> Result<f64> {
        match self.params.get(key) {
            None => Ok(default),
            Some(v) => v
                .as_f64()
                .ok_or_else(|| SolverError::BadOption(format!("{key} must be a number, got {v}"))),
        }
    }

    fn int(&self, key: &str, default: usize) -> Result<usize> {
        match self.params.get(key) {
            None => Ok(default),
            Some(Value::Int(i)) if *i > 0 => Ok(*i as usize),
            Some(v) => Err(SolverError::BadOption(format!("{key} must be a positive integer, got {v}"))),
        }
    }

    fn check_keys(&self, allowed: &[&str]) -> Result<()> {
        match self.params.keys().find(|k| !allowed.contains(&k.as_str())) {
            Some(k) => Err(SolverError::BadOption(format!(
                "unknown parameter {k:?}; expected one of {allowed:?}"
            ))),
            None => Ok(()),
        }
    }
}

/// A compiled training problem with its default run length.
pub struct Problem {
    pub core: Core,
    pub model: Model,
    pub epochs: u64,
    pub batchsize: Option<usize>,
}

impl Problem {
    /// A requested batchsize covering the whole batch axis means full batch.
    pub fn options(&self, cfg: &RunConfig) -> SolveOptions {
        let mut o = SolveOptions::new(cfg.epochs.unwrap_or(self.epochs));
        let batch = self.core.domain().batch();
        o.batchsize = cfg.batchsize.or(self.batchsize).filter(|&n| n < batch);
        o
    }
}

fn envelope(x: &Expr, y: &Expr) -> Expr {
    x * (1.0 - x) * y * (1.0 - y)
}

fn unit_square(h: f64) -> Result<Domain> {
    Ok(Domain::rect((0.0, 1.0), (0.0, 1.0), h)?)
}

/// MLP on `(x, y)` with a hard boundary envelope; residual of `k Δu + 1`.
pub fn poisson_pinn(cfg: &RunConfig) -> Result<Problem> {
    cfg.check_keys(&["lr", "width", "depth"])?;
    let d = unit_square(cfg.mesh_size)?;
    let hidden = vec![cfg.int("width", 32)?; cfg.int("depth", 2)?];
    let net = Model::mlp("net", 2, &hidden, 1, Activation::Tanh, cfg.seed)?;
    net.optimizer(OptimizerSpec::adam(cfg.float("lr", 1e-3)?));
    let xy = d.variable("interior")?;
    let (x, y) = (&xy[0], &xy[1]);
    let u = net.call(&[x.clone(), y.clone()]) * envelope(x, y);
    let k = 1.0;
    let pde = (u.dd(x) + u.dd(y)) * k + 1.0;
    let core = Core::builder(vec![pde.mse().named("pde")], d)
        .seed(cfg.seed)
        .build()?;
    Ok(Problem {
        core,
        model: net,
        epochs: 1000,
        batchsize: None,
    })
}

/// Conductivities of the operator example: `n` uniform draws in `[0.5, 1.5]`.
pub fn sample_conductivities(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(0.5..1.5)).collect()
}

/// DeepONet mapping a conductivity `k` to the solution of `k Δu + 1 = 0`,
/// trained on 500 sampled conductivities in batches of 32.
pub fn poisson_deeponet(cfg: &RunConfig) -> Result<Problem> {
    cfg.check_keys(&["lr", "width", "basis"])?;
    let batch = 500;
    let mut d = unit_square(cfg.mesh_size)?.repeat(batch)?;
    let ks = sample_conductivities(batch, cfg.seed);
    let k = d.tensor_variable("k", Tensor::new(vec![batch, 1, 1], ks).map_err(crate::evaluator::EvalError::from)?)?;
    let net = Model::deeponet("net", 1, 2, cfg.int("basis", 32)?, cfg.int("width", 32)?, cfg.seed)?;
    net.optimizer(OptimizerSpec::adam(Schedule::cosine(cfg.float("lr", 1e-3)?, 10_000, 1e-5)));
    let xy = d.variable("interior")?;
    let (x, y) = (&xy[0], &xy[1]);
    let u = net.call(&[k.clone(), Expr::concat(&[x.clone(), y.clone()], -1)]) * envelope(x, y);
    let pde = &k * (u.dd(x) + u.dd(y)) + 1.0;
    let core = Core::builder(vec![pde.mse().named("pde")], d)
        .seed(cfg.seed)
        .build()?;
    Ok(Problem {
        core,
        model: net,
        epochs: 600,
        batchsize: Some(32),
    })
}

/// MLP trial function fitted by minimizing its weak residual against the
/// hat functions of the mesh.
pub fn poisson_vpinn(cfg: &RunConfig) -> Result<Problem> {
    cfg.check_keys(&["lr", "width", "depth"])?;
    let mut d = unit_square(cfg.mesh_size)?;
    let bc = d.dirichlet(&WALLS, 0.0);
    d.init_fem("TRI3", 2, vec![bc])?;
    let hidden = vec![cfg.int("width", 32)?; cfg.int("depth", 2)?];
    let net = Model::mlp("net", 2, &hidden, 1, Activation::Tanh, cfg.seed)?;
    net.optimizer(OptimizerSpec::adam(cfg.float("lr", 1e-3)?));
    let weak = constant_load_form(&d, 1.0)?;
    let g = d.variable(VOLUME_REGION)?;
    let (x, y) = (&g[0], &g[1]);
    let trial = net.call(&[x.clone(), y.clone()]) * envelope(x, y);
    let r = d.vpinn(&weak, &trial)?.named("vpinn");
    let core = Core::builder(vec![r], d).seed(cfg.seed).build()?;
    Ok(Problem {
        core,
        model: net,
        epochs: 1000,
        batchsize: None,
    })
}

/// `∇u·∇φ − f φ` for a constant load `f`.
fn constant_load_form(d: &Domain, f: f64) -> Result<Expr> {
    let (u, phi) = d.fem_symbols()?;
    let g = d.variable(VOLUME_REGION)?;
    let (x, y) = (&g[0], &g[1]);
    Ok(u.d(x) * phi.d(x) + u.d(y) * phi.d(y) - &phi * f)
}

/// Nodal FEM solution of `k Δu + 1 = 0` with zero boundary values.
pub fn poisson_reference(mesh_size: f64, k: f64) -> Result<(Domain, Vec<f64>)> {
    let mut d = unit_square(mesh_size)?;
    let bc = d.dirichlet(&WALLS, 0.0);
    d.init_fem("TRI3", 2, vec![bc])?;
    let sys = d.fem_system(&constant_load_form(&d, 1.0 / k)?)?;
    let u = sys.solve()?;
    Ok((d, u))
}

/// Value of a nodal field at `p`.
pub fn field_at(d: &Domain, values: Vec<f64>, p: (f64, f64)) -> Result<f64> {
    let xs = [Expr::constant(Tensor::scalar(p.0)), Expr::constant(Tensor::scalar(p.1))];
    let f = d.nodal_field(values, &xs)?;
    Ok(Evaluator::new(Some(d)).evaluate(&f)?.data()[0])
}

pub fn reference_center(mesh_size: f64, k: f64) -> Result<f64> {
    let (d, u) = poisson_reference(mesh_size, k)?;
    field_at(&d, u, (0.5, 0.5))
}

/// Prediction of an enveloped MLP at `p`.
pub fn mlp_value(model: &Model, p: (f64, f64)) -> Result<f64> {
    let out = model.apply(&[Tensor::new(vec![1, 2], vec![p.0, p.1]).map_err(crate::evaluator::EvalError::from)?])?;
    Ok(out.data()[0] * p.0 * (1.0 - p.0) * p.1 * (1.0 - p.1))
}

/// Prediction of the enveloped operator network for conductivity `k` at `p`.
pub fn deeponet_value(model: &Model, k: f64, p: (f64, f64)) -> Result<f64> {
    let t = |s: Vec<usize>, v: Vec<f64>| Tensor::new(s, v).map_err(crate::evaluator::EvalError::from);
    let out = model.apply(&[t(vec![1, 1], vec![k])?, t(vec![1, 2], vec![p.0, p.1])?])?;
    Ok(out.data()[0] * p.0 * (1.0 - p.0) * p.1 * (1.0 - p.1))
}

/// Result of one gallery run.
pub struct RunOutcome {
    pub history: TrainHistory,
    pub state: Artifact,
    /// Named scalar results, e.g. errors against a reference.
    pub report: Vec<(String, f64)>,
}

impl RunOutcome {
    /// Final logged total, used as the tuning objective.
    pub fn final_loss(&self) -> Option<f64> {
        self.history.last().map(|r| r.total)
    }
}

pub fn run(name: &str, cfg: &RunConfig, history_csv: Option<&Path>) -> Result<RunOutcome> {
    match name {
        "poisson-pinn" | "poisson-deeponet" | "poisson-vpinn" => {
            let mut p = match name {
                "poisson-pinn" => poisson_pinn(cfg)?,
                "poisson-deeponet" => poisson_deeponet(cfg)?,
                _ => poisson_vpinn(cfg)?,
            };
            let mut opts = p.options(cfg);
            opts.history_csv = history_csv.map(Path::to_path_buf);
            let history = p.core.solve(&opts)?;
            let reference = reference_center(cfg.mesh_size, 1.0)?;
            let mut report = vec![("reference_center".to_string(), reference)];
            match name {
                "poisson-deeponet" => {
                    for k in [0.75, 1.25] {
                        let r = reference_center(cfg.mesh_size, k)?;
                        let v = deeponet_value(&p.model, k, (0.5, 0.5))?;
                        report.push((format!("center_k{k}"), v));
                        report.push((format!("relative_error_k{k}"), (v - r).abs() / r.abs()));
                    }
                }
                _ => {
                    let v = mlp_value(&p.model, (0.5, 0.5))?;
                    report.push(("center".into(), v));
                    report.push(("relative_error".into(), (v - reference).abs() / reference.abs()));
                }
            }
            Ok(RunOutcome {
                state: p.core.to_artifact(),
                history,
                report,
            })
        }
        "poisson-fem" => poisson_fem(cfg, history_csv),
        "heat-fem-time" => heat_fem_time(cfg, history_csv),
        other => Err(SolverError::BadOption(format!(
            "unknown example {other:?}; available: {}",
            EXAMPLES.join(", ")
        ))),
    }
}

fn fem_history(column: &str, values: &[f64]) -> TrainHistory {
    TrainHistory {
        constraints: vec![column.to_string()],
        rows: values
            .iter()
            .enumerate()
            .map(|(i, &v)| HistoryRow {
                step: i as u64,
                total: v,
                losses: vec![v],
                lrs: vec![],
                seconds: 0.0,
            })
            .collect(),
        ..TrainHistory::default()
    }
}

fn fem_state(name: &str, cfg: &RunConfig, tensors: Vec<(String, Tensor)>) -> Artifact {
    Artifact {
        kind: ArtifactKind::CoreState,
        tensors,
        meta: serde_json::json!({ "example": name, "mesh_size": cfg.mesh_size }),
    }
}

fn finish(h: TrainHistory, csv: Option<&Path>) -> Result<TrainHistory> {
    if let Some(p) = csv {
        h.write_csv(p)?;
    }
    Ok(h)
}

/// Manufactured `u = sin(πx) sin(πy)` solved by Newton on the assembled
/// residual; history rows are squared residual norms per iteration.
fn poisson_fem(cfg: &RunConfig, csv: Option<&Path>) -> Result<RunOutcome> {
    cfg.check_keys(&[])?;
    let mut d = unit_square(cfg.mesh_size)?;
    let bc = d.dirichlet(&WALLS, 0.0);
    d.init_fem("TRI3", 3, vec![bc])?;
    let (u, phi) = d.fem_symbols()?;
    let g = d.variable(VOLUME_REGION)?;
    let (x, y) = (&g[0], &g[1]);
    let f = (x * PI).sin() * (y * PI).sin() * (2.0 * PI * PI);
    let weak = u.d(x) * phi.d(x) + u.d(y) * phi.d(y) - f * &phi;
    let op = d.fem_residual(&weak)?;
    let n = op.num_free();
    let mut u_free = vec![0.0; n];
    let mut norms = vec![norm_sq(&op.residual(&u_free)?)];
    let iterations = cfg.epochs.unwrap_or(3).max(1);
    for _ in 0..iterations {
        let r = op.residual(&u_free)?;
        let du = op
            .jacobian(&u_free)?
            .lu()
            .map_err(crate::evaluator::EvalError::from)?
            .solve(&r);
        for (a, b) in u_free.iter_mut().zip(du) {
            *a -= b;
        }
        norms.push(norm_sq(&op.residual(&u_free)?));
    }
    let full = d.fem().expect("fem initialized").expand(&u_free);
    let r = d.fem().expect("fem initialized").region(VOLUME_REGION).expect("volume region");
    let uh = r.interpolate(&full);
    let l2 = (0..r.len())
        .map(|q| {
            let (px, py) = (r.points[2 * q], r.points[2 * q + 1]);
            r.weights[q] * (uh[q] - (PI * px).sin() * (PI * py).sin()).powi(2)
        })
        .sum::<f64>()
        .sqrt();
    let nv = full.len();
    Ok(RunOutcome {
        history: finish(fem_history("residual", &norms), csv)?,
        state: fem_state("poisson-fem", cfg, vec![("solution".into(), Tensor::vector(full))]),
        report: vec![("l2_error".into(), l2), ("dofs".into(), nv as f64)],
    })
}

fn norm_sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

/// Heat equation with ν = 1 from the slowest mode, backward Euler with
/// `dt = 1e-3`; history rows are the discrete energy `uᵀMu`.
fn heat_fem_time(cfg: &RunConfig, csv: Option<&Path>) -> Result<RunOutcome> {
    cfg.check_keys(&[])?;
    let mut d = unit_square(cfg.mesh_size)?.with_time(0.0, 1.0, 1)?;
    let bc = d.dirichlet(&WALLS, 0.0);
    d.init_fem("TRI3", 2, vec![bc])?;
    let (u, phi) = d.fem_symbols()?;
    let g = d.variable(VOLUME_REGION)?;
    let (x, y, t) = (&g[0], &g[1], &g[2]);
    let weak = u.d(t) * &phi + u.d(x) * phi.d(x) + u.d(y) * phi.d(y);
    let m = d.mesh();
    let u0: Vec<f64> = (0..m.num_vertices())
        .map(|v| {
            let p = m.vertex(v);
            (PI * p[0]).sin() * (PI * p[1]).sin()
        })
        .collect();
    let mut block = d.fem_time(&weak, true, u0)?;
    let dt = 1e-3;
    let steps = cfg.epochs.unwrap_or(50).max(1) as usize;
    let traj = block.step_backward_euler(dt, steps)?;
    let mass = block.mass();
    let energy: Vec<f64> = traj
        .iter()
        .map(|s| s.iter().zip(mass.matvec(s)).map(|(a, b)| a * b).sum())
        .collect();
    let rate = (energy[steps - 1] / energy[steps]).ln() / (2.0 * dt);
    let expected = 2.0 * PI * PI;
    let last = block.full_state().unwrap_or_default();
    Ok(RunOutcome {
        history: finish(fem_history("energy", &energy), csv)?,
        state: fem_state("heat-fem-time", cfg, vec![("solution".into(), Tensor::vector(last))]),
        report: vec![
            ("decay_rate".into(), rate),
            ("expected_rate".into(), expected),
            ("relative_error".into(), (rate - expected).abs() / expected),
        ],
    })
}
