//! Compiling constraints into one objective and training the models they
//! reach.
//!
//! A [`Core`] holds the CSE'd constraint graphs, their weights, the domain
//! and every model found by walking the graphs. [`Core::solve`] runs the
//! outer loop: draw a batch, take `inner_steps` optimizer updates on it, log
//! one history row, fire trackers, then resample.

pub mod config;
pub mod persist;
pub mod plot;
pub mod tune;

use std::collections::{BTreeMap, HashSet, VecDeque};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::index;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::domain::{Domain, DomainError, ResampleKind};
use crate::evaluator::{EvalError, Evaluator};
use crate::fem::FemError;
use crate::nn::{Model, NnError, OptimizerSpec, OptimizerState};
use crate::tensor::Tensor;
use crate::trace::{cse, print_shapes, trace_shapes, CseStats, Expr, NodeKind, TraceError};
use persist::{Artifact, ArtifactKind, PersistError, SigningKey, VerifyingKey};

pub use config::{Config, ConfigError};
pub use plot::{history_csv, render_svg};
pub use tune::{
    evaluate_all, grid, parse_space, random_search, sample_configs, ArchSpace, Assignment, Category,
    DimSpec, SearchReport, TrialRecord, TuneError, Value,
};

const RESAMPLE_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("constraint {index} is not scalar (shape {shape:?})")]
    NonScalarConstraint { index: usize, shape: Vec<usize> },
    #[error("model {0:?} has no optimizer and no default is set")]
    MissingOptimizer(String),
    #[error("no constraints given")]
    NoConstraints,
    #[error("{got} weights for {want} constraints")]
    WeightCount { got: usize, want: usize },
    #[error("{got} names for {want} constraints")]
    NameCount { got: usize, want: usize },
    #[error("device mesh {0:?} is not available; only (1, 1) runs here")]
    UnsupportedMesh((usize, usize)),
    #[error("batch size {batchsize} exceeds the batch axis ({batch})")]
    BatchTooLarge { batchsize: usize, batch: usize },
    #[error("invalid option: {0}")]
    BadOption(String),
    #[error("loss is NaN at step {0}")]
    NaNLoss(u64),
    #[error("state does not fit this core: {0}")]
    StateMismatch(String),
    #[error("history is empty")]
    EmptyHistory,
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Persist(#[from] PersistError),
    #[error(transparent)]
    Fem(#[from] FemError),
    #[error(transparent)]
    Tune(#[from] TuneError),
}

pub type Result<T> = std::result::Result<T, SolverError>;

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SolverError + '_ {
    move |source| SolverError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HistoryRow {
    pub step: u64,
    pub total: f64,
    pub losses: Vec<f64>,
    pub lrs: Vec<f64>,
    /// Wall-clock seconds of the outer step.
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackerSnapshot {
    pub step: u64,
    pub name: String,
    pub value: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhaseTiming {
    pub step: u64,
    pub phase: String,
    pub seconds: f64,
}

/// Record of a training run: one row per outer step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub constraints: Vec<String>,
    pub models: Vec<String>,
    pub rows: Vec<HistoryRow>,
    pub trackers: Vec<TrackerSnapshot>,
    pub profile: Vec<PhaseTiming>,
    /// Duration of step 0, kept out of [`TrainHistory::mean_step_seconds`].
    pub warmup_seconds: Option<f64>,
    pub metadata: BTreeMap<String, String>,
}

impl TrainHistory {
    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn last(&self) -> Option<&HistoryRow> {
        self.rows.last()
    }

    /// Column `i` of the per-constraint losses.
    pub fn losses(&self, i: usize) -> Vec<f64> {
        self.rows.iter().map(|r| r.losses[i]).collect()
    }

    pub fn totals(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.total).collect()
    }

    pub fn mean_step_seconds(&self) -> Option<f64> {
        let t: Vec<f64> = self.rows.iter().filter(|r| r.step > 0).map(|r| r.seconds).collect();
        (!t.is_empty()).then(|| t.iter().sum::<f64>() / t.len() as f64)
    }

    /// Bitwise equality of everything except wall-clock fields.
    pub fn same_values(&self, o: &TrainHistory) -> bool {
        let bits = |a: &[f64], b: &[f64]| {
            a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
        };
        self.constraints == o.constraints
            && self.models == o.models
            && self.rows.len() == o.rows.len()
            && self.rows.iter().zip(&o.rows).all(|(a, b)| {
                a.step == b.step
                    && a.total.to_bits() == b.total.to_bits()
                    && bits(&a.losses, &b.losses)
                    && bits(&a.lrs, &b.lrs)
            })
            && self.trackers.len() == o.trackers.len()
            && self.trackers.iter().zip(&o.trackers).all(|(a, b)| {
                a.step == b.step && a.name == b.name && a.value.bitwise_eq(&b.value)
            })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, history_csv(self)?).map_err(io_err(path))
    }

    pub fn plot(&self, path: &Path) -> Result<()> {
        std::fs::write(path, render_svg(self)?).map_err(io_err(path))
    }
}

/// Settings of one [`Core::solve`] call.
#[derive(Clone, Debug)]
pub struct SolveOptions {
    pub epochs: u64,
    /// Batch entries per step; `None` uses the whole batch axis.
    pub batchsize: Option<usize>,
    pub inner_steps: u32,
    /// Logged constraint values are the mean of this many latest evaluations.
    pub min_consecutive: usize,
    pub checkpoint_gradients: bool,
    pub offload_data: bool,
    /// Record per-phase timings for this many outer steps.
    pub profile: Option<u64>,
    pub nan_check: bool,
    /// Append each history row to this CSV as it is produced.
    pub history_csv: Option<PathBuf>,
}

impl SolveOptions {
    pub fn new(epochs: u64) -> Self {
        SolveOptions {
            epochs,
            batchsize: None,
            inner_steps: 1,
            min_consecutive: 1,
            checkpoint_gradients: false,
            offload_data: false,
            profile: None,
            nan_check: false,
            history_csv: None,
        }
    }

    pub fn batchsize(mut self, n: usize) -> Self {
        self.batchsize = Some(n);
        self
    }

    pub fn inner_steps(mut self, n: u32) -> Self {
        self.inner_steps = n;
        self
    }

    pub fn min_consecutive(mut self, k: usize) -> Self {
        self.min_consecutive = k;
        self
    }

    pub fn checkpoint_gradients(mut self, on: bool) -> Self {
        self.checkpoint_gradients = on;
        self
    }

    pub fn offload_data(mut self, on: bool) -> Self {
        self.offload_data = on;
        self
    }

    pub fn profile(mut self, steps: u64) -> Self {
        self.profile = Some(steps);
        self
    }

    pub fn nan_check(mut self, on: bool) -> Self {
        self.nan_check = on;
        self
    }

    pub fn history_csv(mut self, path: impl Into<PathBuf>) -> Self {
        self.history_csv = Some(path.into());
        self
    }

    fn validate(&self, batch: usize) -> Result<()> {
        if self.epochs == 0 {
            return Err(SolverError::BadOption("epochs must be at least 1".into()));
        }
        if self.inner_steps == 0 {
            return Err(SolverError::BadOption("inner_steps must be at least 1".into()));
        }
        if self.min_consecutive == 0 {
            return Err(SolverError::BadOption("min_consecutive must be at least 1".into()));
        }
        if self.profile == Some(0) {
            return Err(SolverError::BadOption("profile must cover at least one step".into()));
        }
        match self.batchsize {
            Some(0) => Err(SolverError::BadOption("batchsize must be at least 1".into())),
            Some(n) if n > batch => Err(SolverError::BatchTooLarge { batchsize: n, batch }),
            _ => Ok(()),
        }
    }
}

/// Constraint values and the fused gradient of one evaluation.
#[derive(Clone, Debug)]
pub struct StepEval {
    pub losses: Vec<f64>,
    /// Per model of [`Core::models`], `Σ wᵢ ∂cᵢ/∂θ` over trainable paths.
    pub grads: Vec<BTreeMap<String, Tensor>>,
}

impl StepEval {
    pub fn objective(&self, weights: &[f64]) -> f64 {
        weighted_total(&self.losses, weights)
    }
}

fn weighted_total(losses: &[f64], weights: &[f64]) -> f64 {
    losses.iter().zip(weights).fold(0.0, |acc, (l, w)| acc + w * l)
}

struct Tracker {
    name: String,
    node: Expr,
    interval: u32,
}

pub struct CoreBuilder {
    constraints: Vec<Expr>,
    domain: Domain,
    weights: Option<Vec<f64>>,
    names: Option<Vec<String>>,
    mesh: (usize, usize),
    seed: u64,
    default_optimizer: Option<OptimizerSpec>,
}

impl CoreBuilder {
    pub fn weights(mut self, w: Vec<f64>) -> Self {
        self.weights = Some(w);
        self
    }

    pub fn names(mut self, names: Vec<String>) -> Self {
        self.names = Some(names);
        self
    }

    /// Device mesh; only `(1, 1)` is accepted.
    pub fn mesh(mut self, mesh: (usize, usize)) -> Self {
        self.mesh = mesh;
        self
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Optimizer for models without one; `None` makes them an error.
    pub fn default_optimizer(mut self, spec: Option<OptimizerSpec>) -> Self {
        self.default_optimizer = spec;
        self
    }

    pub fn build(self) -> Result<Core> {
        if self.mesh != (1, 1) {
            return Err(SolverError::UnsupportedMesh(self.mesh));
        }
        if self.constraints.is_empty() {
            return Err(SolverError::NoConstraints);
        }
        let (roots, stats) = cse(&self.constraints);
        let mut names = match self.names {
            Some(n) if n.len() != roots.len() => {
                return Err(SolverError::NameCount {
                    got: n.len(),
                    want: roots.len(),
                })
            }
            Some(n) => n,
            None => roots
                .iter()
                .enumerate()
                .map(|(i, e)| e.name().map(str::to_string).unwrap_or_else(|| format!("c{i}")))
                .collect(),
        };
        let mut weights = match self.weights {
            Some(w) if w.len() != roots.len() => {
                return Err(SolverError::WeightCount {
                    got: w.len(),
                    want: roots.len(),
                })
            }
            Some(w) => w,
            None => vec![1.0; roots.len()],
        };

        let mut trackers = Vec::new();
        let mut constraints = Vec::new();
        let mut kept = Vec::new();
        for (i, e) in roots.into_iter().enumerate() {
            match e.kind() {
                NodeKind::Tracker(interval) => trackers.push(Tracker {
                    name: names[i].clone(),
                    interval: *interval,
                    node: e.children()[0].clone(),
                }),
                _ => {
                    kept.push(i);
                    constraints.push(e);
                }
            }
        }
        if constraints.is_empty() {
            return Err(SolverError::NoConstraints);
        }
        names = kept.iter().map(|&i| names[i].clone()).collect();
        weights = kept.iter().map(|&i| weights[i]).collect();
        dedupe(&mut names);

        let mut nested = Vec::new();
        for n in Expr::post_order(&constraints) {
            if let NodeKind::Tracker(interval) = n.kind() {
                trackers.push(Tracker {
                    name: n.name().map(str::to_string).unwrap_or_else(|| format!("tracker_{}", n.id())),
                    interval: *interval,
                    node: n.children()[0].clone(),
                });
                nested.push(n);
            }
        }

        let report = trace_shapes(&constraints, &|e| self.domain.leaf_shape(e, None))?;
        for (index, c) in constraints.iter().enumerate() {
            let shape = report.shape(c).unwrap_or_default().to_vec();
            if shape.iter().product::<usize>() != 1 {
                return Err(SolverError::NonScalarConstraint { index, shape });
            }
        }

        let mut all = constraints.clone();
        all.extend(trackers.iter().map(|t| t.node.clone()));
        let models = discover_models(&all);
        if self.default_optimizer.is_none() {
            if let Some(m) = models.iter().find(|m| m.optimizer_spec().is_none()) {
                return Err(SolverError::MissingOptimizer(m.name().to_string()));
            }
        }
        let mut model_names: Vec<String> = models.iter().map(|m| m.name().to_string()).collect();
        dedupe(&mut model_names);

        Ok(Core {
            history: TrainHistory {
                constraints: names.clone(),
                models: model_names,
                ..TrainHistory::default()
            },
            constraints,
            names,
            weights,
            trackers,
            nested,
            domain: self.domain,
            models,
            default_optimizer: self.default_optimizer,
            seed: self.seed,
            step: 0,
            cse: stats,
        })
    }
}

fn dedupe(names: &mut [String]) {
    let mut seen = HashSet::new();
    for (i, n) in names.iter_mut().enumerate() {
        *n = n.replace([',', '\n', '\r'], "_");
        if !seen.insert(n.clone()) {
            *n = format!("{n}_{i}");
            seen.insert(n.clone());
        }
    }
}

/// Models called anywhere in the graphs, including operation bodies, in
/// order of first appearance.
fn discover_models(roots: &[Expr]) -> Vec<Model> {
    let mut out: Vec<Model> = Vec::new();
    let mut seen_defs = HashSet::new();
    let mut stack: Vec<Vec<Expr>> = vec![roots.to_vec()];
    while let Some(rs) = stack.pop() {
        for n in Expr::post_order(&rs) {
            match n.kind() {
                NodeKind::ModelCall(m) if !out.iter().any(|o| o.id() == m.id()) => out.push(m.clone()),
                NodeKind::OperationCall(def) if seen_defs.insert(def.id()) => {
                    stack.push(vec![def.body().clone()])
                }
                _ => {}
            }
        }
    }
    out
}

/// Compiled training problem.
pub struct Core {
    constraints: Vec<Expr>,
    names: Vec<String>,
    weights: Vec<f64>,
    trackers: Vec<Tracker>,
    nested: Vec<Expr>,
    domain: Domain,
    models: Vec<Model>,
    default_optimizer: Option<OptimizerSpec>,
    seed: u64,
    step: u64,
    history: TrainHistory,
    cse: CseStats,
}

impl Core {
    pub fn builder(constraints: Vec<Expr>, domain: Domain) -> CoreBuilder {
        CoreBuilder {
            constraints,
            domain,
            weights: None,
            names: None,
            mesh: (1, 1),
            seed: 0,
            default_optimizer: Some(OptimizerSpec::adam(1e-3)),
        }
    }

    pub fn new(constraints: Vec<Expr>, domain: Domain) -> Result<Core> {
        Core::builder(constraints, domain).build()
    }

    /// Constraint graphs after common-subexpression elimination.
    pub fn constraints(&self) -> &[Expr] {
        &self.constraints
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn tracker_names(&self) -> Vec<&str> {
        self.trackers.iter().map(|t| t.name.as_str()).collect()
    }

    pub fn models(&self) -> &[Model] {
        &self.models
    }

    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    pub fn domain_mut(&mut self) -> &mut Domain {
        &mut self.domain
    }

    pub fn history(&self) -> &TrainHistory {
        &self.history
    }

    /// Outer steps completed.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn cse_stats(&self) -> CseStats {
        self.cse
    }

    /// One line per node of the constraint graphs with its inferred shape.
    pub fn print_shapes(&self) -> Result<String> {
        let report = trace_shapes(&self.constraints, &|e| self.domain.leaf_shape(e, None))?;
        Ok(print_shapes(&report))
    }

    fn fallback(&self) -> OptimizerSpec {
        self.default_optimizer
            .clone()
            .unwrap_or_else(|| OptimizerSpec::adam(1e-3))
    }

    /// Evaluate every constraint on `batch` (all entries when `None`) and,
    /// when `grads` is set, the fused parameter gradient. Gradients are
    /// taken per constraint and summed with their weights in constraint
    /// order; zero-weight constraints are skipped.
    pub fn evaluate(&self, batch: Option<&[usize]>, grads: bool) -> Result<StepEval> {
        self.evaluate_with(batch, grads, false)
    }

    fn evaluate_with(&self, batch: Option<&[usize]>, grads: bool, nan_check: bool) -> Result<StepEval> {
        let mut ev = Evaluator::new(Some(&self.domain)).nan_check(nan_check);
        if let Some(b) = batch {
            ev = ev.batch(b.to_vec());
        }
        let mut s = ev.session();
        if !self.nested.is_empty() {
            let bsz = batch.map(<[usize]>::len);
            let report = trace_shapes(&self.nested, &|e| self.domain.leaf_shape(e, bsz))?;
            for t in &self.nested {
                let shape = report.shape(t).unwrap_or_default().to_vec();
                let z = s.tape.constant(Tensor::zeros(&shape));
                s.bind_in(0, t.id(), z);
            }
        }
        let mut vars = Vec::with_capacity(self.constraints.len());
        let mut losses = Vec::with_capacity(self.constraints.len());
        for c in &self.constraints {
            let v = s.eval(c)?;
            losses.push(s.value(v).data()[0]);
            vars.push(v);
        }
        let mut out: Vec<BTreeMap<String, Tensor>> = vec![BTreeMap::new(); self.models.len()];
        if grads {
            for (&v, &w) in vars.iter().zip(&self.weights) {
                if w == 0.0 {
                    continue;
                }
                for (m, g) in s.param_grads(v)? {
                    let Some(i) = self.models.iter().position(|o| o.id() == m.id()) else {
                        continue;
                    };
                    for (path, t) in g {
                        let t = t.scale(w);
                        let acc = match out[i].remove(&path) {
                            Some(a) => a.add(&t).map_err(EvalError::from)?,
                            None => t,
                        };
                        out[i].insert(path, acc);
                    }
                }
            }
        }
        Ok(StepEval { losses, grads: out })
    }

    /// Fused objective `Σ wᵢ·cᵢ` over the whole batch.
    pub fn objective(&self) -> Result<f64> {
        Ok(self.evaluate(None, false)?.objective(&self.weights))
    }

    /// Evaluate tracker expressions on the current context.
    pub fn evaluate_trackers(&self) -> Result<Vec<(String, Tensor)>> {
        let ev = Evaluator::new(Some(&self.domain));
        let mut s = ev.session();
        let mut out = Vec::with_capacity(self.trackers.len());
        for t in &self.trackers {
            let v = s.eval(&t.node)?;
            out.push((t.name.clone(), s.value(v).clone()));
        }
        Ok(out)
    }

    fn batch_indices(&self, step: u64, batchsize: Option<usize>) -> Option<Vec<usize>> {
        let b = self.domain.batch();
        match batchsize {
            Some(n) if n < b => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                rng.set_stream(step);
                let mut idx = index::sample(&mut rng, b, n).into_vec();
                idx.sort_unstable();
                Some(idx)
            }
            _ => None,
        }
    }

    /// Batch indices used at outer step `step`.
    pub fn batch_for_step(&self, step: u64, batchsize: Option<usize>) -> Vec<usize> {
        self.batch_indices(step, batchsize)
            .unwrap_or_else(|| (0..self.domain.batch()).collect())
    }

    fn resample(&mut self, step: u64) -> Result<()> {
        let due: Vec<_> = self
            .domain
            .resamplers()
            .iter()
            .filter(|(_, r)| (step + 1) % r.every == 0)
            .map(|(t, r)| (t.clone(), r.clone()))
            .collect();
        if due.is_empty() {
            return Ok(());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ RESAMPLE_SALT);
        rng.set_stream(step);
        for (tag, r) in due {
            let seed = rng.next_u64();
            match &r.kind {
                ResampleKind::UniformSubset => self.domain.sample(&tag, r.count, seed)?,
                ResampleKind::ResidualWeighted { score } => {
                    self.domain.reset_context(&tag)?;
                    let v = Evaluator::new(Some(&self.domain)).evaluate(score)?;
                    let w = point_weights(&v, self.domain.pool(&tag)?.shape()[2])?;
                    self.domain.sample_weighted(&tag, r.count, &w, seed)?;
                }
            }
        }
        Ok(())
    }

    /// Train for `opts.epochs` outer steps. On NaN the run stops with
    /// [`SolverError::NaNLoss`]; rows logged so far stay in
    /// [`Core::history`] and in the CSV.
    pub fn solve(&mut self, opts: &SolveOptions) -> Result<TrainHistory> {
        opts.validate(self.domain.batch())?;
        let meta = &mut self.history.metadata;
        meta.insert("checkpoint_gradients".into(), opts.checkpoint_gradients.to_string());
        meta.insert("offload_data".into(), opts.offload_data.to_string());
        meta.insert("inner_steps".into(), opts.inner_steps.to_string());
        meta.insert("min_consecutive".into(), opts.min_consecutive.to_string());
        meta.insert(
            "batchsize".into(),
            opts.batchsize.map_or("full".to_string(), |b| b.to_string()),
        );

        let mut csv = match &opts.history_csv {
            Some(p) => {
                let f = File::create(p).map_err(io_err(p))?;
                let mut w = BufWriter::new(f);
                w.write_all(plot::csv_header(&self.history).as_bytes())
                    .map_err(io_err(p))?;
                for r in &self.history.rows {
                    w.write_all(plot::csv_row(r).as_bytes()).map_err(io_err(p))?;
                }
                Some((p.clone(), w))
            }
            None => None,
        };
        let fallback = self.fallback();
        let mut window: VecDeque<Vec<f64>> = VecDeque::with_capacity(opts.min_consecutive);
        let profile_until = opts.profile.map(|n| self.step + n);

        for _ in 0..opts.epochs {
            let step = self.step;
            let started = Instant::now();
            let mut phases: Vec<(&str, f64)> = Vec::new();
            let batch = self.batch_indices(step, opts.batchsize);
            for _ in 0..opts.inner_steps {
                let t = Instant::now();
                let ev = match self.evaluate_with(batch.as_deref(), true, opts.nan_check) {
                    Err(SolverError::Eval(EvalError::NaNDetected { .. })) => {
                        return Err(flush_nan(csv, step));
                    }
                    r => r?,
                };
                if ev.losses.iter().any(|l| l.is_nan()) {
                    return Err(flush_nan(csv, step));
                }
                phases.push(("evaluate", t.elapsed().as_secs_f64()));
                let t = Instant::now();
                for (m, g) in self.models.iter().zip(&ev.grads) {
                    m.apply_gradients(g, &fallback)?;
                }
                phases.push(("update", t.elapsed().as_secs_f64()));
                if window.len() == opts.min_consecutive {
                    window.pop_front();
                }
                window.push_back(ev.losses);
            }
            let losses = trailing_mean(&window);
            let total = weighted_total(&losses, &self.weights);
            let lrs = self
                .models
                .iter()
                .map(|m| m.learning_rate(m.optimizer_state().step.saturating_sub(1), &fallback))
                .collect();

            let t = Instant::now();
            let due: Vec<usize> = (0..self.trackers.len())
                .filter(|&i| step % u64::from(self.trackers[i].interval) == 0)
                .collect();
            if !due.is_empty() {
                let all = self.evaluate_trackers()?;
                for i in due {
                    let (name, value) = all[i].clone();
                    self.history.trackers.push(TrackerSnapshot { step, name, value });
                }
            }
            phases.push(("trackers", t.elapsed().as_secs_f64()));
            let t = Instant::now();
            self.resample(step)?;
            phases.push(("resample", t.elapsed().as_secs_f64()));

            let seconds = started.elapsed().as_secs_f64();
            if step == 0 {
                self.history.warmup_seconds = Some(seconds);
            }
            if profile_until.is_some_and(|end| step < end) {
                for (phase, s) in phases {
                    self.history.profile.push(PhaseTiming {
                        step,
                        phase: phase.to_string(),
                        seconds: s,
                    });
                }
            }
            let row = HistoryRow {
                step,
                total,
                losses,
                lrs,
                seconds,
            };
            if let Some((p, w)) = csv.as_mut() {
                w.write_all(plot::csv_row(&row).as_bytes()).map_err(io_err(p))?;
            }
            self.history.rows.push(row);
            self.step += 1;
        }
        if let Some((p, mut w)) = csv {
            w.flush().map_err(io_err(&p))?;
        }
        Ok(self.history.clone())
    }

    /// Parameters, optimizer states, step, seed, context and history.
    pub fn to_artifact(&self) -> Artifact {
        let mut tensors = Vec::new();
        let mut models = Vec::new();
        for (i, m) in self.models.iter().enumerate() {
            let prefix = format!("model/{i}");
            for (p, t) in m.params() {
                tensors.push((format!("{prefix}/param/{p}"), t));
            }
            let st = m.optimizer_state();
            for (p, t) in &st.m {
                tensors.push((format!("{prefix}/m/{p}"), t.clone()));
            }
            for (p, t) in &st.v {
                tensors.push((format!("{prefix}/v/{p}"), t.clone()));
            }
            models.push(serde_json::json!({ "name": m.name(), "optimizer_step": st.step }));
        }
        for (tag, t) in self.domain.context() {
            tensors.push((format!("context/{tag}"), t.clone()));
        }
        let h = &self.history;
        if !h.rows.is_empty() {
            let cols = 2 + h.constraints.len() + h.models.len();
            let mut data = Vec::with_capacity(h.rows.len() * cols);
            for r in &h.rows {
                data.push(r.step as f64);
                data.push(r.total);
                data.extend(&r.losses);
                data.extend(&r.lrs);
            }
            tensors.push(("history/rows".into(), Tensor::from_parts(vec![h.rows.len(), cols], data)));
            tensors.push((
                "history/seconds".into(),
                Tensor::vector(h.rows.iter().map(|r| r.seconds).collect::<Vec<_>>()),
            ));
        }
        let mut snaps = Vec::new();
        for (j, s) in h.trackers.iter().enumerate() {
            tensors.push((format!("tracker/{j}"), s.value.clone()));
            snaps.push(serde_json::json!({ "step": s.step, "name": s.name }));
        }
        Artifact {
            kind: ArtifactKind::CoreState,
            tensors,
            meta: serde_json::json!({
                "seed": self.seed,
                "step": self.step,
                "constraints": self.names,
                "weights": self.weights,
                "models": models,
                "history_models": h.models,
                "trackers": snaps,
                "warmup_seconds": h.warmup_seconds,
                "metadata": h.metadata,
                "domain": { "batch": self.domain.batch(), "tags": self.domain.tags() },
            }),
        }
    }

    /// Restore state written by [`Core::to_artifact`] into this core, whose
    /// constraints and models must match the saved ones.
    pub fn restore(&mut self, a: &Artifact) -> Result<()> {
        let bad = |s: String| SolverError::StateMismatch(s);
        if a.kind != ArtifactKind::CoreState {
            return Err(bad(format!("expected a core-state artifact, got {:?}", a.kind)));
        }
        let meta = &a.meta;
        let names: Vec<String> = serde_json::from_value(meta["constraints"].clone())
            .map_err(|e| bad(format!("constraints: {e}")))?;
        if names != self.names {
            return Err(bad(format!("constraints {names:?} != {:?}", self.names)));
        }
        let saved = meta["models"].as_array().cloned().unwrap_or_default();
        if saved.len() != self.models.len() {
            return Err(bad(format!("{} models saved, core has {}", saved.len(), self.models.len())));
        }
        for (i, (m, s)) in self.models.iter().zip(&saved).enumerate() {
            if s["name"].as_str() != Some(m.name()) {
                return Err(bad(format!("model {i} is {:?}, saved {:?}", m.name(), s["name"])));
            }
        }
        let mut params: Vec<BTreeMap<String, Tensor>> = vec![BTreeMap::new(); self.models.len()];
        let mut ms = params.clone();
        let mut vs = params.clone();
        let mut context = BTreeMap::new();
        let mut snaps = BTreeMap::new();
        for (name, t) in &a.tensors {
            if let Some(rest) = name.strip_prefix("model/") {
                let (i, rest) = rest.split_once('/').ok_or_else(|| bad(name.clone()))?;
                let i: usize = i.parse().map_err(|_| bad(name.clone()))?;
                let (slot, path) = rest.split_once('/').ok_or_else(|| bad(name.clone()))?;
                let target = match slot {
                    "param" => &mut params,
                    "m" => &mut ms,
                    "v" => &mut vs,
                    _ => return Err(bad(name.clone())),
                };
                target
                    .get_mut(i)
                    .ok_or_else(|| bad(name.clone()))?
                    .insert(path.to_string(), t.clone());
            } else if let Some(tag) = name.strip_prefix("context/") {
                context.insert(tag.to_string(), t.clone());
            } else if let Some(j) = name.strip_prefix("tracker/") {
                snaps.insert(j.parse::<usize>().map_err(|_| bad(name.clone()))?, t.clone());
            }
        }
        for (i, m) in self.models.iter().enumerate() {
            let have = m.params();
            let p = std::mem::take(&mut params[i]);
            if have.len() != p.len()
                || have.iter().zip(&p).any(|((k1, v1), (k2, v2))| k1 != k2 || v1.shape() != v2.shape())
            {
                return Err(bad(format!("parameters of model {:?} differ", m.name())));
            }
            m.set_params(p)?;
            m.set_optimizer_state(OptimizerState {
                step: saved[i]["optimizer_step"].as_u64().unwrap_or(0),
                m: std::mem::take(&mut ms[i]),
                v: std::mem::take(&mut vs[i]),
            });
        }
        for (tag, t) in context {
            if self.domain.has_tag(&tag) {
                self.domain.restore_context(&tag, t)?;
            }
        }

        let mut h = TrainHistory {
            constraints: self.names.clone(),
            models: serde_json::from_value(meta["history_models"].clone())
                .map_err(|e| bad(format!("models: {e}")))?,
            warmup_seconds: meta["warmup_seconds"].as_f64(),
            metadata: serde_json::from_value(meta["metadata"].clone()).unwrap_or_default(),
            ..TrainHistory::default()
        };
        if let Some(rows) = a.tensor("history/rows") {
            let (nc, nm) = (h.constraints.len(), h.models.len());
            let cols = rows.shape()[1];
            if cols != 2 + nc + nm {
                return Err(bad(format!("history has {cols} columns")));
            }
            let secs = a.tensor("history/seconds").map(|t| t.data().to_vec()).unwrap_or_default();
            for (r, row) in rows.data().chunks(cols).enumerate() {
                h.rows.push(HistoryRow {
                    step: row[0] as u64,
                    total: row[1],
                    losses: row[2..2 + nc].to_vec(),
                    lrs: row[2 + nc..].to_vec(),
                    seconds: secs.get(r).copied().unwrap_or(0.0),
                });
            }
        }
        for (j, s) in meta["trackers"].as_array().cloned().unwrap_or_default().iter().enumerate() {
            h.trackers.push(TrackerSnapshot {
                step: s["step"].as_u64().unwrap_or(0),
                name: s["name"].as_str().unwrap_or_default().to_string(),
                value: snaps.remove(&j).ok_or_else(|| bad(format!("tracker {j} missing")))?,
            });
        }
        self.history = h;
        self.step = meta["step"].as_u64().ok_or_else(|| bad("step".into()))?;
        self.seed = meta["seed"].as_u64().ok_or_else(|| bad("seed".into()))?;
        Ok(())
    }

    pub fn save(&self, path: &Path, key: Option<&SigningKey>) -> Result<()> {
        Ok(persist::save(&self.to_artifact(), path, key)?)
    }

    /// Load a saved state into this core and continue from its step.
    pub fn load(&mut self, path: &Path, key: Option<&VerifyingKey>) -> Result<()> {
        let a = persist::load(path, key)?;
        self.restore(&a)
    }
}

fn flush_nan<W: Write>(csv: Option<(PathBuf, W)>, step: u64) -> SolverError {
    if let Some((p, mut w)) = csv {
        if let Err(e) = w.flush() {
            return io_err(&p)(e);
        }
    }
    SolverError::NaNLoss(step)
}

/// Column means of the retained evaluations.
fn trailing_mean(window: &VecDeque<Vec<f64>>) -> Vec<f64> {
    let n = window.len() as f64;
    let mut out = vec![0.0; window.front().map_or(0, Vec::len)];
    for row in window {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    if window.len() > 1 {
        out.iter_mut().for_each(|o| *o /= n);
    }
    out
}

/// Mean absolute score per point (axis 2) as sampling weights.
fn point_weights(v: &Tensor, n: usize) -> Result<Vec<f64>> {
    let s = v.shape();
    if s.len() < 3 || s[2] != n {
        return Err(SolverError::BadOption(format!(
            "resampling score has shape {s:?}, expected {n} points on axis 2"
        )));
    }
    let inner: usize = s[3..].iter().product();
    let outer = s[0] * s[1];
    let mut w = vec![0.0; n];
    for o in 0..outer {
        for (p, wp) in w.iter_mut().enumerate() {
            let base = (o * n + p) * inner;
            *wp += v.data()[base..base + inner].iter().map(|x| x.abs()).sum::<f64>();
        }
    }
    let count = (outer * inner) as f64;
    w.iter_mut().for_each(|x| *x /= count);
    Ok(w)
}

/// Save any of the three artifact kinds.
pub fn save(a: &Artifact, path: &Path, key: Option<&SigningKey>) -> Result<()> {
    Ok(persist::save(a, path, key)?)
}

pub fn load(path: &Path, key: Option<&VerifyingKey>) -> Result<Artifact> {
    Ok(persist::load(path, key)?)
}
