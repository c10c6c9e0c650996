//! Neural models as trace-level callables with parameter-level controls.
//!
//! A [`Model`] is a shared handle: expressions built with [`Model::call`]
//! refer to it, and the solver updates its parameters in place between
//! steps. Parameters live in a flat map keyed by `/`-separated paths such
//! as `layers/0/weight`.

mod arch;
mod optim;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::sync::{Arc, RwLock, RwLockReadGuard, RwLockWriteGuard};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::solver::persist::{self, Artifact, ArtifactKind, PersistError};
use crate::tensor::{Precision, Tape, Tensor, TensorError, Var};
use crate::trace::{Expr, NodeKind};

pub use arch::{Activation, Arch, MlpSpec};
pub use optim::{
    optimizer_step, GroupOverride, OptimizerKind, OptimizerSpec, OptimizerState, Resolved,
    Schedule,
};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("invalid dimensions: {0}")]
    BadDimension(String),
    #[error("shape mismatch for parameter {0}")]
    ShapeMismatch(String),
    #[error("missing parameter {0}")]
    MissingPath(String),
    #[error("unknown parameter path {0}")]
    UnknownPath(String),
    #[error("parameter {0} is not a matrix")]
    NotAMatrix(String),
    #[error("lora rank must be at least 1")]
    BadRank,
    #[error("optimizer state does not match parameter {0}")]
    StateShapeMismatch(String),
    #[error("bad model input: {0}")]
    InputRankMismatch(String),
    #[error("checkpoint checksum failure: {0}")]
    ChecksumFailure(String),
    #[error("checkpoint holds a {0:?} artifact, not a model")]
    WrongArtifact(ArtifactKind),
    #[error(transparent)]
    Persist(#[from] PersistError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, NnError>;

#[derive(Clone, Debug, PartialEq)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub paths: Vec<String>,
}

impl LoraConfig {
    fn a_path(path: &str) -> String {
        format!("lora/{path}/a")
    }

    fn b_path(path: &str) -> String {
        format!("lora/{path}/b")
    }
}

#[derive(Clone, Debug)]
struct ModelState {
    params: BTreeMap<String, Tensor>,
    frozen: bool,
    mask: BTreeMap<String, bool>,
    lora: Option<LoraConfig>,
    precision: Precision,
    optimizer: Option<OptimizerSpec>,
    opt_state: OptimizerState,
}

struct ModelInner {
    id: u64,
    name: String,
    arch: Arch,
    state: RwLock<ModelState>,
}

#[derive(Clone)]
pub struct Model(Arc<ModelInner>);

impl fmt::Debug for Model {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Model({:?}#{})", self.0.name, self.0.id)
    }
}

impl PartialEq for Model {
    fn eq(&self, o: &Self) -> bool {
        self.0.id == o.0.id
    }
}

impl Eq for Model {}

impl Model {
    pub fn new(name: &str, arch: Arch, seed: u64) -> Result<Model> {
        arch.check()?;
        let params = arch.init(&mut ChaCha8Rng::seed_from_u64(seed));
        let mask = params.keys().map(|k| (k.clone(), true)).collect();
        Ok(Model(Arc::new(ModelInner {
            id: crate::trace::fresh_id(),
            name: name.to_string(),
            arch,
            state: RwLock::new(ModelState {
                params,
                frozen: false,
                mask,
                lora: None,
                precision: Precision::F64,
                optimizer: None,
                opt_state: OptimizerState::default(),
            }),
        })))
    }

    /// Affine layers with `activation` between them, last layer linear.
    pub fn mlp(
        name: &str,
        in_dim: usize,
        hidden: &[usize],
        out_dim: usize,
        activation: Activation,
        seed: u64,
    ) -> Result<Model> {
        let spec = MlpSpec {
            in_dim,
            hidden: hidden.to_vec(),
            out_dim,
            activation,
            activate_last: false,
        };
        Model::new(name, Arch::Mlp(spec), seed)
    }

    /// Branch `n_sensors → hidden → hidden → basis` and trunk
    /// `coord_dim → hidden → hidden → basis`, tanh activations.
    pub fn deeponet(
        name: &str,
        n_sensors: usize,
        coord_dim: usize,
        basis_functions: usize,
        hidden_dim: usize,
        seed: u64,
    ) -> Result<Model> {
        let net = |i| MlpSpec {
            in_dim: i,
            hidden: vec![hidden_dim, hidden_dim],
            out_dim: basis_functions,
            activation: Activation::Tanh,
            activate_last: false,
        };
        Model::new(
            name,
            Arch::DeepONet {
                branch: net(n_sensors),
                trunk: net(coord_dim),
            },
            seed,
        )
    }

    fn read(&self) -> RwLockReadGuard<'_, ModelState> {
        self.0.state.read().unwrap_or_else(|e| e.into_inner())
    }

    fn write(&self) -> RwLockWriteGuard<'_, ModelState> {
        self.0.state.write().unwrap_or_else(|e| e.into_inner())
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn name(&self) -> &str {
        &self.0.name
    }

    pub fn arch(&self) -> &Arch {
        &self.0.arch
    }

    pub fn output_shape(&self, args: &[Vec<usize>]) -> std::result::Result<Vec<usize>, String> {
        self.0.arch.output_shape(args)
    }

    /// A `ModelCall` node applying this model to `args`.
    pub fn call(&self, args: &[Expr]) -> Expr {
        Expr::raw(NodeKind::ModelCall(self.clone()), args.to_vec(), None)
    }

    /// Snapshot of every parameter, adapters included.
    pub fn params(&self) -> BTreeMap<String, Tensor> {
        self.read().params.clone()
    }

    pub fn param(&self, path: &str) -> Option<Tensor> {
        self.read().params.get(path).cloned()
    }

    /// Replace parameter values; every path must exist with its shape.
    pub fn set_params(&self, values: BTreeMap<String, Tensor>) -> Result<()> {
        let mut st = self.write();
        for (k, v) in &values {
            let cur = st
                .params
                .get(k)
                .ok_or_else(|| NnError::UnknownPath(k.clone()))?;
            if cur.shape() != v.shape() {
                return Err(NnError::ShapeMismatch(k.clone()));
            }
        }
        let precision = st.precision;
        for (k, v) in values {
            st.params.insert(k, v.with_precision(precision));
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.read().params.values().map(Tensor::numel).sum()
    }

    /// Re-draw all base parameters from `seed`; adapters are reset too.
    pub fn initialize(&self, seed: u64) -> &Self {
        let fresh = self.0.arch.init(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut st = self.write();
        let precision = st.precision;
        for (k, v) in fresh {
            st.params.insert(k, v.with_precision(precision));
        }
        if let Some(cfg) = st.lora.clone() {
            install_adapters(&mut st, &cfg, seed);
        }
        st.opt_state = OptimizerState::default();
        self
    }

    /// Load parameters from a checkpoint written by [`Model::save`].
    pub fn initialize_from(&self, path: &Path, key: Option<&persist::VerifyingKey>) -> Result<()> {
        let art = persist::load(path, key).map_err(|e| match e {
            PersistError::CorruptPayload { .. } | PersistError::HashMismatch => {
                NnError::ChecksumFailure(e.to_string())
            }
            e => NnError::Persist(e),
        })?;
        self.load_artifact(&art)
    }

    pub(crate) fn load_artifact(&self, art: &Artifact) -> Result<()> {
        if art.kind != ArtifactKind::Model {
            return Err(NnError::WrongArtifact(art.kind));
        }
        let loaded: BTreeMap<String, Tensor> = art.tensors.iter().cloned().collect();
        let mut st = self.write();
        for (path, shape) in self.0.arch.layout() {
            match loaded.get(&path) {
                None => return Err(NnError::MissingPath(path)),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(NnError::ShapeMismatch(path))
                }
                _ => {}
            }
        }
        for (k, t) in &loaded {
            match st.params.get(k) {
                Some(cur) if cur.shape() != t.shape() => {
                    return Err(NnError::ShapeMismatch(k.clone()))
                }
                Some(_) => {}
                None => return Err(NnError::UnknownPath(k.clone())),
            }
        }
        for (k, t) in loaded {
            st.params.insert(k, t);
        }
        Ok(())
    }

    /// The parameter tree as a `model` artifact.
    pub fn to_artifact(&self) -> Artifact {
        let st = self.read();
        Artifact {
            kind: ArtifactKind::Model,
            tensors: st.params.iter().map(|(k, v)| (k.clone(), v.clone())).collect(),
            meta: serde_json::json!({
                "name": self.0.name,
                "arch": self.0.arch,
            }),
        }
    }

    pub fn save(&self, path: &Path, key: Option<&persist::SigningKey>) -> Result<()> {
        persist::save(&self.to_artifact(), path, key)?;
        Ok(())
    }

    pub fn freeze(&self) -> &Self {
        self.write().frozen = true;
        self
    }

    pub fn unfreeze(&self) -> &Self {
        self.write().frozen = false;
        self
    }

    pub fn is_frozen(&self) -> bool {
        self.read().frozen
    }

    /// Set the trainable flag of the given paths; unmentioned paths keep
    /// their current flag.
    pub fn mask(&self, flags: &BTreeMap<String, bool>) -> Result<&Self> {
        let mut st = self.write();
        for k in flags.keys() {
            if !self.is_base_path(k) {
                return Err(NnError::UnknownPath(k.clone()));
            }
        }
        for (k, &v) in flags {
            st.mask.insert(k.clone(), v);
        }
        Ok(self)
    }

    /// Make exactly `paths` trainable among the base parameters.
    pub fn mask_only(&self, paths: &[&str]) -> Result<&Self> {
        let flags: BTreeMap<String, bool> = self
            .0
            .arch
            .layout()
            .into_iter()
            .map(|(p, _)| {
                let on = paths.contains(&p.as_str());
                (p, on)
            })
            .collect();
        for p in paths {
            if !flags.contains_key(*p) {
                return Err(NnError::UnknownPath(p.to_string()));
            }
        }
        self.mask(&flags)
    }

    fn is_base_path(&self, p: &str) -> bool {
        self.0.arch.layout().iter().any(|(q, _)| q == p)
    }

    /// Attach low-rank adapters to `paths` (default: every matrix).
    /// Training is then restricted to the adapters.
    pub fn lora(&self, rank: usize, alpha: f64, paths: Option<&[&str]>) -> Result<&Self> {
        if rank == 0 {
            return Err(NnError::BadRank);
        }
        let layout: BTreeMap<String, Vec<usize>> = self.0.arch.layout().into_iter().collect();
        let paths: Vec<String> = match paths {
            Some(ps) => {
                for p in ps {
                    match layout.get(*p) {
                        None => return Err(NnError::UnknownPath(p.to_string())),
                        Some(s) if s.len() != 2 => return Err(NnError::NotAMatrix(p.to_string())),
                        _ => {}
                    }
                }
                ps.iter().map(|p| p.to_string()).collect()
            }
            None => layout
                .iter()
                .filter(|(_, s)| s.len() == 2)
                .map(|(p, _)| p.clone())
                .collect(),
        };
        let cfg = LoraConfig { rank, alpha, paths };
        let mut st = self.write();
        if let Some(old) = st.lora.take() {
            for p in &old.paths {
                st.params.remove(&LoraConfig::a_path(p));
                st.params.remove(&LoraConfig::b_path(p));
            }
        }
        install_adapters(&mut st, &cfg, self.0.id);
        st.lora = Some(cfg);
        st.opt_state = OptimizerState::default();
        Ok(self)
    }

    pub fn lora_config(&self) -> Option<LoraConfig> {
        self.read().lora.clone()
    }

    /// Storage precision for parameters; values are rounded on every write.
    pub fn set_precision(&self, precision: Precision) -> &Self {
        let mut st = self.write();
        st.precision = precision;
        for v in st.params.values_mut() {
            *v = v.with_precision(precision);
        }
        self
    }

    pub fn precision(&self) -> Precision {
        self.read().precision
    }

    pub fn optimizer(&self, spec: OptimizerSpec) -> &Self {
        let mut st = self.write();
        st.optimizer = Some(spec);
        st.opt_state = OptimizerState::default();
        self
    }

    pub fn optimizer_spec(&self) -> Option<OptimizerSpec> {
        self.read().optimizer.clone()
    }

    pub fn optimizer_state(&self) -> OptimizerState {
        self.read().opt_state.clone()
    }

    pub fn set_optimizer_state(&self, s: OptimizerState) {
        self.write().opt_state = s;
    }

    /// Paths that receive optimizer updates:
    /// `¬frozen ∧ (lora active ? adapters : mask)`.
    pub fn trainable_paths(&self) -> BTreeSet<String> {
        let st = self.read();
        if st.frozen {
            return BTreeSet::new();
        }
        match &st.lora {
            Some(cfg) => cfg
                .paths
                .iter()
                .flat_map(|p| [LoraConfig::a_path(p), LoraConfig::b_path(p)])
                .collect(),
            None => st
                .mask
                .iter()
                .filter(|(_, &on)| on)
                .map(|(k, _)| k.clone())
                .collect(),
        }
    }

    pub fn trainable_count(&self) -> usize {
        let st = self.read();
        self.trainable_paths()
            .iter()
            .map(|p| st.params[p].numel())
            .sum()
    }

    /// One optimizer update. Gradients of non-trainable parameters are
    /// discarded. `fallback` is used when no optimizer is attached.
    pub fn apply_gradients(
        &self,
        grads: &BTreeMap<String, Tensor>,
        fallback: &OptimizerSpec,
    ) -> Result<()> {
        let trainable = self.trainable_paths();
        let mut st = self.write();
        let spec = st.optimizer.clone().unwrap_or_else(|| fallback.clone());
        let g: BTreeMap<String, Tensor> = grads
            .iter()
            .filter(|(k, _)| trainable.contains(*k))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        let (mut params, state) = optimizer_step(&spec, &st.opt_state, &st.params, &g)?;
        let precision = st.precision;
        for k in g.keys() {
            let v = params.remove(k).expect("updated path");
            st.params.insert(k.clone(), v.with_precision(precision));
        }
        st.opt_state = state;
        Ok(())
    }

    /// Learning rate of the first trainable parameter at `step`.
    pub fn learning_rate(&self, step: u64, fallback: &OptimizerSpec) -> f64 {
        let spec = self.optimizer_spec().unwrap_or_else(|| fallback.clone());
        let path = self.trainable_paths().into_iter().next().unwrap_or_default();
        spec.resolve(&path).lr.value(step)
    }

    /// Forward pass on `tape`; `params` maps every parameter path to its
    /// tape variable.
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &BTreeMap<String, Var>,
        args: &[Var],
    ) -> Result<Var> {
        let lora = self.read().lora.clone();
        let w = Bound { params, lora };
        arch::forward(&self.0.arch, tape, &w, args)
    }

    /// Evaluate on plain tensors.
    pub fn apply(&self, args: &[Tensor]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params: BTreeMap<String, Var> = self
            .params()
            .into_iter()
            .map(|(k, v)| (k, tape.constant(v)))
            .collect();
        let xs: Vec<Var> = args.iter().map(|a| tape.constant(a.clone())).collect();
        let y = self.forward(&mut tape, &params, &xs)?;
        Ok(tape.value(y).clone())
    }
}

/// Adapter `a` small random, `b` zero so the adapted weight starts equal to
/// the base weight.
fn install_adapters(st: &mut ModelState, cfg: &LoraConfig, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6c6f_7261);
    for p in &cfg.paths {
        let s = st.params[p].shape().to_vec();
        let (out, inp) = (s[0], s[1]);
        let a: Vec<f64> = (0..cfg.rank * inp)
            .map(|_| st.precision.round(rng.gen_range(-0.01..0.01)))
            .collect();
        st.params.insert(
            LoraConfig::a_path(p),
            Tensor::from_parts(vec![cfg.rank, inp], a).with_precision(st.precision),
        );
        st.params.insert(
            LoraConfig::b_path(p),
            Tensor::zeros(&[out, cfg.rank]).with_precision(st.precision),
        );
    }
}

struct Bound<'a> {
    params: &'a BTreeMap<String, Var>,
    lora: Option<LoraConfig>,
}

impl arch::Weights for Bound<'_> {
    fn param(&self, path: &str) -> Result<Var> {
        self.params
            .get(path)
            .copied()
            .ok_or_else(|| NnError::MissingPath(path.to_string()))
    }

    fn weight(&self, tape: &mut Tape, path: &str) -> Result<Var> {
        let w = self.param(path)?;
        match &self.lora {
            Some(cfg) if cfg.paths.iter().any(|p| p == path) => {
                let a = self.param(&LoraConfig::a_path(path))?;
                let b = self.param(&LoraConfig::b_path(path))?;
                let ba = tape.matmul(b, a)?;
                let ba = tape.scale(ba, cfg.alpha / cfg.rank as f64)?;
                Ok(tape.add(w, ba)?)
            }
            _ => Ok(w),
        }
    }
}
