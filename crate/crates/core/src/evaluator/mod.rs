//! Graph evaluation against one batch context.
//!
//! A [`Session`] walks a graph once, recording every operation on a
//! [`Tape`] so the result can be differentiated with respect to model
//! parameters. Node kinds are dispatched through a handler table. Values are
//! memoized per frame: the root frame is the batch context, operation calls
//! and coordinate overrides (mesh vertices, quadrature regions) open child
//! frames.

pub(crate) mod fd;

use std::collections::{BTreeMap, HashMap};
use std::sync::OnceLock;

use thiserror::Error;

use crate::domain::{Domain, TIME_KEY};
use crate::nn::{Model, NnError};
use crate::tensor::{broadcast_shape, Op, Tape, Tensor, TensorError, Var};
use crate::trace::{ArithOp, DiffMode, Expr, KindTag, NodeKind, ReduceOp, SliceSpec, VarSource};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no binding for variable {0}")]
    UnboundVariable(String),
    #[error("shape mismatch at node #{node} ({label}): {reason}")]
    ShapeMismatch {
        node: u64,
        label: String,
        reason: String,
    },
    #[error("NaN produced at node #{node} ({label})")]
    NaNDetected { node: u64, label: String },
    #[error("cannot differentiate: {0}")]
    NonDifferentiablePath(String),
    #[error("point {0:?} lies outside the mesh")]
    PointOutsideMesh(Vec<f64>),
    #[error("vertex {0} has a degenerate neighborhood")]
    DegenerateNeighborhood(usize),
    #[error("{0} symbol used outside an assembled weak form")]
    UnassembledSymbol(&'static str),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("{0} requires a domain")]
    NoDomain(&'static str),
    #[error("unknown tag {0:?}")]
    UnknownTag(String),
    #[error(transparent)]
    Model(#[from] NnError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Evaluation settings: the batch context, derivative mode and explicit
/// bindings of free variables.
#[derive(Clone)]
pub struct Evaluator<'a> {
    domain: Option<&'a Domain>,
    mode: DiffMode,
    nan_check: bool,
    cache: bool,
    batch: Option<Vec<usize>>,
    bindings: HashMap<u64, Tensor>,
}

impl<'a> Evaluator<'a> {
    pub fn new(domain: Option<&'a Domain>) -> Self {
        Evaluator {
            domain,
            mode: DiffMode::Auto,
            nan_check: false,
            cache: true,
            batch: None,
            bindings: HashMap::new(),
        }
    }

    /// Resolution of derivative nodes created with [`DiffMode::Default`].
    pub fn mode(mut self, mode: DiffMode) -> Self {
        self.mode = if mode == DiffMode::Default {
            DiffMode::Auto
        } else {
            mode
        };
        self
    }

    pub fn nan_check(mut self, on: bool) -> Self {
        self.nan_check = on;
        self
    }

    pub fn cache(mut self, on: bool) -> Self {
        self.cache = on;
        self
    }

    /// Restrict the batch axis of every context array to `indices`.
    pub fn batch(mut self, indices: Vec<usize>) -> Self {
        self.batch = Some(indices);
        self
    }

    pub fn bind(mut self, var: &Expr, value: Tensor) -> Self {
        self.bindings.insert(var.id(), value);
        self
    }

    pub fn domain(&self) -> Option<&'a Domain> {
        self.domain
    }

    pub fn session(&self) -> Session<'_> {
        Session::new(self)
    }

    pub fn evaluate(&self, e: &Expr) -> Result<Tensor> {
        let mut s = self.session();
        let v = s.eval(e)?;
        Ok(s.value(v).clone())
    }
}

/// Handler invocation counts of one session.
#[derive(Clone, Debug, Default)]
pub struct EvalStats {
    pub calls: BTreeMap<KindTag, usize>,
    pub arithmetic: BTreeMap<&'static str, usize>,
    pub cache_hits: usize,
}

struct Frame {
    parent: Option<usize>,
    binds: HashMap<u64, Var>,
    region: Option<usize>,
}

/// Coordinates that replace every tagged coordinate variable in a frame.
struct Region {
    cols: Vec<Var>,
    time: Var,
    points: Vec<f64>,
    at_vertices: bool,
}

struct ModelSlot {
    model: Model,
    params: BTreeMap<String, Var>,
    trainable: Vec<String>,
}

pub struct Session<'e> {
    ev: &'e Evaluator<'e>,
    pub(crate) tape: Tape,
    frames: Vec<Frame>,
    regions: Vec<Region>,
    cache: HashMap<(usize, u64), Var>,
    root_cols: HashMap<String, Vec<Var>>,
    root_time: HashMap<String, Var>,
    tensors: HashMap<String, Var>,
    free: HashMap<u64, Var>,
    vertex_frames: HashMap<usize, usize>,
    models: BTreeMap<u64, ModelSlot>,
    stats: EvalStats,
}

type Handler = fn(&mut Session<'_>, usize, &Expr) -> Result<Var>;

fn handlers() -> &'static HashMap<KindTag, Handler> {
    static TABLE: OnceLock<HashMap<KindTag, Handler>> = OnceLock::new();
    TABLE.get_or_init(|| {
        let entries: [(KindTag, Handler); 19] = [
            (KindTag::Variable, h_variable),
            (KindTag::Literal, h_literal),
            (KindTag::Constant, h_constant),
            (KindTag::TensorTag, h_tensor_tag),
            (KindTag::Arithmetic, h_arithmetic),
            (KindTag::Compare, h_compare),
            (KindTag::Reduce, h_reduce),
            (KindTag::Slice, h_slice),
            (KindTag::Concat, h_concat),
            (KindTag::Derivative, h_derivative),
            (KindTag::Jacobian, h_jacobian),
            (KindTag::Hessian, h_hessian),
            (KindTag::ModelCall, h_model_call),
            (KindTag::OperationCall, h_operation_call),
            (KindTag::Tracker, h_tracker),
            (KindTag::Trial, h_trial),
            (KindTag::Test, h_test),
            (KindTag::Field, crate::fem::eval_field),
            (KindTag::WeakResidual, crate::fem::eval_weak_residual),
        ];
        entries.into_iter().collect()
    })
}

/// True when every node kind has an evaluation handler.
pub fn handler_table_is_total() -> bool {
    KindTag::ALL.iter().all(|k| handlers().contains_key(k))
}

fn at_node(err: EvalError, e: &Expr) -> EvalError {
    let reason = match &err {
        EvalError::Tensor(t) | EvalError::Model(NnError::Tensor(t)) => t.to_string(),
        EvalError::Model(NnError::InputRankMismatch(r)) => r.clone(),
        _ => return err,
    };
    EvalError::ShapeMismatch {
        node: e.id(),
        label: e.label(),
        reason,
    }
}

impl<'e> Session<'e> {
    pub fn new(ev: &'e Evaluator<'e>) -> Self {
        Session {
            ev,
            tape: Tape::new(),
            frames: vec![Frame {
                parent: None,
                binds: HashMap::new(),
                region: None,
            }],
            regions: Vec::new(),
            cache: HashMap::new(),
            root_cols: HashMap::new(),
            root_time: HashMap::new(),
            tensors: HashMap::new(),
            free: HashMap::new(),
            vertex_frames: HashMap::new(),
            models: BTreeMap::new(),
            stats: EvalStats::default(),
        }
    }

    pub fn evaluator(&self) -> &'e Evaluator<'e> {
        self.ev
    }

    pub fn eval(&mut self, e: &Expr) -> Result<Var> {
        self.eval_in(0, e)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn tape_mut(&mut self) -> &mut Tape {
        &mut self.tape
    }

    pub fn stats(&self) -> &EvalStats {
        &self.stats
    }

    /// Models reached so far, in id order.
    pub fn models(&self) -> Vec<Model> {
        self.models.values().map(|s| s.model.clone()).collect()
    }

    /// Gradients of a scalar `loss` with respect to the trainable parameters
    /// of every model reached by the session. Non-trainable parameters are
    /// recorded as constants, so their gradient is identically zero and they
    /// are omitted.
    pub fn param_grads(&self, loss: Var) -> Result<Vec<(Model, BTreeMap<String, Tensor>)>> {
        let mut vars = Vec::new();
        for slot in self.models.values() {
            for p in &slot.trainable {
                vars.push(slot.params[p]);
            }
        }
        let mut g = self.tape.grad_values(loss, &vars)?.into_iter();
        Ok(self
            .models
            .values()
            .map(|slot| {
                let m: BTreeMap<String, Tensor> = slot
                    .trainable
                    .iter()
                    .map(|p| (p.clone(), g.next().expect("one gradient per parameter")))
                    .collect();
                (slot.model.clone(), m)
            })
            .collect())
    }

    pub(crate) fn eval_in(&mut self, frame: usize, e: &Expr) -> Result<Var> {
        if let Some(v) = self.lookup_bind(frame, e.id()) {
            return Ok(v);
        }
        let key = (frame, e.id());
        if self.ev.cache {
            if let Some(&v) = self.cache.get(&key) {
                self.stats.cache_hits += 1;
                return Ok(v);
            }
        }
        let tag = e.kind().tag();
        *self.stats.calls.entry(tag).or_default() += 1;
        if let NodeKind::Arithmetic(op) = e.kind() {
            *self.stats.arithmetic.entry(op.name()).or_default() += 1;
        }
        let v = handlers()[&tag](self, frame, e).map_err(|err| at_node(err, e))?;
        if self.ev.nan_check && self.tape.value(v).has_nan() {
            return Err(EvalError::NaNDetected {
                node: e.id(),
                label: e.label(),
            });
        }
        if self.ev.cache {
            self.cache.insert(key, v);
        }
        Ok(v)
    }

    fn lookup_bind(&self, mut f: usize, id: u64) -> Option<Var> {
        loop {
            if let Some(&v) = self.frames[f].binds.get(&id) {
                return Some(v);
            }
            f = self.frames[f].parent?;
        }
    }

    fn region_of(&self, mut f: usize) -> Option<usize> {
        loop {
            if let Some(r) = self.frames[f].region {
                return Some(r);
            }
            f = self.frames[f].parent?;
        }
    }

    /// Bind node `id` to `var` for lookups in `frame` and its descendants.
    pub(crate) fn bind_in(&mut self, frame: usize, id: u64, var: Var) {
        self.frames[frame].binds.insert(id, var);
    }

    pub(crate) fn push_frame(&mut self, parent: usize, binds: HashMap<u64, Var>) -> usize {
        self.frames.push(Frame {
            parent: Some(parent),
            binds,
            region: None,
        });
        self.frames.len() - 1
    }

    /// Child frame whose coordinate variables, for any tag, are the columns
    /// of `points` (row-major `Q × D`) and whose time variable is `time`.
    pub(crate) fn push_region(
        &mut self,
        parent: usize,
        points: &[f64],
        dim: usize,
        time: Option<f64>,
        binds: HashMap<u64, Var>,
    ) -> usize {
        let q = points.len() / dim;
        let cols = (0..dim)
            .map(|c| {
                let col: Vec<f64> = (0..q).map(|i| points[i * dim + c]).collect();
                self.tape.leaf(Tensor::from_parts(vec![1, 1, q, 1], col))
            })
            .collect();
        let has_time = time.is_some() || self.ev.domain.and_then(|d| d.time()).is_some();
        let w = usize::from(has_time);
        let tv = self
            .tape
            .leaf(Tensor::full(&[1, 1, q, w], time.unwrap_or(0.0)));
        self.regions.push(Region {
            cols,
            time: tv,
            points: points.to_vec(),
            at_vertices: false,
        });
        self.frames.push(Frame {
            parent: Some(parent),
            binds,
            region: Some(self.regions.len() - 1),
        });
        self.frames.len() - 1
    }

    /// Column variables `(…, 1)` of the frame's coordinates for `tag`.
    pub(crate) fn coordinate_columns(&mut self, frame: usize, tag: &str) -> Result<Vec<Var>> {
        if let Some(r) = self.region_of(frame) {
            return Ok(self.regions[r].cols.clone());
        }
        if let Some(c) = self.root_cols.get(tag) {
            return Ok(c.clone());
        }
        let dom = self.ev.domain.ok_or(EvalError::NoDomain("a coordinate variable"))?;
        let ctx = self.context(dom, tag)?;
        let d = ctx.shape()[3];
        let mut cols = Vec::with_capacity(d);
        for c in 0..d {
            let t = ctx.slice(-1, c, 1, 1)?;
            cols.push(self.tape.leaf(t));
        }
        self.root_cols.insert(tag.to_string(), cols.clone());
        Ok(cols)
    }

    fn context(&self, dom: &Domain, tag: &str) -> Result<Tensor> {
        let t = dom
            .points(tag)
            .map_err(|_| EvalError::UnknownTag(tag.to_string()))?;
        self.select_batch(t)
    }

    fn select_batch(&self, t: &Tensor) -> Result<Tensor> {
        Ok(match &self.ev.batch {
            Some(idx) => t.select(0, idx)?,
            None => t.clone(),
        })
    }

    pub(crate) fn time_var(&mut self, frame: usize, tag: &str) -> Result<Var> {
        if let Some(r) = self.region_of(frame) {
            return Ok(self.regions[r].time);
        }
        if let Some(&v) = self.root_time.get(tag) {
            return Ok(v);
        }
        let dom = self.ev.domain.ok_or(EvalError::NoDomain("a time variable"))?;
        let ctx = self.context(dom, tag)?;
        let s = ctx.shape();
        let t = if dom.time().is_some() {
            let times = self.select_batch(dom.points(TIME_KEY).expect("time grid"))?;
            times.broadcast_to(&[s[0], s[1], s[2], 1])?
        } else {
            Tensor::zeros(&[s[0], s[1], s[2], 0])
        };
        let v = self.tape.leaf(t);
        self.root_time.insert(tag.to_string(), v);
        Ok(v)
    }

    fn tensor_var(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.tensors.get(name) {
            return Ok(v);
        }
        let dom = self.ev.domain.ok_or(EvalError::NoDomain("a tensor tag"))?;
        let t = dom
            .lifted_tensor(name)
            .map_err(|_| EvalError::UnknownTag(name.to_string()))?;
        let t = self.select_batch(&t)?;
        let v = self.tape.leaf(t);
        self.tensors.insert(name.to_string(), v);
        Ok(v)
    }

    fn model_params(&mut self, m: &Model) -> BTreeMap<String, Var> {
        if let Some(slot) = self.models.get(&m.id()) {
            return slot.params.clone();
        }
        let trainable = m.trainable_paths();
        let mut params = BTreeMap::new();
        for (k, v) in m.params() {
            let var = if trainable.contains(&k) {
                self.tape.leaf(v)
            } else {
                self.tape.constant(v)
            };
            params.insert(k, var);
        }
        self.models.insert(
            m.id(),
            ModelSlot {
                model: m.clone(),
                params: params.clone(),
                trainable: trainable.into_iter().collect(),
            },
        );
        params
    }

    fn children(&mut self, frame: usize, e: &Expr) -> Result<Vec<Var>> {
        e.children().iter().map(|c| self.eval_in(frame, c)).collect()
    }

    fn shape(&self, v: Var) -> Vec<usize> {
        self.tape.value(v).shape().to_vec()
    }

    /// Variables to differentiate against for `wrt`: one per coordinate
    /// column for a whole-coordinate variable, otherwise the variable itself.
    fn wrt_columns(&mut self, frame: usize, wrt: &Expr) -> Result<Vec<Var>> {
        if self.lookup_bind(frame, wrt.id()).is_none() {
            match wrt.kind() {
                NodeKind::Variable(VarSource::Coordinate { tag, col: None }) => {
                    return self.coordinate_columns(frame, tag);
                }
                NodeKind::Variable(VarSource::Time { .. }) => {
                    let v = self.eval_in(frame, wrt)?;
                    if self.tape.value(v).numel() == 0 {
                        return Err(EvalError::NonDifferentiablePath(
                            "time derivative on a domain without a time grid".into(),
                        ));
                    }
                    return Ok(vec![v]);
                }
                NodeKind::Variable(VarSource::Tensor(n)) | NodeKind::TensorTag(n) => {
                    return Err(EvalError::NonDifferentiablePath(format!(
                        "pointwise derivative with respect to tensor tag {n:?}"
                    )));
                }
                _ => {}
            }
        }
        Ok(vec![self.eval_in(frame, wrt)?])
    }

    fn derivative_ad(&mut self, frame: usize, e: &Expr, order: u8) -> Result<Var> {
        let u = self.eval_in(frame, &e.children()[0])?;
        let cols = self.wrt_columns(frame, &e.children()[1])?;
        let us = self.shape(u);
        let xs: Vec<usize> = if cols.len() == 1 {
            self.shape(cols[0])
        } else {
            let mut s = self.shape(cols[0]);
            *s.last_mut().expect("rank ≥ 1") = cols.len();
            s
        };
        let target = broadcast_shape(&us, &xs).ok_or_else(|| {
            EvalError::Tensor(TensorError::ShapeMismatch {
                op: "derivative",
                lhs: us.clone(),
                rhs: xs.clone(),
            })
        })?;
        let nch = target.last().copied().unwrap_or(1);
        let ulast = us.last().copied().unwrap_or(1);
        let xlast = xs.last().copied().unwrap_or(1);
        let t = &mut self.tape;
        let mut parts = Vec::with_capacity(nch);
        for k in 0..nch {
            let uk = if ulast > 1 { t.slice(u, -1, k, 1, 1)? } else { u };
            let (xv, pick) = if cols.len() > 1 {
                (cols[k], None)
            } else if xlast > 1 {
                (cols[0], Some(k))
            } else {
                (cols[0], None)
            };
            let mut g = uk;
            for _ in 0..order {
                let s = t.sum(g, None, false)?;
                let gr = t.grad(s, &[xv])?[0];
                g = match pick {
                    Some(k) => t.slice(gr, -1, k, 1, 1)?,
                    None => gr,
                };
            }
            parts.push(g);
        }
        let out = if parts.len() == 1 {
            parts[0]
        } else {
            t.concat(&parts, -1)?
        };
        if t.value(out).shape() == target.as_slice() {
            Ok(out)
        } else {
            Ok(t.broadcast_to(out, &target)?)
        }
    }

    fn vertex_frame(&mut self, parent: usize, dom: &Domain) -> usize {
        if let Some(&f) = self.vertex_frames.get(&parent) {
            return f;
        }
        let m = dom.mesh();
        let (d, nv) = (m.dim(), m.num_vertices());
        let cols = (0..d)
            .map(|c| {
                let col: Vec<f64> = (0..nv).map(|v| m.vertex(v)[c]).collect();
                self.tape.leaf(Tensor::from_parts(vec![1, 1, nv, 1], col))
            })
            .collect();
        let time = match dom.time() {
            Some(ts) => {
                let t = Tensor::from_parts(vec![1, ts.slices(), 1, 1], ts.values());
                self.tape
                    .leaf(t.broadcast_to(&[1, ts.slices(), nv, 1]).expect("time broadcast"))
            }
            None => self.tape.leaf(Tensor::zeros(&[1, 1, nv, 0])),
        };
        self.regions.push(Region {
            cols,
            time,
            points: m.vertices().to_vec(),
            at_vertices: true,
        });
        self.frames.push(Frame {
            parent: Some(parent),
            binds: HashMap::new(),
            region: Some(self.regions.len() - 1),
        });
        let f = self.frames.len() - 1;
        self.vertex_frames.insert(parent, f);
        f
    }

    fn derivative_fd(&mut self, frame: usize, e: &Expr, order: u8) -> Result<Var> {
        let dom = self
            .ev
            .domain
            .ok_or(EvalError::NoDomain("a finite-difference derivative"))?;
        let (u_e, x_e) = (&e.children()[0], &e.children()[1]);
        let (tag, cols): (&str, Vec<usize>) = match x_e.kind() {
            NodeKind::Variable(VarSource::Coordinate { tag, col }) => (
                tag,
                match col {
                    Some(c) => vec![*c],
                    None => (0..dom.dim()).collect(),
                },
            ),
            NodeKind::Variable(VarSource::Time { .. }) => {
                return Err(EvalError::Unsupported("temporal finite differences".into()))
            }
            _ => {
                return Err(EvalError::NonDifferentiablePath(
                    "finite differences need a coordinate variable".into(),
                ))
            }
        };
        let mesh = dom.mesh();
        let grads = dom
            .fd
            .lock()
            .expect("fd cache")
            .gradient(mesh, dom.connectivity())?;
        let vf = self.vertex_frame(frame, dom);
        let nv = mesh.num_vertices();
        let mut uv = self.eval_in(vf, u_e)?;
        let us = self.shape(uv);
        uv = match us.len() {
            4 if us[2] == nv => uv,
            4 if us[2] == 1 => self.tape.broadcast_to(uv, &[us[0], us[1], nv, us[3]])?,
            0 => {
                let r = self.tape.reshape(uv, &[1, 1, 1, 1])?;
                self.tape.broadcast_to(r, &[1, 1, nv, 1])?
            }
            _ => {
                return Err(EvalError::Unsupported(format!(
                    "finite differences of a value shaped {us:?}"
                )))
            }
        };
        let cu = self.shape(uv)[3];
        let nch = if cols.len() > 1 { cols.len() } else { cu };
        if cols.len() > 1 && cu > 1 && cu != cols.len() {
            return Err(EvalError::Tensor(TensorError::ShapeMismatch {
                op: "derivative",
                lhs: self.shape(uv),
                rhs: vec![cols.len()],
            }));
        }
        let mut parts = Vec::with_capacity(nch);
        for k in 0..nch {
            let mut g = if cu > 1 {
                self.tape.slice(uv, -1, k, 1, 1)?
            } else {
                uv
            };
            let c = cols[if cols.len() > 1 { k } else { 0 }];
            for _ in 0..order {
                g = self.tape.point_map(g, grads[c].clone(), 2)?;
            }
            parts.push(g);
        }
        let out = if parts.len() == 1 {
            parts[0]
        } else {
            self.tape.concat(&parts, -1)?
        };
        let region = self.region_of(frame);
        if region.is_some_and(|r| self.regions[r].at_vertices) {
            return Ok(out);
        }
        let (key, points) = match region {
            Some(r) => (format!("\u{0}region/{r}"), self.regions[r].points.clone()),
            None => {
                let ctx = self.context(dom, tag)?;
                let n = ctx.shape()[2] * ctx.shape()[3];
                (tag.to_string(), ctx.data()[..n].to_vec())
            }
        };
        let p = dom
            .fd
            .lock()
            .expect("fd cache")
            .transfer(mesh, &key, &points)?;
        let mapped = self.tape.point_map(out, p, 2)?;
        let x = self.eval_in(frame, x_e)?;
        let (ms, xs) = (self.shape(mapped), self.shape(x));
        let mut xs1 = xs.clone();
        if let Some(l) = xs1.last_mut() {
            *l = 1;
        }
        let target = broadcast_shape(&ms, &xs1).ok_or(EvalError::Tensor(
            TensorError::ShapeMismatch {
                op: "derivative",
                lhs: ms.clone(),
                rhs: xs,
            },
        ))?;
        if target == ms {
            Ok(mapped)
        } else {
            Ok(self.tape.broadcast_to(mapped, &target)?)
        }
    }
}

fn h_variable(s: &mut Session<'_>, frame: usize, e: &Expr) -> Result<Var> {
    let NodeKind::Variable(src) = e.kind() else {
        unreachable!("variable handler")
    };
    match src {
        VarSource::Free => {
            if let Some(&v) = s.free.get(&e.id()) {
                return Ok(v);
            }
            let t = s
                .ev
                .bindings
                .get(&e.id())
                .ok_or_else(|| EvalError::UnboundVariable(e.label()))?
                .clone();
            let v = s.tape.leaf(t);
            s.free.insert(e.id(), v);
            Ok(v)
        }
        VarSource::Coordinate { tag, col } => {
            let cols = s.coordinate_columns(frame, tag)?;
            match col {
                Some(c) => cols
                    .get(*c)
                    .copied()
                    .ok_or_else(|| EvalError::UnknownTag(format!("{tag}[{c}]"))),
                None if cols.len() == 1 => Ok(cols[0]),
                None => Ok(s.tape.concat(&cols, -1)?),
            }
        }
        VarSource::Time { tag } => s.time_var(frame, tag),
        VarSource::Tensor(name) => s.tensor_var(name),
    }
}

fn h_literal(s: &mut Session<'_>, _: usize, e: &Expr) -> Result<Var> {
    let NodeKind::Literal(c) = e.kind() else {
        unreachable!("literal handler")
    };
    Ok(s.tape.constant(Tensor::scalar(*c)))
}

fn h_constant(s: &mut Session<'_>, _: usize, e: &Expr) -> Result<Var> {
    let NodeKind::Constant(t) = e.kind() else {
        unreachable!("constant handler")
    };
    Ok(s.tape.constant(t.clone()))
}

fn h_tensor_tag(s: &mut Session<'_>, _: usize, e: &Expr) -> Result<Var> {
    let NodeKind::TensorTag(name) = e.kind() else {
        unreachable!("tensor tag handler")
    };
    s.tensor_var(name)
}

fn h_arithmetic(s: &mut Session<'_>, frame: usize, e: &Expr) -> Result<Var> {
    let NodeKind::Arithmetic(op) = e.kind() else {
        unreachable!("arithmetic handler")
    };
    let c = s.children(frame, e)?;
    let t = &mut s.tape;
    use ArithOp::*;
    Ok(match op {
        Add => t.add(c[0], c[1])?,
        Sub => t.sub(c[0], c[1])?,
        Mul => t.mul(c[0], c[1])?,
        Div => t.div(c[0], c[1])?,
        Pow => match e.children()[1].kind() {
            NodeKind::Literal(p) => t.unary(Op::PowScalar(*p), c[0])?,
            _ => t.apply(Op::Pow, &c)?,
        },
        Maximum => t.apply(Op::Maximum, &c)?,
        Minimum => t.apply(Op::Minimum, &c)?,
        Neg => t.neg(c[0])?,
        Exp => t.unary(Op::Exp, c[0])?,
        Log => t.unary(Op::Log, c[0])?,
        Sin => t.unary(Op::Sin, c[0])?,
        Cos => t.unary(Op::Cos, c[0])?,
        Tanh => t.unary(Op::Tanh, c[0])?,
        Relu => t.unary(Op::Relu, c[0])?,
        Sqrt => t.unary(Op::Sqrt, c[0])?,
        Abs => t.unary(Op::Abs, c[0])?,
    })
}

fn h_compare(s: &mut Session<'_>, frame: usize, e: &Expr) -> Result<Var> {
    let NodeKind::Compare(op) = e.kind() else {
        unreachable!("compare handler")
    };
    let c = s.children(frame, e)?;
    Ok(s.tape.apply(Op::Compare(*op), &c)?)
}

fn h_reduce(s: &mut Session<'_>, frame: usize, e: &Expr) -> Result<Var> {
    let NodeKind::Reduce { op, axes } = e.kind() else {
        unreachable!("reduce handler")
    };
    let a = s.eval_in(frame, &e.children()[0])?;
    let t = &mut s.tape;
    Ok(match op {
        ReduceOp::Sum => t.sum(a, axes.as_deref(), false)?,
        ReduceOp::Mean => t.mean(a, axes.as_deref(), false)?,
        ReduceOp::Mse => {
            let sq = t.mul(a, a)?;
            t.mean(sq, axes.as_deref(), false)?
        }
    })
}

fn h_slice(s: &mut Session<'_>, frame: usize, e: &Expr) -> Result<Var> {
    let NodeKind::Slice(spec) = e.kind() else {
        unreachable!("slice handler")
    };
    let a = s.eval_in(frame, &e.children()[0])?;
    let shape = s.shape(a);
    let rank = shape.len();
    let norm = |axis: isize| -> Result<usize> {
        let x = if axis < 0 { axis + rank as isize } else { axis };
        if x < 0 || x as usize >= rank {
            return Err(TensorError::InvalidAxis { axis, rank }.into());
        }
        Ok(x as usize)
    };
    match spec {
        SliceSpec::Index { axis, index } => {
            let ax = norm(*axis)?;
            let ext = shape[ax] as isize;
            let i = if *index < 0 { index + ext } else { *index };
            if i < 0 || i >= ext {
                return Err(TensorError::IndexOutOfRange {
                    index: *index,
                    extent: shape[ax],
                }
                .into());
            }
            let sl = s.tape.slice(a, ax as isize, i as usize, 1, 1)?;
            let mut out = shape.clone();
            out.remove(ax);
            Ok(s.tape.reshape(sl, &out)?)
        }
        SliceSpec::Range {
            axis,
            start,
            end,
            step,
        } => {
            let ax = norm(*axis)?;
            let end = end.unwrap_or(shape[ax]).min(shape[ax]);
            let len = if end > *start {
                (end - start).div_ceil(*step)
            } else {
                0
            };
            Ok(s.tape.slice(a, ax as isize, *start, len, *step)?)
        }
    }
}

fn h_concat(s: &mut Session<'_>, frame: usize, e: &Expr) -> Result<Var> {
    let NodeKind::Concat(axis) = e.kind() else {
        unreachable!("concat handler")
    };
    let c = s.children(frame, e)?;
    Ok(s.tape.concat(&c, *axis)?)
}

fn h_derivative(s: &mut Session<'_>, frame: usize, e: &Expr) -> Result<Var> {
    let NodeKind::Derivative { order, mode } = e.kind() else {
        unreachable!("derivative handler")
    };
    let mode = match mode {
        DiffMode::Default => s.ev.mode,
        m => *m,
    };
    match mode {
        DiffMode::FiniteDifference => s.derivative_fd(frame, e, *order),
        _ => s.derivative_ad(frame, e, *order),
    }
}

fn h_jacobian(s: &mut Session<'_>, frame: usize, e: &Expr) -> Result<Var> {
    let c = s.children(frame, e)?;
    let j = s.tape.jacobian(c[0], c[1])?;
    Ok(s.tape.constant(j))
}

fn h_hessian(s: &mut Session<'_>, frame: usize, e: &Expr) -> Result<Var> {
    let c = s.children(frame, e)?;
    let n = s.tape.value(c[0]).numel();
    if n != 1 {
        return Err(TensorError::NonScalarOutput(s.shape(c[0])).into());
    }
    let f = s.tape.sum(c[0], None, false)?;
    let h = s.tape.hessian(f, c[1])?;
    Ok(s.tape.constant(h))
}

fn h_model_call(s: &mut Session<'_>, frame: usize, e: &Expr) -> Result<Var> {
    let NodeKind::ModelCall(model) = e.kind() else {
        unreachable!("model call handler")
    };
    let args = s.children(frame, e)?;
    let params = s.model_params(model);
    Ok(model.forward(&mut s.tape, &params, &args)?)
}

fn h_operation_call(s: &mut Session<'_>, frame: usize, e: &Expr) -> Result<Var> {
    let NodeKind::OperationCall(def) = e.kind() else {
        unreachable!("operation handler")
    };
    let args = s.children(frame, e)?;
    let binds = def.params().iter().map(|p| p.id()).zip(args).collect();
    let f = s.push_frame(frame, binds);
    s.eval_in(f, def.body())
}

fn h_tracker(s: &mut Session<'_>, frame: usize, e: &Expr) -> Result<Var> {
    s.eval_in(frame, &e.children()[0])
}

fn h_trial(_: &mut Session<'_>, _: usize, _: &Expr) -> Result<Var> {
    Err(EvalError::UnassembledSymbol("trial"))
}

fn h_test(_: &mut Session<'_>, _: usize, _: &Expr) -> Result<Var> {
    Err(EvalError::UnassembledSymbol("test"))
}
