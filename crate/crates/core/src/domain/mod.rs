//! Geometry, tagged point sets and the runtime sampling context.
//!
//! Spatial arrays follow the shape family `(B, T, N, D)`: batch, time
//! slice, point, coordinate. The mesh pool holds the full tagged point sets;
//! the context holds what the solver currently trains on. Tensor tags are
//! per-sample arrays shaped `(B, T, …)`.

pub mod geometry;
pub mod mesh;
pub mod meshio;

use std::collections::BTreeMap;
use std::ops::{Add, Mul};
use std::path::Path;
use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::solver::persist::{Artifact, ArtifactKind};
use crate::tensor::{Tensor, TensorError};
use crate::trace::{Expr, NodeKind, VarSource};

pub use mesh::{Connectivity, ElementKind, Facet, Locator, Mesh};

/// Context key of the time grid.
pub const TIME_KEY: &str = "__time__";

const AXIS_NAMES: [&str; 3] = ["x", "y", "z"];

#[derive(Debug, Error)]
pub enum DomainError {
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
    #[error("unsupported geometry: {0}")]
    UnsupportedGeometry(String),
    #[error("unsupported element: {0}")]
    UnsupportedElement(String),
    #[error("unknown tag {0:?}")]
    UnknownTag(String),
    #[error("bad shape: {0}")]
    BadShape(String),
    #[error("cannot draw {count} points from {pool} in tag {tag:?}")]
    CountExceedsPool {
        tag: String,
        count: usize,
        pool: usize,
    },
    #[error("tag {0:?} is not a boundary tag")]
    NotABoundaryTag(String),
    #[error("tag mismatch: {0}")]
    TagMismatch(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("i/o error: {0}")]
    Io(String),
    #[error("corrupt domain artifact: {0}")]
    Artifact(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, DomainError>;

/// `steps + 1` uniformly spaced time slices over `[t0, t1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeSpec {
    pub t0: f64,
    pub t1: f64,
    pub steps: usize,
}

impl TimeSpec {
    pub fn slices(&self) -> usize {
        self.steps + 1
    }

    pub fn values(&self) -> Vec<f64> {
        if self.steps == 0 {
            return vec![self.t0];
        }
        (0..=self.steps)
            .map(|i| {
                if i == self.steps {
                    self.t1
                } else {
                    self.t0 + (self.t1 - self.t0) * i as f64 / self.steps as f64
                }
            })
            .collect()
    }
}

/// How a tag's context points are redrawn at outer-step boundaries.
#[derive(Clone, Debug)]
pub enum ResampleKind {
    UniformSubset,
    /// Draw without replacement with probability proportional to the
    /// per-point value of `score`, evaluated on the full pool.
    ResidualWeighted { score: Expr },
}

#[derive(Clone, Debug)]
pub struct ResampleStrategy {
    pub kind: ResampleKind,
    pub count: usize,
    /// Redraw every this many outer steps.
    pub every: u64,
}

#[derive(Clone, Debug)]
pub struct Domain {
    mesh: Arc<Mesh>,
    conn: Arc<Connectivity>,
    batch: usize,
    time: Option<TimeSpec>,
    pool: BTreeMap<String, Tensor>,
    context: BTreeMap<String, Tensor>,
    tensor_tags: BTreeMap<String, Tensor>,
    resamplers: BTreeMap<String, ResampleStrategy>,
    pub(crate) fem: Option<Arc<crate::fem::FemSetup>>,
    pub(crate) fd: Arc<Mutex<crate::evaluator::fd::FdCache>>,
}

impl Domain {
    pub fn from_mesh(mesh: Mesh) -> Domain {
        let conn = Connectivity::build(&mesh);
        let mut d = Domain {
            mesh: Arc::new(mesh),
            conn: Arc::new(conn),
            batch: 1,
            time: None,
            pool: BTreeMap::new(),
            context: BTreeMap::new(),
            tensor_tags: BTreeMap::new(),
            resamplers: BTreeMap::new(),
            fem: None,
            fd: Arc::default(),
        };
        let tags: Vec<(String, Vec<usize>)> = d
            .mesh
            .tags()
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        for (name, idx) in tags {
            let pts: Vec<f64> = idx.iter().flat_map(|&i| d.mesh.vertex(i).to_vec()).collect();
            d.register_points(&name, pts);
        }
        d
    }

    pub fn rect(x_range: (f64, f64), y_range: (f64, f64), mesh_size: f64) -> Result<Domain> {
        Ok(Self::from_mesh(geometry::rect(x_range, y_range, mesh_size)?))
    }

    pub fn structured_rect(
        x_range: (f64, f64),
        y_range: (f64, f64),
        nx: usize,
        ny: usize,
    ) -> Result<Domain> {
        Ok(Self::from_mesh(geometry::structured_rect(x_range, y_range, nx, ny)?))
    }

    pub fn line(range: (f64, f64), mesh_size: f64) -> Result<Domain> {
        Ok(Self::from_mesh(geometry::line(range, mesh_size)?))
    }

    pub fn disk(center: (f64, f64), radius: f64, mesh_size: f64) -> Result<Domain> {
        Ok(Self::from_mesh(geometry::disk(center, radius, mesh_size)?))
    }

    pub fn lshape(mesh_size: f64) -> Result<Domain> {
        Ok(Self::from_mesh(geometry::lshape(mesh_size)?))
    }

    pub fn cube(
        x_range: (f64, f64),
        y_range: (f64, f64),
        z_range: (f64, f64),
        mesh_size: f64,
    ) -> Result<Domain> {
        Ok(Self::from_mesh(geometry::cube(x_range, y_range, z_range, mesh_size)?))
    }

    pub fn rect_with_hole(
        x_range: (f64, f64),
        y_range: (f64, f64),
        center: (f64, f64),
        radius: f64,
        mesh_size: f64,
    ) -> Result<Domain> {
        Ok(Self::from_mesh(geometry::rect_with_hole(
            x_range, y_range, center, radius, mesh_size,
        )?))
    }

    /// Construct by geometry name: `line`, `rect`, `structured-rect`,
    /// `disk`, `lshape`, `cube`, `rect-with-hole`, on unit extents.
    pub fn named(geometry: &str, mesh_size: f64) -> Result<Domain> {
        let u = (0.0, 1.0);
        match geometry {
            "line" => Self::line(u, mesh_size),
            "rect" => Self::rect(u, u, mesh_size),
            "structured-rect" => {
                let n = ((1.0 / mesh_size).round() as usize).max(1);
                Self::structured_rect(u, u, n, n)
            }
            "disk" => Self::disk((0.0, 0.0), 1.0, mesh_size),
            "lshape" => Self::lshape(mesh_size),
            "cube" => Self::cube(u, u, u, mesh_size),
            "rect-with-hole" => Self::rect_with_hole(u, u, (0.5, 0.5), 0.2, mesh_size),
            other => Err(DomainError::UnsupportedGeometry(other.to_string())),
        }
    }

    pub fn load_mesh(path: &Path) -> Result<Domain> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| DomainError::Io(format!("{}: {e}", path.display())))?;
        Ok(Self::from_mesh(meshio::read_mesh(&text)?))
    }

    pub fn save_mesh(&self, path: &Path) -> Result<()> {
        std::fs::write(path, meshio::write_mesh(&self.mesh))
            .map_err(|e| DomainError::Io(format!("{}: {e}", path.display())))
    }

    /// Attach a uniform time grid; every spatial array gets `steps + 1`
    /// time slices.
    pub fn with_time(mut self, t0: f64, t1: f64, steps: usize) -> Result<Domain> {
        if !(t1 > t0) {
            return Err(DomainError::DegenerateGeometry(format!("time range ({t0}, {t1})")));
        }
        let spec = TimeSpec { t0, t1, steps };
        let t = spec.slices();
        for arr in self.pool.values_mut().chain(self.context.values_mut()) {
            let s = arr.shape().to_vec();
            let slice = arr.slice(1, 0, 1, 1)?;
            *arr = slice.broadcast_to(&[s[0], t, s[2], s[3]])?;
        }
        let times = Tensor::new(vec![1, t, 1, 1], spec.values())?;
        self.context
            .insert(TIME_KEY.into(), times.broadcast_to(&[self.batch, t, 1, 1])?);
        self.time = Some(spec);
        Ok(self)
    }

    pub fn mesh(&self) -> &Mesh {
        &self.mesh
    }

    pub fn mesh_arc(&self) -> Arc<Mesh> {
        self.mesh.clone()
    }

    pub fn connectivity(&self) -> &Connectivity {
        &self.conn
    }

    pub fn dim(&self) -> usize {
        self.mesh.dim()
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn time(&self) -> Option<TimeSpec> {
        self.time
    }

    pub fn time_slices(&self) -> usize {
        self.time.map_or(1, |t| t.slices())
    }

    /// Names of all point sets (mesh tags and registered regions).
    pub fn tags(&self) -> Vec<String> {
        self.pool.keys().cloned().collect()
    }

    pub fn has_tag(&self, tag: &str) -> bool {
        self.pool.contains_key(tag)
    }

    /// Full point set `(B, T, N, D)` of a tag.
    pub fn pool(&self, tag: &str) -> Result<&Tensor> {
        self.pool
            .get(tag)
            .ok_or_else(|| DomainError::UnknownTag(tag.to_string()))
    }

    /// Current context array of a tag (or of [`TIME_KEY`]).
    pub fn points(&self, tag: &str) -> Result<&Tensor> {
        self.context
            .get(tag)
            .ok_or_else(|| DomainError::UnknownTag(tag.to_string()))
    }

    pub fn context(&self) -> &BTreeMap<String, Tensor> {
        &self.context
    }

    pub fn tensor_tags(&self) -> &BTreeMap<String, Tensor> {
        &self.tensor_tags
    }

    pub fn tensor_tag(&self, name: &str) -> Option<&Tensor> {
        self.tensor_tags.get(name)
    }

    /// Register a point set given as `N × D` row-major coordinates.
    pub(crate) fn register_points(&mut self, name: &str, pts: Vec<f64>) {
        let d = self.dim();
        let n = pts.len() / d;
        let t = self.time_slices();
        let base = Tensor::from_parts(vec![1, 1, n, d], pts);
        let full = base
            .broadcast_to(&[self.batch, t, n, d])
            .expect("broadcast of a fresh point set");
        self.pool.insert(name.to_string(), full.clone());
        self.context.insert(name.to_string(), full);
    }

    /// Coordinate variables of `tag`, one per column, followed by the time
    /// variable.
    pub fn variable(&self, tag: &str) -> Result<Vec<Expr>> {
        self.variable_split(tag, true)
    }

    /// With `split = false` the coordinates come back as one `(…, D)`
    /// variable followed by the time variable.
    pub fn variable_split(&self, tag: &str, split: bool) -> Result<Vec<Expr>> {
        if !self.pool.contains_key(tag) {
            return Err(DomainError::UnknownTag(tag.to_string()));
        }
        let mut out = Vec::new();
        if split {
            for c in 0..self.dim() {
                out.push(Expr::variable(
                    VarSource::Coordinate {
                        tag: tag.to_string(),
                        col: Some(c),
                    },
                    AXIS_NAMES[c],
                ));
            }
        } else {
            out.push(Expr::variable(
                VarSource::Coordinate {
                    tag: tag.to_string(),
                    col: None,
                },
                tag,
            ));
        }
        out.push(Expr::variable(VarSource::Time { tag: tag.to_string() }, "t"));
        Ok(out)
    }

    /// Attach a per-sample tensor shaped `(B, T, …)` and return a variable
    /// bound to it.
    pub fn tensor_variable(&mut self, name: &str, value: Tensor) -> Result<Expr> {
        let s = value.shape();
        if s.len() < 2 || s[0] != self.batch || (s[1] != self.time_slices() && s[1] != 1) {
            return Err(DomainError::BadShape(format!(
                "tensor tag {name:?} has shape {:?}, expected ({}, {}, …)",
                s,
                self.batch,
                self.time_slices()
            )));
        }
        self.tensor_tags.insert(name.to_string(), value);
        Ok(Expr::variable(VarSource::Tensor(name.to_string()), name))
    }

    /// Rank-4 view `(B, T, 1, F)` used when a tensor tag meets point arrays.
    pub fn lifted_tensor(&self, name: &str) -> Result<Tensor> {
        let t = self
            .tensor_tags
            .get(name)
            .ok_or_else(|| DomainError::UnknownTag(name.to_string()))?;
        Ok(lift(t)?)
    }

    /// Shape of a leaf expression as the evaluator will produce it, with
    /// the batch axis replaced by `batch` when given.
    pub fn leaf_shape(&self, e: &Expr, batch: Option<usize>) -> Option<Vec<usize>> {
        let b = batch.unwrap_or(self.batch);
        let tag_shape = |tag: &str| self.context.get(tag).map(|t| t.shape().to_vec());
        match e.kind() {
            NodeKind::Variable(VarSource::Coordinate { tag, col }) => {
                let s = tag_shape(tag)?;
                Some(vec![b, s[1], s[2], if col.is_some() { 1 } else { s[3] }])
            }
            NodeKind::Variable(VarSource::Time { tag }) => {
                let s = tag_shape(tag)?;
                Some(vec![b, s[1], s[2], usize::from(self.time.is_some())])
            }
            NodeKind::Variable(VarSource::Tensor(n)) | NodeKind::TensorTag(n) => {
                let mut s = lifted_shape(self.tensor_tags.get(n)?.shape());
                s[0] = b;
                Some(s)
            }
            _ => None,
        }
    }

    /// Replace the context points of `tag` by a uniform random subset of
    /// the pool. The same indices are used for every batch entry.
    pub fn sample(&mut self, tag: &str, count: usize, seed: u64) -> Result<()> {
        let n = self.pool(tag)?.shape()[2];
        if count > n {
            return Err(DomainError::CountExceedsPool {
                tag: tag.to_string(),
                count,
                pool: n,
            });
        }
        let idx = if count == n {
            (0..n).collect()
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut idx = rand::seq::index::sample(&mut rng, n, count).into_vec();
            idx.sort_unstable();
            idx
        };
        self.set_context_indices(tag, &idx)
    }

    /// Weighted draw without replacement (exponential-key method).
    pub fn sample_weighted(
        &mut self,
        tag: &str,
        count: usize,
        weights: &[f64],
        seed: u64,
    ) -> Result<()> {
        let n = self.pool(tag)?.shape()[2];
        if weights.len() != n {
            return Err(DomainError::ShapeMismatch(format!(
                "{} weights for {n} points",
                weights.len()
            )));
        }
        if count > n {
            return Err(DomainError::CountExceedsPool {
                tag: tag.to_string(),
                count,
                pool: n,
            });
        }
        let idx = weighted_indices(weights, count, seed);
        self.set_context_indices(tag, &idx)
    }

    /// Restore the full pool as context for `tag`.
    pub fn reset_context(&mut self, tag: &str) -> Result<()> {
        let full = self.pool(tag)?.clone();
        self.context.insert(tag.to_string(), full);
        Ok(())
    }

    fn set_context_indices(&mut self, tag: &str, idx: &[usize]) -> Result<()> {
        let sub = self.pool(tag)?.select(2, idx)?;
        self.context.insert(tag.to_string(), sub);
        Ok(())
    }

    /// Replace the context of `tag` with `t`, e.g. a restored resampled subset.
    pub(crate) fn restore_context(&mut self, tag: &str, t: Tensor) -> Result<()> {
        let p = self.pool(tag)?.shape().to_vec();
        let s = t.shape();
        if s.len() != 4 || s[0] != p[0] || s[1] != p[1] || s[3] != p[3] {
            return Err(DomainError::BadShape(format!(
                "context {s:?} does not fit pool {p:?} of tag {tag:?}"
            )));
        }
        self.context.insert(tag.to_string(), t);
        Ok(())
    }

    pub fn register_resampler(&mut self, tag: &str, strategy: ResampleStrategy) -> Result<()> {
        let n = self.pool(tag)?.shape()[2];
        if strategy.count > n {
            return Err(DomainError::CountExceedsPool {
                tag: tag.to_string(),
                count: strategy.count,
                pool: n,
            });
        }
        if strategy.every == 0 {
            return Err(DomainError::BadShape("resampling interval must be positive".into()));
        }
        self.resamplers.insert(tag.to_string(), strategy);
        Ok(())
    }

    pub fn resamplers(&self) -> &BTreeMap<String, ResampleStrategy> {
        &self.resamplers
    }

    /// Outward unit normals `(N_tag, D)` of a boundary tag.
    pub fn normals(&self, tag: &str) -> Result<Tensor> {
        let idx = self
            .mesh
            .tag(tag)
            .ok_or_else(|| DomainError::UnknownTag(tag.to_string()))?;
        let mut data = Vec::with_capacity(idx.len() * self.dim());
        for &v in idx {
            let n = self
                .conn
                .normal(v)
                .ok_or_else(|| DomainError::NotABoundaryTag(tag.to_string()))?;
            data.extend_from_slice(n);
        }
        Ok(Tensor::new(vec![idx.len(), self.dim()], data)?)
    }

    /// Repeat the batch `n` times.
    pub fn repeat(&self, n: usize) -> Result<Domain> {
        if n == 0 {
            return Err(DomainError::BadShape("repetition count must be positive".into()));
        }
        let rep = |t: &Tensor| -> Result<Tensor> {
            let parts: Vec<&Tensor> = std::iter::repeat(t).take(n).collect();
            Ok(Tensor::concat(&parts, 0)?)
        };
        let mut d = self.clone();
        d.batch = self.batch * n;
        for m in [&mut d.pool, &mut d.context, &mut d.tensor_tags] {
            for v in m.values_mut() {
                *v = rep(v)?;
            }
        }
        Ok(d)
    }

    /// Concatenate two domains along the batch axis. The mesh of `self`
    /// is kept for connectivity and assembly.
    pub fn merge(&self, other: &Domain) -> Result<Domain> {
        if self.pool.keys().ne(other.pool.keys()) {
            return Err(DomainError::TagMismatch("domains carry different tags".into()));
        }
        if self.tensor_tags.keys().ne(other.tensor_tags.keys()) {
            return Err(DomainError::TagMismatch("domains carry different tensor tags".into()));
        }
        if self.time != other.time || self.dim() != other.dim() {
            return Err(DomainError::ShapeMismatch("time grid or dimension differs".into()));
        }
        let cat = |a: &Tensor, b: &Tensor, what: &str| -> Result<Tensor> {
            if a.shape()[1..] != b.shape()[1..] {
                return Err(DomainError::ShapeMismatch(format!(
                    "{what}: {:?} vs {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
            Ok(Tensor::concat(&[a, b], 0)?)
        };
        let mut d = self.clone();
        d.batch = self.batch + other.batch;
        for (k, v) in d.pool.iter_mut() {
            *v = cat(v, &other.pool[k], k)?;
        }
        for (k, v) in d.context.iter_mut() {
            let o = other
                .context
                .get(k)
                .ok_or_else(|| DomainError::TagMismatch(k.clone()))?;
            *v = cat(v, o, k)?;
        }
        for (k, v) in d.tensor_tags.iter_mut() {
            *v = cat(v, &other.tensor_tags[k], k)?;
        }
        Ok(d)
    }

    /// Mesh, pool, context and tensor tags as a `domain` artifact.
    pub fn to_artifact(&self) -> Artifact {
        let m = &self.mesh;
        let mut tensors = vec![
            (
                "mesh/vertices".to_string(),
                Tensor::from_parts(vec![m.num_vertices(), m.dim()], m.vertices().to_vec()),
            ),
            (
                "mesh/elements".to_string(),
                Tensor::from_parts(
                    vec![m.num_elements(), m.kind().nodes()],
                    m.elements().iter().map(|&i| i as f64).collect(),
                ),
            ),
        ];
        for (k, v) in m.tags() {
            tensors.push((
                format!("mesh/tag/{k}"),
                Tensor::from_parts(vec![v.len()], v.iter().map(|&i| i as f64).collect()),
            ));
        }
        for (k, v) in &self.pool {
            tensors.push((format!("pool/{k}"), v.clone()));
        }
        for (k, v) in &self.context {
            tensors.push((format!("context/{k}"), v.clone()));
        }
        for (k, v) in &self.tensor_tags {
            tensors.push((format!("tensor/{k}"), v.clone()));
        }
        Artifact {
            kind: ArtifactKind::Domain,
            tensors,
            meta: serde_json::json!({
                "dim": m.dim(),
                "element": m.kind().name(),
                "batch": self.batch,
                "time": self.time.map(|t| [t.t0, t.t1, t.steps as f64]),
            }),
        }
    }

    pub fn from_artifact(a: &Artifact) -> Result<Domain> {
        let bad = |s: &str| DomainError::Artifact(s.to_string());
        if a.kind != ArtifactKind::Domain {
            return Err(bad("not a domain artifact"));
        }
        let dim = a.meta["dim"].as_u64().ok_or_else(|| bad("dim"))? as usize;
        let kind = a.meta["element"]
            .as_str()
            .and_then(ElementKind::parse)
            .ok_or_else(|| bad("element"))?;
        let batch = a.meta["batch"].as_u64().ok_or_else(|| bad("batch"))? as usize;
        let time = match a.meta["time"].as_array() {
            Some(v) if v.len() == 3 => Some(TimeSpec {
                t0: v[0].as_f64().ok_or_else(|| bad("time"))?,
                t1: v[1].as_f64().ok_or_else(|| bad("time"))?,
                steps: v[2].as_f64().ok_or_else(|| bad("time"))? as usize,
            }),
            _ => None,
        };
        let verts = a.tensor("mesh/vertices").ok_or_else(|| bad("vertices"))?;
        let elems = a.tensor("mesh/elements").ok_or_else(|| bad("elements"))?;
        let mut tags = BTreeMap::new();
        let mut pool = BTreeMap::new();
        let mut context = BTreeMap::new();
        let mut tensor_tags = BTreeMap::new();
        for (name, t) in &a.tensors {
            if let Some(k) = name.strip_prefix("mesh/tag/") {
                tags.insert(k.to_string(), t.data().iter().map(|&x| x as usize).collect());
            } else if let Some(k) = name.strip_prefix("pool/") {
                pool.insert(k.to_string(), t.clone());
            } else if let Some(k) = name.strip_prefix("context/") {
                context.insert(k.to_string(), t.clone());
            } else if let Some(k) = name.strip_prefix("tensor/") {
                tensor_tags.insert(k.to_string(), t.clone());
            }
        }
        let mesh = Mesh::new(
            dim,
            verts.data().to_vec(),
            kind,
            elems.data().iter().map(|&x| x as usize).collect(),
            tags,
        )?;
        let conn = Connectivity::build(&mesh);
        Ok(Domain {
            mesh: Arc::new(mesh),
            conn: Arc::new(conn),
            batch,
            time,
            pool,
            context,
            tensor_tags,
            resamplers: BTreeMap::new(),
            fem: None,
            fd: Arc::default(),
        })
    }

    /// Bitwise equality of mesh, tags, pool, context and tensor tags.
    pub fn same_data(&self, o: &Domain) -> bool {
        let eq = |a: &BTreeMap<String, Tensor>, b: &BTreeMap<String, Tensor>| {
            a.len() == b.len() && a.iter().zip(b).all(|((k1, v1), (k2, v2))| k1 == k2 && v1.bitwise_eq(v2))
        };
        *self.mesh == *o.mesh
            && self.batch == o.batch
            && self.time == o.time
            && eq(&self.pool, &o.pool)
            && eq(&self.context, &o.context)
            && eq(&self.tensor_tags, &o.tensor_tags)
    }
}

fn lifted_shape(s: &[usize]) -> Vec<usize> {
    let rest: usize = s[2..].iter().product();
    vec![s[0], s[1], 1, rest]
}

fn lift(t: &Tensor) -> std::result::Result<Tensor, TensorError> {
    t.reshape(&lifted_shape(t.shape()))
}

/// Indices of the `count` largest keys `u^(1/w)`, sorted ascending.
pub(crate) fn weighted_indices(weights: &[f64], count: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keys: Vec<(f64, usize)> = weights
        .iter()
        .enumerate()
        .map(|(i, &w)| {
            let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let k = if w > 0.0 && w.is_finite() {
                u.ln() / w
            } else {
                f64::NEG_INFINITY
            };
            (k, i)
        })
        .collect();
    keys.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut idx: Vec<usize> = keys.into_iter().take(count).map(|(_, i)| i).collect();
    idx.sort_unstable();
    idx
}

impl Mul<Domain> for usize {
    type Output = Domain;

    /// # Panics
    /// If `self == 0`.
    fn mul(self, d: Domain) -> Domain {
        d.repeat(self).unwrap_or_else(|e| panic!("{e}"))
    }
}

impl Add for Domain {
    type Output = Domain;

    /// # Panics
    /// If the domains do not align; use [`Domain::merge`] to handle that.
    fn add(self, o: Domain) -> Domain {
        self.merge(&o).unwrap_or_else(|e| panic!("{e}"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(h: f64) -> Domain {
        Domain::rect((0.0, 1.0), (0.0, 1.0), h).unwrap()
    }

    #[test]
    fn batched_context_shape() {
        let d = 500 * Domain::rect((0.0, 2.0), (0.0, 1.0), 0.05).unwrap();
        assert_eq!(d.points("interior").unwrap().shape(), &[500, 1, 39 * 19, 2]);
    }

    #[test]
    fn time_grid() {
        let d = unit(0.5).with_time(0.0, 1.0, 1).unwrap();
        let t = d.points(TIME_KEY).unwrap();
        assert_eq!(t.shape(), &[1, 2, 1, 1]);
        assert_eq!(t.data(), &[0.0, 1.0]);
        assert_eq!(d.points("interior").unwrap().shape(), &[1, 2, 1, 2]);
    }

    #[test]
    fn merge_matches_repeat() {
        let d = unit(0.25);
        let a = d.repeat(3).unwrap().merge(&d.repeat(2).unwrap()).unwrap();
        assert!(a.same_data(&d.repeat(5).unwrap()));
        assert!(d.repeat(1).unwrap().same_data(&d));
    }

    #[test]
    fn tensor_tags_must_lead_with_batch() {
        let mut d = 4 * unit(0.5);
        assert!(d.tensor_variable("k", Tensor::zeros(&[4, 1, 1])).is_ok());
        assert!(matches!(
            d.tensor_variable("q", Tensor::zeros(&[3, 1, 1])),
            Err(DomainError::BadShape(_))
        ));
        assert_eq!(d.lifted_tensor("k").unwrap().shape(), &[4, 1, 1, 1]);
    }

    #[test]
    fn unknown_tag() {
        assert!(matches!(unit(0.5).variable("interiorr"), Err(DomainError::UnknownTag(_))));
    }

    #[test]
    fn sampling_is_deterministic_and_identity_at_full_count() {
        let mut d = unit(0.1);
        let n = d.pool("interior").unwrap().shape()[2];
        d.sample("interior", n, 3).unwrap();
        assert!(d.points("interior").unwrap().bitwise_eq(d.pool("interior").unwrap()));
        d.sample("interior", 10, 3).unwrap();
        let a = d.points("interior").unwrap().clone();
        d.sample("interior", 10, 3).unwrap();
        assert!(a.bitwise_eq(d.points("interior").unwrap()));
        assert_eq!(a.shape(), &[1, 1, 10, 2]);
        assert!(matches!(
            d.sample("interior", n + 1, 0),
            Err(DomainError::CountExceedsPool { .. })
        ));
    }

    #[test]
    fn square_normals() {
        let d = unit(0.25);
        let n = d.normals("bottom").unwrap();
        for i in 1..4 {
            assert_eq!(&n.data()[2 * i..2 * i + 2], &[0.0, -1.0]);
        }
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert!((n.data()[0] + s).abs() < 1e-15 && (n.data()[1] + s).abs() < 1e-15);
        assert!(matches!(d.normals("interior"), Err(DomainError::NotABoundaryTag(_))));
    }
}
