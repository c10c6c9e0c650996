//! Weak-form assembly on simplicial meshes.
//!
//! [`Domain::init_fem`] attaches quadrature regions (`fem_gauss` for the
//! volume, `gauss_<tag>` for tagged boundary facets) that behave like any
//! other tag. A weak form is an ordinary expression in the generic trial
//! and test symbols from [`Domain::fem_symbols`]; [`Domain::assemble`] lowers
//! it to a variational residual, a linear system, a residual operator or a
//! semi-discrete time block.

mod assemble;
mod quadrature;
mod time;
mod vpinn;
mod weak;

use std::collections::BTreeMap;
use std::sync::Arc;

use thiserror::Error;

use crate::domain::{Domain, DomainError, ElementKind, Locator, Mesh};
use crate::evaluator::EvalError;
use crate::tensor::TensorError;
use crate::trace::{Expr, NodeKind};

pub use assemble::{Assembled, LinearSystem, NewtonReport, ResidualOperator, Target};
pub use quadrature::{gauss_legendre, triangle};
pub use time::{ExplicitOde, Forcing, TimeBlock, TimeMode};
pub use vpinn::VpinnPlan;
pub use weak::{group, GroupedWeakForm, TrialDegree, WeakTerm};

pub(crate) use vpinn::{eval_field, eval_weak_residual};

pub const VOLUME_REGION: &str = "fem_gauss";

#[derive(Debug, Error)]
pub enum FemError {
    #[error("unsupported element: {0}")]
    UnsupportedElement(String),
    #[error("boundary condition refers to unknown tag {0:?}")]
    UnknownBcTag(String),
    #[error("quadrature degree must be positive")]
    BadQuadDegree,
    #[error("finite elements are not initialized on this domain")]
    NotInitialized,
    #[error("target mismatch: {0}")]
    TargetMismatch(String),
    #[error("unassembled symbol: {0}")]
    UnassembledSymbol(String),
    #[error("term is nonlinear in the trial field: {0}")]
    NonlinearTerm(String),
    #[error("no term carries a time derivative of the trial field")]
    NoTemporalTerm,
    #[error("more than one term carries a time derivative of the trial field")]
    MultipleTemporalTerms,
    #[error("trial expression still contains a trial or test symbol")]
    TrialSymbolRemaining,
    #[error("state has length {got}, expected {free} free or {total} total dofs")]
    BadState { got: usize, free: usize, total: usize },
    #[error("step matrix is singular")]
    SingularStepMatrix,
    #[error("mass matrix is singular")]
    SingularMass,
    #[error("Newton iteration did not converge in {0} iterations")]
    NewtonDivergence(usize),
    #[error("time step must be positive")]
    BadTimeStep,
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, FemError>;

/// Boundary condition record.
#[derive(Clone, Debug, PartialEq)]
pub enum Bc {
    /// Constrain the dofs of every vertex in `tags` to `value`.
    Dirichlet { tags: Vec<String>, value: f64 },
    /// Marks tags whose flux enters through explicit `gauss_<tag>` terms.
    Neumann { tags: Vec<String> },
}

/// Quadrature points of one region with the data of their owning element.
#[derive(Clone, Debug)]
pub struct QuadRegion {
    /// Row-major `Q × D`.
    pub points: Vec<f64>,
    pub weights: Vec<f64>,
    pub element: Vec<usize>,
    /// Nodes per element.
    pub k: usize,
    /// `Q × k` global vertex ids of the owning element.
    pub nodes: Vec<usize>,
    /// `Q × k` constant part of the owning element's barycentric map.
    pub basis_c: Vec<f64>,
    /// `Q × k × D` gradient of the owning element's barycentric map.
    pub basis_g: Vec<f64>,
    /// `Q × k` shape-function values at the points.
    pub phi: Vec<f64>,
}

impl QuadRegion {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Values at the quadrature points of the finite-element function with
    /// nodal coefficients `u`.
    pub fn interpolate(&self, u: &[f64]) -> Vec<f64> {
        (0..self.len())
            .map(|q| {
                (0..self.k)
                    .map(|b| u[self.nodes[q * self.k + b]] * self.phi[q * self.k + b])
                    .sum()
            })
            .collect()
    }

    fn push(&mut self, mesh: &Mesh, e: usize, x: &[f64], w: f64) {
        let d = mesh.dim();
        let (c, g) = mesh.barycentric_map(e);
        self.points.extend_from_slice(x);
        self.weights.push(w);
        self.element.push(e);
        self.nodes.extend_from_slice(mesh.element(e));
        for b in 0..self.k {
            self.phi
                .push(c[b] + (0..d).map(|j| g[b * d + j] * x[j]).sum::<f64>());
        }
        self.basis_c.extend(c);
        self.basis_g.extend(g);
    }
}

/// Element metadata, quadrature regions, boundary conditions and the generic
/// symbols attached by [`Domain::init_fem`].
#[derive(Debug)]
pub struct FemSetup {
    pub element: ElementKind,
    pub quad_degree: usize,
    pub bcs: Vec<Bc>,
    regions: BTreeMap<String, QuadRegion>,
    dirichlet: BTreeMap<usize, f64>,
    free: Vec<usize>,
    num_dofs: usize,
    trial: Expr,
    test: Expr,
}

impl FemSetup {
    pub fn region(&self, name: &str) -> Option<&QuadRegion> {
        self.regions.get(name)
    }

    pub fn region_names(&self) -> impl Iterator<Item = &str> {
        self.regions.keys().map(String::as_str)
    }

    /// One dof per vertex.
    pub fn num_dofs(&self) -> usize {
        self.num_dofs
    }

    pub fn dof_of_vertex(&self, v: usize) -> usize {
        v
    }

    /// Constrained dofs and their values, in dof order.
    pub fn dirichlet(&self) -> &BTreeMap<usize, f64> {
        &self.dirichlet
    }

    /// Unconstrained dofs in increasing order.
    pub fn free_dofs(&self) -> &[usize] {
        &self.free
    }

    pub fn trial(&self) -> &Expr {
        &self.trial
    }

    pub fn test(&self) -> &Expr {
        &self.test
    }

    /// Full nodal vector from free values, with Dirichlet values filled in.
    pub fn expand(&self, free: &[f64]) -> Vec<f64> {
        let mut u = vec![0.0; self.num_dofs];
        for (&v, &x) in self.free.iter().zip(free) {
            u[v] = x;
        }
        for (&v, &x) in &self.dirichlet {
            u[v] = x;
        }
        u
    }

    /// Free entries of a full nodal vector.
    pub fn restrict(&self, full: &[f64]) -> Vec<f64> {
        self.free.iter().map(|&v| full[v]).collect()
    }
}

fn build_regions(mesh: &Mesh, degree: usize) -> BTreeMap<String, QuadRegion> {
    let d = mesh.dim();
    let k = mesh.kind().nodes();
    let empty = || QuadRegion {
        points: Vec::new(),
        weights: Vec::new(),
        element: Vec::new(),
        k,
        nodes: Vec::new(),
        basis_c: Vec::new(),
        basis_g: Vec::new(),
        phi: Vec::new(),
    };
    let mut volume = empty();
    for e in 0..mesh.num_elements() {
        let n = mesh.element(e);
        let x0 = mesh.vertex(n[0]).to_vec();
        let area = mesh.measure(e);
        match mesh.kind() {
            ElementKind::Tri3 => {
                let (x1, x2) = (mesh.vertex(n[1]), mesh.vertex(n[2]));
                let (pts, ws) = quadrature::triangle(degree);
                for (p, w) in pts.iter().zip(&ws) {
                    let x: Vec<f64> = (0..d)
                        .map(|j| x0[j] + p[0] * (x1[j] - x0[j]) + p[1] * (x2[j] - x0[j]))
                        .collect();
                    volume.push(mesh, e, &x, 2.0 * area * w);
                }
            }
            _ => {
                let x1 = mesh.vertex(n[1]);
                let (pts, ws) = quadrature::gauss_legendre(degree);
                for (s, w) in pts.iter().zip(&ws) {
                    volume.push(mesh, e, &[x0[0] + s * (x1[0] - x0[0])], area * w);
                }
            }
        }
    }
    let mut out = BTreeMap::new();
    out.insert(VOLUME_REGION.to_string(), volume);
    let facets = mesh.boundary_facets();
    for (tag, idx) in mesh.tags() {
        let set: std::collections::BTreeSet<usize> = idx.iter().copied().collect();
        let mut r = empty();
        for f in facets.iter().filter(|f| f.vertices.iter().all(|v| set.contains(v))) {
            match f.vertices.len() {
                1 => r.push(mesh, f.element, mesh.vertex(f.vertices[0]), 1.0),
                _ => {
                    let (a, b) = (mesh.vertex(f.vertices[0]), mesh.vertex(f.vertices[1]));
                    let len = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
                    let (pts, ws) = quadrature::gauss_legendre(degree);
                    for (s, w) in pts.iter().zip(&ws) {
                        let x: Vec<f64> = (0..d).map(|j| a[j] + s * (b[j] - a[j])).collect();
                        r.push(mesh, f.element, &x, len * w);
                    }
                }
            }
        }
        if !r.is_empty() {
            out.insert(format!("gauss_{tag}"), r);
        }
    }
    out
}

impl Domain {
    /// Dirichlet record for [`Domain::init_fem`].
    pub fn dirichlet(&self, tags: &[&str], value: f64) -> Bc {
        Bc::Dirichlet {
            tags: tags.iter().map(|s| s.to_string()).collect(),
            value,
        }
    }

    pub fn neumann(&self, tags: &[&str]) -> Bc {
        Bc::Neumann {
            tags: tags.iter().map(|s| s.to_string()).collect(),
        }
    }

    /// Attach element metadata and quadrature regions. `element_type` is
    /// `"TRI3"` or `"LINE2"` and must match the mesh.
    pub fn init_fem(&mut self, element_type: &str, quad_degree: usize, bcs: Vec<Bc>) -> Result<()> {
        let mesh = self.mesh();
        let kind = ElementKind::parse(&element_type.to_ascii_lowercase())
            .filter(|k| matches!(k, ElementKind::Tri3 | ElementKind::Line2))
            .ok_or_else(|| FemError::UnsupportedElement(element_type.to_string()))?;
        if kind != mesh.kind() {
            return Err(FemError::UnsupportedElement(format!(
                "{element_type} on a {} mesh",
                mesh.kind().name()
            )));
        }
        if quad_degree == 0 {
            return Err(FemError::BadQuadDegree);
        }
        let mut dirichlet = BTreeMap::new();
        for bc in &bcs {
            let tags = match bc {
                Bc::Dirichlet { tags, .. } | Bc::Neumann { tags } => tags,
            };
            for t in tags {
                let idx = mesh
                    .tag(t)
                    .ok_or_else(|| FemError::UnknownBcTag(t.clone()))?;
                if let Bc::Dirichlet { value, .. } = bc {
                    for &v in idx {
                        dirichlet.insert(v, *value);
                    }
                }
            }
        }
        let n = mesh.num_vertices();
        let free = (0..n).filter(|v| !dirichlet.contains_key(v)).collect();
        let regions = build_regions(mesh, quad_degree);
        for (name, r) in &regions {
            self.register_points(name, r.points.clone());
        }
        self.fem = Some(Arc::new(FemSetup {
            element: kind,
            quad_degree,
            bcs,
            regions,
            dirichlet,
            free,
            num_dofs: n,
            trial: Expr::raw(NodeKind::Trial, vec![], Some("u".into())),
            test: Expr::raw(NodeKind::Test, vec![], Some("phi".into())),
        }));
        Ok(())
    }

    pub fn fem(&self) -> Option<&FemSetup> {
        self.fem.as_deref()
    }

    pub(crate) fn fem_arc(&self) -> Result<Arc<FemSetup>> {
        self.fem.clone().ok_or(FemError::NotInitialized)
    }

    /// Generic trial and test symbols `(u, φ)`. Every call returns the same
    /// two symbols.
    pub fn fem_symbols(&self) -> Result<(Expr, Expr)> {
        let s = self.fem_arc()?;
        Ok((s.trial.clone(), s.test.clone()))
    }

    /// Piecewise-linear interpolant of nodal `values` on this mesh, evaluated
    /// at the given coordinate expressions (one per dimension).
    pub fn nodal_field(&self, values: Vec<f64>, coords: &[Expr]) -> Result<Expr> {
        let m = self.mesh();
        if values.len() != m.num_vertices() || coords.len() != m.dim() {
            return Err(FemError::BadState {
                got: values.len(),
                free: m.num_vertices(),
                total: m.num_vertices(),
            });
        }
        let f = NodalField {
            mesh: self.mesh_arc(),
            locator: self.fd.lock().expect("fd cache").locator(m),
            values,
        };
        Ok(Expr::raw(NodeKind::Field(Arc::new(f)), coords.to_vec(), None))
    }
}

/// Nodal values on a mesh, interpolated linearly within elements.
pub struct NodalField {
    pub(crate) mesh: Arc<Mesh>,
    pub(crate) locator: Arc<Locator>,
    pub(crate) values: Vec<f64>,
}

impl NodalField {
    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn regions_and_dirichlet_dofs() {
        let mut d = Domain::rect((0.0, 1.0), (0.0, 1.0), 0.5).unwrap();
        let bcs = vec![d.dirichlet(&["left", "right"], 0.0), d.neumann(&["top", "bottom"])];
        d.init_fem("TRI3", 2, bcs).unwrap();
        assert_eq!(d.points(VOLUME_REGION).unwrap().shape(), &[1, 1, 24, 2]);
        let s = d.fem().unwrap();
        assert_eq!(s.dirichlet().len(), 6);
        assert_eq!(s.free_dofs(), &[1, 4, 7]);
        let top = s.region("gauss_top").unwrap();
        assert!((top.weights.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(d.variable("gauss_bottom").is_ok());
        let (u1, _) = d.fem_symbols().unwrap();
        let (u2, _) = d.fem_symbols().unwrap();
        assert_eq!(u1, u2);
    }

    #[test]
    fn element_weights_sum_to_area() {
        let mut d = Domain::disk((0.0, 0.0), 1.0, 0.3).unwrap();
        d.init_fem("TRI3", 2, vec![]).unwrap();
        let r = d.fem().unwrap().region(VOLUME_REGION).unwrap();
        let m = d.mesh();
        for e in 0..m.num_elements() {
            let s: f64 = (0..r.len()).filter(|&q| r.element[q] == e).map(|q| r.weights[q]).sum();
            assert!((s - m.measure(e)).abs() < 1e-14);
        }
    }

    #[test]
    fn init_errors() {
        let mut d = Domain::rect((0.0, 1.0), (0.0, 1.0), 0.5).unwrap();
        let bc = d.dirichlet(&["west"], 0.0);
        assert!(matches!(d.init_fem("TRI3", 2, vec![bc]), Err(FemError::UnknownBcTag(_))));
        assert!(matches!(d.init_fem("QUAD4", 2, vec![]), Err(FemError::UnsupportedElement(_))));
        let mut c = Domain::cube((0.0, 1.0), (0.0, 1.0), (0.0, 1.0), 0.5).unwrap();
        assert!(matches!(c.init_fem("TRI3", 2, vec![]), Err(FemError::UnsupportedElement(_))));
    }
}
