//! Simplicial meshes and their derived connectivity.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use super::DomainError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ElementKind {
    Line2,
    Tri3,
    Tet4,
}

impl ElementKind {
    pub fn nodes(self) -> usize {
        match self {
            ElementKind::Line2 => 2,
            ElementKind::Tri3 => 3,
            ElementKind::Tet4 => 4,
        }
    }

    pub fn dim(self) -> usize {
        self.nodes() - 1
    }

    pub fn name(self) -> &'static str {
        match self {
            ElementKind::Line2 => "line2",
            ElementKind::Tri3 => "tri3",
            ElementKind::Tet4 => "tet4",
        }
    }

    pub fn parse(s: &str) -> Option<ElementKind> {
        match s.to_ascii_lowercase().as_str() {
            "line2" => Some(ElementKind::Line2),
            "tri3" => Some(ElementKind::Tri3),
            "tet4" => Some(ElementKind::Tet4),
            _ => None,
        }
    }
}

/// Vertices, one simplex type, and named vertex sets.
#[derive(Clone, Debug, PartialEq)]
pub struct Mesh {
    dim: usize,
    vertices: Vec<f64>,
    kind: ElementKind,
    elements: Vec<usize>,
    tags: BTreeMap<String, Vec<usize>>,
}

impl Mesh {
    /// Validates indices. Missing `boundary`/`interior` tags are inferred
    /// from facets owned by exactly one element.
    pub fn new(
        dim: usize,
        vertices: Vec<f64>,
        kind: ElementKind,
        elements: Vec<usize>,
        tags: BTreeMap<String, Vec<usize>>,
    ) -> Result<Mesh, DomainError> {
        if !(1..=3).contains(&dim) || kind.dim() != dim {
            return Err(DomainError::UnsupportedElement(format!(
                "{} in {dim} dimensions",
                kind.name()
            )));
        }
        if vertices.len() % dim != 0 || elements.len() % kind.nodes() != 0 {
            return Err(DomainError::DegenerateGeometry("ragged mesh arrays".into()));
        }
        let nv = vertices.len() / dim;
        if let Some(&bad) = elements.iter().find(|&&i| i >= nv) {
            return Err(DomainError::DegenerateGeometry(format!(
                "element index {bad} out of range for {nv} vertices"
            )));
        }
        let mut tags: BTreeMap<String, Vec<usize>> = tags
            .into_iter()
            .map(|(k, mut v)| {
                v.sort_unstable();
                v.dedup();
                (k, v)
            })
            .collect();
        for (k, v) in &tags {
            if let Some(&bad) = v.iter().find(|&&i| i >= nv) {
                return Err(DomainError::DegenerateGeometry(format!(
                    "tag {k} index {bad} out of range"
                )));
            }
        }
        let mut mesh = Mesh {
            dim,
            vertices,
            kind,
            elements,
            tags: BTreeMap::new(),
        };
        if !tags.contains_key("boundary") {
            let b: BTreeSet<usize> = mesh
                .boundary_facets()
                .into_iter()
                .flat_map(|f| f.vertices)
                .collect();
            tags.insert("boundary".into(), b.into_iter().collect());
        }
        if !tags.contains_key("interior") {
            let b: BTreeSet<usize> = tags["boundary"].iter().copied().collect();
            let used: BTreeSet<usize> = mesh.elements.iter().copied().collect();
            let i: Vec<usize> = (0..nv).filter(|v| !b.contains(v) && used.contains(v)).collect();
            tags.insert("interior".into(), i);
        }
        mesh.tags = tags;
        Ok(mesh)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kind(&self) -> ElementKind {
        self.kind
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len() / self.dim
    }

    pub fn num_elements(&self) -> usize {
        self.elements.len() / self.kind.nodes()
    }

    pub fn vertex(&self, i: usize) -> &[f64] {
        &self.vertices[i * self.dim..(i + 1) * self.dim]
    }

    pub fn vertices(&self) -> &[f64] {
        &self.vertices
    }

    pub fn element(&self, e: usize) -> &[usize] {
        let k = self.kind.nodes();
        &self.elements[e * k..(e + 1) * k]
    }

    pub fn elements(&self) -> &[usize] {
        &self.elements
    }

    pub fn tags(&self) -> &BTreeMap<String, Vec<usize>> {
        &self.tags
    }

    pub fn tag(&self, name: &str) -> Option<&[usize]> {
        self.tags.get(name).map(|v| v.as_slice())
    }

    /// Signed measure (length, area, volume) of element `e`.
    pub fn signed_measure(&self, e: usize) -> f64 {
        let n = self.element(e);
        let p0 = self.vertex(n[0]);
        match self.kind {
            ElementKind::Line2 => self.vertex(n[1])[0] - p0[0],
            ElementKind::Tri3 => {
                let (a, b) = (self.vertex(n[1]), self.vertex(n[2]));
                0.5 * ((a[0] - p0[0]) * (b[1] - p0[1]) - (a[1] - p0[1]) * (b[0] - p0[0]))
            }
            ElementKind::Tet4 => {
                let d = |i: usize| {
                    let v = self.vertex(n[i]);
                    [v[0] - p0[0], v[1] - p0[1], v[2] - p0[2]]
                };
                let (a, b, c) = (d(1), d(2), d(3));
                det3(a, b, c) / 6.0
            }
        }
    }

    pub fn measure(&self, e: usize) -> f64 {
        self.signed_measure(e).abs()
    }

    pub fn centroid(&self, e: usize) -> Vec<f64> {
        let n = self.element(e);
        let mut c = vec![0.0; self.dim];
        for &v in n {
            for (ci, x) in c.iter_mut().zip(self.vertex(v)) {
                *ci += x;
            }
        }
        c.iter_mut().for_each(|x| *x /= n.len() as f64);
        c
    }

    /// Affine barycentric map of element `e`: `λ_b(x) = c_b + g_b·x`.
    /// Returns `(c, g)` with `g` stored row-major `[b][d]`.
    pub fn barycentric_map(&self, e: usize) -> (Vec<f64>, Vec<f64>) {
        let n = self.element(e);
        let d = self.dim;
        let k = n.len();
        let p0 = self.vertex(n[0]);
        // columns of T are x_i − x_0, i = 1..k−1
        let mut t = vec![0.0; d * d];
        for i in 1..k {
            let p = self.vertex(n[i]);
            for r in 0..d {
                t[r * d + (i - 1)] = p[r] - p0[r];
            }
        }
        let inv = invert(&t, d);
        let mut g = vec![0.0; k * d];
        for i in 1..k {
            for c in 0..d {
                g[i * d + c] = inv[(i - 1) * d + c];
            }
        }
        for c in 0..d {
            g[c] = -(1..k).map(|i| g[i * d + c]).sum::<f64>();
        }
        let mut cst = vec![0.0; k];
        for b in 0..k {
            let gx: f64 = (0..d).map(|c| g[b * d + c] * p0[c]).sum();
            cst[b] = if b == 0 { 1.0 - gx } else { -gx };
        }
        (cst, g)
    }

    /// Facets owned by exactly one element, in element order.
    pub fn boundary_facets(&self) -> Vec<Facet> {
        let k = self.kind.nodes();
        let mut count: HashMap<Vec<usize>, usize> = HashMap::new();
        for e in 0..self.num_elements() {
            let n = self.element(e);
            for skip in 0..k {
                let mut f: Vec<usize> = (0..k).filter(|&i| i != skip).map(|i| n[i]).collect();
                f.sort_unstable();
                *count.entry(f).or_default() += 1;
            }
        }
        let mut out = Vec::new();
        for e in 0..self.num_elements() {
            let n = self.element(e);
            for skip in 0..k {
                let local: Vec<usize> = (0..k).filter(|&i| i != skip).collect();
                let mut f: Vec<usize> = local.iter().map(|&i| n[i]).collect();
                f.sort_unstable();
                if count[&f] == 1 {
                    out.push(Facet {
                        vertices: local.iter().map(|&i| n[i]).collect(),
                        local,
                        element: e,
                    });
                }
            }
        }
        out
    }

    /// Element containing `p` with its barycentric coordinates.
    pub fn locate(&self, p: &[f64]) -> Option<(usize, Vec<f64>)> {
        let tol = 1e-10;
        let mut best: Option<(usize, Vec<f64>, f64)> = None;
        for e in 0..self.num_elements() {
            let (c, g) = self.barycentric_map(e);
            let k = c.len();
            let lam: Vec<f64> = (0..k)
                .map(|b| c[b] + (0..self.dim).map(|d| g[b * self.dim + d] * p[d]).sum::<f64>())
                .collect();
            let worst = lam.iter().cloned().fold(f64::INFINITY, f64::min);
            if worst >= -tol {
                return Some((e, lam));
            }
            if best.as_ref().map_or(true, |b| worst > b.2) {
                best = Some((e, lam, worst));
            }
        }
        best.filter(|b| b.2 >= -1e-8).map(|b| (b.0, b.1))
    }
}

/// A boundary facet: global vertices, their local indices in the owning
/// element, and the owning element.
#[derive(Clone, Debug, PartialEq)]
pub struct Facet {
    pub vertices: Vec<usize>,
    pub local: Vec<usize>,
    pub element: usize,
}

fn det3(a: [f64; 3], b: [f64; 3], c: [f64; 3]) -> f64 {
    a[0] * (b[1] * c[2] - b[2] * c[1]) - a[1] * (b[0] * c[2] - b[2] * c[0])
        + a[2] * (b[0] * c[1] - b[1] * c[0])
}

/// Inverse of a small dense matrix by Gauss-Jordan with partial pivoting.
/// Singular input yields non-finite entries.
pub(crate) fn invert(m: &[f64], n: usize) -> Vec<f64> {
    let mut a = m.to_vec();
    let mut inv = vec![0.0; n * n];
    for i in 0..n {
        inv[i * n + i] = 1.0;
    }
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i * n + col].abs().total_cmp(&a[j * n + col].abs()))
            .unwrap();
        if piv != col {
            for c in 0..n {
                a.swap(piv * n + c, col * n + c);
                inv.swap(piv * n + c, col * n + c);
            }
        }
        let p = a[col * n + col];
        for c in 0..n {
            a[col * n + c] /= p;
            inv[col * n + c] /= p;
        }
        for r in 0..n {
            if r != col {
                let f = a[r * n + col];
                if f != 0.0 {
                    for c in 0..n {
                        a[r * n + c] -= f * a[col * n + c];
                        inv[r * n + c] -= f * inv[col * n + c];
                    }
                }
            }
        }
    }
    inv
}

/// Adjacency, lumped measures and boundary geometry of a mesh.
#[derive(Clone, Debug)]
pub struct Connectivity {
    pub neighbors: Vec<Vec<usize>>,
    pub vertex_elements: Vec<Vec<usize>>,
    pub measures: Vec<f64>,
    pub boundary_facets: Vec<Facet>,
    pub boundary_vertices: Vec<usize>,
    normals: BTreeMap<usize, Vec<f64>>,
}

impl Connectivity {
    pub fn build(mesh: &Mesh) -> Connectivity {
        let nv = mesh.num_vertices();
        let mut neighbors: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); nv];
        let mut vertex_elements = vec![Vec::new(); nv];
        let mut measures = vec![0.0; nv];
        for e in 0..mesh.num_elements() {
            let n = mesh.element(e);
            let share = mesh.measure(e) / n.len() as f64;
            for &a in n {
                vertex_elements[a].push(e);
                measures[a] += share;
                for &b in n {
                    if a != b {
                        neighbors[a].insert(b);
                    }
                }
            }
        }
        let boundary_facets = mesh.boundary_facets();
        let mut sums: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for f in &boundary_facets {
            let n = facet_normal(mesh, f);
            for &v in &f.vertices {
                let s = sums.entry(v).or_insert_with(|| vec![0.0; mesh.dim()]);
                for (si, ni) in s.iter_mut().zip(&n) {
                    *si += ni;
                }
            }
        }
        let normals: BTreeMap<usize, Vec<f64>> = sums
            .into_iter()
            .map(|(v, s)| {
                let len = s.iter().map(|x| x * x).sum::<f64>().sqrt();
                (v, s.iter().map(|x| x / len).collect())
            })
            .collect();
        Connectivity {
            neighbors: neighbors.into_iter().map(|s| s.into_iter().collect()).collect(),
            vertex_elements,
            measures,
            boundary_vertices: normals.keys().copied().collect(),
            boundary_facets,
            normals,
        }
    }

    pub fn normal(&self, v: usize) -> Option<&[f64]> {
        self.normals.get(&v).map(|n| n.as_slice())
    }
}

/// Unit normal of a boundary facet, pointing away from the owning element.
pub fn facet_normal(mesh: &Mesh, f: &Facet) -> Vec<f64> {
    let c = mesh.centroid(f.element);
    let p0 = mesh.vertex(f.vertices[0]);
    let raw: Vec<f64> = match mesh.kind() {
        ElementKind::Line2 => vec![1.0],
        ElementKind::Tri3 => {
            let p1 = mesh.vertex(f.vertices[1]);
            vec![p1[1] - p0[1], -(p1[0] - p0[0])]
        }
        ElementKind::Tet4 => {
            let (p1, p2) = (mesh.vertex(f.vertices[1]), mesh.vertex(f.vertices[2]));
            let a = [p1[0] - p0[0], p1[1] - p0[1], p1[2] - p0[2]];
            let b = [p2[0] - p0[0], p2[1] - p0[1], p2[2] - p0[2]];
            vec![
                a[1] * b[2] - a[2] * b[1],
                a[2] * b[0] - a[0] * b[2],
                a[0] * b[1] - a[1] * b[0],
            ]
        }
    };
    let len = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
    let outward: f64 = raw.iter().zip(p0).zip(&c).map(|((n, p), c)| n * (p - c)).sum();
    let s = if outward < 0.0 { -1.0 / len } else { 1.0 / len };
    raw.iter().map(|x| x * s).collect()
}

/// Point location with precomputed barycentric maps and a uniform bucket
/// grid over element bounding boxes.
#[derive(Clone, Debug)]
pub struct Locator {
    dim: usize,
    maps: Vec<(Vec<f64>, Vec<f64>)>,
    lo: Vec<f64>,
    cell: Vec<f64>,
    cells: Vec<usize>,
    buckets: Vec<Vec<usize>>,
}

impl Locator {
    pub fn new(mesh: &Mesh) -> Locator {
        let d = mesh.dim();
        let ne = mesh.num_elements();
        let mut lo = vec![f64::INFINITY; d];
        let mut hi = vec![f64::NEG_INFINITY; d];
        for v in 0..mesh.num_vertices() {
            for (c, &x) in mesh.vertex(v).iter().enumerate() {
                lo[c] = lo[c].min(x);
                hi[c] = hi[c].max(x);
            }
        }
        let per_axis = ((ne as f64).powf(1.0 / d as f64).ceil() as usize).max(1);
        let cells = vec![per_axis; d];
        let cell: Vec<f64> = (0..d)
            .map(|c| ((hi[c] - lo[c]) / per_axis as f64).max(f64::MIN_POSITIVE))
            .collect();
        let total: usize = cells.iter().product();
        let mut buckets = vec![Vec::new(); total];
        let mut loc = Locator {
            dim: d,
            maps: (0..ne).map(|e| mesh.barycentric_map(e)).collect(),
            lo,
            cell,
            cells,
            buckets: Vec::new(),
        };
        for e in 0..ne {
            let n = mesh.element(e);
            let mut a = vec![usize::MAX; d];
            let mut b = vec![0; d];
            for &v in n {
                for c in 0..d {
                    let (i0, i1) = loc.range(c, mesh.vertex(v)[c], 1e-9);
                    a[c] = a[c].min(i0);
                    b[c] = b[c].max(i1);
                }
            }
            let mut idx = a.clone();
            loop {
                buckets[loc.flat(&idx)].push(e);
                let mut c = 0;
                while c < d {
                    idx[c] += 1;
                    if idx[c] <= b[c] {
                        break;
                    }
                    idx[c] = a[c];
                    c += 1;
                }
                if c == d {
                    break;
                }
            }
        }
        loc.buckets = buckets;
        loc
    }

    fn range(&self, c: usize, x: f64, pad: f64) -> (usize, usize) {
        let f = |y: f64| {
            let k = ((y - self.lo[c]) / self.cell[c]).floor();
            (k.max(0.0) as usize).min(self.cells[c] - 1)
        };
        (f(x - pad), f(x + pad))
    }

    fn flat(&self, idx: &[usize]) -> usize {
        let mut k = 0;
        for c in (0..self.dim).rev() {
            k = k * self.cells[c] + idx[c];
        }
        k
    }

    fn lambda(&self, e: usize, p: &[f64]) -> Vec<f64> {
        let (c, g) = &self.maps[e];
        (0..c.len())
            .map(|b| c[b] + (0..self.dim).map(|d| g[b * self.dim + d] * p[d]).sum::<f64>())
            .collect()
    }

    /// Element containing `p` with its barycentric coordinates. Points
    /// within `1e-8` (in barycentric terms) of the mesh are accepted.
    pub fn locate(&self, p: &[f64]) -> Option<(usize, Vec<f64>)> {
        let idx: Vec<usize> = (0..self.dim).map(|c| self.range(c, p[c], 0.0).0).collect();
        let mut best: Option<(usize, Vec<f64>, f64)> = None;
        for &e in &self.buckets[self.flat(&idx)] {
            let lam = self.lambda(e, p);
            let worst = lam.iter().cloned().fold(f64::INFINITY, f64::min);
            if worst >= -1e-10 {
                return Some((e, lam));
            }
            if best.as_ref().map_or(true, |b| worst > b.2) {
                best = Some((e, lam, worst));
            }
        }
        best.filter(|b| b.2 >= -1e-8).map(|b| (b.0, b.1))
    }
}
