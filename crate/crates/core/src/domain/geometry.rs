//! Built-in geometries.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use super::mesh::{ElementKind, Mesh};
use super::DomainError;

const EPS: f64 = 1e-12;

fn check_range(name: &str, r: (f64, f64)) -> Result<(), DomainError> {
    if !(r.1 - r.0 > 0.0) || !r.0.is_finite() || !r.1.is_finite() {
        return Err(DomainError::DegenerateGeometry(format!(
            "{name} range ({}, {}) is empty",
            r.0, r.1
        )));
    }
    Ok(())
}

fn check_h(h: f64) -> Result<(), DomainError> {
    if !(h > 0.0) || !h.is_finite() {
        return Err(DomainError::DegenerateGeometry(format!("mesh size {h} must be positive")));
    }
    Ok(())
}

fn cells(len: f64, h: f64) -> usize {
    ((len / h).round() as usize).max(1)
}

/// Evenly spaced LINE2 chain with tags `left`, `right`.
pub fn line(range: (f64, f64), h: f64) -> Result<Mesh, DomainError> {
    check_range("x", range)?;
    check_h(h)?;
    let n = cells(range.1 - range.0, h);
    let verts: Vec<f64> = (0..=n)
        .map(|i| range.0 + (range.1 - range.0) * i as f64 / n as f64)
        .collect();
    let elems: Vec<usize> = (0..n).flat_map(|i| [i, i + 1]).collect();
    let mut tags = BTreeMap::new();
    tags.insert("left".to_string(), vec![0]);
    tags.insert("right".to_string(), vec![n]);
    tags.insert("boundary".to_string(), vec![0, n]);
    tags.insert("interior".to_string(), (1..n).collect());
    Mesh::new(1, verts, ElementKind::Line2, elems, tags)
}

/// `nx × ny` cells, vertices row-major with `x` fastest, every cell split
/// along its `(x0,y0)–(x1,y1)` diagonal.
pub fn structured_rect(
    x_range: (f64, f64),
    y_range: (f64, f64),
    nx: usize,
    ny: usize,
) -> Result<Mesh, DomainError> {
    check_range("x", x_range)?;
    check_range("y", y_range)?;
    if nx == 0 || ny == 0 {
        return Err(DomainError::DegenerateGeometry("zero cells".into()));
    }
    let (xs, ys) = grid_lines(x_range, y_range, nx, ny);
    let mut verts = Vec::with_capacity((nx + 1) * (ny + 1) * 2);
    for y in &ys {
        for x in &xs {
            verts.push(*x);
            verts.push(*y);
        }
    }
    let id = |i: usize, j: usize| j * (nx + 1) + i;
    let mut elems = Vec::with_capacity(nx * ny * 6);
    for j in 0..ny {
        for i in 0..nx {
            let (v00, v10, v01, v11) = (id(i, j), id(i + 1, j), id(i, j + 1), id(i + 1, j + 1));
            elems.extend_from_slice(&[v00, v10, v11, v00, v11, v01]);
        }
    }
    let mut tags: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    let side = |pred: &dyn Fn(usize, usize) -> bool| -> Vec<usize> {
        let mut v = Vec::new();
        for j in 0..=ny {
            for i in 0..=nx {
                if pred(i, j) {
                    v.push(id(i, j));
                }
            }
        }
        v
    };
    tags.insert("left".into(), side(&|i, _| i == 0));
    tags.insert("right".into(), side(&|i, _| i == nx));
    tags.insert("bottom".into(), side(&|_, j| j == 0));
    tags.insert("top".into(), side(&|_, j| j == ny));
    tags.insert("boundary".into(), side(&|i, j| i == 0 || j == 0 || i == nx || j == ny));
    tags.insert("interior".into(), side(&|i, j| i > 0 && j > 0 && i < nx && j < ny));
    Mesh::new(2, verts, ElementKind::Tri3, elems, tags)
}

fn grid_lines(x: (f64, f64), y: (f64, f64), nx: usize, ny: usize) -> (Vec<f64>, Vec<f64>) {
    let lin = |r: (f64, f64), n: usize| -> Vec<f64> {
        (0..=n)
            .map(|i| {
                if i == n {
                    r.1
                } else {
                    r.0 + (r.1 - r.0) * i as f64 / n as f64
                }
            })
            .collect()
    };
    (lin(x, nx), lin(y, ny))
}

/// Rectangle with `round(L/h)` cells per side.
pub fn rect(x_range: (f64, f64), y_range: (f64, f64), h: f64) -> Result<Mesh, DomainError> {
    check_range("x", x_range)?;
    check_range("y", y_range)?;
    check_h(h)?;
    structured_rect(
        x_range,
        y_range,
        cells(x_range.1 - x_range.0, h),
        cells(y_range.1 - y_range.0, h),
    )
}

/// Unit square minus its upper-right quadrant.
pub fn lshape(h: f64) -> Result<Mesh, DomainError> {
    check_h(h)?;
    let half = cells(0.5, h);
    let n = 2 * half;
    let full = structured_rect((0.0, 1.0), (0.0, 1.0), n, n)?;
    let mut keep_elems = Vec::new();
    for e in 0..full.num_elements() {
        let c = full.centroid(e);
        if !(c[0] > 0.5 && c[1] > 0.5) {
            keep_elems.extend_from_slice(full.element(e));
        }
    }
    let (verts, elems, remap) = compact(&full, &keep_elems);
    let mut tags = BTreeMap::new();
    for side in ["left", "bottom"] {
        let v: Vec<usize> = full.tag(side).unwrap().iter().filter_map(|&i| remap[i]).collect();
        tags.insert(side.to_string(), v);
    }
    Mesh::new(2, verts, ElementKind::Tri3, elems, tags)
}

/// Drop unreferenced vertices; returns new arrays and old→new map.
fn compact(m: &Mesh, elems: &[usize]) -> (Vec<f64>, Vec<usize>, Vec<Option<usize>>) {
    let mut remap = vec![None; m.num_vertices()];
    let mut verts = Vec::new();
    let mut next = 0;
    for v in 0..m.num_vertices() {
        if elems.contains(&v) {
            remap[v] = Some(next);
            next += 1;
            verts.extend_from_slice(m.vertex(v));
        }
    }
    let elems = elems.iter().map(|&v| remap[v].unwrap()).collect();
    (verts, elems, remap)
}

/// Concentric rings with `6k` vertices on ring `k`, zipped into triangles.
pub fn disk(center: (f64, f64), radius: f64, h: f64) -> Result<Mesh, DomainError> {
    check_h(h)?;
    if !(radius > 0.0) {
        return Err(DomainError::DegenerateGeometry(format!("radius {radius}")));
    }
    let rings = cells(radius, h);
    let mut verts = vec![center.0, center.1];
    let mut ring_start = vec![0usize];
    let mut ring_len = vec![1usize];
    for k in 1..=rings {
        ring_start.push(verts.len() / 2);
        let m = 6 * k;
        ring_len.push(m);
        let r = radius * k as f64 / rings as f64;
        for j in 0..m {
            let a = 2.0 * PI * j as f64 / m as f64;
            verts.push(center.0 + r * a.cos());
            verts.push(center.1 + r * a.sin());
        }
    }
    let mut elems = Vec::new();
    for j in 0..6 {
        elems.extend_from_slice(&[0, 1 + j, 1 + (j + 1) % 6]);
    }
    for k in 2..=rings {
        let (si, ni) = (ring_start[k - 1], ring_len[k - 1]);
        let (so, no) = (ring_start[k], ring_len[k]);
        let (mut i, mut o) = (0usize, 0usize);
        while i < ni || o < no {
            let ai = (i + 1) as f64 / ni as f64;
            let ao = (o + 1) as f64 / no as f64;
            let vi = si + i % ni;
            let vo = so + o % no;
            if o < no && (i >= ni || ao <= ai) {
                elems.extend_from_slice(&[vi, vo, so + (o + 1) % no]);
                o += 1;
            } else {
                elems.extend_from_slice(&[vi, vo, si + (i + 1) % ni]);
                i += 1;
            }
        }
    }
    let outer = ring_start[rings];
    let mut tags = BTreeMap::new();
    tags.insert("boundary".to_string(), (outer..outer + ring_len[rings]).collect());
    tags.insert("interior".to_string(), (0..outer).collect());
    let mut mesh = Mesh::new(2, verts, ElementKind::Tri3, elems, tags)?;
    orient(&mut mesh);
    Ok(mesh)
}

/// Reorder element nodes so every triangle is counter-clockwise.
fn orient(m: &mut Mesh) {
    let flips: Vec<usize> = (0..m.num_elements()).filter(|&e| m.signed_measure(e) < 0.0).collect();
    if flips.is_empty() {
        return;
    }
    let mut elems = m.elements().to_vec();
    let k = m.kind().nodes();
    for e in flips {
        elems.swap(e * k + 1, e * k + 2);
    }
    *m = Mesh::new(m.dim(), m.vertices().to_vec(), m.kind(), elems, m.tags().clone())
        .expect("reordering keeps a valid mesh");
}

/// Rectangle with one circular hole, meshed by blending the hole circle
/// into the outer rectangle along rays from the hole centre. Tags:
/// `hole`, `outer`, `boundary` (their union) and `interior`.
pub fn rect_with_hole(
    x_range: (f64, f64),
    y_range: (f64, f64),
    center: (f64, f64),
    radius: f64,
    h: f64,
) -> Result<Mesh, DomainError> {
    check_range("x", x_range)?;
    check_range("y", y_range)?;
    check_h(h)?;
    let clearance = [
        center.0 - x_range.0,
        x_range.1 - center.0,
        center.1 - y_range.0,
        y_range.1 - center.1,
    ]
    .into_iter()
    .fold(f64::INFINITY, f64::min);
    if !(radius > 0.0) || radius >= clearance {
        return Err(DomainError::DegenerateGeometry(
            "hole must lie strictly inside the rectangle".into(),
        ));
    }
    let perimeter = 2.0 * (x_range.1 - x_range.0 + y_range.1 - y_range.0);
    let nt = ((perimeter / h).round() as usize).max(8);
    let ray = |a: f64| -> (f64, f64) {
        let (dx, dy) = (a.cos(), a.sin());
        let mut t = f64::INFINITY;
        if dx > EPS {
            t = t.min((x_range.1 - center.0) / dx);
        }
        if dx < -EPS {
            t = t.min((x_range.0 - center.0) / dx);
        }
        if dy > EPS {
            t = t.min((y_range.1 - center.1) / dy);
        }
        if dy < -EPS {
            t = t.min((y_range.0 - center.1) / dy);
        }
        (center.0 + t * dx, center.1 + t * dy)
    };
    let mean_gap = (0..nt)
        .map(|j| {
            let a = 2.0 * PI * j as f64 / nt as f64;
            let (px, py) = ray(a);
            ((px - center.0).powi(2) + (py - center.1).powi(2)).sqrt() - radius
        })
        .sum::<f64>()
        / nt as f64;
    let ns = cells(mean_gap, h);
    let mut verts = Vec::with_capacity((ns + 1) * nt * 2);
    for s in 0..=ns {
        let f = s as f64 / ns as f64;
        for j in 0..nt {
            let a = 2.0 * PI * j as f64 / nt as f64;
            let (cx, cy) = (center.0 + radius * a.cos(), center.1 + radius * a.sin());
            let (px, py) = ray(a);
            verts.push((1.0 - f) * cx + f * px);
            verts.push((1.0 - f) * cy + f * py);
        }
    }
    let id = |s: usize, j: usize| s * nt + j % nt;
    let mut elems = Vec::new();
    for s in 0..ns {
        for j in 0..nt {
            let (a, b, c, d) = (id(s, j), id(s, j + 1), id(s + 1, j), id(s + 1, j + 1));
            elems.extend_from_slice(&[a, b, d, a, d, c]);
        }
    }
    let mut tags = BTreeMap::new();
    let hole: Vec<usize> = (0..nt).collect();
    let outer: Vec<usize> = (ns * nt..(ns + 1) * nt).collect();
    tags.insert("boundary".to_string(), [hole.clone(), outer.clone()].concat());
    tags.insert("interior".to_string(), (nt..ns * nt).collect());
    tags.insert("hole".to_string(), hole);
    tags.insert("outer".to_string(), outer);
    let mut mesh = Mesh::new(2, verts, ElementKind::Tri3, elems, tags)?;
    orient(&mut mesh);
    Ok(mesh)
}

/// Box split into cells of six tetrahedra each, for point sampling.
pub fn cube(
    x_range: (f64, f64),
    y_range: (f64, f64),
    z_range: (f64, f64),
    h: f64,
) -> Result<Mesh, DomainError> {
    check_range("x", x_range)?;
    check_range("y", y_range)?;
    check_range("z", z_range)?;
    check_h(h)?;
    let n = [
        cells(x_range.1 - x_range.0, h),
        cells(y_range.1 - y_range.0, h),
        cells(z_range.1 - z_range.0, h),
    ];
    let r = [x_range, y_range, z_range];
    let id = |i: usize, j: usize, k: usize| (k * (n[1] + 1) + j) * (n[0] + 1) + i;
    let mut verts = Vec::new();
    let mut tags: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    let names = [("left", "right"), ("bottom", "top"), ("front", "back")];
    for k in 0..=n[2] {
        for j in 0..=n[1] {
            for i in 0..=n[0] {
                let idx = [i, j, k];
                let v = id(i, j, k);
                let mut on_boundary = false;
                for d in 0..3 {
                    verts.push(r[d].0 + (r[d].1 - r[d].0) * idx[d] as f64 / n[d] as f64);
                    if idx[d] == 0 {
                        tags.entry(names[d].0.to_string()).or_default().push(v);
                        on_boundary = true;
                    }
                    if idx[d] == n[d] {
                        tags.entry(names[d].1.to_string()).or_default().push(v);
                        on_boundary = true;
                    }
                }
                let t = if on_boundary { "boundary" } else { "interior" };
                tags.entry(t.to_string()).or_default().push(v);
            }
        }
    }
    tags.entry("interior".to_string()).or_default();
    // Kuhn split: one tetrahedron per permutation of the axes.
    let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    let mut elems = Vec::new();
    for k in 0..n[2] {
        for j in 0..n[1] {
            for i in 0..n[0] {
                for p in perms {
                    let mut c = [i, j, k];
                    let mut tet = vec![id(c[0], c[1], c[2])];
                    for &axis in &p {
                        c[axis] += 1;
                        tet.push(id(c[0], c[1], c[2]));
                    }
                    elems.extend(tet);
                }
            }
        }
    }
    Mesh::new(3, verts, ElementKind::Tet4, elems, tags)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rect_half_spacing_counts() {
        let m = rect((0.0, 1.0), (0.0, 1.0), 0.5).unwrap();
        assert_eq!(m.num_vertices(), 9);
        assert_eq!(m.num_elements(), 8);
        assert_eq!(m.tag("boundary").unwrap().len(), 8);
        assert_eq!(m.tag("interior").unwrap(), &[4]);
        assert_eq!(m.tag("left").unwrap(), &[0, 3, 6]);
        assert_eq!(m.tag("bottom").unwrap(), &[0, 1, 2]);
    }

    #[test]
    fn line_counts() {
        let m = line((0.0, 1.0), 0.25).unwrap();
        assert_eq!(m.num_vertices(), 5);
        assert_eq!(m.tag("interior").unwrap().len(), 3);
        assert_eq!(m.tag("boundary").unwrap(), &[0, 4]);
    }

    #[test]
    fn all_triangles_counter_clockwise() {
        for m in [
            rect((0.0, 2.0), (0.0, 1.0), 0.25).unwrap(),
            disk((0.0, 0.0), 1.0, 0.2).unwrap(),
            lshape(0.25).unwrap(),
            rect_with_hole((0.0, 1.0), (0.0, 1.0), (0.5, 0.5), 0.2, 0.1).unwrap(),
        ] {
            assert!((0..m.num_elements()).all(|e| m.signed_measure(e) > 0.0));
        }
    }

    #[test]
    fn cube_volume() {
        let m = cube((0.0, 1.0), (0.0, 2.0), (0.0, 1.0), 0.5).unwrap();
        let v: f64 = (0..m.num_elements()).map(|e| m.measure(e)).sum();
        assert!((v - 2.0).abs() < 1e-12);
        assert!((0..m.num_elements()).all(|e| m.measure(e) > 0.0));
    }
}
