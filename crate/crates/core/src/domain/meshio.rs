//! Line-oriented mesh text format.
//!
//! ```text
//! mesh 2
//! vertices 3
//! 0.0 0.0
//! 1.0 0.0
//! 0.0 1.0
//! elements tri3 1
//! 0 1 2
//! tag boundary 3
//! 0
//! 1
//! 2
//! ```
//!
//! Blank lines and lines starting with `#` are ignored.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use super::mesh::{ElementKind, Mesh};
use super::DomainError;

pub fn write_mesh(m: &Mesh) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "mesh {}", m.dim());
    let _ = writeln!(s, "vertices {}", m.num_vertices());
    for v in 0..m.num_vertices() {
        let row: Vec<String> = m.vertex(v).iter().map(|x| format!("{x:?}")).collect();
        let _ = writeln!(s, "{}", row.join(" "));
    }
    let _ = writeln!(s, "elements {} {}", m.kind().name(), m.num_elements());
    for e in 0..m.num_elements() {
        let row: Vec<String> = m.element(e).iter().map(|i| i.to_string()).collect();
        let _ = writeln!(s, "{}", row.join(" "));
    }
    for (name, idx) in m.tags() {
        let _ = writeln!(s, "tag {name} {}", idx.len());
        for i in idx {
            let _ = writeln!(s, "{i}");
        }
    }
    s
}

struct Lines<'a> {
    it: std::iter::Peekable<Box<dyn Iterator<Item = (usize, &'a str)> + 'a>>,
    last: usize,
}

impl<'a> Lines<'a> {
    fn new(text: &'a str) -> Self {
        let it: Box<dyn Iterator<Item = (usize, &'a str)> + 'a> = Box::new(
            text.lines()
                .enumerate()
                .map(|(i, l)| (i + 1, l.trim()))
                .filter(|(_, l)| !l.is_empty() && !l.starts_with('#')),
        );
        Lines {
            it: it.peekable(),
            last: 0,
        }
    }

    fn next(&mut self) -> Option<(usize, &'a str)> {
        let r = self.it.next();
        if let Some((n, _)) = r {
            self.last = n;
        }
        r
    }

    fn expect(&mut self, what: &str) -> Result<(usize, &'a str), DomainError> {
        let last = self.last;
        self.next().ok_or_else(|| err(last + 1, format!("unexpected end of file, expected {what}")))
    }
}

fn err(line: usize, msg: impl Into<String>) -> DomainError {
    DomainError::Parse {
        line,
        msg: msg.into(),
    }
}

fn count(line: usize, tok: Option<&str>) -> Result<usize, DomainError> {
    tok.ok_or_else(|| err(line, "missing count"))?
        .parse()
        .map_err(|_| err(line, "bad count"))
}

pub fn read_mesh(text: &str) -> Result<Mesh, DomainError> {
    let mut lines = Lines::new(text);
    let (n, head) = lines.expect("header")?;
    let mut parts = head.split_whitespace();
    if parts.next() != Some("mesh") {
        return Err(err(n, "expected `mesh <dim>`"));
    }
    let dim = count(n, parts.next())?;
    if !(1..=3).contains(&dim) {
        return Err(err(n, format!("unsupported dimension {dim}")));
    }
    let mut vertices: Option<Vec<f64>> = None;
    let mut elements: Option<(ElementKind, Vec<usize>, Vec<usize>)> = None;
    let mut tags: BTreeMap<String, (usize, Vec<usize>)> = BTreeMap::new();
    while let Some((n, l)) = lines.next() {
        let mut p = l.split_whitespace();
        match p.next() {
            Some("vertices") => {
                let k = count(n, p.next())?;
                let mut v = Vec::with_capacity(k * dim);
                for _ in 0..k {
                    let (ln, row) = lines.expect("vertex row")?;
                    let vals: Vec<f64> = row
                        .split_whitespace()
                        .map(|t| t.parse().map_err(|_| err(ln, format!("bad number {t:?}"))))
                        .collect::<Result<_, _>>()?;
                    if vals.len() != dim {
                        return Err(err(ln, format!("expected {dim} coordinates")));
                    }
                    v.extend(vals);
                }
                vertices = Some(v);
            }
            Some("elements") => {
                let kind_tok = p.next().ok_or_else(|| err(n, "missing element kind"))?;
                let kind = ElementKind::parse(kind_tok)
                    .ok_or_else(|| DomainError::UnsupportedElement(kind_tok.to_string()))?;
                if kind.dim() != dim {
                    return Err(DomainError::UnsupportedElement(format!(
                        "{} in a {dim}-dimensional mesh",
                        kind.name()
                    )));
                }
                let k = count(n, p.next())?;
                let mut idx = Vec::with_capacity(k * kind.nodes());
                let mut rows = Vec::with_capacity(k);
                for _ in 0..k {
                    let (ln, row) = lines.expect("element row")?;
                    let vals: Vec<usize> = row
                        .split_whitespace()
                        .map(|t| t.parse().map_err(|_| err(ln, format!("bad index {t:?}"))))
                        .collect::<Result<_, _>>()?;
                    if vals.len() != kind.nodes() {
                        return Err(err(ln, format!("expected {} indices", kind.nodes())));
                    }
                    idx.extend(vals);
                    rows.push(ln);
                }
                elements = Some((kind, idx, rows));
            }
            Some("tag") => {
                let name = p.next().ok_or_else(|| err(n, "missing tag name"))?;
                let k = count(n, p.next())?;
                let mut idx = Vec::with_capacity(k);
                for _ in 0..k {
                    let (ln, row) = lines.expect("tag index")?;
                    idx.push(row.parse().map_err(|_| err(ln, format!("bad index {row:?}")))?);
                }
                tags.insert(name.to_string(), (n, idx));
            }
            Some(other) => return Err(err(n, format!("unknown section {other:?}"))),
            None => {}
        }
    }
    let vertices = vertices.ok_or_else(|| err(lines.last, "missing vertices section"))?;
    let (kind, elems, rows) = elements.ok_or_else(|| err(lines.last, "missing elements section"))?;
    let nv = vertices.len() / dim;
    if let Some(pos) = elems.iter().position(|&i| i >= nv) {
        return Err(err(rows[pos / kind.nodes()], format!("element index {} >= {nv}", elems[pos])));
    }
    for (name, (ln, idx)) in &tags {
        if let Some(bad) = idx.iter().find(|&&i| i >= nv) {
            return Err(err(*ln, format!("tag {name} index {bad} >= {nv}")));
        }
    }
    let tags = tags.into_iter().map(|(k, (_, v))| (k, v)).collect();
    Mesh::new(dim, vertices, kind, elems, tags)
}
