//! Static shape inference over a graph and its textual rendering.

use std::collections::HashMap;
use std::fmt::Write as _;

use super::{Expr, NodeKind, Result, SliceSpec, TraceError};
use crate::tensor::{broadcast_shape, shape_string};

/// Inferred shape of every node reachable from a set of roots.
#[derive(Clone, Debug)]
pub struct ShapeReport {
    shapes: HashMap<u64, Vec<usize>>,
    order: Vec<Expr>,
    roots: Vec<Expr>,
}

impl ShapeReport {
    pub fn shape(&self, e: &Expr) -> Option<&[usize]> {
        self.shapes.get(&e.id()).map(|s| s.as_slice())
    }

    /// Nodes in post-order (inputs before consumers).
    pub fn nodes(&self) -> &[Expr] {
        &self.order
    }

    pub fn roots(&self) -> &[Expr] {
        &self.roots
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }
}

fn fail(e: &Expr, reason: impl Into<String>) -> TraceError {
    TraceError::ShapeInferenceFailure {
        node: e.id(),
        label: e.label(),
        reason: reason.into(),
    }
}

fn norm_axis(e: &Expr, axis: isize, rank: usize) -> Result<usize> {
    let a = if axis < 0 { axis + rank as isize } else { axis };
    if a < 0 || a as usize >= rank {
        return Err(fail(e, format!("axis {axis} out of range for rank {rank}")));
    }
    Ok(a as usize)
}

/// Shape of `n` given the shapes of its children.
fn node_shape(
    n: &Expr,
    cs: &[&[usize]],
    leaf: &dyn Fn(&Expr) -> Option<Vec<usize>>,
) -> Result<Vec<usize>> {
    let bcast = |a: &[usize], b: &[usize]| {
        broadcast_shape(a, b).ok_or_else(|| {
            fail(
                n,
                format!("cannot broadcast {} with {}", shape_string(a), shape_string(b)),
            )
        })
    };
    Ok(match n.kind() {
        NodeKind::Literal(_) => vec![],
        NodeKind::Constant(t) => t.shape().to_vec(),
        NodeKind::Variable(_) | NodeKind::TensorTag(_) | NodeKind::Trial | NodeKind::Test => {
            leaf(n).ok_or_else(|| fail(n, "no shape known for leaf"))?
        }
        NodeKind::Arithmetic(_) | NodeKind::Compare(_) => {
            if cs.len() == 1 {
                cs[0].to_vec()
            } else {
                bcast(cs[0], cs[1])?
            }
        }
        NodeKind::Reduce { axes, .. } => {
            let s = cs[0];
            match axes {
                None => vec![],
                Some(ax) => {
                    let mut drop = Vec::new();
                    for &a in ax {
                        drop.push(norm_axis(n, a, s.len())?);
                    }
                    s.iter()
                        .enumerate()
                        .filter(|(i, _)| !drop.contains(i))
                        .map(|(_, &d)| d)
                        .collect()
                }
            }
        }
        NodeKind::Slice(spec) => {
            let s = cs[0];
            match spec {
                SliceSpec::Index { axis, index } => {
                    let a = norm_axis(n, *axis, s.len())?;
                    let ext = s[a] as isize;
                    let i = if *index < 0 { index + ext } else { *index };
                    if i < 0 || i >= ext {
                        return Err(fail(n, format!("index {index} out of range {ext}")));
                    }
                    let mut out = s.to_vec();
                    out.remove(a);
                    out
                }
                SliceSpec::Range {
                    axis,
                    start,
                    end,
                    step,
                } => {
                    let a = norm_axis(n, *axis, s.len())?;
                    let end = end.unwrap_or(s[a]).min(s[a]);
                    let len = if end > *start {
                        (end - start).div_ceil(*step)
                    } else {
                        0
                    };
                    let mut out = s.to_vec();
                    out[a] = len;
                    out
                }
            }
        }
        NodeKind::Concat(axis) => {
            let rank = cs[0].len();
            let a = norm_axis(n, *axis, rank)?;
            let mut out = cs[0].to_vec();
            for s in &cs[1..] {
                if s.len() != rank
                    || s.iter()
                        .zip(cs[0])
                        .enumerate()
                        .any(|(i, (x, y))| i != a && x != y)
                {
                    return Err(fail(
                        n,
                        format!("concat of {} with {}", shape_string(cs[0]), shape_string(s)),
                    ));
                }
                out[a] += s[a];
            }
            out
        }
        NodeKind::Derivative { .. } => bcast(cs[0], cs[1])?,
        NodeKind::Jacobian => vec![cs[0].iter().product(), cs[1].iter().product()],
        NodeKind::Hessian => {
            if cs[0].iter().product::<usize>() != 1 {
                return Err(fail(n, "hessian of a non-scalar expression"));
            }
            let k = cs[1].iter().product();
            vec![k, k]
        }
        NodeKind::ModelCall(m) => {
            let args: Vec<Vec<usize>> = cs.iter().map(|s| s.to_vec()).collect();
            m.output_shape(&args).map_err(|r| fail(n, r))?
        }
        NodeKind::OperationCall(def) => {
            let mut env: HashMap<u64, Vec<usize>> = HashMap::new();
            for (p, s) in def.params().iter().zip(cs) {
                env.insert(p.id(), s.to_vec());
            }
            let inner = |e: &Expr| env.get(&e.id()).cloned().or_else(|| leaf(e));
            let (shapes, _) = infer(std::slice::from_ref(def.body()), &inner)?;
            shapes[&def.body().id()].clone()
        }
        NodeKind::Tracker(_) => cs[0].to_vec(),
        NodeKind::Field(_) => {
            let mut s = cs[0].to_vec();
            for c in &cs[1..] {
                s = bcast(&s, c)?;
            }
            s
        }
        NodeKind::WeakResidual(_) => vec![],
    })
}

type Inferred = (HashMap<u64, Vec<usize>>, Vec<Expr>);

fn infer(roots: &[Expr], leaf: &dyn Fn(&Expr) -> Option<Vec<usize>>) -> Result<Inferred> {
    let order = Expr::post_order(roots);
    let mut shapes: HashMap<u64, Vec<usize>> = HashMap::new();
    for n in &order {
        let s = {
            let cs: Vec<&[usize]> = n
                .children()
                .iter()
                .map(|c| shapes[&c.id()].as_slice())
                .collect();
            node_shape(n, &cs, leaf)?
        };
        shapes.insert(n.id(), s);
    }
    Ok((shapes, order))
}

/// Infer shapes for every node under `roots`. `leaf` supplies the shapes of
/// variables, tensor tags and FEM symbols.
pub fn trace_shapes(
    roots: &[Expr],
    leaf: &dyn Fn(&Expr) -> Option<Vec<usize>>,
) -> Result<ShapeReport> {
    let (shapes, order) = infer(roots, leaf)?;
    Ok(ShapeReport {
        shapes,
        order,
        roots: roots.to_vec(),
    })
}

/// One line per node, inputs first: `%k = <label> (%i, %j) : (shape)`.
/// Numbers follow the order of the listing, roots are listed at the end.
pub fn print_shapes(report: &ShapeReport) -> String {
    let mut number: HashMap<u64, usize> = HashMap::new();
    let mut out = String::new();
    for (k, n) in report.order.iter().enumerate() {
        number.insert(n.id(), k);
        let args: Vec<String> = n
            .children()
            .iter()
            .map(|c| format!("%{}", number[&c.id()]))
            .collect();
        let args = if args.is_empty() {
            String::new()
        } else {
            format!(" ({})", args.join(", "))
        };
        let _ = writeln!(
            out,
            "%{k} = {}{args} : {}",
            n.label(),
            shape_string(&report.shapes[&n.id()])
        );
    }
    for (i, r) in report.roots.iter().enumerate() {
        let _ = writeln!(out, "root {i} = %{}", number[&r.id()]);
    }
    out
}
