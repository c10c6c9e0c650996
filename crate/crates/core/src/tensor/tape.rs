//! Tensor-level Wengert tape.
//!
//! Each node stores its opcode, input ids and forward value. Because the
//! opcode is kept (rather than precomputed partials), the tape can be
//! replayed at new leaf values and the backward sweep can itself be recorded
//! onto the tape, which is how higher derivatives are obtained: a Hessian is
//! the gradient of a recorded gradient.
//!
//! Node ids are assigned in recording order, so every input id precedes its
//! consumer and a reverse walk over ids is a valid adjoint order.

use std::sync::Arc;

use super::kernels::{self, CmpOp};
use super::vjp::{self, Backend};
use super::{CsrMatrix, Result, Tensor, TensorError};

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub enum Op {
    /// Differentiable input.
    Leaf,
    /// Non-differentiable input.
    Constant,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale(f64),
    Exp,
    Log,
    Sin,
    Cos,
    Tanh,
    Sqrt,
    Abs,
    Relu,
    PowScalar(f64),
    Pow,
    Maximum,
    Minimum,
    /// 0/1 valued, zero gradient.
    Compare(CmpOp),
    Sum { axes: Vec<usize>, keepdim: bool },
    SumTo(Vec<usize>),
    BroadcastTo(Vec<usize>),
    MatMul,
    Transpose,
    Reshape(Vec<usize>),
    Concat(usize),
    Slice { axis: usize, start: usize, step: usize, len: usize },
    SliceScatter { axis: usize, start: usize, step: usize, in_shape: Vec<usize> },
    /// Sparse linear map along an axis; the transpose is kept for the adjoint.
    PointMap { axis: usize, w: Arc<CsrMatrix>, wt: Arc<CsrMatrix> },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Neg => "neg",
            Op::Scale(_) => "scale",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Sin => "sin",
            Op::Cos => "cos",
            Op::Tanh => "tanh",
            Op::Sqrt => "sqrt",
            Op::Abs => "abs",
            Op::Relu => "relu",
            Op::PowScalar(_) => "pow_scalar",
            Op::Pow => "pow",
            Op::Maximum => "maximum",
            Op::Minimum => "minimum",
            Op::Compare(_) => "compare",
            Op::Sum { .. } => "sum",
            Op::SumTo(_) => "sum_to",
            Op::BroadcastTo(_) => "broadcast_to",
            Op::MatMul => "matmul",
            Op::Transpose => "transpose",
            Op::Reshape(_) => "reshape",
            Op::Concat(_) => "concat",
            Op::Slice { .. } => "slice",
            Op::SliceScatter { .. } => "slice_scatter",
            Op::PointMap { .. } => "point_map",
        }
    }
}

/// Forward semantics of every opcode. Shared by recording, replay and the
/// eager backward sweep.
pub(crate) fn forward(op: &Op, x: &[&Tensor]) -> Result<Tensor> {
    let un = |f: fn(f64) -> f64| Ok(x[0].map(f));
    match op {
        Op::Leaf | Op::Constant => Ok(x[0].clone()),
        Op::Add => x[0].add(x[1]),
        Op::Sub => x[0].sub(x[1]),
        Op::Mul => x[0].mul(x[1]),
        Op::Div => x[0].div(x[1]),
        Op::Neg => un(|v| -v),
        Op::Scale(c) => Ok(x[0].scale(*c)),
        Op::Exp => un(f64::exp),
        Op::Log => un(f64::ln),
        Op::Sin => un(f64::sin),
        Op::Cos => un(f64::cos),
        Op::Tanh => un(f64::tanh),
        Op::Sqrt => un(f64::sqrt),
        Op::Abs => un(f64::abs),
        Op::Relu => un(|v| if v > 0.0 { v } else { 0.0 }),
        Op::PowScalar(p) => {
            let p = *p;
            Ok(if p == 2.0 {
                x[0].map(|v| v * v)
            } else if p == 1.0 {
                x[0].clone()
            } else {
                x[0].map(move |v| v.powf(p))
            })
        }
        Op::Pow => x[0].pow(x[1]),
        Op::Maximum => x[0].maximum(x[1]),
        Op::Minimum => x[0].minimum(x[1]),
        Op::Compare(c) => x[0].compare(x[1], *c),
        Op::Sum { axes, keepdim } => Ok(kernels::sum_axes(x[0], axes, *keepdim)),
        Op::SumTo(s) => kernels::sum_to(x[0], s),
        Op::BroadcastTo(s) => kernels::broadcast_to(x[0], s),
        Op::MatMul => kernels::matmul(x[0], x[1]),
        Op::Transpose => kernels::transpose2(x[0]),
        Op::Reshape(s) => x[0].reshape(s),
        Op::Concat(axis) => kernels::concat(x, *axis as isize),
        Op::Slice {
            axis,
            start,
            step,
            len,
        } => kernels::slice(x[0], *axis, *start, *len, *step),
        Op::SliceScatter {
            axis,
            start,
            step,
            in_shape,
        } => kernels::slice_scatter(x[0], in_shape, *axis, *start, *step),
        Op::PointMap { axis, w, .. } => kernels::point_map(w, x[0], *axis),
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    inputs: Vec<Var>,
    value: Tensor,
}

/// Reverse-mode tape. Single writer; one tape per evaluation.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn op(&self, v: Var) -> &Op {
        &self.nodes[v.0].op
    }

    pub fn inputs(&self, v: Var) -> &[Var] {
        &self.nodes[v.0].inputs
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 >= self.nodes.len() {
            return Err(TensorError::UnknownNode(v.0));
        }
        Ok(())
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: vec![],
            value: t,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Constant,
            inputs: vec![],
            value: t,
        });
        Var(self.nodes.len() - 1)
    }

    /// Record `op` applied to `inputs`.
    pub fn apply(&mut self, op: Op, inputs: &[Var]) -> Result<Var> {
        for &v in inputs {
            self.check(v)?;
        }
        let value = {
            let vals: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            forward(&op, &vals)?
        };
        self.nodes.push(Node {
            op,
            inputs: inputs.to_vec(),
            value,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Add, &[a, b])
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Mul, &[a, b])
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Div, &[a, b])
    }
    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Neg, &[a])
    }
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.apply(Op::Scale(c), &[a])
    }
    pub fn unary(&mut self, op: Op, a: Var) -> Result<Var> {
        self.apply(op, &[a])
    }
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::MatMul, &[a, b])
    }
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Transpose, &[a])
    }
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.apply(Op::Reshape(shape.to_vec()), &[a])
    }
    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if self.value(a).shape() == shape {
            return Ok(a);
        }
        self.apply(Op::BroadcastTo(shape.to_vec()), &[a])
    }
    pub fn concat(&mut self, parts: &[Var], axis: isize) -> Result<Var> {
        let rank = self.value(parts[0]).rank();
        let axis = kernels::normalize_axis(axis, rank)?;
        self.apply(Op::Concat(axis), parts)
    }
    pub fn slice(&mut self, a: Var, axis: isize, start: usize, len: usize, step: usize) -> Result<Var> {
        let axis = kernels::normalize_axis(axis, self.value(a).rank())?;
        self.apply(
            Op::Slice {
                axis,
                start,
                step,
                len,
            },
            &[a],
        )
    }
    pub fn sum(&mut self, a: Var, axes: Option<&[isize]>, keepdim: bool) -> Result<Var> {
        let axes = kernels::normalize_axes(axes, self.value(a).rank())?;
        self.apply(Op::Sum { axes, keepdim }, &[a])
    }
    pub fn mean(&mut self, a: Var, axes: Option<&[isize]>, keepdim: bool) -> Result<Var> {
        let ax = kernels::normalize_axes(axes, self.value(a).rank())?;
        let count: usize = ax.iter().map(|&i| self.value(a).shape()[i]).product();
        let s = self.apply(Op::Sum { axes: ax, keepdim }, &[a])?;
        self.scale(s, 1.0 / count as f64)
    }
    pub fn point_map(&mut self, a: Var, w: Arc<CsrMatrix>, axis: usize) -> Result<Var> {
        let wt = Arc::new(w.transpose());
        self.apply(Op::PointMap { axis, w, wt }, &[a])
    }

    /// Vector-Jacobian product recorded onto the tape, so the result can be
    /// differentiated again. `seed` must have the shape of `y`.
    pub fn vjp(&mut self, y: Var, xs: &[Var], seed: Var) -> Result<Vec<Var>> {
        self.check(y)?;
        self.check(seed)?;
        for &x in xs {
            self.check(x)?;
        }
        if self.value(seed).shape() != self.value(y).shape() {
            return Err(TensorError::ShapeMismatch {
                op: "vjp seed",
                lhs: self.value(y).shape().to_vec(),
                rhs: self.value(seed).shape().to_vec(),
            });
        }
        let (out, ext) = {
            let mut rec = Recorder {
                base: &self.nodes,
                ext: Vec::new(),
            };
            let out = sweep(&self.nodes, &mut rec, y, xs, seed, |_, v| v)?;
            (out, rec.ext)
        };
        self.nodes.extend(ext);
        let mut res = Vec::with_capacity(xs.len());
        for (x, g) in xs.iter().zip(out) {
            res.push(match g {
                Some(g) => g,
                None => {
                    let z = Tensor::zeros(self.value(*x).shape());
                    self.constant(z)
                }
            });
        }
        Ok(res)
    }

    /// Gradient of a scalar `y`, recorded onto the tape (differentiable).
    pub fn grad(&mut self, y: Var, xs: &[Var]) -> Result<Vec<Var>> {
        self.check(y)?;
        let shape = self.value(y).shape().to_vec();
        if self.value(y).numel() != 1 {
            return Err(TensorError::NonScalarOutput(shape));
        }
        let seed = self.constant(Tensor::ones(&shape));
        self.vjp(y, xs, seed)
    }

    /// Gradient of a scalar `y` computed eagerly, without growing the tape.
    /// Untouched inputs map to zero tensors of their shape.
    pub fn grad_values(&self, y: Var, xs: &[Var]) -> Result<Vec<Tensor>> {
        self.check(y)?;
        for &x in xs {
            self.check(x)?;
        }
        let yv = self.value(y);
        if yv.numel() != 1 {
            return Err(TensorError::NonScalarOutput(yv.shape().to_vec()));
        }
        self.vjp_values(y, xs, Tensor::ones(yv.shape()))
    }

    /// Eager vector-Jacobian product.
    pub fn vjp_values(&self, y: Var, xs: &[Var], seed: Tensor) -> Result<Vec<Tensor>> {
        let mut eager = vjp::Eager;
        let out = sweep(&self.nodes, &mut eager, y, xs, seed, |_, v| self.nodes[v.0].value.clone())?;
        Ok(xs
            .iter()
            .zip(out)
            .map(|(x, g)| g.unwrap_or_else(|| Tensor::zeros(self.value(*x).shape())))
            .collect())
    }

    /// Dense Jacobian of `y` with respect to `x`, shape `(numel(y), numel(x))`,
    /// one reverse pass per output component.
    pub fn jacobian(&mut self, y: Var, x: Var) -> Result<Tensor> {
        let ny = self.value(y).numel();
        let nx = self.value(x).numel();
        let yshape = self.value(y).shape().to_vec();
        let mut rows = Vec::with_capacity(ny * nx);
        for i in 0..ny {
            let mut e = vec![0.0; ny];
            e[i] = 1.0;
            let g = self.vjp_values(y, &[x], Tensor::from_parts(yshape.clone(), e))?;
            rows.extend_from_slice(g[0].data());
        }
        Ok(Tensor::from_parts(vec![ny, nx], rows))
    }

    /// Hessian of a scalar `f` as the Jacobian of its recorded gradient.
    pub fn hessian(&mut self, f: Var, x: Var) -> Result<Tensor> {
        let g = self.grad(f, &[x])?[0];
        self.jacobian(g, x)
    }

    /// Jacobian-vector product via the transpose trick: `J v = d/dw (Jᵀ w)·v`.
    pub fn jvp(&mut self, y: Var, x: Var, v: Tensor) -> Result<Var> {
        if v.shape() != self.value(x).shape() {
            return Err(TensorError::ShapeMismatch {
                op: "jvp",
                lhs: self.value(x).shape().to_vec(),
                rhs: v.shape().to_vec(),
            });
        }
        let w = self.leaf(Tensor::zeros(&self.value(y).shape().to_vec()));
        let jt_w = self.vjp(y, &[x], w)?[0];
        let vv = self.constant(v);
        Ok(self.vjp(jt_w, &[w], vv)?[0])
    }

    /// Recompute every node with some leaves replaced. The opcode stream is
    /// unchanged, so this re-evaluates the same recorded program.
    pub fn replay(&self, leaves: &[(Var, Tensor)]) -> Result<Tape> {
        let mut out = Tape {
            nodes: Vec::with_capacity(self.nodes.len()),
        };
        for (i, node) in self.nodes.iter().enumerate() {
            let value = match node.op {
                Op::Leaf | Op::Constant => leaves
                    .iter()
                    .find(|(v, _)| v.0 == i)
                    .map(|(_, t)| t.clone())
                    .unwrap_or_else(|| node.value.clone()),
                _ => {
                    let vals: Vec<&Tensor> =
                        node.inputs.iter().map(|v| &out.nodes[v.0].value).collect();
                    forward(&node.op, &vals)?
                }
            };
            out.nodes.push(Node {
                op: node.op.clone(),
                inputs: node.inputs.clone(),
                value,
            });
        }
        Ok(out)
    }
}

/// Nodes ≤ `upto` that depend on at least one of `xs`.
fn dependents(nodes: &[Node], xs: &[Var], upto: Var) -> Vec<bool> {
    let mut dep = vec![false; upto.0 + 1];
    let Some(start) = xs.iter().map(|v| v.0).filter(|&i| i <= upto.0).min() else {
        return dep;
    };
    for x in xs {
        if x.0 <= upto.0 {
            dep[x.0] = true;
        }
    }
    for i in start..=upto.0 {
        if !dep[i] && nodes[i].inputs.iter().any(|v| dep[v.0]) {
            dep[i] = true;
        }
    }
    dep
}

/// Reverse sweep from `y` over the first `y+1` nodes. Adjoints of
/// intermediate nodes are dropped as soon as they have been propagated.
fn sweep<B: Backend>(
    nodes: &[Node],
    backend: &mut B,
    y: Var,
    xs: &[Var],
    seed: B::V,
    node_value: impl Fn(&mut B, Var) -> B::V,
) -> Result<Vec<Option<B::V>>> {
    let dep = dependents(nodes, xs, y);
    let mut adj: Vec<Option<B::V>> = vec![None; y.0 + 1];
    if dep[y.0] {
        adj[y.0] = Some(seed);
    }
    let mut is_target = vec![false; y.0 + 1];
    for x in xs {
        if x.0 <= y.0 {
            is_target[x.0] = true;
        }
    }
    for i in (0..=y.0).rev() {
        if !dep[i] || nodes[i].inputs.is_empty() {
            continue;
        }
        let g = if is_target[i] {
            adj[i].clone()
        } else {
            adj[i].take()
        };
        let Some(g) = g else { continue };
        let node = &nodes[i];
        let need: Vec<bool> = node.inputs.iter().map(|v| dep[v.0]).collect();
        let ins: Vec<B::V> = node.inputs.iter().map(|&v| node_value(backend, v)).collect();
        let in_vals: Vec<&Tensor> = node.inputs.iter().map(|v| &nodes[v.0].value).collect();
        let out = node_value(backend, Var(i));
        let contribs = vjp::vjp(backend, &node.op, &ins, &in_vals, &out, g, &need)?;
        for (inp, c) in node.inputs.iter().zip(contribs) {
            if let Some(c) = c {
                let slot = &mut adj[inp.0];
                *slot = Some(match slot.take() {
                    None => c,
                    Some(prev) => backend.apply(Op::Add, &[prev, c])?,
                });
            }
        }
    }
    Ok(xs
        .iter()
        .map(|x| if x.0 <= y.0 { adj[x.0].take() } else { None })
        .collect())
}

/// Records backward operations after the existing nodes without mutating
/// them, so the sweep can keep reading the original prefix.
struct Recorder<'a> {
    base: &'a [Node],
    ext: Vec<Node>,
}

impl Recorder<'_> {
    fn node(&self, v: Var) -> &Node {
        if v.0 < self.base.len() {
            &self.base[v.0]
        } else {
            &self.ext[v.0 - self.base.len()]
        }
    }

    fn push(&mut self, op: Op, inputs: Vec<Var>, value: Tensor) -> Var {
        self.ext.push(Node { op, inputs, value });
        Var(self.base.len() + self.ext.len() - 1)
    }
}

impl Backend for Recorder<'_> {
    type V = Var;

    fn apply(&mut self, op: Op, ins: &[Var]) -> Result<Var> {
        let value = {
            let vals: Vec<&Tensor> = ins.iter().map(|&v| &self.node(v).value).collect();
            forward(&op, &vals)?
        };
        Ok(self.push(op, ins.to_vec(), value))
    }

    fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Constant, vec![], t)
    }

    fn shape(&self, v: &Var) -> Vec<usize> {
        self.node(*v).value.shape().to_vec()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_check(f: impl Fn(&mut Tape, Var) -> Var, x0: Tensor) {
        let mut t = Tape::new();
        let x = t.leaf(x0.clone());
        let y = f(&mut t, x);
        let y = t.sum(y, None, false).unwrap();
        let g = t.grad_values(y, &[x]).unwrap().remove(0);
        let h = 1e-5;
        for i in 0..x0.numel() {
            let mut p = x0.to_vec();
            let mut m = x0.to_vec();
            p[i] += h;
            m[i] -= h;
            let tp = t.replay(&[(x, Tensor::new(x0.shape(), p).unwrap())]).unwrap();
            let tm = t.replay(&[(x, Tensor::new(x0.shape(), m).unwrap())]).unwrap();
            let fd = (tp.value(y).data()[0] - tm.value(y).data()[0]) / (2.0 * h);
            let ad = g.data()[i];
            assert!(
                (fd - ad).abs() <= 1e-6 * fd.abs().max(1.0),
                "component {i}: ad {ad} fd {fd}"
            );
        }
    }

    #[test]
    fn square_derivative() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(3.0));
        let y = t.mul(x, x).unwrap();
        assert_eq!(t.grad_values(y, &[x]).unwrap()[0].data(), &[6.0]);
    }

    #[test]
    fn constant_has_zero_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(3.0));
        let c = t.constant(Tensor::scalar(7.0));
        assert_eq!(t.grad_values(c, &[x]).unwrap()[0].data(), &[0.0]);
    }

    #[test]
    fn non_scalar_output_is_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector([1.0, 2.0]));
        assert!(matches!(
            t.grad_values(x, &[x]),
            Err(TensorError::NonScalarOutput(_))
        ));
        assert!(matches!(t.grad(Var(99), &[x]), Err(TensorError::UnknownNode(99))));
    }

    #[test]
    fn hessian_of_square_is_two() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(0.7));
        let y = t.mul(x, x).unwrap();
        assert_eq!(t.hessian(y, x).unwrap().data(), &[2.0]);
    }

    #[test]
    fn jacobian_of_identity() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector([1.0, 2.0, 3.0]));
        let j = t.jacobian(x, x).unwrap();
        assert_eq!(j.shape(), &[3, 3]);
        assert_eq!(j.data(), &[1., 0., 0., 0., 1., 0., 0., 0., 1.]);
    }

    #[test]
    fn jvp_matches_jacobian_column_mix() {
        // y = (x0², x0·x1) at (1,2); J = [[2,0],[2,1]]
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector([1.0, 2.0]));
        let x0 = t.slice(x, 0, 0, 1, 1).unwrap();
        let x1 = t.slice(x, 0, 1, 1, 1).unwrap();
        let a = t.mul(x0, x0).unwrap();
        let b = t.mul(x0, x1).unwrap();
        let y = t.concat(&[a, b], 0).unwrap();
        let jv = t.jvp(y, x, Tensor::vector([1.0, 1.0])).unwrap();
        assert_eq!(t.value(jv).data(), &[2.0, 3.0]);
    }

    #[test]
    fn primitive_gradients_match_finite_differences() {
        let x0 = Tensor::vector([0.3, -0.7, 0.55, 0.9]);
        fd_check(|t, x| t.unary(Op::Tanh, x).unwrap(), x0.clone());
        fd_check(|t, x| t.unary(Op::Sin, x).unwrap(), x0.clone());
        fd_check(|t, x| t.unary(Op::Exp, x).unwrap(), x0.clone());
        fd_check(|t, x| {
            let y = t.mul(x, x).unwrap();
            t.div(y, x).unwrap()
        }, x0);
    }
}
