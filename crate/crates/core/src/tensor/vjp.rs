//! Adjoint rules, written once over a [`Backend`].
//!
//! The recording backend emits tape nodes (so gradients are themselves
//! differentiable); the eager backend evaluates tensors directly.

use super::kernels::CmpOp;
use super::tape::{forward, Op};
use super::{Result, Tensor};

pub(crate) trait Backend {
    type V: Clone;
    fn apply(&mut self, op: Op, ins: &[Self::V]) -> Result<Self::V>;
    fn constant(&mut self, t: Tensor) -> Self::V;
    fn shape(&self, v: &Self::V) -> Vec<usize>;
}

pub(crate) struct Eager;

impl Backend for Eager {
    type V = Tensor;

    fn apply(&mut self, op: Op, ins: &[Tensor]) -> Result<Tensor> {
        let refs: Vec<&Tensor> = ins.iter().collect();
        forward(&op, &refs)
    }

    fn constant(&mut self, t: Tensor) -> Tensor {
        t
    }

    fn shape(&self, v: &Tensor) -> Vec<usize> {
        v.shape().to_vec()
    }
}

fn unbroadcast<B: Backend>(b: &mut B, g: B::V, target: &[usize]) -> Result<B::V> {
    if b.shape(&g) == target {
        Ok(g)
    } else {
        b.apply(Op::SumTo(target.to_vec()), &[g])
    }
}

fn mask<B: Backend>(b: &mut B, x: &Tensor, y: &Tensor, op: CmpOp) -> Result<B::V> {
    Ok(b.constant(x.compare(y, op)?))
}

/// Contributions of the adjoint `g` of a node to each of its inputs.
/// Inputs with `need[i] == false` receive `None`.
pub(crate) fn vjp<B: Backend>(
    b: &mut B,
    op: &Op,
    ins: &[B::V],
    in_vals: &[&Tensor],
    out: &B::V,
    g: B::V,
    need: &[bool],
) -> Result<Vec<Option<B::V>>> {
    let n = ins.len();
    let mut res: Vec<Option<B::V>> = vec![None; n];
    let shape = |i: usize| in_vals[i].shape().to_vec();
    match op {
        Op::Leaf | Op::Constant | Op::Compare(_) => {}
        Op::Add => {
            for i in 0..2 {
                if need[i] {
                    res[i] = Some(unbroadcast(b, g.clone(), &shape(i))?);
                }
            }
        }
        Op::Sub => {
            if need[0] {
                res[0] = Some(unbroadcast(b, g.clone(), &shape(0))?);
            }
            if need[1] {
                let ng = b.apply(Op::Neg, &[g])?;
                res[1] = Some(unbroadcast(b, ng, &shape(1))?);
            }
        }
        Op::Mul => {
            if need[0] {
                let t = b.apply(Op::Mul, &[g.clone(), ins[1].clone()])?;
                res[0] = Some(unbroadcast(b, t, &shape(0))?);
            }
            if need[1] {
                let t = b.apply(Op::Mul, &[g, ins[0].clone()])?;
                res[1] = Some(unbroadcast(b, t, &shape(1))?);
            }
        }
        Op::Div => {
            let ga = b.apply(Op::Div, &[g, ins[1].clone()])?;
            if need[1] {
                let t = b.apply(Op::Mul, &[ga.clone(), out.clone()])?;
                let t = b.apply(Op::Neg, &[t])?;
                res[1] = Some(unbroadcast(b, t, &shape(1))?);
            }
            if need[0] {
                res[0] = Some(unbroadcast(b, ga, &shape(0))?);
            }
        }
        Op::Neg => res[0] = Some(b.apply(Op::Neg, &[g])?),
        Op::Scale(c) => res[0] = Some(b.apply(Op::Scale(*c), &[g])?),
        Op::Exp => res[0] = Some(b.apply(Op::Mul, &[g, out.clone()])?),
        Op::Log => res[0] = Some(b.apply(Op::Div, &[g, ins[0].clone()])?),
        Op::Sin => {
            let c = b.apply(Op::Cos, &[ins[0].clone()])?;
            res[0] = Some(b.apply(Op::Mul, &[g, c])?);
        }
        Op::Cos => {
            let s = b.apply(Op::Sin, &[ins[0].clone()])?;
            let t = b.apply(Op::Mul, &[g, s])?;
            res[0] = Some(b.apply(Op::Neg, &[t])?);
        }
        Op::Tanh => {
            // g·(1 − y²) = g − (g·y)·y
            let gy = b.apply(Op::Mul, &[g.clone(), out.clone()])?;
            let gyy = b.apply(Op::Mul, &[gy, out.clone()])?;
            res[0] = Some(b.apply(Op::Sub, &[g, gyy])?);
        }
        Op::Sqrt => {
            let t = b.apply(Op::Div, &[g, out.clone()])?;
            res[0] = Some(b.apply(Op::Scale(0.5), &[t])?);
        }
        Op::Abs => {
            let s = b.constant(in_vals[0].map(|v| {
                if v > 0.0 {
                    1.0
                } else if v < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }));
            res[0] = Some(b.apply(Op::Mul, &[g, s])?);
        }
        Op::Relu => {
            let m = b.constant(in_vals[0].map(|v| if v > 0.0 { 1.0 } else { 0.0 }));
            res[0] = Some(b.apply(Op::Mul, &[g, m])?);
        }
        Op::PowScalar(p) => {
            let p = *p;
            res[0] = Some(if p == 1.0 {
                g
            } else if p == 2.0 {
                let t = b.apply(Op::Mul, &[g, ins[0].clone()])?;
                b.apply(Op::Scale(2.0), &[t])?
            } else {
                let d = b.apply(Op::PowScalar(p - 1.0), &[ins[0].clone()])?;
                let d = b.apply(Op::Scale(p), &[d])?;
                b.apply(Op::Mul, &[g, d])?
            });
        }
        Op::Pow => {
            if need[0] {
                let one = b.constant(Tensor::scalar(1.0));
                let e = b.apply(Op::Sub, &[ins[1].clone(), one])?;
                let d = b.apply(Op::Pow, &[ins[0].clone(), e])?;
                let d = b.apply(Op::Mul, &[d, ins[1].clone()])?;
                let t = b.apply(Op::Mul, &[g.clone(), d])?;
                res[0] = Some(unbroadcast(b, t, &shape(0))?);
            }
            if need[1] {
                let l = b.apply(Op::Log, &[ins[0].clone()])?;
                let d = b.apply(Op::Mul, &[out.clone(), l])?;
                let t = b.apply(Op::Mul, &[g, d])?;
                res[1] = Some(unbroadcast(b, t, &shape(1))?);
            }
        }
        Op::Maximum | Op::Minimum => {
            // ties send zero to both sides
            let (ca, cb) = if matches!(op, Op::Maximum) {
                (CmpOp::Gt, CmpOp::Lt)
            } else {
                (CmpOp::Lt, CmpOp::Gt)
            };
            if need[0] {
                let m = mask(b, in_vals[0], in_vals[1], ca)?;
                let t = b.apply(Op::Mul, &[g.clone(), m])?;
                res[0] = Some(unbroadcast(b, t, &shape(0))?);
            }
            if need[1] {
                let m = mask(b, in_vals[0], in_vals[1], cb)?;
                let t = b.apply(Op::Mul, &[g, m])?;
                res[1] = Some(unbroadcast(b, t, &shape(1))?);
            }
        }
        Op::Sum { axes, keepdim } => {
            let in_shape = shape(0);
            let g = if *keepdim {
                g
            } else {
                let mut kept = in_shape.clone();
                for &a in axes {
                    kept[a] = 1;
                }
                b.apply(Op::Reshape(kept), &[g])?
            };
            res[0] = Some(b.apply(Op::BroadcastTo(in_shape), &[g])?);
        }
        Op::SumTo(_) => {
            let in_shape = shape(0);
            let gs = b.shape(&g);
            // sum_to may drop leading axes; restore them before broadcasting
            let g = if gs.len() < in_shape.len() {
                let mut s = vec![1; in_shape.len() - gs.len()];
                s.extend(gs);
                b.apply(Op::Reshape(s), &[g])?
            } else {
                g
            };
            res[0] = Some(b.apply(Op::BroadcastTo(in_shape), &[g])?);
        }
        Op::BroadcastTo(_) => res[0] = Some(unbroadcast(b, g, &shape(0))?),
        Op::MatMul => {
            if need[0] {
                let bt = b.apply(Op::Transpose, &[ins[1].clone()])?;
                res[0] = Some(b.apply(Op::MatMul, &[g.clone(), bt])?);
            }
            if need[1] {
                let at = b.apply(Op::Transpose, &[ins[0].clone()])?;
                res[1] = Some(b.apply(Op::MatMul, &[at, g])?);
            }
        }
        Op::Transpose => res[0] = Some(b.apply(Op::Transpose, &[g])?),
        Op::Reshape(_) => res[0] = Some(b.apply(Op::Reshape(shape(0)), &[g])?),
        Op::Concat(axis) => {
            let mut start = 0;
            for i in 0..n {
                let len = in_vals[i].shape()[*axis];
                if need[i] {
                    res[i] = Some(b.apply(
                        Op::Slice {
                            axis: *axis,
                            start,
                            step: 1,
                            len,
                        },
                        &[g.clone()],
                    )?);
                }
                start += len;
            }
        }
        Op::Slice {
            axis, start, step, ..
        } => {
            res[0] = Some(b.apply(
                Op::SliceScatter {
                    axis: *axis,
                    start: *start,
                    step: *step,
                    in_shape: shape(0),
                },
                &[g],
            )?)
        }
        Op::SliceScatter {
            axis, start, step, ..
        } => {
            res[0] = Some(b.apply(
                Op::Slice {
                    axis: *axis,
                    start: *start,
                    step: *step,
                    len: in_vals[0].shape()[*axis],
                },
                &[g],
            )?)
        }
        Op::PointMap { axis, w, wt } => {
            res[0] = Some(b.apply(
                Op::PointMap {
                    axis: *axis,
                    w: wt.clone(),
                    wt: w.clone(),
                },
                &[g],
            )?)
        }
    }
    Ok(res)
}
