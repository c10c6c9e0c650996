//! Architectures: parameter layout, initialization and the taped forward pass.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::NnError;
use crate::tensor::{broadcast_shape, Op, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Sin,
}

impl Activation {
    fn op(self) -> Op {
        match self {
            Activation::Tanh => Op::Tanh,
            Activation::Relu => Op::Relu,
            Activation::Sin => Op::Sin,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub in_dim: usize,
    pub hidden: Vec<usize>,
    pub out_dim: usize,
    pub activation: Activation,
    /// Apply the activation after the last layer too.
    pub activate_last: bool,
}

impl MlpSpec {
    fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.in_dim];
        d.extend(&self.hidden);
        d.push(self.out_dim);
        d
    }

    /// `(path, shape)` of every parameter, in layer order.
    fn layout(&self, prefix: &str) -> Vec<(String, Vec<usize>)> {
        let d = self.dims();
        let mut out = Vec::new();
        for i in 0..d.len() - 1 {
            out.push((format!("{prefix}layers/{i}/weight"), vec![d[i + 1], d[i]]));
            out.push((format!("{prefix}layers/{i}/bias"), vec![d[i + 1]]));
        }
        out
    }

    fn check(&self) -> Result<(), NnError> {
        if self.dims().contains(&0) {
            return Err(NnError::BadDimension(format!("{:?}", self.dims())));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Arch {
    Mlp(MlpSpec),
    /// Output `Σ_p branch_p·trunk_p + bias`, broadcast over points.
    DeepONet {
        branch: MlpSpec,
        trunk: MlpSpec,
    },
}

impl Arch {
    pub(crate) fn check(&self) -> Result<(), NnError> {
        match self {
            Arch::Mlp(m) => m.check(),
            Arch::DeepONet { branch, trunk } => {
                branch.check()?;
                trunk.check()?;
                if branch.out_dim != trunk.out_dim {
                    return Err(NnError::BadDimension(format!(
                        "branch width {} != trunk width {}",
                        branch.out_dim, trunk.out_dim
                    )));
                }
                Ok(())
            }
        }
    }

    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        match self {
            Arch::Mlp(m) => m.layout(""),
            Arch::DeepONet { branch, trunk } => {
                let mut l = branch.layout("branch/");
                l.extend(trunk.layout("trunk/"));
                l.push(("bias".to_string(), vec![1]));
                l
            }
        }
    }

    /// He-uniform weights (fan-in), zero biases.
    pub fn init(&self, rng: &mut ChaCha8Rng) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (path, shape) in self.layout() {
            let t = if shape.len() == 2 {
                let bound = (6.0 / shape[1] as f64).sqrt();
                let n = shape[0] * shape[1];
                let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
                Tensor::from_parts(shape, data)
            } else {
                Tensor::zeros(&shape)
            };
            out.insert(path, t);
        }
        out
    }

    pub fn output_shape(&self, args: &[Vec<usize>]) -> Result<Vec<usize>, String> {
        match self {
            Arch::Mlp(m) => {
                let (lead, last) = concat_shape(args)?;
                if last != m.in_dim {
                    return Err(format!("mlp expects {} input features, got {last}", m.in_dim));
                }
                let mut s = lead;
                s.push(m.out_dim);
                Ok(s)
            }
            Arch::DeepONet { branch, trunk } => {
                if args.len() != 2 {
                    return Err(format!("deeponet expects 2 arguments, got {}", args.len()));
                }
                let (b, c) = (&args[0], &args[1]);
                if b.last() != Some(&branch.in_dim) {
                    return Err(format!("branch input must end in {}, got {b:?}", branch.in_dim));
                }
                if c.last() != Some(&trunk.in_dim) {
                    return Err(format!("trunk input must end in {}, got {c:?}", trunk.in_dim));
                }
                let mut bl = b[..b.len() - 1].to_vec();
                if bl.len() + 1 == c.len() - 1 {
                    bl.push(1);
                }
                let cl = &c[..c.len() - 1];
                let mut s = broadcast_shape(&bl, cl)
                    .ok_or_else(|| format!("branch {b:?} does not broadcast against {c:?}"))?;
                s.push(1);
                Ok(s)
            }
        }
    }
}

/// Leading shape and feature width of the arguments concatenated on the
/// last axis after broadcasting the leading dimensions.
fn concat_shape(args: &[Vec<usize>]) -> Result<(Vec<usize>, usize), String> {
    if args.is_empty() {
        return Err("model called without arguments".into());
    }
    let mut lead: Vec<usize> = Vec::new();
    let mut width = 0;
    for a in args {
        if a.is_empty() {
            return Err("model argument must have a feature axis".into());
        }
        lead = broadcast_shape(&lead, &a[..a.len() - 1])
            .ok_or_else(|| format!("arguments {args:?} do not broadcast"))?;
        width += a[a.len() - 1];
    }
    Ok((lead, width))
}

/// Resolves the effective weight of a layer (base or LoRA-adapted).
pub(crate) trait Weights {
    fn weight(&self, tape: &mut Tape, path: &str) -> Result<Var, NnError>;
    fn param(&self, path: &str) -> Result<Var, NnError>;
}

fn mlp_forward(
    spec: &MlpSpec,
    prefix: &str,
    tape: &mut Tape,
    w: &dyn Weights,
    x: Var,
) -> Result<Var, NnError> {
    let shape = tape.value(x).shape().to_vec();
    let rows: usize = shape[..shape.len() - 1].iter().product();
    let mut h = tape.reshape(x, &[rows, spec.in_dim])?;
    let n = spec.hidden.len() + 1;
    for i in 0..n {
        let wv = w.weight(tape, &format!("{prefix}layers/{i}/weight"))?;
        let b = w.param(&format!("{prefix}layers/{i}/bias"))?;
        let wt = tape.transpose(wv)?;
        h = tape.matmul(h, wt)?;
        h = tape.add(h, b)?;
        if i + 1 < n || spec.activate_last {
            h = tape.unary(spec.activation.op(), h)?;
        }
    }
    let mut out = shape;
    *out.last_mut().unwrap() = spec.out_dim;
    Ok(tape.reshape(h, &out)?)
}

/// Broadcast the leading dimensions of all arguments and concatenate them on
/// the last axis.
fn concat_args(tape: &mut Tape, args: &[Var]) -> Result<Var, NnError> {
    if args.len() == 1 {
        return Ok(args[0]);
    }
    let shapes: Vec<Vec<usize>> = args.iter().map(|a| tape.value(*a).shape().to_vec()).collect();
    let (lead, _) = concat_shape(&shapes).map_err(NnError::InputRankMismatch)?;
    let mut parts = Vec::new();
    for (a, s) in args.iter().zip(&shapes) {
        let mut target = lead.clone();
        target.push(s[s.len() - 1]);
        let a = if s.len() < target.len() {
            let mut r = vec![1; target.len() - s.len()];
            r.extend(s);
            tape.reshape(*a, &r)?
        } else {
            *a
        };
        parts.push(tape.broadcast_to(a, &target)?);
    }
    Ok(tape.concat(&parts, -1)?)
}

pub(crate) fn forward(
    arch: &Arch,
    tape: &mut Tape,
    w: &dyn Weights,
    args: &[Var],
) -> Result<Var, NnError> {
    let shapes: Vec<Vec<usize>> = args.iter().map(|a| tape.value(*a).shape().to_vec()).collect();
    arch.output_shape(&shapes).map_err(NnError::InputRankMismatch)?;
    match arch {
        Arch::Mlp(m) => {
            let x = concat_args(tape, args)?;
            mlp_forward(m, "", tape, w, x)
        }
        Arch::DeepONet { branch, trunk } => {
            let b = mlp_forward(branch, "branch/", tape, w, args[0])?;
            let t = mlp_forward(trunk, "trunk/", tape, w, args[1])?;
            let bs = tape.value(b).shape().to_vec();
            let ts = tape.value(t).shape().to_vec();
            let b = if bs.len() + 1 == ts.len() {
                let mut s = bs.clone();
                s.insert(bs.len() - 1, 1);
                tape.reshape(b, &s)?
            } else {
                b
            };
            let prod = tape.mul(b, t)?;
            let s = tape.sum(prod, Some(&[-1]), true)?;
            let bias = w.param("bias")?;
            Ok(tape.add(s, bias)?)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mlp_parameter_count() {
        let a = Arch::Mlp(MlpSpec {
            in_dim: 2,
            hidden: vec![16],
            out_dim: 1,
            activation: Activation::Tanh,
            activate_last: false,
        });
        let n: usize = a.layout().iter().map(|(_, s)| s.iter().product::<usize>()).sum();
        assert_eq!(n, 65);
    }

    #[test]
    fn deeponet_shapes() {
        let mlp = |i, o| MlpSpec {
            in_dim: i,
            hidden: vec![8],
            out_dim: o,
            activation: Activation::Tanh,
            activate_last: false,
        };
        let a = Arch::DeepONet {
            branch: mlp(1, 4),
            trunk: mlp(2, 4),
        };
        assert_eq!(
            a.output_shape(&[vec![5, 1, 1], vec![5, 1, 7, 2]]).unwrap(),
            vec![5, 1, 7, 1]
        );
        assert!(a.output_shape(&[vec![5, 1, 2], vec![5, 1, 7, 2]]).is_err());
    }
}
