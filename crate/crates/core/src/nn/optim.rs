//! First-order optimizers and learning-rate schedules.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::NnError;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Schedule {
    Constant(f64),
    /// `init·(alpha + (1−alpha)·(1+cos(π·min(s,decay_steps)/decay_steps))/2)`
    Cosine {
        init: f64,
        decay_steps: u64,
        alpha: f64,
    },
}

impl Schedule {
    pub fn cosine(init: f64, decay_steps: u64, alpha: f64) -> Self {
        Schedule::Cosine {
            init,
            decay_steps,
            alpha,
        }
    }

    pub fn value(&self, step: u64) -> f64 {
        match *self {
            Schedule::Constant(lr) => lr,
            Schedule::Cosine {
                init,
                decay_steps,
                alpha,
            } => {
                if decay_steps == 0 {
                    return init * alpha;
                }
                let frac = step.min(decay_steps) as f64 / decay_steps as f64;
                init * (alpha + (1.0 - alpha) * (1.0 + (PI * frac).cos()) / 2.0)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
    AdamW,
}

/// Hyperparameters replaced for parameters under a path prefix.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupOverride {
    pub lr: Option<Schedule>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub eps: Option<f64>,
    pub weight_decay: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSpec {
    pub kind: OptimizerKind,
    pub lr: Schedule,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub overrides: Vec<(String, GroupOverride)>,
}

/// Hyperparameters in effect for one parameter path.
#[derive(Clone, Debug, PartialEq)]
pub struct Resolved {
    pub lr: Schedule,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl OptimizerSpec {
    fn base(kind: OptimizerKind, lr: Schedule, weight_decay: f64) -> Self {
        OptimizerSpec {
            kind,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            overrides: Vec::new(),
        }
    }

    pub fn sgd(lr: impl Into<Schedule>) -> Self {
        Self::base(OptimizerKind::Sgd, lr.into(), 0.0)
    }

    pub fn adam(lr: impl Into<Schedule>) -> Self {
        Self::base(OptimizerKind::Adam, lr.into(), 0.0)
    }

    pub fn adamw(lr: impl Into<Schedule>, weight_decay: f64) -> Self {
        Self::base(OptimizerKind::AdamW, lr.into(), weight_decay)
    }

    pub fn with_override(mut self, prefix: &str, o: GroupOverride) -> Self {
        self.overrides.push((prefix.to_string(), o));
        self
    }

    /// Base hyperparameters with the longest matching prefix override applied.
    pub fn resolve(&self, path: &str) -> Resolved {
        let mut r = Resolved {
            lr: self.lr.clone(),
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        };
        let best = self
            .overrides
            .iter()
            .filter(|(p, _)| path.starts_with(p.as_str()))
            .max_by_key(|(p, _)| p.len());
        if let Some((_, o)) = best {
            if let Some(lr) = &o.lr {
                r.lr = lr.clone();
            }
            r.beta1 = o.beta1.unwrap_or(r.beta1);
            r.beta2 = o.beta2.unwrap_or(r.beta2);
            r.eps = o.eps.unwrap_or(r.eps);
            r.weight_decay = o.weight_decay.unwrap_or(r.weight_decay);
        }
        r
    }
}

impl From<f64> for Schedule {
    fn from(v: f64) -> Self {
        Schedule::Constant(v)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

/// One update of every parameter that has a gradient. Parameters without a
/// gradient are returned unchanged.
pub fn optimizer_step(
    spec: &OptimizerSpec,
    state: &OptimizerState,
    params: &BTreeMap<String, Tensor>,
    grads: &BTreeMap<String, Tensor>,
) -> Result<(BTreeMap<String, Tensor>, OptimizerState), NnError> {
    let step = state.step;
    let t = (step + 1) as i32;
    let mut new_params = params.clone();
    let mut new_state = OptimizerState {
        step: step + 1,
        m: state.m.clone(),
        v: state.v.clone(),
    };
    for (path, g) in grads {
        let p = params
            .get(path)
            .ok_or_else(|| NnError::UnknownPath(path.clone()))?;
        if p.shape() != g.shape() {
            return Err(NnError::StateShapeMismatch(path.clone()));
        }
        let h = spec.resolve(path);
        let lr = h.lr.value(step);
        let pd = p.data();
        let gd = g.data();
        let updated: Vec<f64> = match spec.kind {
            OptimizerKind::Sgd => pd.iter().zip(gd).map(|(p, g)| p - lr * g).collect(),
            OptimizerKind::Adam | OptimizerKind::AdamW => {
                let zeros = || Tensor::zeros(g.shape());
                let m0 = state.m.get(path).cloned().unwrap_or_else(zeros);
                let v0 = state.v.get(path).cloned().unwrap_or_else(zeros);
                if m0.shape() != g.shape() || v0.shape() != g.shape() {
                    return Err(NnError::StateShapeMismatch(path.clone()));
                }
                let (b1, b2) = (h.beta1, h.beta2);
                let c1 = 1.0 - b1.powi(t);
                let c2 = 1.0 - b2.powi(t);
                let decay = if spec.kind == OptimizerKind::AdamW {
                    lr * h.weight_decay
                } else {
                    0.0
                };
                let mut m = Vec::with_capacity(gd.len());
                let mut v = Vec::with_capacity(gd.len());
                let mut out = Vec::with_capacity(gd.len());
                for i in 0..gd.len() {
                    let mi = b1 * m0.data()[i] + (1.0 - b1) * gd[i];
                    let vi = b2 * v0.data()[i] + (1.0 - b2) * gd[i] * gd[i];
                    let mhat = mi / c1;
                    let vhat = vi / c2;
                    let mut pi = pd[i];
                    if decay != 0.0 {
                        pi -= decay * pi;
                    }
                    out.push(pi - lr * mhat / (vhat.sqrt() + h.eps));
                    m.push(mi);
                    v.push(vi);
                }
                new_state
                    .m
                    .insert(path.clone(), Tensor::from_parts(g.shape().to_vec(), m));
                new_state
                    .v
                    .insert(path.clone(), Tensor::from_parts(g.shape().to_vec(), v));
                out
            }
        };
        new_params.insert(
            path.clone(),
            Tensor::from_parts(p.shape().to_vec(), updated).with_precision(p.precision()),
        );
    }
    Ok((new_params, new_state))
}
