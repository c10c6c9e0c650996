//! Variational residuals with a traced trial expression, and evaluation of
//! nodal fields.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use super::assemble::{integrand, test_functions};
use super::weak::{GroupedWeakForm, WeakTerm};
use super::{FemError, FemSetup, Result};
use crate::domain::Domain;
use crate::evaluator::{EvalError, Session};
use crate::tensor::{broadcast_shape, CsrMatrix, Tensor, Var};
use crate::trace::{Expr, NodeKind};

/// Lowered weak form tested against the hat functions of the free dofs.
pub struct VpinnPlan {
    setup: Arc<FemSetup>,
    dim: usize,
    /// Per region: its terms and the `free × (Q·k)` weighted scatter.
    regions: BTreeMap<String, (Vec<WeakTerm>, Arc<CsrMatrix>)>,
}

impl VpinnPlan {
    pub(crate) fn build(domain: &Domain, form: GroupedWeakForm, trial: &Expr) -> Result<Expr> {
        if trial.any_node(|n| matches!(n.kind(), NodeKind::Trial | NodeKind::Test)) {
            return Err(FemError::TrialSymbolRemaining);
        }
        let setup = domain.fem_arc()?;
        let mut slot = vec![usize::MAX; setup.num_dofs()];
        for (i, &v) in setup.free_dofs().iter().enumerate() {
            slot[v] = i;
        }
        let mut regions: BTreeMap<String, (Vec<WeakTerm>, Arc<CsrMatrix>)> = BTreeMap::new();
        for t in form.terms {
            if let Some(r) = regions.get_mut(&t.region) {
                r.0.push(t);
                continue;
            }
            let reg = setup.region(&t.region).expect("grouped region");
            let k = reg.k;
            let mut e = Vec::new();
            for q in 0..reg.len() {
                for b in 0..k {
                    let i = slot[reg.nodes[q * k + b]];
                    if i != usize::MAX {
                        e.push((i, q * k + b, reg.weights[q]));
                    }
                }
            }
            let s = CsrMatrix::from_triplets(setup.free_dofs().len(), reg.len() * k, &e);
            regions.insert(t.region.clone(), (vec![t], Arc::new(s)));
        }
        let plan = VpinnPlan {
            setup,
            dim: domain.dim(),
            regions,
        };
        Ok(Expr::raw(
            NodeKind::WeakResidual(Arc::new(plan)),
            vec![trial.clone()],
            Some("vpinn".into()),
        ))
    }

    pub fn num_tests(&self) -> usize {
        self.setup.free_dofs().len()
    }
}

/// `Σ_i r_i²` with `r_i` the weak residual against the `i`-th free hat.
pub(crate) fn eval_weak_residual(
    s: &mut Session<'_>,
    frame: usize,
    e: &Expr,
) -> crate::evaluator::Result<Var> {
    let NodeKind::WeakResidual(plan) = e.kind() else {
        unreachable!("weak residual handler")
    };
    let trial = &e.children()[0];
    let mut total: Option<Var> = None;
    for (terms, scatter) in plan.regions.values() {
        let reg = plan
            .setup
            .region(&terms[0].region)
            .expect("grouped region");
        let (q, k) = (reg.len(), reg.k);
        let rf = s.push_region(frame, &reg.points, plan.dim, None, HashMap::new());
        let tv = s.eval_in(rf, trial)?;
        s.bind_in(rf, plan.setup.trial().id(), tv);
        let test = test_functions(s, rf, reg, plan.dim)?;
        s.bind_in(rf, plan.setup.test().id(), test);
        let refs: Vec<&WeakTerm> = terms.iter().collect();
        let acc = integrand(s, rf, &refs, q, k)?;
        let sh = s.value(acc).shape().to_vec();
        let flat = s.tape.reshape(acc, &[sh[0], sh[1], q * k, 1])?;
        let r = s.tape.point_map(flat, scatter.clone(), 2)?;
        total = Some(match total {
            None => r,
            Some(t) => {
                let (a, b) = (s.value(t).shape().to_vec(), s.value(r).shape().to_vec());
                let target = broadcast_shape(&a, &b).ok_or_else(|| {
                    EvalError::Unsupported(format!(
                        "region residuals shaped {a:?} and {b:?} do not combine"
                    ))
                })?;
                let (t, r) = (s.tape.broadcast_to(t, &target)?, s.tape.broadcast_to(r, &target)?);
                s.tape.add(t, r)?
            }
        });
    }
    let r = total.expect("a weak form has at least one term");
    let sq = s.tape.mul(r, r)?;
    Ok(s.tape.sum(sq, None, false)?)
}

/// Piecewise-linear interpolation at the child coordinates. The value is the
/// element-local affine function of the coordinate variables, so derivatives
/// with respect to them are the element gradients.
pub(crate) fn eval_field(
    s: &mut Session<'_>,
    frame: usize,
    e: &Expr,
) -> crate::evaluator::Result<Var> {
    let NodeKind::Field(f) = e.kind() else {
        unreachable!("field handler")
    };
    let d = f.mesh.dim();
    let mut xs = Vec::with_capacity(d);
    for c in e.children() {
        xs.push(s.eval_in(frame, c)?);
    }
    let mut shape = s.value(xs[0]).shape().to_vec();
    for &x in &xs[1..] {
        let sx = s.value(x).shape().to_vec();
        shape = broadcast_shape(&shape, &sx).ok_or_else(|| {
            EvalError::Unsupported(format!("field coordinates shaped {shape:?} and {sx:?}"))
        })?;
    }
    for x in xs.iter_mut() {
        if s.value(*x).shape() != shape.as_slice() {
            *x = s.tape.broadcast_to(*x, &shape)?;
        }
    }
    let n: usize = shape.iter().product();
    let mut kc = vec![0.0; n];
    let mut gc = vec![vec![0.0; n]; d];
    let mut p = vec![0.0; d];
    for i in 0..n {
        for (c, x) in xs.iter().enumerate() {
            p[c] = s.value(*x).data()[i];
        }
        let (el, _) = f
            .locator
            .locate(&p)
            .ok_or_else(|| EvalError::PointOutsideMesh(p.clone()))?;
        let (c, g) = f.mesh.barycentric_map(el);
        for (b, &v) in f.mesh.element(el).iter().enumerate() {
            let u = f.values[v];
            kc[i] += u * c[b];
            for (j, gj) in gc.iter_mut().enumerate() {
                gj[i] += u * g[b * d + j];
            }
        }
    }
    let mut acc = s.tape.constant(Tensor::from_parts(shape.clone(), kc));
    for (gj, &x) in gc.into_iter().zip(&xs) {
        let gv = s.tape.constant(Tensor::from_parts(shape.clone(), gj));
        let m = s.tape.mul(gv, x)?;
        acc = s.tape.add(acc, m)?;
    }
    Ok(acc)
}
