//! Reusable equation fragments.
//!
//! An [`OperationDef`] is written once against placeholder parameters and
//! instantiated with different arguments. Calls keep a reference to the one
//! body graph; the evaluator substitutes arguments when it walks the body.

use std::sync::Arc;

use super::{Expr, NodeKind, Result, TraceError, VarSource};

pub struct OperationDef {
    id: u64,
    name: String,
    params: Vec<Expr>,
    body: Expr,
}

impl OperationDef {
    /// `params` must be free variables; any other free variable in the body
    /// is rejected. Domain-bound variables, constants and tensor tags may
    /// appear freely.
    pub fn new(name: &str, params: Vec<Expr>, body: Expr) -> Result<Arc<OperationDef>> {
        for p in &params {
            if !matches!(p.kind(), NodeKind::Variable(VarSource::Free)) {
                return Err(TraceError::NotAParameter(p.label()));
            }
        }
        for n in Expr::post_order(std::slice::from_ref(&body)) {
            if matches!(n.kind(), NodeKind::Variable(VarSource::Free)) && !params.contains(&n) {
                return Err(TraceError::UnboundBodyVariable(
                    n.name().unwrap_or("?").to_string(),
                ));
            }
        }
        Ok(Arc::new(OperationDef {
            id: super::fresh_id(),
            name: name.to_string(),
            params,
            body,
        }))
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn params(&self) -> &[Expr] {
        &self.params
    }

    pub fn body(&self) -> &Expr {
        &self.body
    }

    /// Instantiate with arguments in parameter order.
    pub fn apply(self: &Arc<Self>, args: &[Expr]) -> Result<Expr> {
        if args.len() < self.params.len() {
            let p = &self.params[args.len()];
            return Err(TraceError::MissingBinding(p.name().unwrap_or("?").to_string()));
        }
        if args.len() > self.params.len() {
            return Err(TraceError::ExtraBinding(format!("argument {}", self.params.len())));
        }
        Ok(Expr::raw(
            NodeKind::OperationCall(self.clone()),
            args.to_vec(),
            None,
        ))
    }

    /// Instantiate with explicit `(parameter, argument)` pairs.
    pub fn call(self: &Arc<Self>, bindings: &[(&Expr, Expr)]) -> Result<Expr> {
        for (p, _) in bindings {
            if !self.params.contains(p) {
                return Err(TraceError::ExtraBinding(p.name().unwrap_or("?").to_string()));
            }
        }
        let mut args = Vec::with_capacity(self.params.len());
        for p in &self.params {
            match bindings.iter().find(|(q, _)| *q == p) {
                Some((_, a)) => args.push(a.clone()),
                None => {
                    return Err(TraceError::MissingBinding(p.name().unwrap_or("?").to_string()))
                }
            }
        }
        self.apply(&args)
    }
}
