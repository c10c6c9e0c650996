//! Common sub-expression elimination by hash-consing.
//!
//! Every node is assigned a structural class: the key is the node's payload
//! plus the classes of its children. Leaves that carry identity (variables,
//! constants, tensor tags, trial/test symbols) key on their identity token,
//! literals on their bit pattern. Operation calls key on their body with the
//! formal parameters replaced by the argument classes, so two calls of one
//! definition with equal arguments collapse even though the body is stored
//! only once.

use std::collections::HashMap;
use std::sync::Arc;

use super::{Expr, NodeKind};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CseStats {
    pub nodes_before: usize,
    pub nodes_after: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
enum Payload {
    Identity(u64),
    Literal(u64),
    Call(u64),
    Op(String),
}

type Key = (Payload, Vec<u64>);

#[derive(Default)]
struct Interner {
    classes: HashMap<Key, u64>,
    next: u64,
}

impl Interner {
    fn class(&mut self, key: Key) -> u64 {
        let next = &mut self.next;
        *self.classes.entry(key).or_insert_with(|| {
            *next += 1;
            *next
        })
    }
}

fn payload(e: &Expr) -> Payload {
    match e.kind() {
        NodeKind::Variable(_)
        | NodeKind::Constant(_)
        | NodeKind::TensorTag(_)
        | NodeKind::Trial
        | NodeKind::Test => Payload::Identity(e.id()),
        NodeKind::Literal(v) => Payload::Literal(v.to_bits()),
        NodeKind::OperationCall(def) => Payload::Call(def.id()),
        NodeKind::Arithmetic(op) => Payload::Op(format!("arith:{}", op.name())),
        NodeKind::Compare(op) => Payload::Op(format!("cmp:{}", op.symbol())),
        NodeKind::Reduce { op, axes } => Payload::Op(format!("reduce:{}:{axes:?}", op.name())),
        NodeKind::Slice(s) => Payload::Op(format!("slice:{s:?}")),
        NodeKind::Concat(a) => Payload::Op(format!("concat:{a}")),
        NodeKind::Derivative { order, mode } => Payload::Op(format!("d:{order}:{mode:?}")),
        NodeKind::Jacobian => Payload::Op("jacobian".into()),
        NodeKind::Hessian => Payload::Op("hessian".into()),
        NodeKind::ModelCall(m) => Payload::Op(format!("model:{}", m.id())),
        NodeKind::Tracker(i) => Payload::Op(format!("tracker:{i}")),
        NodeKind::Field(f) => Payload::Op(format!("field:{:p}", Arc::as_ptr(f))),
        NodeKind::WeakResidual(p) => Payload::Op(format!("weak:{:p}", Arc::as_ptr(p))),
    }
}

/// Class of `body` with parameter nodes mapped to the given classes.
/// Nodes met here are keyed but not materialized.
fn substituted_class(interner: &mut Interner, body: &Expr, subst: &HashMap<u64, u64>) -> u64 {
    let mut local: HashMap<u64, u64> = HashMap::new();
    for n in Expr::post_order(std::slice::from_ref(body)) {
        let class = if let Some(&c) = subst.get(&n.id()) {
            c
        } else {
            let cs: Vec<u64> = n.children().iter().map(|c| local[&c.id()]).collect();
            key_class(interner, &n, cs)
        };
        local.insert(n.id(), class);
    }
    local[&body.id()]
}

fn key_class(interner: &mut Interner, n: &Expr, child_classes: Vec<u64>) -> u64 {
    match n.kind() {
        NodeKind::OperationCall(def) => {
            let subst: HashMap<u64, u64> = def
                .params()
                .iter()
                .map(|p| p.id())
                .zip(child_classes)
                .collect();
            let body = substituted_class(interner, def.body(), &subst);
            interner.class((Payload::Call(def.id()), vec![body]))
        }
        _ => interner.class((payload(n), child_classes)),
    }
}

/// Canonicalize the graphs under `roots`, sharing structurally identical
/// subtrees. Returns the new roots in the same order.
pub fn cse(roots: &[Expr]) -> (Vec<Expr>, CseStats) {
    let order = Expr::post_order(roots);
    let mut interner = Interner::default();
    let mut class_of: HashMap<u64, u64> = HashMap::new();
    let mut canonical: HashMap<u64, Expr> = HashMap::new();
    for n in &order {
        let cs: Vec<u64> = n.children().iter().map(|c| class_of[&c.id()]).collect();
        let class = key_class(&mut interner, n, cs.clone());
        class_of.insert(n.id(), class);
        if canonical.contains_key(&class) {
            continue;
        }
        let kids: Vec<Expr> = cs.iter().map(|c| canonical[c].clone()).collect();
        let same = kids.iter().zip(n.children()).all(|(a, b)| a == b);
        let node = if same {
            n.clone()
        } else {
            Expr::raw(n.kind().clone(), kids, n.name().map(str::to_string))
        };
        canonical.insert(class, node);
    }
    let out: Vec<Expr> = roots
        .iter()
        .map(|r| canonical[&class_of[&r.id()]].clone())
        .collect();
    let stats = CseStats {
        nodes_before: order.len(),
        nodes_after: Expr::post_order(&out).len(),
    };
    (out, stats)
}
