//! Deferred expression graphs.
//!
//! Every symbol in a program is an [`Expr`]: building `x + y` allocates a node
//! and returns immediately, nothing is computed until the graph is handed to
//! the [`Evaluator`](crate::evaluator::Evaluator). Nodes compare and hash by a
//! unique identity token, so two variables with the same name are different
//! symbols and a node inserted twice into a set occupies one slot.

mod cse;
mod dump;
mod operation;
mod shapes;

use std::fmt;
use std::hash::{Hash, Hasher};
use std::ops;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use thiserror::Error;

use crate::fem::{NodalField, VpinnPlan};
use crate::nn::Model;
use crate::tensor::{CmpOp, Tensor};

pub use cse::{cse, CseStats};
pub use dump::dump_tree;
pub use operation::OperationDef;
pub use shapes::{print_shapes, trace_shapes, ShapeReport};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TraceError {
    #[error("{kind} expects {expected} children, got {got}")]
    ArityMismatch {
        kind: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("node #{0} is not a variable and cannot be differentiated against")]
    NotAVariable(u64),
    #[error("derivative order must be 1 or 2, got {0}")]
    BadOrder(u8),
    #[error("no binding for formal parameter {0}")]
    MissingBinding(String),
    #[error("binding for {0} is not a formal parameter")]
    ExtraBinding(String),
    #[error("formal parameter {0} is not a free variable")]
    NotAParameter(String),
    #[error("free variable {0} in operation body is not a formal parameter")]
    UnboundBodyVariable(String),
    #[error("tracker interval must be positive")]
    NonPositiveInterval,
    #[error("shape inference failed at node #{node} ({label}): {reason}")]
    ShapeInferenceFailure {
        node: u64,
        label: String,
        reason: String,
    },
}

pub type Result<T> = std::result::Result<T, TraceError>;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

pub(crate) fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// Where a variable takes its value from at evaluation time.
#[derive(Clone, Debug, PartialEq)]
pub enum VarSource {
    /// Coordinates of a tagged point set; `col = None` binds all columns.
    Coordinate { tag: String, col: Option<usize> },
    /// The `__time__` entry broadcast over the points of `tag`.
    Time { tag: String },
    /// A tensor registered on the domain under this name.
    Tensor(String),
    /// Bound explicitly by the caller, or a formal parameter of an operation.
    Free,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ArithOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
    Maximum,
    Minimum,
    Neg,
    Exp,
    Log,
    Sin,
    Cos,
    Tanh,
    Relu,
    Sqrt,
    Abs,
}

impl ArithOp {
    pub fn arity(self) -> usize {
        use ArithOp::*;
        match self {
            Add | Sub | Mul | Div | Pow | Maximum | Minimum => 2,
            _ => 1,
        }
    }

    pub fn name(self) -> &'static str {
        use ArithOp::*;
        match self {
            Add => "add",
            Sub => "sub",
            Mul => "mul",
            Div => "div",
            Pow => "pow",
            Maximum => "maximum",
            Minimum => "minimum",
            Neg => "neg",
            Exp => "exp",
            Log => "log",
            Sin => "sin",
            Cos => "cos",
            Tanh => "tanh",
            Relu => "relu",
            Sqrt => "sqrt",
            Abs => "abs",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ReduceOp {
    Mean,
    Sum,
    Mse,
}

impl ReduceOp {
    pub fn name(self) -> &'static str {
        match self {
            ReduceOp::Mean => "mean",
            ReduceOp::Sum => "sum",
            ReduceOp::Mse => "mse",
        }
    }
}

/// Symbolic indexing along one axis.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum SliceSpec {
    /// `a[..., i, ...]`: selects one entry and drops the axis.
    Index { axis: isize, index: isize },
    /// `a[..., start:end:step, ...]`; `end = None` runs to the extent.
    Range {
        axis: isize,
        start: usize,
        end: Option<usize>,
        step: usize,
    },
}

/// How a derivative node is resolved.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum DiffMode {
    /// Use the evaluator's global mode.
    #[default]
    Default,
    Auto,
    FiniteDifference,
}

#[derive(Clone)]
pub enum NodeKind {
    Variable(VarSource),
    Literal(f64),
    Constant(Tensor),
    TensorTag(String),
    Arithmetic(ArithOp),
    Compare(CmpOp),
    Reduce {
        op: ReduceOp,
        axes: Option<Vec<isize>>,
    },
    Slice(SliceSpec),
    Concat(isize),
    /// children: `[expr, wrt]`
    Derivative {
        order: u8,
        mode: DiffMode,
    },
    /// Dense Jacobian of `expr` w.r.t. `wrt`, shape `(numel(expr), numel(wrt))`.
    Jacobian,
    /// Dense Hessian of a scalar `expr`, shape `(numel(wrt), numel(wrt))`.
    Hessian,
    ModelCall(Model),
    /// children: the bound arguments, in formal-parameter order.
    OperationCall(Arc<OperationDef>),
    Tracker(u32),
    Trial,
    Test,
    /// Piecewise-linear interpolant of nodal values; children are the
    /// coordinate expressions.
    Field(Arc<NodalField>),
    /// Variational residual; the single child is the trial expression.
    WeakResidual(Arc<VpinnPlan>),
}

/// Discriminant of [`NodeKind`] used to key evaluation handlers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum KindTag {
    Variable,
    Literal,
    Constant,
    TensorTag,
    Arithmetic,
    Compare,
    Reduce,
    Slice,
    Concat,
    Derivative,
    Jacobian,
    Hessian,
    ModelCall,
    OperationCall,
    Tracker,
    Trial,
    Test,
    Field,
    WeakResidual,
}

impl KindTag {
    pub const ALL: [KindTag; 19] = [
        KindTag::Variable,
        KindTag::Literal,
        KindTag::Constant,
        KindTag::TensorTag,
        KindTag::Arithmetic,
        KindTag::Compare,
        KindTag::Reduce,
        KindTag::Slice,
        KindTag::Concat,
        KindTag::Derivative,
        KindTag::Jacobian,
        KindTag::Hessian,
        KindTag::ModelCall,
        KindTag::OperationCall,
        KindTag::Tracker,
        KindTag::Trial,
        KindTag::Test,
        KindTag::Field,
        KindTag::WeakResidual,
    ];
}

impl NodeKind {
    pub fn tag(&self) -> KindTag {
        match self {
            NodeKind::Variable(_) => KindTag::Variable,
            NodeKind::Literal(_) => KindTag::Literal,
            NodeKind::Constant(_) => KindTag::Constant,
            NodeKind::TensorTag(_) => KindTag::TensorTag,
            NodeKind::Arithmetic(_) => KindTag::Arithmetic,
            NodeKind::Compare(_) => KindTag::Compare,
            NodeKind::Reduce { .. } => KindTag::Reduce,
            NodeKind::Slice(_) => KindTag::Slice,
            NodeKind::Concat(_) => KindTag::Concat,
            NodeKind::Derivative { .. } => KindTag::Derivative,
            NodeKind::Jacobian => KindTag::Jacobian,
            NodeKind::Hessian => KindTag::Hessian,
            NodeKind::ModelCall(_) => KindTag::ModelCall,
            NodeKind::OperationCall(_) => KindTag::OperationCall,
            NodeKind::Tracker(_) => KindTag::Tracker,
            NodeKind::Trial => KindTag::Trial,
            NodeKind::Test => KindTag::Test,
            NodeKind::Field(_) => KindTag::Field,
            NodeKind::WeakResidual(_) => KindTag::WeakResidual,
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            NodeKind::Variable(_)
            | NodeKind::Literal(_)
            | NodeKind::Constant(_)
            | NodeKind::TensorTag(_)
            | NodeKind::Trial
            | NodeKind::Test => Some(0),
            NodeKind::Arithmetic(op) => Some(op.arity()),
            NodeKind::Compare(_) => Some(2),
            NodeKind::Reduce { .. } | NodeKind::Slice(_) | NodeKind::Tracker(_) => Some(1),
            NodeKind::Derivative { .. } | NodeKind::Jacobian | NodeKind::Hessian => Some(2),
            NodeKind::OperationCall(def) => Some(def.params().len()),
            NodeKind::WeakResidual(_) => Some(1),
            NodeKind::Concat(_) | NodeKind::ModelCall(_) | NodeKind::Field(_) => None,
        }
    }

    fn kind_name(&self) -> &'static str {
        match self.tag() {
            KindTag::Variable => "Variable",
            KindTag::Literal => "Literal",
            KindTag::Constant => "Constant",
            KindTag::TensorTag => "TensorTag",
            KindTag::Arithmetic => "Arithmetic",
            KindTag::Compare => "Compare",
            KindTag::Reduce => "Reduce",
            KindTag::Slice => "Slice",
            KindTag::Concat => "Concat",
            KindTag::Derivative => "Derivative",
            KindTag::Jacobian => "Jacobian",
            KindTag::Hessian => "Hessian",
            KindTag::ModelCall => "ModelCall",
            KindTag::OperationCall => "OperationCall",
            KindTag::Tracker => "Tracker",
            KindTag::Trial => "Trial",
            KindTag::Test => "Test",
            KindTag::Field => "Field",
            KindTag::WeakResidual => "WeakResidual",
        }
    }
}

pub struct Node {
    id: u64,
    kind: NodeKind,
    children: Vec<Expr>,
    name: Option<String>,
}

/// Shared handle to an immutable graph node.
#[derive(Clone)]
pub struct Expr(Arc<Node>);

impl Expr {
    /// Build a node, checking the child count against the kind.
    pub fn build(kind: NodeKind, children: Vec<Expr>, name: Option<String>) -> Result<Expr> {
        if let Some(expected) = kind.arity() {
            if children.len() != expected {
                return Err(TraceError::ArityMismatch {
                    kind: kind.kind_name(),
                    expected,
                    got: children.len(),
                });
            }
        } else if children.is_empty() {
            return Err(TraceError::ArityMismatch {
                kind: kind.kind_name(),
                expected: 1,
                got: 0,
            });
        }
        Ok(Self::raw(kind, children, name))
    }

    pub(crate) fn raw(kind: NodeKind, children: Vec<Expr>, name: Option<String>) -> Expr {
        Expr(Arc::new(Node {
            id: fresh_id(),
            kind,
            children,
            name,
        }))
    }

    fn op(op: ArithOp, children: Vec<Expr>) -> Expr {
        Self::raw(NodeKind::Arithmetic(op), children, None)
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn kind(&self) -> &NodeKind {
        &self.0.kind
    }

    pub fn children(&self) -> &[Expr] {
        &self.0.children
    }

    pub fn name(&self) -> Option<&str> {
        self.0.name.as_deref()
    }

    /// A copy of this node carrying a name annotation. The copy is a new
    /// symbol with its own identity.
    pub fn named(&self, name: &str) -> Expr {
        Self::raw(self.0.kind.clone(), self.0.children.clone(), Some(name.to_string()))
    }

    pub fn literal(v: f64) -> Expr {
        Self::raw(NodeKind::Literal(v), vec![], None)
    }

    pub fn constant(t: Tensor) -> Expr {
        Self::raw(NodeKind::Constant(t), vec![], None)
    }

    /// A free variable, bound explicitly at evaluation time.
    pub fn var(name: &str) -> Expr {
        Self::raw(NodeKind::Variable(VarSource::Free), vec![], Some(name.to_string()))
    }

    pub fn variable(source: VarSource, name: &str) -> Expr {
        Self::raw(NodeKind::Variable(source), vec![], Some(name.to_string()))
    }

    pub fn tensor_tag(name: &str) -> Expr {
        Self::raw(NodeKind::TensorTag(name.to_string()), vec![], Some(name.to_string()))
    }

    pub fn is_variable(&self) -> bool {
        matches!(self.kind(), NodeKind::Variable(_) | NodeKind::TensorTag(_))
    }

    pub fn is_temporal_variable(&self) -> bool {
        matches!(self.kind(), NodeKind::Variable(VarSource::Time { .. }))
    }

    pub fn pow(&self, e: impl IntoExpr) -> Expr {
        Self::op(ArithOp::Pow, vec![self.clone(), e.into_expr()])
    }
    pub fn powf(&self, p: f64) -> Expr {
        self.pow(p)
    }
    pub fn maximum(&self, o: impl IntoExpr) -> Expr {
        Self::op(ArithOp::Maximum, vec![self.clone(), o.into_expr()])
    }
    pub fn minimum(&self, o: impl IntoExpr) -> Expr {
        Self::op(ArithOp::Minimum, vec![self.clone(), o.into_expr()])
    }
    pub fn exp(&self) -> Expr {
        Self::op(ArithOp::Exp, vec![self.clone()])
    }
    pub fn log(&self) -> Expr {
        Self::op(ArithOp::Log, vec![self.clone()])
    }
    pub fn sin(&self) -> Expr {
        Self::op(ArithOp::Sin, vec![self.clone()])
    }
    pub fn cos(&self) -> Expr {
        Self::op(ArithOp::Cos, vec![self.clone()])
    }
    pub fn tanh(&self) -> Expr {
        Self::op(ArithOp::Tanh, vec![self.clone()])
    }
    pub fn relu(&self) -> Expr {
        Self::op(ArithOp::Relu, vec![self.clone()])
    }
    pub fn sqrt(&self) -> Expr {
        Self::op(ArithOp::Sqrt, vec![self.clone()])
    }
    pub fn abs(&self) -> Expr {
        Self::op(ArithOp::Abs, vec![self.clone()])
    }

    fn cmp(&self, o: impl IntoExpr, op: CmpOp) -> Expr {
        Self::raw(NodeKind::Compare(op), vec![self.clone(), o.into_expr()], None)
    }
    pub fn lt(&self, o: impl IntoExpr) -> Expr {
        self.cmp(o, CmpOp::Lt)
    }
    pub fn le(&self, o: impl IntoExpr) -> Expr {
        self.cmp(o, CmpOp::Le)
    }
    pub fn gt(&self, o: impl IntoExpr) -> Expr {
        self.cmp(o, CmpOp::Gt)
    }
    pub fn ge(&self, o: impl IntoExpr) -> Expr {
        self.cmp(o, CmpOp::Ge)
    }
    pub fn equal(&self, o: impl IntoExpr) -> Expr {
        self.cmp(o, CmpOp::Eq)
    }
    pub fn not_equal(&self, o: impl IntoExpr) -> Expr {
        self.cmp(o, CmpOp::Ne)
    }

    fn reduce(&self, op: ReduceOp, axes: Option<&[isize]>) -> Expr {
        Self::raw(
            NodeKind::Reduce {
                op,
                axes: axes.map(|a| a.to_vec()),
            },
            vec![self.clone()],
            None,
        )
    }
    /// Mean of squares over all axes.
    pub fn mse(&self) -> Expr {
        self.reduce(ReduceOp::Mse, None)
    }
    pub fn mean(&self) -> Expr {
        self.reduce(ReduceOp::Mean, None)
    }
    pub fn sum(&self) -> Expr {
        self.reduce(ReduceOp::Sum, None)
    }
    pub fn mse_axes(&self, axes: &[isize]) -> Expr {
        self.reduce(ReduceOp::Mse, Some(axes))
    }
    pub fn mean_axes(&self, axes: &[isize]) -> Expr {
        self.reduce(ReduceOp::Mean, Some(axes))
    }
    pub fn sum_axes(&self, axes: &[isize]) -> Expr {
        self.reduce(ReduceOp::Sum, Some(axes))
    }

    pub fn index(&self, axis: isize, index: isize) -> Expr {
        Self::raw(
            NodeKind::Slice(SliceSpec::Index { axis, index }),
            vec![self.clone()],
            None,
        )
    }

    pub fn slice(&self, axis: isize, start: usize, end: Option<usize>, step: usize) -> Expr {
        Self::raw(
            NodeKind::Slice(SliceSpec::Range {
                axis,
                start,
                end,
                step: step.max(1),
            }),
            vec![self.clone()],
            None,
        )
    }

    pub fn concat(parts: &[Expr], axis: isize) -> Expr {
        assert!(!parts.is_empty(), "concat of zero expressions");
        Self::raw(NodeKind::Concat(axis), parts.to_vec(), None)
    }

    /// Derivative node of order 1 or 2 with respect to a variable.
    pub fn derivative(&self, wrt: &Expr, order: u8, mode: DiffMode) -> Result<Expr> {
        if !wrt.is_variable() {
            return Err(TraceError::NotAVariable(wrt.id()));
        }
        if !(1..=2).contains(&order) {
            return Err(TraceError::BadOrder(order));
        }
        Ok(Self::raw(
            NodeKind::Derivative { order, mode },
            vec![self.clone(), wrt.clone()],
            None,
        ))
    }

    /// First derivative.
    ///
    /// # Panics
    /// If `wrt` is not a variable; use [`Expr::derivative`] for a fallible form.
    pub fn d(&self, wrt: &Expr) -> Expr {
        self.derivative(wrt, 1, DiffMode::Default)
            .unwrap_or_else(|e| panic!("{e}"))
    }

    /// Second derivative.
    ///
    /// # Panics
    /// If `wrt` is not a variable.
    pub fn dd(&self, wrt: &Expr) -> Expr {
        self.derivative(wrt, 2, DiffMode::Default)
            .unwrap_or_else(|e| panic!("{e}"))
    }

    pub fn jacobian(&self, wrt: &Expr) -> Result<Expr> {
        if !wrt.is_variable() {
            return Err(TraceError::NotAVariable(wrt.id()));
        }
        Ok(Self::raw(NodeKind::Jacobian, vec![self.clone(), wrt.clone()], None))
    }

    pub fn hessian(&self, wrt: &Expr) -> Result<Expr> {
        if !wrt.is_variable() {
            return Err(TraceError::NotAVariable(wrt.id()));
        }
        Ok(Self::raw(NodeKind::Hessian, vec![self.clone(), wrt.clone()], None))
    }

    /// Monitor this expression every `interval` outer steps.
    pub fn tracker(&self, interval: u32) -> Result<Expr> {
        if interval == 0 {
            return Err(TraceError::NonPositiveInterval);
        }
        Ok(Self::raw(NodeKind::Tracker(interval), vec![self.clone()], None))
    }

    /// Short human-readable description of the node (no children).
    pub fn label(&self) -> String {
        let base = match self.kind() {
            NodeKind::Variable(src) => match src {
                VarSource::Coordinate { tag, col: Some(c) } => format!("Variable {tag}[{c}]"),
                VarSource::Coordinate { tag, col: None } => format!("Variable {tag}[:]"),
                VarSource::Time { tag } => format!("Variable {tag}[time]"),
                VarSource::Tensor(n) => format!("Variable tensor {n}"),
                VarSource::Free => "Variable".to_string(),
            },
            NodeKind::Literal(v) => format!("Literal {v:?}"),
            NodeKind::Constant(t) => format!("Constant {}", crate::tensor::shape_string(t.shape())),
            NodeKind::TensorTag(n) => format!("TensorTag {n}"),
            NodeKind::Arithmetic(op) => op.name().to_string(),
            NodeKind::Compare(op) => format!("compare {}", op.symbol()),
            NodeKind::Reduce { op, axes } => match axes {
                None => op.name().to_string(),
                Some(a) => format!("{} axes={a:?}", op.name()),
            },
            NodeKind::Slice(SliceSpec::Index { axis, index }) => {
                format!("index axis={axis} [{index}]")
            }
            NodeKind::Slice(SliceSpec::Range {
                axis,
                start,
                end,
                step,
            }) => match end {
                Some(e) => format!("slice axis={axis} [{start}:{e}:{step}]"),
                None => format!("slice axis={axis} [{start}::{step}]"),
            },
            NodeKind::Concat(a) => format!("concat axis={a}"),
            NodeKind::Derivative { order, mode } => {
                let m = match mode {
                    DiffMode::Default => "",
                    DiffMode::Auto => " ad",
                    DiffMode::FiniteDifference => " fd",
                };
                format!("d{order}{m}")
            }
            NodeKind::Jacobian => "jacobian".to_string(),
            NodeKind::Hessian => "hessian".to_string(),
            NodeKind::ModelCall(m) => format!("call {}", m.name()),
            NodeKind::OperationCall(def) => format!("operation {}", def.name()),
            NodeKind::Tracker(i) => format!("tracker every {i}"),
            NodeKind::Trial => "Trial".to_string(),
            NodeKind::Test => "Test".to_string(),
            NodeKind::Field(_) => "Field".to_string(),
            NodeKind::WeakResidual(_) => "WeakResidual".to_string(),
        };
        match self.name() {
            Some(n) if !matches!(self.kind(), NodeKind::TensorTag(_)) => format!("{base} \"{n}\""),
            _ => base,
        }
    }

    /// All nodes reachable through children, each once, in post-order.
    pub fn post_order(roots: &[Expr]) -> Vec<Expr> {
        let mut seen = std::collections::HashSet::new();
        let mut out = Vec::new();
        for r in roots {
            let mut stack: Vec<(Expr, usize)> = vec![(r.clone(), 0)];
            if !seen.insert(r.id()) {
                continue;
            }
            while let Some((node, i)) = stack.pop() {
                if i < node.children().len() {
                    let c = node.children()[i].clone();
                    stack.push((node, i + 1));
                    if seen.insert(c.id()) {
                        stack.push((c, 0));
                    }
                } else {
                    out.push(node);
                }
            }
        }
        out
    }

    /// True if any reachable node satisfies `pred`.
    pub fn any_node(&self, pred: impl Fn(&Expr) -> bool) -> bool {
        Self::post_order(std::slice::from_ref(self)).iter().any(pred)
    }
}

impl PartialEq for Expr {
    fn eq(&self, other: &Self) -> bool {
        self.id() == other.id()
    }
}

impl Eq for Expr {}

impl Hash for Expr {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.id().hash(state)
    }
}

impl fmt::Debug for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{} {}", self.id(), self.label())
    }
}

/// Values usable as operands: expressions and numbers.
pub trait IntoExpr {
    fn into_expr(self) -> Expr;
}

impl IntoExpr for Expr {
    fn into_expr(self) -> Expr {
        self
    }
}

impl IntoExpr for &Expr {
    fn into_expr(self) -> Expr {
        self.clone()
    }
}

impl IntoExpr for f64 {
    fn into_expr(self) -> Expr {
        Expr::literal(self)
    }
}

macro_rules! binop {
    ($trait:ident, $method:ident, $op:expr) => {
        impl<R: IntoExpr> ops::$trait<R> for Expr {
            type Output = Expr;
            fn $method(self, rhs: R) -> Expr {
                Expr::op($op, vec![self, rhs.into_expr()])
            }
        }
        impl<R: IntoExpr> ops::$trait<R> for &Expr {
            type Output = Expr;
            fn $method(self, rhs: R) -> Expr {
                Expr::op($op, vec![self.clone(), rhs.into_expr()])
            }
        }
        impl ops::$trait<Expr> for f64 {
            type Output = Expr;
            fn $method(self, rhs: Expr) -> Expr {
                Expr::op($op, vec![Expr::literal(self), rhs])
            }
        }
        impl ops::$trait<&Expr> for f64 {
            type Output = Expr;
            fn $method(self, rhs: &Expr) -> Expr {
                Expr::op($op, vec![Expr::literal(self), rhs.clone()])
            }
        }
    };
}

binop!(Add, add, ArithOp::Add);
binop!(Sub, sub, ArithOp::Sub);
binop!(Mul, mul, ArithOp::Mul);
binop!(Div, div, ArithOp::Div);

impl ops::Neg for Expr {
    type Output = Expr;
    fn neg(self) -> Expr {
        Expr::op(ArithOp::Neg, vec![self])
    }
}

impl ops::Neg for &Expr {
    type Output = Expr;
    fn neg(self) -> Expr {
        Expr::op(ArithOp::Neg, vec![self.clone()])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn identity_equality() {
        let x = Expr::var("x");
        let x2 = Expr::var("x");
        assert_eq!(x, x.clone());
        assert_ne!(x, x2);
        let mut s = HashSet::new();
        s.insert(x.clone());
        s.insert(x.clone());
        assert_eq!(s.len(), 1);
        s.insert(x2);
        assert_eq!(s.len(), 2);
    }

    #[test]
    fn building_is_deferred() {
        let x = Expr::var("x");
        let y = Expr::var("y");
        let s = &x + &y;
        assert!(matches!(s.kind(), NodeKind::Arithmetic(ArithOp::Add)));
        assert_eq!(s.children().len(), 2);
    }

    #[test]
    fn arity_is_checked() {
        let x = Expr::var("x");
        let err = Expr::build(NodeKind::Arithmetic(ArithOp::Add), vec![x], None).unwrap_err();
        assert!(matches!(err, TraceError::ArityMismatch { expected: 2, got: 1, .. }));
    }

    #[test]
    fn derivative_requires_variable() {
        let x = Expr::var("x");
        let u = &x * &x;
        assert!(matches!(u.derivative(&u, 1, DiffMode::Default), Err(TraceError::NotAVariable(_))));
        let d = u.dd(&x);
        assert!(matches!(d.kind(), NodeKind::Derivative { order: 2, .. }));
    }

    #[test]
    fn tracker_interval_must_be_positive() {
        assert_eq!(Expr::var("x").tracker(0).unwrap_err(), TraceError::NonPositiveInterval);
    }
}
