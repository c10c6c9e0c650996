//! Splitting a weak form into region-tagged terms and classifying them.

use std::collections::{BTreeSet, HashMap};

use super::{FemError, FemSetup, Result, VOLUME_REGION};
use crate::trace::{ArithOp, Expr, NodeKind, VarSource};

/// Polynomial degree of a term in the trial field.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum TrialDegree {
    Zero,
    One,
    Nonlinear,
}

#[derive(Clone, Debug)]
pub struct WeakTerm {
    pub expr: Expr,
    pub sign: f64,
    pub region: String,
    pub trial_degree: TrialDegree,
    pub test_degree: TrialDegree,
    /// Carries a time derivative of the trial field.
    pub temporal: bool,
}

#[derive(Clone, Debug)]
pub struct GroupedWeakForm {
    pub terms: Vec<WeakTerm>,
}

impl GroupedWeakForm {
    pub fn volume_terms(&self) -> impl Iterator<Item = &WeakTerm> {
        self.terms.iter().filter(|t| t.region == VOLUME_REGION)
    }

    pub fn boundary_terms(&self) -> impl Iterator<Item = &WeakTerm> {
        self.terms.iter().filter(|t| t.region != VOLUME_REGION)
    }

    pub fn max_trial_degree(&self) -> TrialDegree {
        self.terms
            .iter()
            .map(|t| t.trial_degree)
            .max()
            .unwrap_or(TrialDegree::Zero)
    }

    pub fn temporal_terms(&self) -> usize {
        self.terms.iter().filter(|t| t.temporal).count()
    }

    pub fn regions(&self) -> BTreeSet<&str> {
        self.terms.iter().map(|t| t.region.as_str()).collect()
    }
}

fn split(e: &Expr, sign: f64, out: &mut Vec<(Expr, f64)>) {
    match e.kind() {
        NodeKind::Arithmetic(ArithOp::Add) => {
            split(&e.children()[0], sign, out);
            split(&e.children()[1], sign, out);
        }
        NodeKind::Arithmetic(ArithOp::Sub) => {
            split(&e.children()[0], sign, out);
            split(&e.children()[1], -sign, out);
        }
        NodeKind::Arithmetic(ArithOp::Neg) => split(&e.children()[0], -sign, out),
        _ => out.push((e.clone(), sign)),
    }
}

/// Degree of `e` in the symbol with id `sym`: 0, 1, 2, … or `u32::MAX`
/// when not polynomial.
fn degree(e: &Expr, sym: u64) -> u32 {
    degree_memo(e, sym, &mut HashMap::new())
}

fn degree_memo(e: &Expr, sym: u64, memo: &mut HashMap<u64, u32>) -> u32 {
    if let Some(&d) = memo.get(&e.id()) {
        return d;
    }
    let d = degree_node(e, sym, memo);
    memo.insert(e.id(), d);
    d
}

fn degree_node(e: &Expr, sym: u64, memo: &mut HashMap<u64, u32>) -> u32 {
    const NL: u32 = u32::MAX;
    if e.id() == sym {
        return 1;
    }
    let cd: Vec<u32> = e.children().iter().map(|c| degree_memo(c, sym, memo)).collect();
    if cd.iter().all(|&d| d == 0) {
        return 0;
    }
    match e.kind() {
        NodeKind::Arithmetic(op) => match op {
            ArithOp::Add | ArithOp::Sub => cd[0].max(cd[1]),
            ArithOp::Neg => cd[0],
            ArithOp::Mul => cd[0].saturating_add(cd[1]),
            ArithOp::Div if cd[1] == 0 => cd[0],
            ArithOp::Pow if cd[1] == 0 => match e.children()[1].kind() {
                NodeKind::Literal(p) if *p >= 0.0 && p.fract() == 0.0 && cd[0] != NL => {
                    cd[0].saturating_mul(*p as u32)
                }
                _ => NL,
            },
            _ => NL,
        },
        NodeKind::Derivative { .. } if cd[1] == 0 => cd[0],
        NodeKind::Slice(_) | NodeKind::Tracker(_) => cd[0],
        NodeKind::Concat(_) => cd.iter().copied().max().unwrap_or(0),
        NodeKind::Reduce { .. } => NL,
        _ => NL,
    }
}

fn has_temporal_derivative(e: &Expr, trial: u64) -> bool {
    e.any_node(|n| {
        matches!(n.kind(), NodeKind::Derivative { .. })
            && n.children()[1].is_temporal_variable()
            && degree(&n.children()[0], trial) > 0
    })
}

fn classify(d: u32) -> TrialDegree {
    match d {
        0 => TrialDegree::Zero,
        1 => TrialDegree::One,
        _ => TrialDegree::Nonlinear,
    }
}

/// Split `weak` on top-level sums and assign each term to the quadrature
/// region named by its coordinate variables (`fem_gauss` when it has none).
pub fn group(weak: &Expr, setup: &FemSetup) -> Result<GroupedWeakForm> {
    let mut parts = Vec::new();
    split(weak, 1.0, &mut parts);
    let (trial, test) = (setup.trial().id(), setup.test().id());
    let mut terms = Vec::with_capacity(parts.len());
    for (expr, sign) in parts {
        let mut tags = BTreeSet::new();
        for n in Expr::post_order(std::slice::from_ref(&expr)) {
            match n.kind() {
                NodeKind::Variable(VarSource::Coordinate { tag, .. })
                | NodeKind::Variable(VarSource::Time { tag }) => {
                    tags.insert(tag.clone());
                }
                _ => {}
            }
        }
        let region = match tags.len() {
            0 => VOLUME_REGION.to_string(),
            1 => tags.into_iter().next().expect("one tag"),
            _ => {
                return Err(FemError::UnassembledSymbol(format!(
                    "term {:?} mixes regions {tags:?}",
                    expr
                )))
            }
        };
        if setup.region(&region).is_none() {
            return Err(FemError::UnassembledSymbol(format!(
                "term {expr:?} uses tag {region:?}, which is not a quadrature region"
            )));
        }
        terms.push(WeakTerm {
            trial_degree: classify(degree(&expr, trial)),
            test_degree: classify(degree(&expr, test)),
            temporal: has_temporal_derivative(&expr, trial),
            expr,
            sign,
            region,
        });
    }
    Ok(GroupedWeakForm { terms })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Domain;

    #[test]
    fn listing_form_groups_by_region() {
        let mut d = Domain::rect((0.0, 1.0), (0.0, 1.0), 0.5).unwrap();
        let bcs = vec![d.dirichlet(&["left", "right"], 0.0), d.neumann(&["top", "bottom"])];
        d.init_fem("TRI3", 2, bcs).unwrap();
        let (u, phi) = d.fem_symbols().unwrap();
        let g = d.variable("fem_gauss").unwrap();
        let t = d.variable("gauss_top").unwrap();
        let (xg, yg) = (&g[0], &g[1]);
        let weak = u.d(xg) * phi.d(xg) + u.d(yg) * phi.d(yg)
            - xg.sin() * &phi
            - (&t[0] * 2.0) * &phi;
        let gw = group(&weak, d.fem().unwrap()).unwrap();
        assert_eq!(gw.terms.len(), 4);
        assert_eq!(gw.volume_terms().count(), 3);
        assert_eq!(gw.boundary_terms().count(), 1);
        let deg: Vec<_> = gw.terms.iter().map(|t| (t.trial_degree, t.sign)).collect();
        assert_eq!(
            deg,
            vec![
                (TrialDegree::One, 1.0),
                (TrialDegree::One, 1.0),
                (TrialDegree::Zero, -1.0),
                (TrialDegree::Zero, -1.0)
            ]
        );
        let nl = u.powf(3.0) * &phi;
        assert_eq!(
            group(&nl, d.fem().unwrap()).unwrap().max_trial_degree(),
            TrialDegree::Nonlinear
        );
        let bad = &d.variable("interior").unwrap()[0] * &phi;
        assert!(matches!(
            group(&bad, d.fem().unwrap()),
            Err(FemError::UnassembledSymbol(_))
        ));
    }
}
