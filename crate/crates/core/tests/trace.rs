mod common;

use std::collections::HashSet;
use std::time::Instant;

use common::{bindings, cse_sweep, eval_bound, random_expr, Leaves};
use pdetrace::trace::{cse, dump_tree, Expr};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn cse_preserves_values_on_random_graphs() {
    let start = Instant::now();
    let sweep = cse_sweep(1000);
    assert!(sweep.failures.is_empty(), "{:?}", sweep.failures);
    assert!(sweep.merged > 100, "only {} graphs had shared structure", sweep.merged);
    assert!(start.elapsed().as_secs_f64() < 10.0);
}

#[test]
fn identity_semantics_in_sets() {
    let x = Expr::var("x");
    let mut set = HashSet::new();
    set.insert(x.clone());
    set.insert(x.clone());
    assert_eq!(set.len(), 1);

    let a = Expr::var("x");
    let b = Expr::var("x");
    assert_ne!(a, b);
    let mut set = HashSet::new();
    set.insert(&a + 1.0);
    set.insert(&a + 1.0);
    assert_eq!(set.len(), 2);
    set.insert(b);
    assert_eq!(set.len(), 3);
}

#[test]
fn cse_spans_several_roots() {
    let x = Expr::var("x");
    let y = Expr::var("y");
    let r1 = ((&x * &y).sin() + 1.0).mse();
    let r2 = ((&x * &y).sin() - 1.0).mean();
    let (roots, stats) = cse(&[r1, r2]);
    assert!(stats.nodes_after < stats.nodes_before);
    let sin1 = roots[0].children()[0].children()[0].clone();
    let sin2 = roots[1].children()[0].children()[0].clone();
    assert_eq!(sin1, sin2);
    assert!(dump_tree(&roots[0]).contains("sin"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn duplicated_subtrees_collapse(seed in any::<u64>()) {
        let leaves = Leaves::new(&["a", "b"]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut twin = rng.clone();
        let l = random_expr(&mut rng, 4, &leaves);
        let r = random_expr(&mut twin, 4, &leaves);
        let root = &l * &r;
        let (roots, _) = cse(std::slice::from_ref(&root));
        let kids = roots[0].children();
        prop_assert_eq!(&kids[0], &kids[1]);
        let binds = bindings(&mut rng, &leaves);
        prop_assert!(eval_bound(&root, &binds).bitwise_eq(&eval_bound(&roots[0], &binds)));
    }
}
