mod common;

use common::{fd_affine_error, fd_gradient_rms, observed_orders};
use pdetrace::domain::Domain;
use pdetrace::evaluator::Evaluator;
use pdetrace::tensor::Tensor;
use proptest::prelude::*;

#[test]
fn fd_gradient_converges() {
    let errors: Vec<f64> = [0.2, 0.1, 0.05].iter().map(|&h| fd_gradient_rms(h)).collect();
    let orders = observed_orders(&errors);
    assert!(orders.iter().all(|&p| p >= 0.9), "{orders:?}");
}

#[test]
fn fd_is_exact_on_affine_fields() {
    let err = fd_affine_error();
    assert!(err <= 1e-12, "{err:e}");
}

#[test]
fn round_trip_through_artifact() {
    let mut d = Domain::rect((0.0, 1.0), (0.0, 1.0), 0.2).unwrap().repeat(3).unwrap();
    d.tensor_variable("k", Tensor::new([3, 1, 1], vec![0.5, 1.0, 1.5]).unwrap())
        .unwrap();
    d.sample("interior", 5, 7).unwrap();
    let back = Domain::from_artifact(&d.to_artifact()).unwrap();
    assert!(back.same_data(&d));
    assert_eq!(back.tags(), d.tags());
    assert!(back.points("interior").unwrap().bitwise_eq(d.points("interior").unwrap()));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn sampling_draws_pool_rows(count in 1usize..20, seed in any::<u64>()) {
        let mut d = Domain::rect((0.0, 1.0), (0.0, 1.0), 0.25).unwrap();
        let pool = d.pool("interior").unwrap().clone();
        let n = pool.shape()[2];
        let count = count.min(n);
        d.sample("interior", count, seed).unwrap();
        let ctx = d.points("interior").unwrap();
        prop_assert_eq!(ctx.shape()[2], count);
        let dim = pool.shape()[3];
        for row in ctx.data().chunks(dim) {
            prop_assert!(pool.data().chunks(dim).any(|p| p == row));
        }
        let mut again = Domain::rect((0.0, 1.0), (0.0, 1.0), 0.25).unwrap();
        again.sample("interior", count, seed).unwrap();
        prop_assert!(again.points("interior").unwrap().bitwise_eq(ctx));
    }

    #[test]
    fn affine_derivatives_are_exact_for_any_coefficients(a in -5.0f64..5.0, b in -5.0f64..5.0) {
        let d = Domain::rect((0.0, 1.0), (0.0, 1.0), 0.25).unwrap();
        let v = d.variable("interior").unwrap();
        let f = &v[0] * a + &v[1] * b;
        let gx = f.derivative(&v[0], 1, pdetrace::trace::DiffMode::FiniteDifference).unwrap();
        let g = Evaluator::new(Some(&d)).evaluate(&gx).unwrap();
        prop_assert!(g.data().iter().all(|z| (z - a).abs() <= 1e-12 * a.abs().max(1.0)));
    }
}
