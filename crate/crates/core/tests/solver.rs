use std::collections::BTreeMap;

use pdetrace::domain::{Domain, ResampleKind, ResampleStrategy};
use pdetrace::evaluator::Evaluator;
use pdetrace::nn::{Activation, Model, OptimizerSpec};
use pdetrace::solver::{history_csv, render_svg, Core, SolveOptions, SolverError, TrainHistory};
use pdetrace::tensor::Tensor;
use pdetrace::trace::{Expr, KindTag};

fn small_domain() -> Domain {
    Domain::rect((0.0, 1.0), (0.0, 1.0), 0.25).unwrap()
}

fn net(seed: u64) -> Model {
    Model::mlp("net", 2, &[8], 1, Activation::Tanh, seed).unwrap()
}

/// `(u_xx + u_yy + 1)²` mean and a data-fit term sharing `u`.
fn constraints(d: &Domain, m: &Model) -> Vec<Expr> {
    let xy = d.variable("interior").unwrap();
    let (x, y) = (&xy[0], &xy[1]);
    let u = m.call(&[x.clone(), y.clone()]) * x * (1.0 - x) * y * (1.0 - y);
    let pde = (u.dd(x) + u.dd(y) + 1.0).mse().named("pde");
    let fit = (&u - 0.05).mse().named("fit");
    vec![pde, fit]
}

fn core(seed: u64) -> (Core, Model) {
    let d = small_domain();
    let m = net(seed);
    let c = Core::builder(constraints(&d, &m), d).seed(seed).build().unwrap();
    (c, m)
}

#[test]
fn shared_model_call_is_evaluated_once() {
    let (c, _) = core(0);
    assert_eq!(c.constraints().len(), 2);
    let ev = Evaluator::new(Some(c.domain()));
    let mut s = ev.session();
    for e in c.constraints() {
        s.eval(e).unwrap();
    }
    assert_eq!(s.stats().calls[&KindTag::ModelCall], 1);
    assert!(c.cse_stats().nodes_after <= c.cse_stats().nodes_before);
    assert_eq!(c.models().len(), 1);
}

#[test]
fn weights_scale_the_objective_exactly() {
    let d = small_domain();
    let m = net(1);
    let cs = constraints(&d, &m);
    let c = Core::builder(cs, d).weights(vec![2.0, 0.0]).build().unwrap();
    let ev = c.evaluate(None, false).unwrap();
    assert_eq!(ev.objective(c.weights()).to_bits(), (2.0 * ev.losses[0]).to_bits());
    assert_eq!(c.objective().unwrap().to_bits(), (2.0 * ev.losses[0]).to_bits());
}

#[test]
fn build_rejects_bad_inputs() {
    let d = small_domain();
    let m = net(0);
    let xy = d.variable("interior").unwrap();
    let field = m.call(&[xy[0].clone(), xy[1].clone()]);
    let err = Core::builder(vec![field.mse(), field.clone()], d.clone()).build();
    assert!(matches!(err, Err(SolverError::NonScalarConstraint { index: 1, .. })));

    let err = Core::builder(vec![field.mse()], d.clone())
        .default_optimizer(None)
        .build();
    assert!(matches!(err, Err(SolverError::MissingOptimizer(ref n)) if n == "net"));
    m.optimizer(OptimizerSpec::adam(1e-2));
    assert!(Core::builder(vec![field.mse()], d.clone()).default_optimizer(None).build().is_ok());

    let err = Core::builder(vec![field.mse()], d.clone()).mesh((2, 1)).build();
    assert!(matches!(err, Err(SolverError::UnsupportedMesh((2, 1)))));
    let err = Core::builder(vec![field.mse()], d).weights(vec![1.0, 2.0]).build();
    assert!(matches!(err, Err(SolverError::WeightCount { got: 2, want: 1 })));
}

#[test]
fn print_shapes_renders_the_loss_path() {
    let (c, _) = core(0);
    let s = c.print_shapes().unwrap();
    assert!(s.contains("net"), "{s}");
    assert!(s.lines().count() > 5);
    assert!(s.contains("call net (%0, %1) : (1,1,9,1)"), "{s}");
    assert!(s.contains("mse \"pde\" (%13) : ()"), "{s}");
}

#[test]
fn inner_steps_count_optimizer_updates() {
    let (mut c, m) = core(0);
    let h = c.solve(&SolveOptions::new(1).inner_steps(5)).unwrap();
    assert_eq!(m.optimizer_state().step, 5);
    assert_eq!(h.rows.len(), 1);
    c.solve(&SolveOptions::new(2)).unwrap();
    assert_eq!(m.optimizer_state().step, 7);
    let steps: Vec<u64> = c.history().rows.iter().map(|r| r.step).collect();
    assert_eq!(steps, vec![0, 1, 2]);
}

#[test]
fn batches_share_indices_across_tags() {
    let mut d = small_domain().repeat(50).unwrap();
    let ks: Vec<f64> = (0..50).map(|i| 0.5 + i as f64 / 50.0).collect();
    let k = d.tensor_variable("k", Tensor::new(vec![50, 1, 1], ks).unwrap()).unwrap();
    let m = net(0);
    let xy = d.variable("interior").unwrap();
    let u = m.call(&[xy[0].clone(), xy[1].clone()]);
    let loss = (&u * &k).mse();
    let c = Core::builder(vec![loss.clone()], d.clone()).seed(3).build().unwrap();
    let idx = c.batch_for_step(4, Some(8));
    assert_eq!(idx.len(), 8);
    assert!(idx.windows(2).all(|w| w[0] < w[1]));
    assert_eq!(idx, c.batch_for_step(4, Some(8)));
    assert_ne!(idx, c.batch_for_step(5, Some(8)));
    let got = c.evaluate(Some(&idx), false).unwrap().losses[0];
    let want = Evaluator::new(Some(&d)).batch(idx.clone()).evaluate(&loss).unwrap().data()[0];
    assert_eq!(got.to_bits(), want.to_bits());

    let mut c = c;
    let err = c.solve(&SolveOptions::new(1).batchsize(51));
    assert!(matches!(err, Err(SolverError::BatchTooLarge { batchsize: 51, batch: 50 })));
    c.solve(&SolveOptions::new(2).batchsize(8)).unwrap();
}

#[test]
fn fused_gradient_equals_sum_of_separate_gradients() {
    let d = small_domain();
    let m = net(5);
    let cs = constraints(&d, &m);
    let w = [0.7, 1.3];
    let fused = Core::builder(cs.clone(), d.clone()).weights(w.to_vec()).build().unwrap();
    let g = fused.evaluate(None, true).unwrap().grads.remove(0);
    let mut sum: BTreeMap<String, Tensor> = BTreeMap::new();
    for (c, wi) in cs.iter().zip(w) {
        let single = Core::builder(vec![c.clone()], d.clone()).build().unwrap();
        let gi = single.evaluate(None, true).unwrap().grads.remove(0);
        for (p, t) in gi {
            let t = t.scale(wi);
            let v = match sum.remove(&p) {
                Some(a) => a.add(&t).unwrap(),
                None => t,
            };
            sum.insert(p, v);
        }
    }
    assert_eq!(g.len(), sum.len());
    for (p, t) in &g {
        assert!(t.bitwise_eq(&sum[p]), "{p}");
    }
}

#[test]
fn fixed_seed_runs_are_bitwise_identical() {
    let run = || {
        let (mut c, m) = core(11);
        let h = c.solve(&SolveOptions::new(6).inner_steps(2)).unwrap();
        (h, m.params())
    };
    let (a, pa) = run();
    let (b, pb) = run();
    assert!(a.same_values(&b));
    assert!(pa.iter().zip(&pb).all(|((_, x), (_, y))| x.bitwise_eq(y)));
    assert!(a.warmup_seconds.is_some());
    assert_eq!(a.metadata["inner_steps"], "2");
}

#[test]
fn trackers_do_not_change_training() {
    let d = small_domain();
    let plain = net(2);
    let mut c = Core::builder(constraints(&d, &plain), d.clone()).build().unwrap();
    c.solve(&SolveOptions::new(5)).unwrap();

    let tracked = net(2);
    let mut cs = constraints(&d, &tracked);
    let xy = d.variable("interior").unwrap();
    let u = tracked.call(&[xy[0].clone(), xy[1].clone()]);
    let probe = u.mean().tracker(2).unwrap().named("u_mean");
    cs[1] = &cs[1] + &probe;
    cs.push(u.tracker(3).unwrap().named("u"));
    let mut t = Core::builder(cs, d).build().unwrap();
    assert_eq!(t.names(), ["pde", "c1"]);
    t.solve(&SolveOptions::new(5)).unwrap();

    for ((_, a), (_, b)) in plain.params().iter().zip(&tracked.params()) {
        assert!(a.bitwise_eq(b));
    }
    let snaps: Vec<(u64, &str)> = t
        .history()
        .trackers
        .iter()
        .map(|s| (s.step, s.name.as_str()))
        .collect();
    assert_eq!(
        snaps,
        vec![(0, "u"), (0, "u_mean"), (2, "u_mean"), (3, "u"), (4, "u_mean")]
    );
    assert_eq!(t.history().trackers[0].value.shape(), &[1, 1, 9, 1]);
}

#[test]
fn resampling_happens_only_between_outer_steps() {
    let mut d = Domain::rect((0.0, 1.0), (0.0, 1.0), 0.1).unwrap();
    d.sample("interior", 20, 0).unwrap();
    d.register_resampler(
        "interior",
        ResampleStrategy {
            kind: ResampleKind::UniformSubset,
            count: 20,
            every: 2,
        },
    )
    .unwrap();
    let m = net(0);
    let cs = constraints(&d, &m);
    let mut c = Core::builder(cs, d).build().unwrap();
    let before = c.domain().points("interior").unwrap().clone();
    c.solve(&SolveOptions::new(1).inner_steps(3)).unwrap();
    assert!(c.domain().points("interior").unwrap().bitwise_eq(&before));
    c.solve(&SolveOptions::new(1).inner_steps(3)).unwrap();
    let after = c.domain().points("interior").unwrap().clone();
    assert!(!after.bitwise_eq(&before));
    assert_eq!(after.shape(), before.shape());
}

#[test]
fn residual_weighted_resampling_draws_from_the_pool() {
    let mut d = Domain::rect((0.0, 1.0), (0.0, 1.0), 0.1).unwrap();
    let m = net(0);
    let xy = d.variable("interior").unwrap();
    let u = m.call(&[xy[0].clone(), xy[1].clone()]);
    let score = (&u + 2.0).abs() * &xy[0];
    d.register_resampler(
        "interior",
        ResampleStrategy {
            kind: ResampleKind::ResidualWeighted { score },
            count: 30,
            every: 1,
        },
    )
    .unwrap();
    let mut c = Core::builder(vec![u.mse()], d).build().unwrap();
    c.solve(&SolveOptions::new(2)).unwrap();
    assert_eq!(c.domain().points("interior").unwrap().shape(), &[1, 1, 30, 2]);
}

#[test]
fn min_consecutive_logs_trailing_means() {
    let (mut a, _) = core(4);
    a.solve(&SolveOptions::new(3)).unwrap();
    let (mut b, _) = core(4);
    b.solve(&SolveOptions::new(1).inner_steps(3).min_consecutive(3)).unwrap();
    for i in 0..2 {
        let seq = a.history().losses(i);
        let mean = seq.iter().sum::<f64>() / 3.0;
        let got = b.history().rows[0].losses[i];
        assert!((got - mean).abs() <= 1e-14 * mean.abs(), "{got} vs {mean}");
    }
    assert!(matches!(
        b.solve(&SolveOptions::new(1).min_consecutive(0)),
        Err(SolverError::BadOption(_))
    ));
}

#[test]
fn nan_loss_aborts_and_keeps_history() {
    let d = small_domain();
    let m = net(0);
    let xy = d.variable("interior").unwrap();
    let u = m.call(&[xy[0].clone(), xy[1].clone()]);
    let bad = (u * 0.0 - 1.0).sqrt().mse();
    let mut c = Core::builder(vec![bad], d).build().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("h.csv");
    let err = c.solve(&SolveOptions::new(3).history_csv(&csv));
    assert!(matches!(err, Err(SolverError::NaNLoss(0))));
    assert!(c.history().rows.is_empty());
    assert_eq!(std::fs::read_to_string(&csv).unwrap(), "step,total,c0,lr_net\n");
}

#[test]
fn csv_and_svg_outputs() {
    let (mut c, _) = core(0);
    assert!(matches!(history_csv(c.history()), Err(SolverError::EmptyHistory)));
    let dir = tempfile::tempdir().unwrap();
    let inc = dir.path().join("inc.csv");
    c.solve(&SolveOptions::new(1).history_csv(&inc)).unwrap();
    let text = history_csv(c.history()).unwrap();
    assert_eq!(std::fs::read_to_string(&inc).unwrap(), text);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0], "step,total,pde,fit,lr_net");
    let cols: Vec<&str> = lines[1].split(',').collect();
    assert_eq!(cols.len(), 5);
    let total: f64 = cols[1].parse().unwrap();
    assert_eq!(total.to_bits(), c.history().rows[0].total.to_bits());
    c.solve(&SolveOptions::new(4)).unwrap();
    let a = render_svg(c.history()).unwrap();
    let b = render_svg(&c.history().clone()).unwrap();
    assert_eq!(a, b);
    assert!(a.starts_with("<svg") && a.contains("polyline"));
    assert!(render_svg(&TrainHistory::default()).is_err());
}

#[test]
fn profile_records_bounded_steps() {
    let (mut c, _) = core(0);
    c.solve(&SolveOptions::new(4).profile(2).checkpoint_gradients(true)).unwrap();
    let h = c.history();
    assert!(h.profile.iter().all(|p| p.step < 2));
    assert!(h.profile.iter().any(|p| p.phase == "evaluate"));
    assert_eq!(h.metadata["checkpoint_gradients"], "true");
    assert!(h.mean_step_seconds().is_some());
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let (mut full, _) = core(9);
    full.solve(&SolveOptions::new(8).inner_steps(2)).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("state.jno");
    let (mut first, _) = core(9);
    first.solve(&SolveOptions::new(3).inner_steps(2)).unwrap();
    first.save(&path, None).unwrap();

    let (mut resumed, _) = core(9);
    resumed.load(&path, None).unwrap();
    assert_eq!(resumed.step(), 3);
    resumed.solve(&SolveOptions::new(5).inner_steps(2)).unwrap();
    assert!(resumed.history().same_values(full.history()));

    let bytes = std::fs::read(&path).unwrap();
    let again = dir.path().join("again.jno");
    first.save(&again, None).unwrap();
    assert_eq!(bytes, std::fs::read(&again).unwrap());
}

#[test]
fn restore_rejects_foreign_state() {
    let (a, _) = core(0);
    let d = small_domain();
    let other = Model::mlp("other", 2, &[8], 1, Activation::Tanh, 0).unwrap();
    let xy = d.variable("interior").unwrap();
    let loss = other.call(&[xy[0].clone(), xy[1].clone()]).mse();
    let mut b = Core::builder(vec![loss.named("pde"), loss.named("fit")], d).build().unwrap();
    assert!(matches!(b.restore(&a.to_artifact()), Err(SolverError::StateMismatch(_))));
}

#[test]
fn print_shapes_matches_golden_file() {
    let (c, _) = core(0);
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/golden/print_shapes.txt");
    let s = c.print_shapes().unwrap();
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::write(path, &s).unwrap();
    }
    assert_eq!(s, std::fs::read_to_string(path).unwrap());
}
