//! Oracles shared by the integration suites and the acceptance runner.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::sync::Arc;

use pdetrace::domain::Domain;
use pdetrace::evaluator::Evaluator;
use pdetrace::nn::{Activation, Model};
use pdetrace::solver::Core;
use pdetrace::tensor::{CmpOp, CsrMatrix, Op, Tape, Tensor, Var};
use pdetrace::trace::{DiffMode, Expr};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

pub struct Leaves {
    pub vars: Vec<Expr>,
}

impl Leaves {
    pub fn new(names: &[&str]) -> Leaves {
        Leaves {
            vars: names.iter().map(|n| Expr::var(n)).collect(),
        }
    }
}

/// Random arithmetic graph of depth at most `depth`. A quarter of the inner
/// nodes combine two subtrees built from the same rng state, which yields
/// distinct but structurally equal nodes for CSE to merge.
pub fn random_expr(rng: &mut ChaCha8Rng, depth: u32, leaves: &Leaves) -> Expr {
    if depth == 0 || rng.gen_bool(0.2) {
        return if rng.gen_bool(0.75) {
            leaves.vars[rng.gen_range(0..leaves.vars.len())].clone()
        } else {
            Expr::literal(rng.gen_range(-2i32..=2) as f64 * 0.5)
        };
    }
    if rng.gen_bool(0.25) {
        let mut twin = rng.clone();
        let a = random_expr(rng, depth - 1, leaves);
        let b = random_expr(&mut twin, depth - 1, leaves);
        *rng = twin;
        return match rng.gen_range(0..3) {
            0 => &a + &b,
            1 => &a * &b,
            _ => &a - &b,
        };
    }
    match rng.gen_range(0..9) {
        0..=5 => {
            let a = random_expr(rng, depth - 1, leaves);
            let b = random_expr(rng, depth - 1, leaves);
            match rng.gen_range(0..6) {
                0 => &a + &b,
                1 => &a - &b,
                2 => &a * &b,
                3 => &a / &b,
                4 => a.maximum(&b),
                _ => a.minimum(&b),
            }
        }
        6 => random_expr(rng, depth - 1, leaves).sin(),
        7 => random_expr(rng, depth - 1, leaves).tanh(),
        _ => -random_expr(rng, depth - 1, leaves),
    }
}

pub fn bindings(rng: &mut ChaCha8Rng, leaves: &Leaves) -> Vec<(Expr, Tensor)> {
    leaves
        .vars
        .iter()
        .map(|v| {
            let data: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.5..1.5)).collect();
            (v.clone(), Tensor::vector(data))
        })
        .collect()
}

pub fn eval_bound(e: &Expr, binds: &[(Expr, Tensor)]) -> Tensor {
    let mut ev = Evaluator::new(None);
    for (v, t) in binds {
        ev = ev.bind(v, t.clone());
    }
    ev.evaluate(e).unwrap()
}

pub fn node_count(e: &Expr) -> usize {
    Expr::post_order(std::slice::from_ref(e)).len()
}

/// Outcome of the CSE sweep over `n` random graphs.
pub struct CseSweep {
    pub graphs: usize,
    pub merged: usize,
    pub failures: Vec<String>,
}

pub fn cse_sweep(n: u64) -> CseSweep {
    let leaves = Leaves::new(&["x", "y", "z"]);
    let mut out = CseSweep {
        graphs: 0,
        merged: 0,
        failures: vec![],
    };
    for seed in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let root = random_expr(&mut rng, 6, &leaves);
        let binds = bindings(&mut rng, &leaves);
        let before = eval_bound(&root, &binds);
        let (roots, stats) = pdetrace::trace::cse(std::slice::from_ref(&root));
        out.graphs += 1;
        if stats.nodes_after < stats.nodes_before {
            out.merged += 1;
        }
        if stats.nodes_before != node_count(&root) || stats.nodes_after != node_count(&roots[0]) {
            out.failures.push(format!("seed {seed}: node counts"));
        }
        if !before.bitwise_eq(&eval_bound(&roots[0], &binds)) {
            out.failures.push(format!("seed {seed}: value changed"));
        }
        let (again, stats2) = pdetrace::trace::cse(&roots);
        if stats2.nodes_after != stats.nodes_after || again[0] != roots[0] {
            out.failures.push(format!("seed {seed}: not idempotent"));
        }
    }
    out
}

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Var>;

pub struct Case {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub build: Build,
}

fn case(name: &'static str, inputs: Vec<Tensor>, build: impl Fn(&mut Tape, &[Var]) -> Var + 'static) -> Case {
    Case {
        name,
        inputs,
        build: Box::new(build),
    }
}

fn t2(data: [f64; 6]) -> Tensor {
    Tensor::new([2, 3], data.to_vec()).unwrap()
}

/// One case per tape primitive, with inputs kept away from kinks.
pub fn primitive_cases() -> Vec<Case> {
    let pos = t2([0.3, 0.75, 1.2, 0.45, 0.9, 1.05]);
    let mixed = t2([-0.8, 0.35, 1.1, -0.25, 0.6, -1.3]);
    let other = t2([0.5, -0.4, 0.95, 0.2, -0.7, 0.65]);
    let row = Tensor::vector([0.7, -0.2, 0.4]);
    let u = |op: Op| move |t: &mut Tape, x: &[Var]| t.unary(op.clone(), x[0]).unwrap();
    let w = Arc::new(CsrMatrix::from_triplets(
        4,
        2,
        &[(0, 0, 1.0), (1, 0, 0.5), (1, 1, 0.5), (2, 1, -2.0), (3, 0, 0.25)],
    ));
    vec![
        case("add", vec![mixed.clone(), row.clone()], |t, x| t.add(x[0], x[1]).unwrap()),
        case("sub", vec![mixed.clone(), other.clone()], |t, x| t.sub(x[0], x[1]).unwrap()),
        case("mul", vec![mixed.clone(), row.clone()], |t, x| t.mul(x[0], x[1]).unwrap()),
        case("div", vec![mixed.clone(), pos.clone()], |t, x| t.div(x[0], x[1]).unwrap()),
        case("neg", vec![mixed.clone()], |t, x| t.neg(x[0]).unwrap()),
        case("scale", vec![mixed.clone()], |t, x| t.scale(x[0], -2.5).unwrap()),
        case("exp", vec![mixed.clone()], u(Op::Exp)),
        case("log", vec![pos.clone()], u(Op::Log)),
        case("sin", vec![mixed.clone()], u(Op::Sin)),
        case("cos", vec![mixed.clone()], u(Op::Cos)),
        case("tanh", vec![mixed.clone()], u(Op::Tanh)),
        case("sqrt", vec![pos.clone()], u(Op::Sqrt)),
        case("abs", vec![mixed.clone()], u(Op::Abs)),
        case("relu", vec![mixed.clone()], u(Op::Relu)),
        case("pow_scalar", vec![pos.clone()], u(Op::PowScalar(2.5))),
        case("pow", vec![pos.clone(), other.clone()], |t, x| t.apply(Op::Pow, &[x[0], x[1]]).unwrap()),
        case("maximum", vec![mixed.clone(), other.clone()], |t, x| {
            t.apply(Op::Maximum, &[x[0], x[1]]).unwrap()
        }),
        case("minimum", vec![mixed.clone(), other.clone()], |t, x| {
            t.apply(Op::Minimum, &[x[0], x[1]]).unwrap()
        }),
        case("compare", vec![mixed.clone(), other.clone()], |t, x| {
            let c = t.apply(Op::Compare(CmpOp::Lt), &[x[0], x[1]]).unwrap();
            t.mul(c, x[0]).unwrap()
        }),
        case("sum", vec![mixed.clone()], |t, x| t.sum(x[0], Some(&[1]), true).unwrap()),
        case("mean", vec![mixed.clone()], |t, x| t.mean(x[0], Some(&[0]), false).unwrap()),
        case("broadcast", vec![row.clone()], |t, x| t.broadcast_to(x[0], &[4, 2, 3]).unwrap()),
        case("matmul", vec![mixed.clone(), t2([0.1, -0.3, 0.8, 0.5, -0.6, 0.2]).reshape(&[3, 2]).unwrap()], |t, x| {
            t.matmul(x[0], x[1]).unwrap()
        }),
        case("transpose", vec![mixed.clone()], |t, x| t.transpose(x[0]).unwrap()),
        case("reshape", vec![mixed.clone()], |t, x| t.reshape(x[0], &[3, 2]).unwrap()),
        case("concat", vec![mixed.clone(), other.clone()], |t, x| t.concat(&[x[0], x[1]], 1).unwrap()),
        case("slice", vec![mixed.clone()], |t, x| t.slice(x[0], 1, 0, 2, 2).unwrap()),
        case("point_map", vec![mixed.clone()], move |t, x| {
            t.point_map(x[0], w.clone(), 0).unwrap()
        }),
        case("composite", vec![mixed, other], |t, x| {
            let a = t.unary(Op::Tanh, x[0]).unwrap();
            let b = t.mul(a, x[1]).unwrap();
            let c = t.unary(Op::Sin, b).unwrap();
            t.mean(c, None, false).unwrap()
        }),
    ]
}

fn weights_for(shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|i| 1.1 + (0.37 * i as f64).sin()).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Largest `|ad − fd| / max|ad|` over every input entry of `c`, where the
/// scalar under test is a fixed weighted sum of the case output.
pub fn case_error(c: &Case) -> f64 {
    let mut t = Tape::new();
    let xs: Vec<Var> = c.inputs.iter().map(|v| t.leaf(v.clone())).collect();
    let y = (c.build)(&mut t, &xs);
    let wv = weights_for(t.value(y).shape());
    let wc = t.constant(wv);
    let yw = t.mul(y, wc).unwrap();
    let loss = t.sum(yw, None, false).unwrap();
    let grads = t.grad_values(loss, &xs).unwrap();
    let mut worst: f64 = 0.0;
    for (k, g) in grads.iter().enumerate() {
        let scale = g.max_abs().max(1e-6);
        for i in 0..g.numel() {
            let at = |delta: f64| {
                let leaves: Vec<(Var, Tensor)> = c
                    .inputs
                    .iter()
                    .enumerate()
                    .map(|(j, v)| {
                        let mut d = v.to_vec();
                        if j == k {
                            d[i] += delta;
                        }
                        (xs[j], Tensor::new(v.shape().to_vec(), d).unwrap())
                    })
                    .collect();
                t.replay(&leaves).unwrap().value(loss).data()[0]
            };
            let fd = (at(FD_STEP) - at(-FD_STEP)) / (2.0 * FD_STEP);
            worst = worst.max((fd - g.data()[i]).abs() / scale);
        }
    }
    worst
}

/// Hessian of `Σ w·tanh(x)·x` from the recorded backward pass versus
/// central differences of the reverse-mode gradient.
pub fn hessian_error() -> f64 {
    let x0 = Tensor::vector([0.3, -0.6, 1.1]);
    let mut t = Tape::new();
    let x = t.leaf(x0.clone());
    let th = t.unary(Op::Tanh, x).unwrap();
    let p = t.mul(th, x).unwrap();
    let f = t.sum(p, None, false).unwrap();
    let h = t.hessian(f, x).unwrap();
    let grad_at = |v: Vec<f64>| {
        let r = t.replay(&[(x, Tensor::vector(v))]).unwrap();
        r.grad_values(f, &[x]).unwrap().remove(0).to_vec()
    };
    let scale = h.max_abs();
    let mut worst: f64 = 0.0;
    for j in 0..3 {
        let mut a = x0.to_vec();
        let mut b = x0.to_vec();
        a[j] += FD_STEP;
        b[j] -= FD_STEP;
        let (ga, gb) = (grad_at(a), grad_at(b));
        for i in 0..3 {
            let fd = (ga[i] - gb[i]) / (2.0 * FD_STEP);
            worst = worst.max((fd - h.data()[i * 3 + j]).abs() / scale);
        }
    }
    worst
}

/// Reverse-mode gradient of the fused objective against central
/// differences on every `stride`-th parameter entry of every model.
/// Errors are relative to the largest gradient entry of each tensor.
pub fn objective_error(core: &Core, batch: Option<&[usize]>, stride: usize) -> f64 {
    let weights = core.weights().to_vec();
    let ev = core.evaluate(batch, true).unwrap();
    let objective = || core.evaluate(batch, false).unwrap().objective(&weights);
    let mut worst: f64 = 0.0;
    for (model, grads) in core.models().iter().zip(&ev.grads) {
        let base = model.params();
        let mut counter = 0usize;
        for (path, g) in grads {
            let scale = g.max_abs().max(1e-8);
            for i in 0..g.numel() {
                counter += 1;
                if counter % stride != 0 {
                    continue;
                }
                let at = |delta: f64| {
                    let mut p = base.clone();
                    let t = &p[path];
                    let mut v = t.to_vec();
                    v[i] += delta;
                    p.insert(path.clone(), Tensor::new(t.shape().to_vec(), v).unwrap());
                    model.set_params(p).unwrap();
                    objective()
                };
                let fd = (at(FD_STEP) - at(-FD_STEP)) / (2.0 * FD_STEP);
                worst = worst.max((fd - g.data()[i]).abs() / scale);
            }
        }
        model.set_params(base).unwrap();
    }
    worst
}

fn fd_values(d: &Domain, field: impl Fn(&Expr, &Expr) -> Expr, wrt_y: bool) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let v = d.variable("interior").unwrap();
    let (x, y) = (&v[0], &v[1]);
    let wrt = if wrt_y { y } else { x };
    let e = field(x, y).derivative(wrt, 1, DiffMode::FiniteDifference).unwrap();
    let ev = Evaluator::new(Some(d));
    let g = ev.evaluate(&e).unwrap().to_vec();
    let xs = ev.evaluate(x).unwrap().to_vec();
    let ys = ev.evaluate(y).unwrap().to_vec();
    (g, xs, ys)
}

fn sinsin(x: &Expr, y: &Expr) -> Expr {
    (x * PI).sin() * (y * PI).sin()
}

/// Root-mean-square error of the mesh finite-difference gradient of
/// `sin(πx)sin(πy)` over the interior points, both components pooled.
pub fn fd_gradient_rms(h: f64) -> f64 {
    let d = Domain::rect((0.0, 1.0), (0.0, 1.0), h).unwrap();
    let mut sq = 0.0;
    let mut n = 0usize;
    for wrt_y in [false, true] {
        let (g, xs, ys) = fd_values(&d, sinsin, wrt_y);
        for ((gv, xv), yv) in g.iter().zip(&xs).zip(&ys) {
            let exact = if wrt_y {
                PI * (PI * xv).sin() * (PI * yv).cos()
            } else {
                PI * (PI * xv).cos() * (PI * yv).sin()
            };
            sq += (gv - exact).powi(2);
            n += 1;
        }
    }
    (sq / n as f64).sqrt()
}

/// Observed orders `log2(e(h)/e(h/2))` over the given halving sequence.
pub fn observed_orders(errors: &[f64]) -> Vec<f64> {
    errors.windows(2).map(|w| (w[0] / w[1]).log2()).collect()
}

/// Largest error of the mesh gradient of `2x − 3y + 1` on several meshes.
pub fn fd_affine_error() -> f64 {
    let affine = |x: &Expr, y: &Expr| x * 2.0 - y * 3.0 + 1.0;
    let mut worst: f64 = 0.0;
    for d in [
        Domain::rect((0.0, 1.0), (0.0, 1.0), 0.1).unwrap(),
        Domain::disk((0.0, 0.0), 1.0, 0.2).unwrap(),
        Domain::lshape(0.15).unwrap(),
    ] {
        for (wrt_y, want) in [(false, 2.0), (true, -3.0)] {
            let (g, _, _) = fd_values(&d, affine, wrt_y);
            for v in g {
                worst = worst.max((v - want).abs());
            }
        }
    }
    worst
}


pub const WALLS: [&str; 4] = ["left", "right", "top", "bottom"];

pub fn square(h: f64, degree: usize, walls: &[&str]) -> Domain {
    let mut d = Domain::rect((0.0, 1.0), (0.0, 1.0), h).unwrap();
    let bcs = if walls.is_empty() {
        vec![]
    } else {
        vec![d.dirichlet(walls, 0.0)]
    };
    d.init_fem("TRI3", degree, bcs).unwrap();
    d
}

pub fn exact(x: &Expr, y: &Expr) -> Expr {
    sinsin(x, y)
}

/// `∇u·∇φ − f φ` with `f = 2π² sin(πx) sin(πy)`.
pub fn poisson(d: &Domain) -> Expr {
    let (u, phi) = d.fem_symbols().unwrap();
    let g = d.variable("fem_gauss").unwrap();
    let (x, y) = (&g[0], &g[1]);
    let f = exact(x, y) * (2.0 * PI * PI);
    u.d(x) * phi.d(x) + u.d(y) * phi.d(y) - f * &phi
}

/// Poisson weak form plus `u³φ`, manufactured for the same solution.
pub fn cubic(d: &Domain) -> Expr {
    let (u, phi) = d.fem_symbols().unwrap();
    let g = d.variable("fem_gauss").unwrap();
    let (x, y) = (&g[0], &g[1]);
    let ue = exact(x, y);
    let f = &ue * (2.0 * PI * PI) + ue.powf(3.0);
    u.d(x) * phi.d(x) + u.d(y) * phi.d(y) + u.powf(3.0) * &phi - f * &phi
}

pub fn heat(d: &Domain, nu: f64) -> Expr {
    let (u, phi) = d.fem_symbols().unwrap();
    let g = d.variable("fem_gauss").unwrap();
    let (x, y, t) = (&g[0], &g[1], &g[2]);
    u.d(t) * &phi + (u.d(x) * phi.d(x) + u.d(y) * phi.d(y)) * nu
}

pub fn mode_state(d: &Domain) -> Vec<f64> {
    let m = d.mesh();
    (0..m.num_vertices())
        .map(|v| {
            let p = m.vertex(v);
            (PI * p[0]).sin() * (PI * p[1]).sin()
        })
        .collect()
}

pub fn l2_error(d: &Domain, u: &[f64]) -> f64 {
    let r = d.fem().unwrap().region(pdetrace::fem::VOLUME_REGION).unwrap();
    let uh = r.interpolate(u);
    (0..r.len())
        .map(|q| {
            let (x, y) = (r.points[2 * q], r.points[2 * q + 1]);
            r.weights[q] * (uh[q] - (PI * x).sin() * (PI * y).sin()).powi(2)
        })
        .sum::<f64>()
        .sqrt()
}

pub fn scalar_value(d: &Domain, e: &Expr) -> f64 {
    Evaluator::new(Some(d)).evaluate(e).unwrap().item().unwrap()
}

/// Largest deviation of the assembled stiffness and mass matrices of the
/// triangle `(0,0) (1,0) (0,1)` from their closed forms.
pub fn unit_triangle_error() -> f64 {
    use pdetrace::domain::{ElementKind, Mesh};
    let mesh = Mesh::new(
        2,
        vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0],
        ElementKind::Tri3,
        vec![0, 1, 2],
        BTreeMap::new(),
    )
    .unwrap();
    let mut d = Domain::from_mesh(mesh);
    d.init_fem("TRI3", 2, vec![]).unwrap();
    let (u, phi) = d.fem_symbols().unwrap();
    let g = d.variable("fem_gauss").unwrap();
    let k = d
        .fem_system(&(u.d(&g[0]) * phi.d(&g[0]) + u.d(&g[1]) * phi.d(&g[1])))
        .unwrap()
        .a_full
        .to_dense();
    let m = d.fem_system(&(&u * &phi)).unwrap().a_full.to_dense();
    let k_exact = [[1.0, -0.5, -0.5], [-0.5, 0.5, 0.0], [-0.5, 0.0, 0.5]];
    let m_exact = [
        [2.0 / 24.0, 1.0 / 24.0, 1.0 / 24.0],
        [1.0 / 24.0, 2.0 / 24.0, 1.0 / 24.0],
        [1.0 / 24.0, 1.0 / 24.0, 2.0 / 24.0],
    ];
    let mut worst: f64 = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            worst = worst.max((k[i][j] - k_exact[i][j]).abs());
            worst = worst.max((m[i][j] - m_exact[i][j]).abs());
        }
    }
    worst
}

/// Median over ten seeds of the best distance to a known optimum found by
/// random search with `trials` trials.
pub fn median_best(trials: usize) -> f64 {
    use pdetrace::solver::tune::{random_search, ArchSpace};
    let s = ArchSpace::new()
        .float_range("a", -1.0, 1.0, false)
        .unwrap()
        .float_range("b", -1.0, 1.0, false)
        .unwrap();
    let mut best: Vec<f64> = (0..10)
        .map(|seed| {
            let r = random_search(&s, trials, seed, |c| {
                let (a, b) = (c["a"].as_f64().unwrap(), c["b"].as_f64().unwrap());
                Ok(((a - 0.3).powi(2) + (b + 0.2).powi(2)).sqrt())
            })
            .unwrap();
            r.best_trial().unwrap().loss.unwrap()
        })
        .collect();
    best.sort_by(f64::total_cmp);
    (best[4] + best[5]) / 2.0
}

/// Two MLPs fitted jointly to one target on a coarse square.
pub fn model_pair(seed: u64) -> (Core, Model, Model) {
    let d = Domain::rect((0.0, 1.0), (0.0, 1.0), 0.25).unwrap();
    let xy = d.variable("interior").unwrap();
    let a = Model::mlp("a", 2, &[8], 1, Activation::Tanh, seed).unwrap();
    let b = Model::mlp("b", 2, &[8, 8], 1, Activation::Tanh, seed + 1).unwrap();
    let target = (&xy[0] * 3.0).sin() * &xy[1];
    let fit = (a.call(&xy) + b.call(&xy) - target).mse();
    let core = Core::builder(vec![fit], d).seed(seed).build().unwrap();
    (core, a, b)
}

/// Paths whose tensors differ bitwise between the two snapshots.
pub fn changed(before: &BTreeMap<String, Tensor>, after: &BTreeMap<String, Tensor>) -> Vec<String> {
    before
        .iter()
        .filter(|(k, v)| !after[*k].bitwise_eq(v))
        .map(|(k, _)| k.clone())
        .collect()
}

/// One-model fit whose interior points are redrawn every second step.
pub fn resampled_core(seed: u64) -> (Core, Model) {
    use pdetrace::domain::{ResampleKind, ResampleStrategy};
    let mut d = Domain::rect((0.0, 1.0), (0.0, 1.0), 0.25).unwrap();
    let net = Model::mlp("net", 2, &[6], 1, Activation::Tanh, seed).unwrap();
    let xy = d.variable("interior").unwrap();
    let strategy = ResampleStrategy {
        kind: ResampleKind::UniformSubset,
        count: 5,
        every: 2,
    };
    d.register_resampler("interior", strategy).unwrap();
    let fit = (net.call(&xy) - &xy[0] * &xy[1]).mse();
    let c = Core::builder(vec![fit.named("fit")], d).seed(seed).build().unwrap();
    (c, net)
}

/// Every state tensor except wall-clock timings agrees bitwise.
pub fn same_state(a: &Core, b: &Core) -> bool {
    let (x, y) = (a.to_artifact(), b.to_artifact());
    x.tensors.len() == y.tensors.len()
        && x.tensors.iter().zip(&y.tensors).all(|((n, s), (m, t))| {
            n == m && (n == "history/seconds" || s.bitwise_eq(t))
        })
}
