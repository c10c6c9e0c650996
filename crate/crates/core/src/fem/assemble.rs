//! Quadrature assembly of grouped weak forms into residuals, tangents and
//! mass matrices, and the `fem_system` / `fem_residual` targets.

use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;

use super::time::{TimeBlock, TimeMode};
use super::vpinn::VpinnPlan;
use super::weak::{group, GroupedWeakForm, TrialDegree, WeakTerm};
use super::{FemError, FemSetup, QuadRegion, Result, VOLUME_REGION};
use crate::domain::Domain;
use crate::evaluator::{Evaluator, Session};
use crate::tensor::{CsrMatrix, Tensor, Var};
use crate::trace::{DiffMode, Expr};

/// What [`Domain::assemble`] lowers a weak form to.
#[derive(Clone, Debug)]
pub enum Target {
    /// Variational residual with `trial` substituted for the trial symbol.
    Vpinn { trial: Expr },
    FemSystem,
    FemResidual,
    /// Semi-discrete block; `state0` holds free or full nodal values.
    FemTime {
        linear: bool,
        state0: Vec<f64>,
        mode: TimeMode,
    },
}

pub enum Assembled {
    Vpinn(Expr),
    System(LinearSystem),
    Residual(ResidualOperator),
    Time(TimeBlock),
}

/// Full-size assembly output.
pub(crate) struct Assembly {
    pub r: Vec<f64>,
    pub j: CsrMatrix,
    pub m: CsrMatrix,
}

/// Leaves of the trial substitution in one region frame.
pub(crate) struct TrialLeaves {
    pub value: Var,
    pub u: Var,
    pub grad: Vec<Var>,
    pub ut: Option<Var>,
}

/// Test functions of the owning elements at the frame's points, `(1, 1, Q, k)`.
pub(crate) fn test_functions(
    s: &mut Session<'_>,
    frame: usize,
    reg: &QuadRegion,
    dim: usize,
) -> crate::evaluator::Result<Var> {
    let (q, k) = (reg.len(), reg.k);
    let cols = s.coordinate_columns(frame, VOLUME_REGION)?;
    let mut acc = s
        .tape
        .constant(Tensor::from_parts(vec![1, 1, q, k], reg.basis_c.clone()));
    for (d, &col) in cols.iter().enumerate().take(dim) {
        let g: Vec<f64> = (0..q * k).map(|i| reg.basis_g[i * dim + d]).collect();
        let gv = s.tape.constant(Tensor::from_parts(vec![1, 1, q, k], g));
        let m = s.tape.mul(gv, col)?;
        acc = s.tape.add(acc, m)?;
    }
    Ok(acc)
}

/// Local affine expansion of the finite-element function `u` around each
/// point: value `U`, gradient `G_d` and, with `udot`, time rate `U_t`.
pub(crate) fn trial_expansion(
    s: &mut Session<'_>,
    frame: usize,
    reg: &QuadRegion,
    dim: usize,
    u: &[f64],
    udot: Option<&[f64]>,
) -> crate::evaluator::Result<TrialLeaves> {
    let (q, k) = (reg.len(), reg.k);
    let col = |v: Vec<f64>| Tensor::from_parts(vec![1, 1, q, 1], v);
    let uv = s.tape.leaf(col(reg.interpolate(u)));
    let cols = s.coordinate_columns(frame, VOLUME_REGION)?;
    let mut acc = uv;
    let mut grad = Vec::with_capacity(dim);
    for (d, &x) in cols.iter().enumerate().take(dim) {
        let g: Vec<f64> = (0..q)
            .map(|p| {
                (0..k)
                    .map(|b| u[reg.nodes[p * k + b]] * reg.basis_g[(p * k + b) * dim + d])
                    .sum()
            })
            .collect();
        let gv = s.tape.leaf(col(g));
        let xv = s.value(x).clone();
        let x0 = s.tape.constant(xv);
        let dx = s.tape.sub(x, x0)?;
        let m = s.tape.mul(gv, dx)?;
        acc = s.tape.add(acc, m)?;
        grad.push(gv);
    }
    let mut ut = None;
    if let Some(ud) = udot {
        let t = s.time_var(frame, VOLUME_REGION)?;
        if s.value(t).numel() > 0 {
            let rate = s.tape.leaf(col(reg.interpolate(ud)));
            let tv = s.value(t).clone();
            let t0 = s.tape.constant(tv);
            let dt = s.tape.sub(t, t0)?;
            let m = s.tape.mul(rate, dt)?;
            acc = s.tape.add(acc, m)?;
            ut = Some(rate);
        }
    }
    Ok(TrialLeaves {
        value: acc,
        u: uv,
        grad,
        ut,
    })
}

/// Signed sum of `terms` in `frame`, broadcast to `(B, T, Q, k)`.
pub(crate) fn integrand(
    s: &mut Session<'_>,
    frame: usize,
    terms: &[&WeakTerm],
    q: usize,
    k: usize,
) -> crate::evaluator::Result<Var> {
    let mut acc: Option<Var> = None;
    for t in terms {
        let mut v = s.eval_in(frame, &t.expr)?;
        if t.sign < 0.0 {
            v = s.tape.neg(v)?;
        }
        acc = Some(match acc {
            None => v,
            Some(a) => s.tape.add(a, v)?,
        });
    }
    let acc = acc.expect("at least one term");
    let sh = s.value(acc).shape().to_vec();
    let (b, t) = if sh.len() == 4 { (sh[0], sh[1]) } else { (1, 1) };
    let target = [b, t, q, k];
    if sh == target {
        Ok(acc)
    } else {
        Ok(s.tape.broadcast_to(acc, &target)?)
    }
}

/// Weak form bound to one domain, ready to assemble at given nodal values.
#[derive(Clone)]
pub(crate) struct Assembler {
    domain: Domain,
    pub setup: Arc<FemSetup>,
    pub terms: Vec<WeakTerm>,
}

impl Assembler {
    pub fn new(domain: &Domain, form: GroupedWeakForm) -> Result<Self> {
        Ok(Assembler {
            domain: domain.clone(),
            setup: domain.fem_arc()?,
            terms: form.terms,
        })
    }

    pub fn dim(&self) -> usize {
        self.domain.dim()
    }

    /// Residual, tangent and mass contributions of the terms selected by
    /// `keep`, at full nodal values `u`, rates `udot` and time `t`.
    pub fn assemble(
        &self,
        keep: impl Fn(&WeakTerm) -> bool,
        u: &[f64],
        udot: Option<&[f64]>,
        t: Option<f64>,
        tangent: bool,
    ) -> Result<Assembly> {
        let n = self.setup.num_dofs();
        let dim = self.dim();
        let ev = Evaluator::new(Some(&self.domain)).mode(DiffMode::Auto);
        let mut s = ev.session();
        let mut r = vec![0.0; n];
        let (mut jt, mut mt) = (Vec::new(), Vec::new());
        let terms: Vec<&WeakTerm> = self.terms.iter().filter(|t| keep(t)).collect();
        let regions: BTreeSet<&str> = terms.iter().map(|t| t.region.as_str()).collect();
        for name in regions {
            let reg = self.setup.region(name).expect("grouped region");
            let (q, k) = (reg.len(), reg.k);
            let local: Vec<&WeakTerm> = terms.iter().copied().filter(|t| t.region == name).collect();
            let frame = s.push_region(0, &reg.points, dim, t, HashMap::new());
            let trial = trial_expansion(&mut s, frame, reg, dim, u, udot)?;
            let test = test_functions(&mut s, frame, reg, dim)?;
            s.bind_in(frame, self.setup.trial().id(), trial.value);
            s.bind_in(frame, self.setup.test().id(), test);
            let acc = integrand(&mut s, frame, &local, q, k)?;
            if s.value(acc).shape()[..2] != [1, 1] {
                return Err(FemError::TargetMismatch(format!(
                    "integrand over {name} has shape {:?}; assembly needs a single batch and time slice",
                    s.value(acc).shape()
                )));
            }
            let vals = s.value(acc).data().to_vec();
            for p in 0..q {
                for b in 0..k {
                    r[reg.nodes[p * k + b]] += reg.weights[p] * vals[p * k + b];
                }
            }
            if !tangent {
                continue;
            }
            let mut xs = vec![trial.u];
            xs.extend(&trial.grad);
            xs.extend(trial.ut);
            for b in 0..k {
                let mut seed = vec![0.0; q * k];
                for p in 0..q {
                    seed[p * k + b] = reg.weights[p];
                }
                let g = s
                    .tape
                    .vjp_values(acc, &xs, Tensor::from_parts(vec![1, 1, q, k], seed))?;
                let (du, dg) = (g[0].data(), &g[1..=dim]);
                let dut = trial.ut.map(|_| g[dim + 1].data());
                for p in 0..q {
                    let i = reg.nodes[p * k + b];
                    for c in 0..k {
                        let j = reg.nodes[p * k + c];
                        let phi = reg.phi[p * k + c];
                        let mut v = du[p] * phi;
                        for (d, gd) in dg.iter().enumerate() {
                            v += gd.data()[p] * reg.basis_g[(p * k + c) * dim + d];
                        }
                        jt.push((i, j, v));
                        if let Some(m) = dut {
                            mt.push((i, j, m[p] * phi));
                        }
                    }
                }
            }
        }
        Ok(Assembly {
            r,
            j: CsrMatrix::from_triplets(n, n, &jt),
            m: CsrMatrix::from_triplets(n, n, &mt),
        })
    }
}

/// Steady linear system after symmetric Dirichlet elimination:
/// `a · u_free = b` on the free dofs.
#[derive(Clone, Debug)]
pub struct LinearSystem {
    pub a: CsrMatrix,
    pub b: Vec<f64>,
    /// Matrix and right-hand side before elimination.
    pub a_full: CsrMatrix,
    pub b_full: Vec<f64>,
    setup: Arc<FemSetup>,
}

impl LinearSystem {
    pub fn setup(&self) -> &FemSetup {
        &self.setup
    }

    /// `(row, col, value)` triplets of the reduced matrix.
    pub fn triplets(&self) -> Vec<(usize, usize, f64)> {
        (0..self.a.nrows())
            .flat_map(|i| self.a.row(i).map(move |(j, v)| (i, j, v)))
            .collect()
    }

    /// Free-dof solution.
    pub fn solve_free(&self) -> Result<Vec<f64>> {
        Ok(self.a.lu()?.solve(&self.b))
    }

    /// Full nodal solution including Dirichlet values.
    pub fn solve(&self) -> Result<Vec<f64>> {
        Ok(self.setup.expand(&self.solve_free()?))
    }
}

/// Reduce full `a`, `rhs` to the free dofs, lifting Dirichlet values.
pub(crate) fn eliminate(setup: &FemSetup, a: &CsrMatrix, rhs: &[f64]) -> (CsrMatrix, Vec<f64>) {
    let free = setup.free_dofs();
    let cons: Vec<usize> = setup.dirichlet().keys().copied().collect();
    let g: Vec<f64> = setup.dirichlet().values().copied().collect();
    let afc = a.submatrix(free, &cons).matvec(&g);
    let b = free.iter().zip(&afc).map(|(&i, l)| rhs[i] - l).collect();
    (a.submatrix(free, free), b)
}

#[derive(Clone, Debug)]
pub struct NewtonReport {
    /// Free-dof solution.
    pub u: Vec<f64>,
    pub iterations: usize,
    pub residual_norm: f64,
}

/// Steady residual `R(u)` on free dofs with its tangent.
#[derive(Clone)]
pub struct ResidualOperator {
    asm: Arc<Assembler>,
}

impl ResidualOperator {
    pub fn setup(&self) -> &FemSetup {
        &self.asm.setup
    }

    pub fn num_free(&self) -> usize {
        self.asm.setup.free_dofs().len()
    }

    fn check(&self, u: &[f64]) -> Result<Vec<f64>> {
        let s = &self.asm.setup;
        if u.len() != s.free_dofs().len() {
            return Err(FemError::BadState {
                got: u.len(),
                free: s.free_dofs().len(),
                total: s.num_dofs(),
            });
        }
        Ok(s.expand(u))
    }

    /// Residual at free values `u`, restricted to free rows.
    pub fn residual(&self, u: &[f64]) -> Result<Vec<f64>> {
        let full = self.check(u)?;
        let a = self.asm.assemble(|_| true, &full, None, None, false)?;
        Ok(self.asm.setup.restrict(&a.r))
    }

    /// Tangent `∂R/∂u` on free rows and columns.
    pub fn jacobian(&self, u: &[f64]) -> Result<CsrMatrix> {
        let full = self.check(u)?;
        let a = self.asm.assemble(|_| true, &full, None, None, true)?;
        let free = self.asm.setup.free_dofs();
        Ok(a.j.submatrix(free, free))
    }

    /// Newton iteration from free values `u0` until `‖R‖₂ < tol`.
    pub fn newton(&self, u0: &[f64], tol: f64, max_iter: usize) -> Result<NewtonReport> {
        let mut u = u0.to_vec();
        let free = self.asm.setup.free_dofs().to_vec();
        for it in 0..=max_iter {
            let full = self.check(&u)?;
            let a = self.asm.assemble(|_| true, &full, None, None, true)?;
            let r = self.asm.setup.restrict(&a.r);
            let norm = norm2(&r);
            if norm < tol {
                return Ok(NewtonReport {
                    u,
                    iterations: it,
                    residual_norm: norm,
                });
            }
            if it == max_iter || !norm.is_finite() {
                break;
            }
            let du = a.j.submatrix(&free, &free).lu()?.solve(&r);
            for (x, d) in u.iter_mut().zip(du) {
                *x -= d;
            }
        }
        Err(FemError::NewtonDivergence(max_iter))
    }
}

pub(crate) fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn check_test_degree(form: &GroupedWeakForm) -> Result<()> {
    match form.terms.iter().find(|t| t.test_degree != TrialDegree::One) {
        Some(t) => Err(FemError::TargetMismatch(format!(
            "term {:?} must be linear in the test function",
            t.expr
        ))),
        None => Ok(()),
    }
}

impl Domain {
    /// Lower a weak form built from [`Domain::fem_symbols`] to `target`.
    pub fn assemble(&self, weak: &Expr, target: Target) -> Result<Assembled> {
        let setup = self.fem_arc()?;
        let form = group(weak, &setup)?;
        check_test_degree(&form)?;
        let temporal = form.temporal_terms();
        match target {
            Target::Vpinn { trial } => {
                if temporal > 0 {
                    return Err(FemError::TargetMismatch(
                        "vpinn needs a steady form".into(),
                    ));
                }
                Ok(Assembled::Vpinn(VpinnPlan::build(self, form, &trial)?))
            }
            Target::FemSystem => {
                if temporal > 0 {
                    return Err(FemError::TargetMismatch(
                        "fem_system needs a steady form; use fem_time".into(),
                    ));
                }
                if let Some(t) = form.terms.iter().find(|t| t.trial_degree == TrialDegree::Nonlinear) {
                    return Err(FemError::NonlinearTerm(format!("{:?}", t.expr)));
                }
                let asm = Assembler::new(self, form)?;
                let zero = vec![0.0; setup.num_dofs()];
                let a = asm.assemble(|_| true, &zero, None, None, true)?;
                let b_full: Vec<f64> = a.r.iter().map(|v| -v).collect();
                let (ar, br) = eliminate(&setup, &a.j, &b_full);
                Ok(Assembled::System(LinearSystem {
                    a: ar,
                    b: br,
                    a_full: a.j,
                    b_full,
                    setup,
                }))
            }
            Target::FemResidual => {
                if temporal > 0 {
                    return Err(FemError::TargetMismatch(
                        "fem_residual needs a steady form; use fem_time".into(),
                    ));
                }
                Ok(Assembled::Residual(ResidualOperator {
                    asm: Arc::new(Assembler::new(self, form)?),
                }))
            }
            Target::FemTime {
                linear,
                state0,
                mode,
            } => {
                if temporal == 0 {
                    return Err(FemError::TargetMismatch(
                        "fem_time needs a time derivative of the trial field".into(),
                    ));
                }
                let t0 = self.time().map_or(0.0, |t| t.t0);
                Ok(Assembled::Time(TimeBlock::assemble(
                    Assembler::new(self, form)?,
                    linear,
                    &state0,
                    mode,
                    t0,
                )?))
            }
        }
    }

    pub fn fem_system(&self, weak: &Expr) -> Result<LinearSystem> {
        match self.assemble(weak, Target::FemSystem)? {
            Assembled::System(s) => Ok(s),
            _ => unreachable!("fem_system target"),
        }
    }

    pub fn fem_residual(&self, weak: &Expr) -> Result<ResidualOperator> {
        match self.assemble(weak, Target::FemResidual)? {
            Assembled::Residual(r) => Ok(r),
            _ => unreachable!("fem_residual target"),
        }
    }

    pub fn fem_time(&self, weak: &Expr, linear: bool, state0: Vec<f64>) -> Result<TimeBlock> {
        let target = Target::FemTime {
            linear,
            state0,
            mode: TimeMode::Implicit,
        };
        match self.assemble(weak, target)? {
            Assembled::Time(b) => Ok(b),
            _ => unreachable!("fem_time target"),
        }
    }

    pub fn vpinn(&self, weak: &Expr, trial: &Expr) -> Result<Expr> {
        let target = Target::Vpinn {
            trial: trial.clone(),
        };
        match self.assemble(weak, target)? {
            Assembled::Vpinn(e) => Ok(e),
            _ => unreachable!("vpinn target"),
        }
    }
}
