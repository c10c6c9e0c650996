//! Semi-discrete time blocks `M u̇ + A u = b(t)` or `M u̇ + R(u, t) = 0`
//! on the free dofs, with backward-Euler stepping.

use std::fmt;
use std::sync::Arc;

use super::assemble::{eliminate, norm2, Assembler};
use super::weak::TrialDegree;
use super::{FemError, FemSetup, Result};
use crate::tensor::{CsrMatrix, LuFactor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum TimeMode {
    #[default]
    Implicit,
}

impl TimeMode {
    pub fn parse(s: &str) -> Option<TimeMode> {
        match s {
            "implicit" => Some(TimeMode::Implicit),
            _ => None,
        }
    }
}

/// `t ↦ b(t)` on the free dofs.
pub type Forcing = Arc<dyn Fn(f64) -> Result<Vec<f64>> + Send + Sync>;

#[derive(Clone)]
enum Kind {
    Linear { a: CsrMatrix, forcing: Forcing },
    Nonlinear { asm: Arc<Assembler> },
}

#[derive(Clone)]
pub struct TimeBlock {
    mass: CsrMatrix,
    kind: Kind,
    mode: TimeMode,
    setup: Option<Arc<FemSetup>>,
    state: Vec<f64>,
    t: f64,
    step_lu: Option<(u64, Arc<LuFactor>)>,
    pub newton_tol: f64,
    pub newton_max_iter: usize,
}

impl fmt::Debug for TimeBlock {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TimeBlock")
            .field("dofs", &self.state.len())
            .field("linear", &self.is_linear())
            .field("t", &self.t)
            .finish()
    }
}

impl TimeBlock {
    /// Linear block from matrices and a forcing callback.
    pub fn linear(mass: CsrMatrix, a: CsrMatrix, forcing: Forcing, u0: Vec<f64>, t0: f64) -> Self {
        TimeBlock {
            mass,
            kind: Kind::Linear { a, forcing },
            mode: TimeMode::Implicit,
            setup: None,
            state: u0,
            t: t0,
            step_lu: None,
            newton_tol: 1e-10,
            newton_max_iter: 25,
        }
    }

    pub(crate) fn assemble(
        asm: Assembler,
        linear: bool,
        state0: &[f64],
        mode: TimeMode,
        t0: f64,
    ) -> Result<Self> {
        let setup = asm.setup.clone();
        let (nf, n) = (setup.free_dofs().len(), setup.num_dofs());
        let state = if state0.len() == nf {
            state0.to_vec()
        } else if state0.len() == n {
            setup.restrict(state0)
        } else {
            return Err(FemError::BadState {
                got: state0.len(),
                free: nf,
                total: n,
            });
        };
        let temporal: Vec<_> = asm.terms.iter().filter(|t| t.temporal).collect();
        match temporal.len() {
            0 => return Err(FemError::NoTemporalTerm),
            1 => {}
            _ => return Err(FemError::MultipleTemporalTerms),
        }
        if temporal[0].trial_degree != TrialDegree::One {
            return Err(FemError::NonlinearTerm(format!(
                "time-derivative term {:?} must be linear in the trial field",
                temporal[0].expr
            )));
        }
        let free = setup.free_dofs().to_vec();
        let zero = vec![0.0; n];
        let m = asm.assemble(|t| t.temporal, &zero, Some(&zero), Some(t0), true)?;
        let mass = m.m.submatrix(&free, &free);
        let asm = Arc::new(asm);
        let kind = if linear {
            if let Some(t) = asm.terms.iter().find(|t| t.trial_degree == TrialDegree::Nonlinear) {
                return Err(FemError::NonlinearTerm(format!("{:?}", t.expr)));
            }
            let k = asm.assemble(
                |t| !t.temporal && t.trial_degree == TrialDegree::One,
                &zero,
                Some(&zero),
                Some(t0),
                true,
            )?;
            let (a, lift) = eliminate(&setup, &k.j, &zero);
            let has_source = asm.terms.iter().any(|t| t.trial_degree == TrialDegree::Zero);
            let (asm2, setup2) = (asm.clone(), setup.clone());
            let forcing: Forcing = Arc::new(move |t| {
                let mut b = lift.clone();
                if has_source {
                    let z = vec![0.0; setup2.num_dofs()];
                    let r = asm2.assemble(
                        |t| t.trial_degree == TrialDegree::Zero,
                        &z,
                        Some(&z),
                        Some(t),
                        false,
                    )?;
                    for (bi, &i) in b.iter_mut().zip(setup2.free_dofs()) {
                        *bi -= r.r[i];
                    }
                }
                Ok(b)
            });
            Kind::Linear { a, forcing }
        } else {
            Kind::Nonlinear { asm }
        };
        Ok(TimeBlock {
            mass,
            kind,
            mode,
            setup: Some(setup),
            state,
            t: t0,
            step_lu: None,
            newton_tol: 1e-10,
            newton_max_iter: 25,
        })
    }

    pub fn is_linear(&self) -> bool {
        matches!(self.kind, Kind::Linear { .. })
    }

    pub fn mode(&self) -> TimeMode {
        self.mode
    }

    pub fn mass(&self) -> &CsrMatrix {
        &self.mass
    }

    /// Operator matrix of a linear block.
    pub fn stiffness(&self) -> Option<&CsrMatrix> {
        match &self.kind {
            Kind::Linear { a, .. } => Some(a),
            Kind::Nonlinear { .. } => None,
        }
    }

    /// `b(t)` of a linear block.
    pub fn forcing(&self, t: f64) -> Result<Vec<f64>> {
        match &self.kind {
            Kind::Linear { forcing, .. } => forcing(t),
            Kind::Nonlinear { .. } => Err(FemError::TargetMismatch(
                "a nonlinear block has no forcing vector".into(),
            )),
        }
    }

    /// `R(u, t)` on free dofs; for a linear block `A u − b(t)`.
    pub fn residual(&self, u: &[f64], t: f64) -> Result<Vec<f64>> {
        match &self.kind {
            Kind::Linear { a, forcing } => {
                let b = forcing(t)?;
                Ok(a.matvec(u).iter().zip(b).map(|(x, y)| x - y).collect())
            }
            Kind::Nonlinear { asm } => {
                let full = asm.setup.expand(u);
                let z = vec![0.0; full.len()];
                let r = asm.assemble(|t| !t.temporal, &full, Some(&z), Some(t), false)?;
                Ok(asm.setup.restrict(&r.r))
            }
        }
    }

    /// `∂R/∂u (u, t)` on free dofs.
    pub fn jacobian(&self, u: &[f64], t: f64) -> Result<CsrMatrix> {
        match &self.kind {
            Kind::Linear { a, .. } => Ok(a.clone()),
            Kind::Nonlinear { asm } => Ok(self.nonlinear_parts(asm, u, t)?.1),
        }
    }

    fn nonlinear_parts(&self, asm: &Assembler, u: &[f64], t: f64) -> Result<(Vec<f64>, CsrMatrix)> {
        let full = asm.setup.expand(u);
        let z = vec![0.0; full.len()];
        let r = asm.assemble(|t| !t.temporal, &full, Some(&z), Some(t), true)?;
        let free = asm.setup.free_dofs();
        Ok((asm.setup.restrict(&r.r), r.j.submatrix(free, free)))
    }

    /// Current free-dof state.
    pub fn state(&self) -> &[f64] {
        &self.state
    }

    /// Current state with Dirichlet values filled in, when assembled from a
    /// weak form.
    pub fn full_state(&self) -> Option<Vec<f64>> {
        self.setup.as_ref().map(|s| s.expand(&self.state))
    }

    pub fn time(&self) -> f64 {
        self.t
    }

    pub fn set_state(&mut self, u: Vec<f64>, t: f64) -> Result<()> {
        if u.len() != self.state.len() {
            return Err(FemError::BadState {
                got: u.len(),
                free: self.state.len(),
                total: self.state.len(),
            });
        }
        self.state = u;
        self.t = t;
        Ok(())
    }

    /// One backward-Euler step of size `dt`.
    pub fn step(&mut self, dt: f64) -> Result<()> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(FemError::BadTimeStep);
        }
        let t1 = self.t + dt;
        let next = match &self.kind {
            Kind::Linear { a, forcing } => {
                let lu = match &self.step_lu {
                    Some((bits, lu)) if *bits == dt.to_bits() => lu.clone(),
                    _ => {
                        let k = self.mass.add_scaled(1.0, a, dt);
                        let lu = Arc::new(k.lu().map_err(|_| FemError::SingularStepMatrix)?);
                        self.step_lu = Some((dt.to_bits(), lu.clone()));
                        lu
                    }
                };
                let b = forcing(t1)?;
                let mu = self.mass.matvec(&self.state);
                let rhs: Vec<f64> = mu.iter().zip(&b).map(|(m, b)| m + dt * b).collect();
                lu.solve(&rhs)
            }
            Kind::Nonlinear { asm } => {
                let asm = asm.clone();
                let mut u = self.state.clone();
                let mut done = false;
                for _ in 0..=self.newton_max_iter {
                    let (r, j) = self.nonlinear_parts(&asm, &u, t1)?;
                    let du: Vec<f64> = u.iter().zip(&self.state).map(|(a, b)| (a - b) / dt).collect();
                    let g: Vec<f64> = self.mass.matvec(&du).iter().zip(&r).map(|(a, b)| a + b).collect();
                    if norm2(&g) < self.newton_tol {
                        done = true;
                        break;
                    }
                    let k = j.add_scaled(1.0, &self.mass, 1.0 / dt);
                    let d = k.lu().map_err(|_| FemError::SingularStepMatrix)?.solve(&g);
                    for (x, d) in u.iter_mut().zip(d) {
                        *x -= d;
                    }
                }
                if !done {
                    return Err(FemError::NewtonDivergence(self.newton_max_iter));
                }
                u
            }
        };
        self.state = next;
        self.t = t1;
        Ok(())
    }

    /// Take `steps` backward-Euler steps; returns the states including the
    /// initial one.
    pub fn step_backward_euler(&mut self, dt: f64, steps: usize) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(steps + 1);
        out.push(self.state.clone());
        for _ in 0..steps {
            self.step(dt)?;
            out.push(self.state.clone());
        }
        Ok(out)
    }

    /// Right-hand side `u̇ = M⁻¹ (b(t) − A u)` for external integrators.
    pub fn export_explicit_ode(&self) -> Result<ExplicitOde> {
        let Kind::Linear { a, forcing } = &self.kind else {
            return Err(FemError::TargetMismatch(
                "explicit export needs a linear block".into(),
            ));
        };
        let lu = self.mass.lu().map_err(|_| FemError::SingularMass)?;
        Ok(ExplicitOde {
            mass: Arc::new(lu),
            a: a.clone(),
            forcing: forcing.clone(),
        })
    }
}

/// `u̇ = f(t, u)` with the mass matrix factorized once.
#[derive(Clone)]
pub struct ExplicitOde {
    mass: Arc<LuFactor>,
    a: CsrMatrix,
    forcing: Forcing,
}

impl ExplicitOde {
    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn rhs(&self, t: f64, u: &[f64]) -> Result<Vec<f64>> {
        let b = (self.forcing)(t)?;
        let r: Vec<f64> = b.iter().zip(self.a.matvec(u)).map(|(b, au)| b - au).collect();
        Ok(self.mass.solve(&r))
    }
}
