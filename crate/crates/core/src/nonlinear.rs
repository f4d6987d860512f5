//! Hybrid nonlinear iteration: stochastic Stokes initial guess, Picard
//! steps, then Newton steps until `‖𝓡‖ ≤ ε ‖y‖`.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::galerkin::{norm2, GalerkinProblem, GalerkinState, KronSumOperator, Linearization, StochasticSolution};
use crate::krylov::{fgmres, FgmresConfig};
use crate::precond::{PcdContext, PrecondKind, PreconditionerSpec, StochasticPreconditioner};
use crate::sparse::SparseLu;

/// Linear solver used inside nonlinear steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LinearMethod {
    /// Sparse LU of the assembled global matrix.
    Direct,
    /// Preconditioned flexible GMRES.
    Fgmres,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearSolverConfig {
    pub method: LinearMethod,
    pub precond: PreconditionerSpec,
    pub fgmres: FgmresConfig,
}

impl Default for LinearSolverConfig {
    fn default() -> Self {
        Self {
            method: LinearMethod::Fgmres,
            precond: PreconditionerSpec::new(PrecondKind::Ahgs),
            fgmres: FgmresConfig {
                tol: 1e-8,
                max_iter: 500,
                restart: 0,
            },
        }
    }
}

impl LinearSolverConfig {
    pub fn direct() -> Self {
        Self {
            method: LinearMethod::Direct,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NonlinearConfig {
    pub n_picard: usize,
    pub max_newton: usize,
    pub tol: f64,
    #[serde(default)]
    pub inexact_picard: bool,
    #[serde(default)]
    pub linear: LinearSolverConfig,
}

impl Default for NonlinearConfig {
    fn default() -> Self {
        Self {
            n_picard: 6,
            max_newton: 10,
            tol: 1e-8,
            inexact_picard: false,
            linear: LinearSolverConfig::default(),
        }
    }
}

impl NonlinearConfig {
    /// Picard count used for a mean Reynolds number.
    pub fn default_picard_steps(re: f64) -> usize {
        if re > 100.0 {
            20
        } else {
            6
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::Config(format!("nonlinear tolerance must be positive, got {}", self.tol)));
        }
        self.linear.fgmres.validate()?;
        self.linear.precond.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepKind {
    Stokes,
    Picard,
    InexactPicard,
    Newton,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub kind: StepKind,
    pub linear_iterations: usize,
    /// `‖𝓡‖ / ‖y‖` after the step.
    pub residual: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolveStatus {
    Converged,
    Maxit,
    Diverged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverReport {
    pub status: SolveStatus,
    pub steps: Vec<StepRecord>,
    pub final_residual: f64,
    pub rhs_norm: f64,
    pub ngdof: usize,
    pub m: usize,
    pub m_nu: usize,
    pub linear_method: LinearMethod,
    pub precond: String,
    pub restart: usize,
}

impl SolverReport {
    pub fn count(&self, kind: StepKind) -> usize {
        self.steps.iter().filter(|s| s.kind == kind).count()
    }

    pub fn converged(&self) -> bool {
        self.status == SolveStatus::Converged
    }

    pub fn write_json<W: Write>(&self, w: W) -> Result<()> {
        serde_json::to_writer_pretty(w, self)?;
        Ok(())
    }

    /// `step,kind,linear_iterations,residual` rows.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "step,kind,linear_iterations,residual")?;
        for (i, s) in self.steps.iter().enumerate() {
            let kind = serde_json::to_value(s.kind)?;
            writeln!(
                w,
                "{i},{},{},{:.6e}",
                kind.as_str().unwrap_or_default(),
                s.linear_iterations,
                s.residual
            )?;
        }
        Ok(())
    }
}

/// Solves `op x = rhs` with the configured method; returns the solution and
/// the Krylov iteration count (1 for direct solves).
pub fn solve_linear(
    problem: &GalerkinProblem,
    op: &KronSumOperator,
    rhs: &[f64],
    cfg: &LinearSolverConfig,
    mean_velocity: &[f64],
) -> Result<(Vec<f64>, usize)> {
    match cfg.method {
        LinearMethod::Direct => {
            let a = if op.layout().m == 1 {
                op.mean_saddle()
            } else {
                op.assemble_global()
            };
            let lu = SparseLu::new(&a)?;
            let mut x = rhs.to_vec();
            lu.solve_in_place(&mut x);
            Ok((x, 1))
        }
        LinearMethod::Fgmres => {
            let ctx = PcdContext {
                space: problem.space(),
                mean_viscosity: problem.mean_viscosity(),
                mean_velocity,
            };
            let prec = StochasticPreconditioner::new(op, cfg.precond, Some(ctx))?;
            let res = fgmres(op, &prec, rhs, None, &cfg.fgmres)?;
            if !res.converged {
                log::warn!(
                    "FGMRES stopped after {} iterations at relative residual {:.3e}",
                    res.iterations,
                    res.true_residual
                );
            }
            Ok((res.x, res.iterations))
        }
    }
}

/// Solves the stochastic Stokes system `Σ H_ℓ ⊗ 𝓢_ℓ v = y`.
pub fn solve_stochastic_stokes(problem: &GalerkinProblem, cfg: &LinearSolverConfig) -> Result<(StochasticSolution, usize)> {
    let op = problem.stokes_operator()?;
    let y = problem.rhs()?;
    let zero = vec![0.0; problem.layout().nu];
    let (x, it) = solve_linear(problem, &op, y.as_slice(), cfg, &zero)?;
    Ok((StochasticSolution::from_vec(problem.layout(), x)?, it))
}

/// Residual growth by more than 10x over three steps, or a non-finite value.
fn diverged(history: &[f64]) -> bool {
    let n = history.len();
    match history.last() {
        Some(r) if !r.is_finite() => true,
        Some(&r) if n >= 4 => r > 10.0 * history[n - 4],
        _ => false,
    }
}

/// One correction step with the given linearization; returns the Krylov
/// iteration count.
fn correction_step(
    problem: &GalerkinProblem,
    state: &mut GalerkinState,
    kind: StepKind,
    residual: &StochasticSolution,
    cfg: &LinearSolverConfig,
) -> Result<usize> {
    let lin = match kind {
        StepKind::Newton => Linearization::Newton,
        StepKind::Stokes => Linearization::Stokes,
        StepKind::Picard | StepKind::InexactPicard => Linearization::Picard,
    };
    let op = problem.linearized_operator(state, lin)?;
    op.check_current(state)?;
    let (dv, its) = if kind == StepKind::InexactPicard {
        let lu = SparseLu::new(&op.mean_saddle())?;
        let mut dv = residual.as_slice().to_vec();
        lu.solve_many_in_place(&mut dv)?;
        (dv, 1)
    } else {
        let mean_u = state.iterate().velocity(0).to_vec();
        solve_linear(problem, &op, residual.as_slice(), cfg, &mean_u)?
    };
    state.update(&dv)?;
    Ok(its)
}

/// Runs the hybrid strategy from `initial` (the stochastic Stokes solution
/// when `None`).
pub fn hybrid_solve_from(
    problem: &GalerkinProblem,
    cfg: &NonlinearConfig,
    initial: Option<StochasticSolution>,
) -> Result<(StochasticSolution, SolverReport)> {
    cfg.validate()?;
    let layout = problem.layout();
    let y = problem.rhs()?;
    let ynorm = norm2(y.as_slice());
    let scale = if ynorm > 0.0 { ynorm } else { 1.0 };
    let mut steps = Vec::new();
    let mut history = Vec::new();
    let mut state = match initial {
        Some(v) => {
            if v.layout() != layout {
                return Err(Error::InvalidInput("initial guess has the wrong layout".into()));
            }
            GalerkinState::new(v)
        }
        None => {
            let t = Instant::now();
            let (v, its) = solve_stochastic_stokes(problem, &cfg.linear)?;
            let state = GalerkinState::new(v);
            let r = norm2(problem.global_residual(&state)?.as_slice()) / scale;
            steps.push(StepRecord {
                kind: StepKind::Stokes,
                linear_iterations: its,
                residual: r,
                seconds: t.elapsed().as_secs_f64(),
            });
            history.push(r);
            state
        }
    };
    let mut residual = problem.global_residual(&state)?;
    let mut rel = norm2(residual.as_slice()) / scale;
    if history.is_empty() {
        history.push(rel);
    }
    let picard_kind = if cfg.inexact_picard {
        StepKind::InexactPicard
    } else {
        StepKind::Picard
    };
    let plan = std::iter::repeat_n(picard_kind, cfg.n_picard).chain(std::iter::repeat_n(StepKind::Newton, cfg.max_newton));
    let mut status = SolveStatus::Maxit;
    if rel <= cfg.tol {
        status = SolveStatus::Converged;
    } else {
        for kind in plan {
            let t = Instant::now();
            let its = correction_step(problem, &mut state, kind, &residual, &cfg.linear)?;
            residual = problem.global_residual(&state)?;
            rel = norm2(residual.as_slice()) / scale;
            steps.push(StepRecord {
                kind,
                linear_iterations: its,
                residual: rel,
                seconds: t.elapsed().as_secs_f64(),
            });
            history.push(rel);
            log::info!("{kind:?} step: relative residual {rel:.3e} ({its} linear iterations)");
            if rel <= cfg.tol {
                status = SolveStatus::Converged;
                break;
            }
            if diverged(&history) {
                status = SolveStatus::Diverged;
                break;
            }
        }
    }
    let report = SolverReport {
        status,
        steps,
        final_residual: rel,
        rhs_norm: ynorm,
        ngdof: layout.ngdof(),
        m: layout.m,
        m_nu: problem.coupling().m_nu(),
        linear_method: cfg.linear.method,
        precond: cfg.linear.precond.name(),
        restart: cfg.linear.fgmres.restart,
    };
    Ok((state.into_solution(), report))
}

/// Stokes initial guess, `n_picard` Picard steps, Newton to tolerance.
pub fn hybrid_solve(problem: &GalerkinProblem, cfg: &NonlinearConfig) -> Result<(StochasticSolution, SolverReport)> {
    hybrid_solve_from(problem, cfg, None)
}

/// One mean-block Picard correction on a state (the inexact variant).
pub fn inexact_picard_step(problem: &GalerkinProblem, state: &mut GalerkinState) -> Result<f64> {
    let residual = problem.global_residual(state)?;
    correction_step(problem, state, StepKind::InexactPicard, &residual, &LinearSolverConfig::direct())?;
    let y = norm2(problem.rhs()?.as_slice());
    Ok(norm2(problem.global_residual(state)?.as_slice()) / if y > 0.0 { y } else { 1.0 })
}

/// Krylov iterations of one preconditioned linearized solve at a fixed
/// iterate, with the nonlinear residual as right-hand side.
pub fn step_iterations(
    problem: &GalerkinProblem,
    state: &GalerkinState,
    lin: Linearization,
    precond: PreconditionerSpec,
    fgmres_cfg: &FgmresConfig,
) -> Result<(usize, bool)> {
    let op = problem.linearized_operator(state, lin)?;
    let residual = problem.global_residual(state)?;
    let ctx = PcdContext {
        space: problem.space(),
        mean_viscosity: problem.mean_viscosity(),
        mean_velocity: state.iterate().velocity(0),
    };
    let prec = StochasticPreconditioner::new(&op, precond, Some(ctx))?;
    let res = fgmres(&op, &prec, residual.as_slice(), None, fgmres_cfg)?;
    Ok((res.iterations, res.converged))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::FemSpace;
    use crate::mesh::{build_mesh, Geometry};
    use crate::random_field::{KlMethod, StochasticViscosity, ViscosityParams};
    use std::sync::Arc;

    fn cavity_problem(cov: f64, p: usize, mean: f64) -> GalerkinProblem {
        let mesh = Arc::new(build_mesh(&Geometry::Cavity, 6, 6).unwrap());
        let params = ViscosityParams {
            mean,
            cov,
            lx: 1.0,
            ly: 1.0,
            dim: 2,
            degree: 2 * p,
            kl_method: KlMethod::Separable,
        };
        let visc = StochasticViscosity::lognormal(&mesh, &params).unwrap();
        GalerkinProblem::new(Arc::new(FemSpace::new(mesh)), &visc, p).unwrap()
    }

    #[test]
    fn divergence_guard() {
        assert!(!diverged(&[1.0, 2.0, 5.0]));
        assert!(diverged(&[1.0, 2.0, 5.0, 10.5]));
        assert!(diverged(&[1.0, f64::NAN]));
    }

    #[test]
    fn stokes_deterministic_limit_has_zero_higher_modes() {
        let prob = cavity_problem(0.0, 2, 0.05);
        let (v, _) = solve_stochastic_stokes(&prob, &LinearSolverConfig::direct()).unwrap();
        for k in 1..prob.layout().m {
            assert!(norm2(&v.as_slice()[prob.layout().mode_range(k)]) <= 1e-10);
        }
        let mut div = vec![0.0; prob.layout().np];
        prob.space().assemble_divergence().matvec(v.velocity(0), &mut div);
        div[prob.pressure_pin().unwrap()] = 0.0;
        assert!(norm2(&div) <= 1e-8, "{}", norm2(&div));
    }

    #[test]
    fn hybrid_converges_on_cavity_with_both_solvers() {
        let prob = cavity_problem(0.2, 1, 0.05);
        let mut cfg = NonlinearConfig {
            n_picard: 2,
            ..NonlinearConfig::default()
        };
        let (v1, r1) = hybrid_solve(&prob, &cfg).unwrap();
        assert!(r1.converged(), "{r1:?}");
        cfg.linear = LinearSolverConfig::direct();
        let (v2, r2) = hybrid_solve(&prob, &cfg).unwrap();
        assert!(r2.converged());
        let d: Vec<f64> = v1.as_slice().iter().zip(v2.as_slice()).map(|(a, b)| a - b).collect();
        assert!(norm2(&d) <= 1e-6 * v2.norm());
        let again = norm2(prob.residual_at(&v2).unwrap().as_slice()) / r2.rhs_norm;
        assert!((again - r2.final_residual).abs() <= 1e-13 * r2.final_residual.max(1e-300));
        let tail: Vec<f64> = r2.steps.iter().rev().take(3).map(|s| s.residual).collect();
        assert!(tail.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn inexact_equals_exact_without_uncertainty() {
        let prob = cavity_problem(0.0, 1, 0.05);
        let base = NonlinearConfig {
            n_picard: 3,
            max_newton: 0,
            linear: LinearSolverConfig::direct(),
            ..NonlinearConfig::default()
        };
        let (a, _) = hybrid_solve(&prob, &base).unwrap();
        let (b, _) = hybrid_solve(
            &prob,
            &NonlinearConfig {
                inexact_picard: true,
                ..base
            },
        )
        .unwrap();
        let d: Vec<f64> = a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| x - y).collect();
        assert!(norm2(&d) <= 1e-10 * a.norm());
    }

    #[test]
    fn zero_forcing_gives_zero_solution() {
        let mesh = Arc::new(build_mesh(&Geometry::Cavity, 4, 4).unwrap());
        let visc = StochasticViscosity::constant(mesh.num_nodes(), 0.1, 1).unwrap();
        let space = Arc::new(FemSpace::new(mesh.clone()));
        let prob = GalerkinProblem::with_boundary(space, &visc, 0, vec![0.0; mesh.nu()]).unwrap();
        let (v, _) = solve_stochastic_stokes(&prob, &LinearSolverConfig::direct()).unwrap();
        assert_eq!(v.norm(), 0.0);
    }

    #[test]
    fn report_serializes() {
        let prob = cavity_problem(0.1, 1, 0.05);
        let (_, rep) = hybrid_solve(&prob, &NonlinearConfig::default()).unwrap();
        let mut json = Vec::new();
        rep.write_json(&mut json).unwrap();
        let back: SolverReport = serde_json::from_slice(&json).unwrap();
        assert_eq!(back.status, rep.status);
        let mut csv = Vec::new();
        rep.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("step,kind,linear_iterations,residual\n0,stokes,"));
    }
}
