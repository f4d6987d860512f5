//! Monte Carlo and pseudospectral collocation by repeated deterministic
//! solves.

use std::io::Write;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fem::FemSpace;
use crate::galerkin::{GalerkinProblem, Layout, StochasticSolution};
use crate::gpc::{MultiIndexSet, QuadratureRule};
use crate::nonlinear::{hybrid_solve_from, LinearSolverConfig, NonlinearConfig, SolverReport};
use crate::postproc::{Moments, Probe, ProbeStencil};
use crate::random_field::StochasticViscosity;

/// Solution of one deterministic problem.
#[derive(Debug, Clone)]
pub struct DeterministicSolution {
    pub u: Vec<f64>,
    pub p: Vec<f64>,
    pub report: SolverReport,
}

impl DeterministicSolution {
    /// The `[u, p]` block.
    pub fn block(&self) -> Vec<f64> {
        let mut b = self.u.clone();
        b.extend_from_slice(&self.p);
        b
    }
}

/// Hybrid Picard/Newton solve with a nodal viscosity field, starting from
/// `initial` (a `[u, p]` block) or the Stokes solution.
pub fn deterministic_solve(
    space: &Arc<FemSpace>,
    visc_field: &[f64],
    cfg: &NonlinearConfig,
    initial: Option<&[f64]>,
) -> Result<DeterministicSolution> {
    let visc = StochasticViscosity::from_field(visc_field.to_vec(), 1)?;
    let problem = GalerkinProblem::new(space.clone(), &visc, 0)?;
    let layout = problem.layout();
    let init = initial
        .map(|b| StochasticSolution::from_vec(layout, b.to_vec()))
        .transpose()?;
    let (sol, report) = hybrid_solve_from(&problem, cfg, init)?;
    let v = sol.into_vec();
    Ok(DeterministicSolution {
        u: v[..layout.nu].to_vec(),
        p: v[layout.nu..].to_vec(),
        report,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingOptions {
    pub nonlinear: NonlinearConfig,
    #[serde(default)]
    pub probes: Vec<Probe>,
    /// Keep every per-sample `[u, p]` block in the ensemble.
    #[serde(default)]
    pub keep_solutions: bool,
    pub max_failure_fraction: f64,
}

impl Default for SamplingOptions {
    fn default() -> Self {
        Self {
            nonlinear: NonlinearConfig {
                linear: LinearSolverConfig::direct(),
                ..NonlinearConfig::default()
            },
            probes: Vec::new(),
            keep_solutions: false,
            max_failure_fraction: 0.05,
        }
    }
}

/// Sample points, weights and per-sample outcomes.
#[derive(Debug, Clone, Default)]
pub struct SampleEnsemble {
    pub points: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    pub converged: Vec<bool>,
    /// Per-sample blocks when requested; `None` for failed samples.
    pub solutions: Vec<Option<Vec<f64>>>,
    /// Probe values of converged samples, one row per probe.
    pub probe_values: Vec<Vec<f64>>,
    pub probes: Vec<Probe>,
}

/// Unweighted statistics of the converged sample values at a probe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSummary {
    pub probe: String,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSummary {
    pub samples: usize,
    pub failures: usize,
    pub probes: Vec<ProbeSummary>,
}

impl SampleEnsemble {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn failures(&self) -> usize {
        self.converged.iter().filter(|c| !**c).count()
    }

    pub fn summary(&self) -> EnsembleSummary {
        let probes = self
            .probes
            .iter()
            .zip(&self.probe_values)
            .map(|(p, v)| {
                let n = v.len() as f64;
                let mean = v.iter().sum::<f64>() / n;
                let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
                ProbeSummary {
                    probe: p.label(),
                    mean,
                    std: var.sqrt(),
                }
            })
            .collect();
        EnsembleSummary {
            samples: self.len(),
            failures: self.failures(),
            probes,
        }
    }

    /// One row per converged sample: `sample,<probe labels...>`.
    pub fn write_probe_csv<W: Write>(&self, mut w: W) -> Result<()> {
        write!(w, "sample")?;
        for p in &self.probes {
            write!(w, ",{}", p.label())?;
        }
        writeln!(w)?;
        let kept: Vec<usize> = (0..self.len()).filter(|&q| self.converged[q]).collect();
        for (row, q) in kept.iter().enumerate() {
            write!(w, "{q}")?;
            for v in &self.probe_values {
                write!(w, ",{:.12e}", v[row])?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Standard normal point `q` of the stream `seed`, independent of the order
/// in which points are requested.
pub fn normal_point(seed: u64, q: u64, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(q);
    (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()
}

struct SampleSolver<'a> {
    space: &'a Arc<FemSpace>,
    visc: &'a StochasticViscosity,
    opts: &'a SamplingOptions,
    reference: Vec<f64>,
    stencils: Vec<ProbeStencil>,
}

impl<'a> SampleSolver<'a> {
    fn new(space: &'a Arc<FemSpace>, visc: &'a StochasticViscosity, opts: &'a SamplingOptions) -> Result<Self> {
        if visc.num_nodes() != space.mesh().num_nodes() {
            return Err(Error::InvalidInput("viscosity and mesh sizes differ".into()));
        }
        let stencils = opts
            .probes
            .iter()
            .map(|p| p.stencil(space.mesh()))
            .collect::<Result<_>>()?;
        let mean = deterministic_solve(space, visc.coeff(0), &opts.nonlinear, None)?;
        if !mean.report.converged() {
            return Err(Error::Solver("deterministic solve at the mean viscosity did not converge".into()));
        }
        Ok(Self {
            space,
            visc,
            opts,
            reference: mean.block(),
            stencils,
        })
    }

    /// Newton from the mean solution, then the full hybrid scheme if that
    /// fails.
    fn solve(&self, xi: &[f64]) -> Result<Option<Vec<f64>>> {
        let sample = self.visc.sample(xi)?;
        if sample.nonpositive > 0 {
            return Ok(None);
        }
        let warm = NonlinearConfig {
            n_picard: 0,
            ..self.opts.nonlinear
        };
        let first = deterministic_solve(self.space, &sample.field, &warm, Some(&self.reference));
        if let Ok(s) = &first {
            if s.report.converged() {
                return Ok(Some(s.block()));
            }
        }
        let cold = deterministic_solve(self.space, &sample.field, &self.opts.nonlinear, None)?;
        Ok(cold.report.converged().then(|| cold.block()))
    }

    /// Solves at every point in order, calling `visit(q, block)` on
    /// converged samples.
    fn run<F>(&self, points: Vec<Vec<f64>>, weights: Vec<f64>, mut visit: F) -> Result<SampleEnsemble>
    where
        F: FnMut(usize, &[f64]),
    {
        let n = points.len();
        let mut ens = SampleEnsemble {
            probe_values: vec![Vec::new(); self.stencils.len()],
            probes: self.opts.probes.clone(),
            ..SampleEnsemble::default()
        };
        for (q, xi) in points.iter().enumerate() {
            let block = match self.solve(xi) {
                Ok(b) => b,
                Err(e) => {
                    log::warn!("sample {q} failed: {e}");
                    None
                }
            };
            ens.converged.push(block.is_some());
            if let Some(b) = &block {
                visit(q, b);
                for (vals, s) in ens.probe_values.iter_mut().zip(&self.stencils) {
                    vals.push(s.eval(b));
                }
            } else {
                log::warn!("sample {q} excluded");
            }
            if self.opts.keep_solutions {
                ens.solutions.push(block);
            }
            let failed = ens.failures();
            if failed as f64 > self.opts.max_failure_fraction * n as f64 {
                return Err(Error::Solver(format!(
                    "{failed} of {n} samples failed, above the allowed fraction {}",
                    self.opts.max_failure_fraction
                )));
            }
        }
        ens.points = points;
        ens.weights = weights;
        Ok(ens)
    }
}

/// Monte Carlo moments of `[u, p]`.
#[derive(Debug, Clone)]
pub struct MonteCarloResult {
    pub ensemble: SampleEnsemble,
    pub mean: Vec<f64>,
    /// Unbiased sample variance.
    pub variance: Vec<f64>,
    pub nu: usize,
}

impl MonteCarloResult {
    pub fn moments(&self) -> Moments {
        Moments {
            mean_u: self.mean[..self.nu].to_vec(),
            mean_p: self.mean[self.nu..].to_vec(),
            var_u: self.variance[..self.nu].to_vec(),
            var_p: self.variance[self.nu..].to_vec(),
        }
    }
}

/// One-pass mean and variance accumulation.
#[derive(Debug, Clone)]
pub struct Welford {
    count: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    pub fn new(n: usize) -> Self {
        Self {
            count: 0,
            mean: vec![0.0; n],
            m2: vec![0.0; n],
        }
    }

    pub fn push(&mut self, x: &[f64]) {
        self.count += 1;
        let c = self.count as f64;
        for ((m, s), &v) in self.mean.iter_mut().zip(&mut self.m2).zip(x) {
            let d = v - *m;
            *m += d / c;
            *s += d * (v - *m);
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn variance(&self) -> Vec<f64> {
        let d = (self.count as f64 - 1.0).max(1.0);
        self.m2.iter().map(|s| s / d).collect()
    }
}

/// `n_samples` i.i.d. standard normal points, solved and averaged.
pub fn monte_carlo(
    space: &Arc<FemSpace>,
    visc: &StochasticViscosity,
    n_samples: usize,
    seed: u64,
    opts: &SamplingOptions,
) -> Result<MonteCarloResult> {
    if n_samples < 2 {
        return Err(Error::InvalidInput(format!("Monte Carlo needs at least two samples, got {n_samples}")));
    }
    let solver = SampleSolver::new(space, visc, opts)?;
    let points: Vec<Vec<f64>> = (0..n_samples as u64).map(|q| normal_point(seed, q, visc.dim())).collect();
    let weights = vec![1.0 / n_samples as f64; n_samples];
    let nblock = space.nu() + space.np();
    let mut acc = Welford::new(nblock);
    let ensemble = solver.run(points, weights, |_, b| acc.push(b))?;
    Ok(MonteCarloResult {
        ensemble,
        mean: acc.mean().to_vec(),
        variance: acc.variance(),
        nu: space.nu(),
    })
}

/// Accumulates `c_k += w ψ_k(ξ) v` for a discrete projection.
#[derive(Debug, Clone)]
pub struct ProjectionAccumulator {
    basis: MultiIndexSet,
    coeffs: Vec<Vec<f64>>,
}

impl ProjectionAccumulator {
    pub fn new(basis: MultiIndexSet, len: usize) -> Self {
        let m = basis.len();
        Self {
            basis,
            coeffs: vec![vec![0.0; len]; m],
        }
    }

    pub fn add(&mut self, xi: &[f64], weight: f64, values: &[f64]) -> Result<()> {
        let psi = self.basis.eval_all(xi)?;
        for (c, p) in self.coeffs.iter_mut().zip(psi) {
            let s = weight * p;
            c.iter_mut().zip(values).for_each(|(ci, v)| *ci += s * v);
        }
        Ok(())
    }

    pub fn into_coeffs(self) -> Vec<Vec<f64>> {
        self.coeffs
    }
}

/// Projects point values onto `basis` with the weights of `rule`.
pub fn pseudospectral_projection(basis: &MultiIndexSet, rule: &QuadratureRule, values: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    if values.len() != rule.len() {
        return Err(Error::InvalidInput("one value vector per quadrature point is required".into()));
    }
    let len = values.first().map_or(0, Vec::len);
    let mut acc = ProjectionAccumulator::new(basis.clone(), len);
    for ((xi, w), v) in rule.points().iter().zip(rule.weights()).zip(values) {
        acc.add(xi, *w, v)?;
    }
    Ok(acc.into_coeffs())
}

#[derive(Debug, Clone)]
pub struct CollocationResult {
    pub solution: StochasticSolution,
    pub ensemble: SampleEnsemble,
}

/// Pseudospectral collocation onto the total-degree basis of degree `p`.
pub fn collocation(
    space: &Arc<FemSpace>,
    visc: &StochasticViscosity,
    rule: &QuadratureRule,
    p: usize,
    opts: &SamplingOptions,
) -> Result<CollocationResult> {
    if rule.dim() != visc.dim() {
        return Err(Error::InvalidInput(format!(
            "quadrature dimension {} differs from the stochastic dimension {}",
            rule.dim(),
            visc.dim()
        )));
    }
    let basis = MultiIndexSet::total_degree(visc.dim(), p)?;
    let solver = SampleSolver::new(space, visc, opts)?;
    let layout = Layout {
        nu: space.nu(),
        np: space.np(),
        m: basis.len(),
    };
    let mut acc = ProjectionAccumulator::new(basis, layout.block());
    let mut err = None;
    let ensemble = solver.run(rule.points().to_vec(), rule.weights().to_vec(), |q, b| {
        if let Err(e) = acc.add(&rule.points()[q], rule.weights()[q], b) {
            err.get_or_insert(e);
        }
    })?;
    if let Some(e) = err {
        return Err(e);
    }
    let data: Vec<f64> = acc.into_coeffs().into_iter().flatten().collect();
    Ok(CollocationResult {
        solution: StochasticSolution::from_vec(layout, data)?,
        ensemble,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::galerkin::norm2;
    use crate::gpc::{smolyak_rule, tensor_rule};
    use crate::mesh::{build_mesh, Geometry};
    use crate::nonlinear::hybrid_solve;
    use crate::random_field::{KlMethod, ViscosityParams};
    use proptest::prelude::*;

    fn cavity_space(n: usize) -> Arc<FemSpace> {
        Arc::new(FemSpace::new(Arc::new(build_mesh(&Geometry::Cavity, n, n).unwrap())))
    }

    #[test]
    fn deterministic_matches_galerkin_mean_at_zero_cov() {
        let space = cavity_space(6);
        let visc = StochasticViscosity::constant(space.mesh().num_nodes(), 0.05, 2).unwrap();
        let opts = SamplingOptions::default();
        let det = deterministic_solve(&space, visc.coeff(0), &opts.nonlinear, None).unwrap();
        assert!(det.report.converged());
        let prob = GalerkinProblem::new(space.clone(), &visc, 0).unwrap();
        let (sol, _) = hybrid_solve(&prob, &opts.nonlinear).unwrap();
        let d: Vec<f64> = det.u.iter().zip(sol.velocity(0)).map(|(a, b)| a - b).collect();
        assert!(norm2(&d) <= 1e-10 * norm2(&det.u));
    }

    #[test]
    fn stokes_limit_matches_stochastic_stokes() {
        let space = cavity_space(4);
        let visc = StochasticViscosity::constant(space.mesh().num_nodes(), 0.1, 1).unwrap();
        let prob = GalerkinProblem::new(space.clone(), &visc, 0).unwrap().without_convection();
        let (stokes, _) = crate::nonlinear::solve_stochastic_stokes(&prob, &LinearSolverConfig::direct()).unwrap();
        let (sol, rep) = hybrid_solve(&prob, &SamplingOptions::default().nonlinear).unwrap();
        assert!(rep.converged());
        let d: Vec<f64> = stokes.as_slice().iter().zip(sol.as_slice()).map(|(a, b)| a - b).collect();
        assert!(norm2(&d) <= 1e-10 * stokes.norm());
    }

    #[test]
    fn seeded_points_are_order_independent() {
        let a = normal_point(11, 5, 3);
        let _ = normal_point(11, 4, 3);
        assert_eq!(a, normal_point(11, 5, 3));
        assert_ne!(a, normal_point(12, 5, 3));
    }

    #[test]
    fn welford_matches_two_pass() {
        let xs = [[1.0, -2.0], [3.0, 0.5], [2.5, 4.0], [-1.0, 1.0]];
        let mut w = Welford::new(2);
        xs.iter().for_each(|x| w.push(x));
        for d in 0..2 {
            let mean = xs.iter().map(|x| x[d]).sum::<f64>() / 4.0;
            let var = xs.iter().map(|x| (x[d] - mean).powi(2)).sum::<f64>() / 3.0;
            assert!((w.mean()[d] - mean).abs() < 1e-14);
            assert!((w.variance()[d] - var).abs() < 1e-14);
        }
    }

    #[test]
    fn projection_recovers_polynomial_coefficients() {
        let basis = MultiIndexSet::total_degree(2, 3).unwrap();
        let coeffs: Vec<f64> = (0..basis.len()).map(|k| 0.1 * k as f64 - 0.3).collect();
        for rule in [smolyak_rule(4, 2).unwrap(), tensor_rule(4, 2).unwrap()] {
            let values: Vec<Vec<f64>> = rule
                .points()
                .iter()
                .map(|xi| {
                    let psi = basis.eval_all(xi).unwrap();
                    vec![psi.iter().zip(&coeffs).map(|(a, b)| a * b).sum()]
                })
                .collect();
            let got = pseudospectral_projection(&basis, &rule, &values).unwrap();
            for (g, c) in got.iter().zip(&coeffs) {
                assert!((g[0] - c).abs() <= 1e-10);
            }
        }
    }

    fn model(space: &Arc<FemSpace>, cov: f64) -> StochasticViscosity {
        let params = ViscosityParams {
            mean: 0.05,
            cov,
            lx: 0.25,
            ly: 0.25,
            dim: 2,
            degree: 4,
            kl_method: KlMethod::Separable,
        };
        StochasticViscosity::lognormal(space.mesh(), &params).unwrap()
    }

    #[test]
    fn zero_cov_ensembles_are_degenerate() {
        let space = cavity_space(4);
        let visc = model(&space, 0.0);
        let opts = SamplingOptions {
            probes: vec![Probe::new(0.5, 0.8, crate::postproc::ProbeField::Ux)],
            ..SamplingOptions::default()
        };
        let mc = monte_carlo(&space, &visc, 4, 3, &opts).unwrap();
        assert!(mc.variance.iter().all(|v| v.abs() <= 1e-20));
        assert_eq!(mc.ensemble.weights.iter().sum::<f64>(), 1.0);
        let col = collocation(&space, &visc, &smolyak_rule(2, 2).unwrap(), 2, &opts).unwrap();
        let m0 = col.solution.norm();
        for k in 1..col.solution.layout().m {
            let r = col.solution.layout().mode_range(k);
            assert!(norm2(&col.solution.as_slice()[r]) <= 1e-10 * m0);
        }
    }

    #[test]
    fn seeded_monte_carlo_is_reproducible() {
        let space = cavity_space(4);
        let visc = model(&space, 0.2);
        let opts = SamplingOptions::default();
        let a = monte_carlo(&space, &visc, 3, 9, &opts).unwrap();
        let b = monte_carlo(&space, &visc, 3, 9, &opts).unwrap();
        assert_eq!(a.mean, b.mean);
        assert_eq!(a.variance, b.variance);
        assert!(monte_carlo(&space, &visc, 1, 9, &opts).is_err());
    }

    proptest! {
        #[test]
        fn monte_carlo_weights_sum_to_one(n in 2usize..5000) {
            let w = vec![1.0 / n as f64; n];
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }
}
