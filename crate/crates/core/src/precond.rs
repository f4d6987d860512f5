//! Preconditioners for the stochastic Galerkin system: mean-based,
//! Kronecker, block Gauss–Seidel, approximate hierarchical Gauss–Seidel
//! with truncated coupling, and pressure convection–diffusion variants of
//! the mean-block solve.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fem::{FemSpace, PcdOperators};
use crate::galerkin::{KronSumOperator, Layout};
use crate::gpc::{MultiIndexSet, TripleProducts};
use crate::krylov::{fgmres, FgmresConfig, FnOperator, Preconditioner};
use crate::sparse::{CsrMatrix, SparseLu, VelocityBlock};

/// Outer structure of the stochastic preconditioner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PrecondKind {
    Mb,
    K,
    Bgs,
    Ahgs,
}

/// How each deterministic block is (approximately) inverted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum MeanSolver {
    /// Sparse LU of the mean saddle-point block.
    Direct,
    /// One application of the block-triangular PCD preconditioner.
    Pcd,
    /// `iters` steps of PCD-preconditioned GMRES on the diagonal block.
    PcdGmres { iters: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreconditionerSpec {
    pub kind: PrecondKind,
    pub mean_solver: MeanSolver,
    /// Degree cutoff `ℓ_t` of the coupling MATVECs in ahGS; `None` keeps all.
    #[serde(default)]
    pub truncation: Option<usize>,
}

impl PreconditionerSpec {
    pub fn new(kind: PrecondKind) -> Self {
        Self {
            kind,
            mean_solver: MeanSolver::Direct,
            truncation: None,
        }
    }

    pub fn with_truncation(mut self, lt: usize) -> Self {
        self.truncation = Some(lt);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if let MeanSolver::PcdGmres { iters: 0 } = self.mean_solver {
            return Err(Error::Config("inner GMRES iteration count must be at least 1".into()));
        }
        Ok(())
    }

    /// Short name such as `ahgs-pcd-it`.
    pub fn name(&self) -> String {
        let base = match self.kind {
            PrecondKind::Mb => "mb",
            PrecondKind::K => "k",
            PrecondKind::Bgs => "bgs",
            PrecondKind::Ahgs => "ahgs",
        };
        match self.mean_solver {
            MeanSolver::Direct => base.to_string(),
            MeanSolver::Pcd => format!("{base}-pcd"),
            MeanSolver::PcdGmres { .. } => format!("{base}-pcd-it"),
        }
    }
}

impl fmt::Display for PreconditionerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for PreconditionerSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, mean_solver) = match s.to_ascii_lowercase().as_str() {
            "mb" => (PrecondKind::Mb, MeanSolver::Direct),
            "k" => (PrecondKind::K, MeanSolver::Direct),
            "bgs" => (PrecondKind::Bgs, MeanSolver::Direct),
            "ahgs" => (PrecondKind::Ahgs, MeanSolver::Direct),
            "ahgs-pcd" => (PrecondKind::Ahgs, MeanSolver::Pcd),
            "ahgs-pcd-it" => (PrecondKind::Ahgs, MeanSolver::PcdGmres { iters: 20 }),
            other => return Err(Error::Config(format!("unknown preconditioner '{other}'"))),
        };
        Ok(Self {
            kind,
            mean_solver,
            truncation: None,
        })
    }
}

/// Stochastic indices grouped by total degree.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HierarchicalBlocking {
    blocks: Vec<Vec<usize>>,
    degree_of: Vec<usize>,
}

impl HierarchicalBlocking {
    pub fn new(basis: &MultiIndexSet) -> Self {
        let mut blocks = vec![Vec::new(); basis.degree() + 1];
        let degree_of: Vec<usize> = (0..basis.len()).map(|k| basis.total(k)).collect();
        for (k, &d) in degree_of.iter().enumerate() {
            blocks[d].push(k);
        }
        Self { blocks, degree_of }
    }

    pub fn num_degrees(&self) -> usize {
        self.blocks.len()
    }

    /// Indices of total degree exactly `d`.
    pub fn block(&self, d: usize) -> &[usize] {
        &self.blocks[d]
    }

    pub fn degree_of(&self, k: usize) -> usize {
        self.degree_of[k]
    }

    /// Cumulative range `0..end` of indices with degree at most `d`.
    pub fn cumulative(&self, d: usize) -> std::ops::Range<usize> {
        0..self.blocks[..=d].iter().map(Vec::len).sum()
    }
}

/// Coupling coefficients used by a truncated hierarchical sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CouplingCost {
    pub truncation: usize,
    pub m_t: usize,
    /// `Σ_{ℓ < M_t}` of block-lower nonzeros of `H_ℓ` (row degree above column degree).
    pub used_lower_nnz: usize,
    /// `Σ_ℓ nnz(H_ℓ)` over all coefficient indices.
    pub total_nnz: usize,
}

impl CouplingCost {
    pub fn new(h: &TripleProducts, lt: usize) -> Self {
        let m_t = h.truncation_size(lt);
        Self {
            truncation: lt,
            m_t,
            used_lower_nnz: h.accumulated_lower_nnz(m_t),
            total_nnz: h.total_nnz(),
        }
    }

    pub fn fraction(&self) -> f64 {
        self.used_lower_nnz as f64 / self.total_nnz as f64
    }
}

/// Block upper-triangular PCD preconditioner for one saddle-point block
/// `[F Bᵀ; B 0]`: `S⁻¹ ≈ Ap⁻¹ Fp Mp⁻¹`, velocity by sparse LU of `F`.
pub struct PcdSolver {
    nu: usize,
    f_lu: SparseLu,
    ap_lu: SparseLu,
    mp_lu: SparseLu,
    fp: CsrMatrix,
    b: CsrMatrix,
    pin: Option<usize>,
}

impl fmt::Debug for PcdSolver {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PcdSolver").field("nu", &self.nu).finish_non_exhaustive()
    }
}

impl PcdSolver {
    pub fn new(f: &VelocityBlock, b: &CsrMatrix, pin: Option<usize>, ops: &PcdOperators) -> Result<Self> {
        Ok(Self {
            nu: f.dim(),
            f_lu: SparseLu::new(&f.to_csr())?,
            ap_lu: SparseLu::new(&ops.ap)?,
            mp_lu: SparseLu::new(&ops.mp)?,
            fp: ops.fp.clone(),
            b: b.clone(),
            pin,
        })
    }

    /// `z = P⁻¹ r` on one block of length `N_u + N_p`.
    pub fn apply(&self, r: &[f64], z: &mut [f64]) {
        let nu = self.nu;
        let (ru, rp) = r.split_at(nu);
        let (zu, zp) = z.split_at_mut(nu);
        let mut t = rp.to_vec();
        self.mp_lu.solve_in_place(&mut t);
        self.fp.matvec(&t, zp);
        self.ap_lu.solve_in_place(zp);
        zp.iter_mut().for_each(|v| *v = -*v);
        if let Some(k) = self.pin {
            zp[k] = rp[k];
        }
        zu.copy_from_slice(ru);
        self.b.tmatvec_add(-1.0, zp, zu);
        self.f_lu.solve_in_place(zu);
    }
}

enum BlockSolver {
    Direct(SparseLu),
    Pcd(PcdSolver),
    PcdGmres { pcd: PcdSolver, iters: usize, diag: Vec<VelocityBlock> },
}

/// A preconditioner for one [`KronSumOperator`].
pub struct StochasticPreconditioner<'a> {
    op: &'a KronSumOperator,
    spec: PreconditionerSpec,
    layout: Layout,
    solver: BlockSolver,
    blocking: HierarchicalBlocking,
    hinv: Option<DMatrix<f64>>,
    m_t: usize,
}

impl fmt::Debug for StochasticPreconditioner<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("StochasticPreconditioner")
            .field("spec", &self.spec)
            .field("m_t", &self.m_t)
            .finish_non_exhaustive()
    }
}

/// Mean-flow data for the PCD operators.
pub struct PcdContext<'a> {
    pub space: &'a FemSpace,
    pub mean_viscosity: &'a [f64],
    pub mean_velocity: &'a [f64],
}

/// `Ĥ_0 = Σ_ℓ [tr(F_ℓᵀ F_0) / tr(F_0ᵀ F_0)] H_ℓ`, with the traces taken over
/// the rows that are not Dirichlet-eliminated.
pub fn kronecker_factor(op: &KronSumOperator) -> DMatrix<f64> {
    let h = op.coupling();
    let m = h.m();
    let f0 = op.mean_block();
    let norm0 = f0.frobenius_dot(f0) - 2.0 * op.dirichlet_nodes() as f64;
    let mut out = DMatrix::zeros(m, m);
    for l in 0..op.num_terms() {
        let Some(fl) = op.block(l) else { continue };
        let c = if l == 0 { 1.0 } else { fl.frobenius_dot(f0) / norm0 };
        out += h.matrix(l).to_dense() * c;
    }
    out
}

impl<'a> StochasticPreconditioner<'a> {
    pub fn new(op: &'a KronSumOperator, spec: PreconditionerSpec, pcd: Option<PcdContext<'_>>) -> Result<Self> {
        spec.validate()?;
        let layout = op.layout();
        let h = op.coupling();
        let max_lt = h.coefficient_basis().degree();
        let lt = spec.truncation.unwrap_or(max_lt).min(max_lt);
        let m_t = h.truncation_size(lt).min(op.num_terms());
        let pcd_solver = |ctx: Option<PcdContext<'_>>| -> Result<PcdSolver> {
            let ctx = ctx.ok_or_else(|| Error::Config("PCD preconditioner needs mean-flow data".into()))?;
            let ops = ctx.space.assemble_pcd_operators(ctx.mean_viscosity, ctx.mean_velocity)?;
            PcdSolver::new(op.mean_block(), op.divergence(), op.pressure_pin(), &ops)
        };
        let solver = match spec.mean_solver {
            MeanSolver::Direct => BlockSolver::Direct(SparseLu::new(&op.mean_saddle())?),
            MeanSolver::Pcd => BlockSolver::Pcd(pcd_solver(pcd)?),
            MeanSolver::PcdGmres { iters } => BlockSolver::PcdGmres {
                pcd: pcd_solver(pcd)?,
                iters,
                diag: (0..layout.m).map(|j| op.diagonal_velocity_block(j)).collect(),
            },
        };
        let hinv = if spec.kind == PrecondKind::K {
            let hk = kronecker_factor(op);
            match hk.clone().try_inverse() {
                Some(inv) if inv.iter().all(|v| v.is_finite()) => Some(inv),
                _ => {
                    log::warn!("Kronecker factor is singular; falling back to the mean-based preconditioner");
                    None
                }
            }
        } else {
            None
        };
        Ok(Self {
            op,
            spec,
            layout,
            solver,
            blocking: HierarchicalBlocking::new(h.solution_basis()),
            hinv,
            m_t,
        })
    }

    pub fn spec(&self) -> PreconditionerSpec {
        self.spec
    }

    /// Number of coupling matrices used by the truncated sweeps.
    pub fn truncation_size(&self) -> usize {
        self.m_t
    }

    fn solve_block(&self, j: usize, r: &[f64], z: &mut [f64]) -> Result<()> {
        match &self.solver {
            BlockSolver::Direct(lu) => {
                z.copy_from_slice(r);
                lu.solve_in_place(z);
            }
            BlockSolver::Pcd(p) => p.apply(r, z),
            BlockSolver::PcdGmres { pcd, iters, diag } => {
                let nu = self.layout.nu;
                let b = self.op.divergence();
                let pin = self.op.pressure_pin();
                let f = &diag[j];
                let a = FnOperator::new(self.layout.block(), |x: &[f64], y: &mut [f64]| {
                    y.fill(0.0);
                    let (xu, xp) = x.split_at(nu);
                    let (yu, yp) = y.split_at_mut(nu);
                    f.apply_add(1.0, xu, yu);
                    b.tmatvec_add(1.0, xp, yu);
                    b.matvec_add(1.0, xu, yp);
                    if let Some(k) = pin {
                        yp[k] += xp[k];
                    }
                });
                let prec = PcdBlock(pcd);
                let cfg = FgmresConfig {
                    tol: 1e-12,
                    max_iter: *iters,
                    restart: 0,
                };
                let res = fgmres(&a, &prec, r, None, &cfg)?;
                z.copy_from_slice(&res.x);
            }
        }
        Ok(())
    }

    fn solve_all_blocks(&self, r: &[f64], z: &mut [f64]) -> Result<()> {
        if let BlockSolver::Direct(lu) = &self.solver {
            z.copy_from_slice(r);
            return lu.solve_many_in_place(z);
        }
        for k in 0..self.layout.m {
            let rg = self.layout.mode_range(k);
            self.solve_block(k, &r[rg.clone()], &mut z[rg])?;
        }
        Ok(())
    }

    fn apply_kronecker(&self, r: &[f64], z: &mut [f64]) -> Result<()> {
        let mut w = vec![0.0; r.len()];
        self.solve_all_blocks(r, &mut w)?;
        let Some(hinv) = &self.hinv else {
            z.copy_from_slice(&w);
            return Ok(());
        };
        let l = self.layout;
        z.fill(0.0);
        for j in 0..l.m {
            for k in 0..l.m {
                let c = hinv[(j, k)];
                if c == 0.0 {
                    continue;
                }
                let (zj, wk) = (l.mode_range(j), l.mode_range(k));
                z[zj].iter_mut().zip(&w[wk]).for_each(|(a, b)| *a += c * b);
            }
        }
        Ok(())
    }

    fn block_rhs(&self, j: usize, r: &[f64], coupled: &[f64]) -> Vec<f64> {
        let rg = self.layout.mode_range(j);
        r[rg.clone()].iter().zip(&coupled[rg]).map(|(a, b)| a - b).collect()
    }

    fn apply_bgs(&self, r: &[f64], z: &mut [f64]) -> Result<()> {
        let l = self.layout;
        let mut coupled = vec![0.0; r.len()];
        let m_all = self.op.num_terms();
        for j in 0..l.m {
            let t = self.block_rhs(j, r, &coupled);
            self.solve_block(j, &t, &mut z[l.mode_range(j)])?;
            let zj = z[l.velocity_range(j)].to_vec();
            self.op.apply_column_coupling(j, &zj, &mut coupled, m_all, |row| row > j);
        }
        Ok(())
    }

    fn apply_ahgs(&self, r: &[f64], z: &mut [f64]) -> Result<()> {
        let l = self.layout;
        let mut coupled = vec![0.0; r.len()];
        for d in 0..self.blocking.num_degrees() {
            for &j in self.blocking.block(d) {
                let t = self.block_rhs(j, r, &coupled);
                self.solve_block(j, &t, &mut z[l.mode_range(j)])?;
            }
            if self.m_t <= 1 {
                continue;
            }
            let blocking = &self.blocking;
            for &k in blocking.block(d) {
                let zk = z[l.velocity_range(k)].to_vec();
                self.op.apply_column_coupling(k, &zk, &mut coupled, self.m_t, |row| blocking.degree_of(row) > d);
            }
        }
        Ok(())
    }
}

struct PcdBlock<'a>(&'a PcdSolver);

impl Preconditioner for PcdBlock<'_> {
    fn apply(&self, r: &[f64], z: &mut [f64]) -> Result<()> {
        self.0.apply(r, z);
        Ok(())
    }
}

impl Preconditioner for StochasticPreconditioner<'_> {
    fn apply(&self, r: &[f64], z: &mut [f64]) -> Result<()> {
        match self.spec.kind {
            PrecondKind::Mb => self.solve_all_blocks(r, z),
            PrecondKind::K => self.apply_kronecker(r, z),
            PrecondKind::Bgs => self.apply_bgs(r, z),
            PrecondKind::Ahgs => self.apply_ahgs(r, z),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::galerkin::{GalerkinProblem, GalerkinState, Linearization, StochasticSolution};
    use crate::mesh::{build_mesh, Geometry};
    use crate::random_field::{KlMethod, StochasticViscosity, ViscosityParams};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn problem(cov: f64, p: usize) -> GalerkinProblem {
        let mesh = Arc::new(build_mesh(&Geometry::Cavity, 4, 4).unwrap());
        let params = ViscosityParams {
            mean: 0.05,
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

    fn random(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn apply(p: &StochasticPreconditioner<'_>, r: &[f64]) -> Vec<f64> {
        let mut z = vec![0.0; r.len()];
        p.apply(r, &mut z).unwrap();
        z
    }

    #[test]
    fn spec_parsing() {
        for s in ["mb", "k", "bgs", "ahgs", "ahgs-pcd", "ahgs-pcd-it"] {
            let spec: PreconditionerSpec = s.parse().unwrap();
            assert_eq!(spec.name(), s);
        }
        assert!("nope".parse::<PreconditionerSpec>().is_err());
    }

    #[test]
    fn blocking_partitions() {
        let basis = MultiIndexSet::total_degree(2, 3).unwrap();
        let b = HierarchicalBlocking::new(&basis);
        let sizes: Vec<usize> = (0..4).map(|d| b.block(d).len()).collect();
        assert_eq!(sizes, vec![1, 2, 3, 4]);
        assert_eq!(b.cumulative(2), 0..6);
    }

    #[test]
    fn cost_accounting() {
        let h = TripleProducts::new(2, 3, 6).unwrap();
        let c = CouplingCost::new(&h, 2);
        assert_eq!((c.used_lower_nnz, c.total_nnz), (21, 203));
    }

    #[test]
    fn truncated_ahgs_is_mean_based() {
        let prob = problem(0.3, 2);
        let op = prob.stokes_operator().unwrap();
        let mb = StochasticPreconditioner::new(&op, PreconditionerSpec::new(PrecondKind::Mb), None).unwrap();
        let ah = StochasticPreconditioner::new(&op, PreconditionerSpec::new(PrecondKind::Ahgs).with_truncation(0), None)
            .unwrap();
        let r = random(prob.layout().ngdof(), 1);
        assert_eq!(apply(&mb, &r), apply(&ah, &r));
    }

    #[test]
    fn deterministic_limit_all_equal_mb() {
        let prob = problem(0.0, 2);
        let op = prob.stokes_operator().unwrap();
        let r = random(prob.layout().ngdof(), 2);
        let mb = apply(
            &StochasticPreconditioner::new(&op, PreconditionerSpec::new(PrecondKind::Mb), None).unwrap(),
            &r,
        );
        for kind in [PrecondKind::K, PrecondKind::Bgs, PrecondKind::Ahgs] {
            let z = apply(&StochasticPreconditioner::new(&op, PreconditionerSpec::new(kind), None).unwrap(), &r);
            let d = z.iter().zip(&mb).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(d < 1e-12, "{kind:?}");
        }
        let hk = kronecker_factor(&op);
        assert!((hk - DMatrix::identity(op.layout().m, op.layout().m)).amax() < 1e-14);
    }

    #[test]
    fn kronecker_factor_spd() {
        let prob = problem(0.3, 2);
        let op = prob.stokes_operator().unwrap();
        let hk = kronecker_factor(&op);
        assert!((&hk - hk.transpose()).amax() < 1e-14);
        assert!(hk.symmetric_eigen().eigenvalues.iter().all(|&l| l > 0.0));
    }

    #[test]
    fn bgs_inverts_block_lower_triangular_part() {
        // r = (D + L) z, so one forward sweep recovers z exactly.
        let prob = problem(0.3, 1);
        let op = prob.stokes_operator().unwrap();
        let l = prob.layout();
        let z = random(l.ngdof(), 3);
        let mut r = vec![0.0; l.ngdof()];
        for k in 0..l.m {
            op.apply_mean_block(&z[l.mode_range(k)], &mut r[l.mode_range(k)]);
        }
        op.apply_velocity_coupling(&z, &mut r, op.num_terms(), |j, k| k < j);
        let bgs = StochasticPreconditioner::new(&op, PreconditionerSpec::new(PrecondKind::Bgs), None).unwrap();
        let got = apply(&bgs, &r);
        let err = got.iter().zip(&z).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn pcd_variants_run() {
        let prob = problem(0.3, 1);
        let zero = StochasticSolution::zeros(prob.layout());
        let state = GalerkinState::new(zero);
        let op = prob.linearized_operator(&state, Linearization::Picard).unwrap();
        let r = random(prob.layout().ngdof(), 4);
        let mean_u = vec![0.0; prob.layout().nu];
        for s in ["ahgs-pcd", "ahgs-pcd-it"] {
            let ctx = PcdContext {
                space: prob.space(),
                mean_viscosity: prob.mean_viscosity(),
                mean_velocity: &mean_u,
            };
            let p = StochasticPreconditioner::new(&op, s.parse().unwrap(), Some(ctx)).unwrap();
            assert!(apply(&p, &r).iter().all(|v| v.is_finite()));
        }
    }
}
