//! Stochastic Galerkin linear algebra: interleaved coefficient layout,
//! the matrix-free Kronecker-sum operator `Σ_ℓ H_ℓ ⊗ 𝓕_ℓ`, and the
//! nonlinear residual.

use std::io::Write;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::fem::{eliminate_divergence, FemSpace};
use crate::gpc::TripleProducts;
use crate::random_field::StochasticViscosity;
use crate::sparse::{CsrMatrix, VelocityBlock};

/// Sizes of the interleaved layout `[u_0, p_0, u_1, p_1, ...]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub nu: usize,
    pub np: usize,
    pub m: usize,
}

impl Layout {
    pub fn block(&self) -> usize {
        self.nu + self.np
    }

    /// Global size `M (N_u + N_p)`.
    pub fn ngdof(&self) -> usize {
        self.m * self.block()
    }

    pub fn velocity_range(&self, k: usize) -> std::ops::Range<usize> {
        let o = k * self.block();
        o..o + self.nu
    }

    pub fn pressure_range(&self, k: usize) -> std::ops::Range<usize> {
        let o = k * self.block() + self.nu;
        o..o + self.np
    }

    pub fn mode_range(&self, k: usize) -> std::ops::Range<usize> {
        let o = k * self.block();
        o..o + self.block()
    }
}

/// Coefficient vector of the gPC expansion in interleaved order.
#[derive(Debug, Clone, PartialEq)]
pub struct StochasticSolution {
    layout: Layout,
    data: Vec<f64>,
}

impl StochasticSolution {
    pub fn zeros(layout: Layout) -> Self {
        Self {
            layout,
            data: vec![0.0; layout.ngdof()],
        }
    }

    pub fn from_vec(layout: Layout, data: Vec<f64>) -> Result<Self> {
        check_len("stochastic solution", layout.ngdof(), data.len())?;
        Ok(Self { layout, data })
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn velocity(&self, k: usize) -> &[f64] {
        &self.data[self.layout.velocity_range(k)]
    }

    pub fn pressure(&self, k: usize) -> &[f64] {
        &self.data[self.layout.pressure_range(k)]
    }

    /// Deterministic pair `(u_k, p_k)`.
    pub fn mode_extract(&self, k: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_mode(k)?;
        Ok((self.velocity(k).to_vec(), self.pressure(k).to_vec()))
    }

    pub fn mode_inject(&mut self, k: usize, u: &[f64], p: &[f64]) -> Result<()> {
        self.check_mode(k)?;
        check_len("injected velocity", self.layout.nu, u.len())?;
        check_len("injected pressure", self.layout.np, p.len())?;
        let (vr, pr) = (self.layout.velocity_range(k), self.layout.pressure_range(k));
        self.data[vr].copy_from_slice(u);
        self.data[pr].copy_from_slice(p);
        Ok(())
    }

    fn check_mode(&self, k: usize) -> Result<()> {
        if k < self.layout.m {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("mode {k} out of range 0..{}", self.layout.m)))
        }
    }

    /// Reorders to `[u_0, ..., u_{M-1}, p_0, ..., p_{M-1}]`.
    pub fn to_blocked(&self) -> Vec<f64> {
        let l = self.layout;
        let mut out = Vec::with_capacity(l.ngdof());
        for k in 0..l.m {
            out.extend_from_slice(self.velocity(k));
        }
        for k in 0..l.m {
            out.extend_from_slice(self.pressure(k));
        }
        out
    }

    pub fn from_blocked(layout: Layout, blocked: &[f64]) -> Result<Self> {
        check_len("blocked vector", layout.ngdof(), blocked.len())?;
        let mut s = Self::zeros(layout);
        let pu = layout.m * layout.nu;
        for k in 0..layout.m {
            let u = &blocked[k * layout.nu..(k + 1) * layout.nu];
            let p = &blocked[pu + k * layout.np..pu + (k + 1) * layout.np];
            s.mode_inject(k, u, p)?;
        }
        Ok(s)
    }

    pub fn norm(&self) -> f64 {
        norm2(&self.data)
    }
}

pub(crate) fn norm2(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Linearization of the convection term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Linearization {
    Stokes,
    Picard,
    Newton,
}

/// The deterministic ingredients of a stochastic Galerkin problem: FE space,
/// coupling tensors, viscosity Laplacians, divergence and boundary data.
#[derive(Debug, Clone)]
pub struct GalerkinProblem {
    space: Arc<FemSpace>,
    h: Arc<TripleProducts>,
    laplacians: Vec<Option<VelocityBlock>>,
    mean_viscosity: Vec<f64>,
    b_raw: CsrMatrix,
    b: CsrMatrix,
    mask: Vec<bool>,
    bc: Vec<f64>,
    pin: Option<usize>,
    layout: Layout,
    convection: bool,
}

impl GalerkinProblem {
    /// Sets up the problem for a viscosity expansion and solution degree `p`
    /// with the mesh's default boundary data.
    pub fn new(space: Arc<FemSpace>, visc: &StochasticViscosity, p: usize) -> Result<Self> {
        let bc = space.mesh().default_boundary_vector();
        Self::with_boundary(space, visc, p, bc)
    }

    pub fn with_boundary(space: Arc<FemSpace>, visc: &StochasticViscosity, p: usize, bc: Vec<f64>) -> Result<Self> {
        let mesh = space.mesh().clone();
        check_len("viscosity nodes", mesh.num_nodes(), visc.num_nodes())?;
        check_len("boundary vector", mesh.nu(), bc.len())?;
        let dim = visc.dim();
        let p_nu = visc.basis().degree();
        let h = Arc::new(TripleProducts::new(dim, p, p_nu.max(p))?);
        let laplacians = visc
            .coeffs()
            .iter()
            .map(|c| {
                if c.iter().all(|v| *v == 0.0) {
                    Ok(None)
                } else {
                    space.assemble_weighted_laplacian(c).map(Some)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let b_raw = space.assemble_divergence();
        let mask = mesh.dirichlet_mask();
        let pin = mesh.pressure_pin();
        let b = eliminate_divergence(&b_raw, &mask, pin);
        let layout = Layout {
            nu: mesh.nu(),
            np: mesh.np(),
            m: h.m(),
        };
        let bc = {
            let mut g = bc;
            let n = mesh.num_nodes();
            for k in 0..n {
                if !mask[k] {
                    g[k] = 0.0;
                    g[n + k] = 0.0;
                }
            }
            g
        };
        Ok(Self {
            mean_viscosity: visc.coeff(0).to_vec(),
            space,
            h,
            laplacians,
            b_raw,
            b,
            mask,
            bc,
            pin,
            layout,
            convection: true,
        })
    }

    /// Drops the convection term (Stokes flow in every step).
    pub fn without_convection(mut self) -> Self {
        self.convection = false;
        self
    }

    pub fn has_convection(&self) -> bool {
        self.convection
    }

    pub fn space(&self) -> &Arc<FemSpace> {
        &self.space
    }

    pub fn coupling(&self) -> &Arc<TripleProducts> {
        &self.h
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn dirichlet_mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn boundary_values(&self) -> &[f64] {
        &self.bc
    }

    pub fn pressure_pin(&self) -> Option<usize> {
        self.pin
    }

    pub fn mean_viscosity(&self) -> &[f64] {
        &self.mean_viscosity
    }

    pub fn divergence(&self) -> &CsrMatrix {
        &self.b
    }

    /// Raw (uneliminated) Picard or Newton velocity blocks at an iterate.
    fn raw_blocks(&self, v: &StochasticSolution, lin: Linearization) -> Result<Vec<Option<VelocityBlock>>> {
        let nterms = self.h.m_nu();
        let mut out: Vec<Option<VelocityBlock>> = (0..nterms)
            .map(|l| self.laplacians.get(l).cloned().flatten())
            .collect();
        if lin == Linearization::Stokes || !self.convection {
            return Ok(out);
        }
        for (l, slot) in out.iter_mut().enumerate().take(self.layout.m) {
            let u = v.velocity(l);
            if u.iter().all(|x| *x == 0.0) {
                continue;
            }
            let mut f = self.space.assemble_convection(u)?;
            if lin == Linearization::Newton {
                f = f.add_scaled(1.0, &self.space.assemble_newton_derivative(u)?);
            }
            *slot = Some(match slot.take() {
                Some(a) => f.add_scaled(1.0, &a),
                None => f,
            });
        }
        Ok(out)
    }

    /// `Σ_ℓ H_ℓ ⊗ 𝓢_ℓ` with the Dirichlet-eliminated Laplacians.
    pub fn stokes_operator(&self) -> Result<KronSumOperator> {
        let zero = StochasticSolution::zeros(self.layout);
        self.build_operator(&zero, Linearization::Stokes, 0)
    }

    /// Picard or Newton operator at the state's iterate.
    pub fn linearized_operator(&self, state: &GalerkinState, lin: Linearization) -> Result<KronSumOperator> {
        self.build_operator(&state.v, lin, state.version)
    }

    fn build_operator(&self, v: &StochasticSolution, lin: Linearization, version: u64) -> Result<KronSumOperator> {
        check_len("iterate", self.layout.ngdof(), v.as_slice().len())?;
        let raw = self.raw_blocks(v, lin)?;
        let pattern = self.space.pattern().clone();
        let blocks = raw
            .into_iter()
            .enumerate()
            .map(|(l, b)| {
                if l == 0 {
                    Some(b.unwrap_or_else(|| VelocityBlock::zeros(pattern.clone())).eliminated(&self.mask, 1.0))
                } else {
                    b.map(|b| b.eliminated(&self.mask, 0.0))
                }
            })
            .collect();
        Ok(KronSumOperator {
            h: self.h.clone(),
            blocks,
            b: self.b.clone(),
            pin: self.pin,
            dirichlet_nodes: self.mask.iter().filter(|m| **m).count(),
            layout: self.layout,
            truncation: self.h.m_nu(),
            linearization: lin,
            version,
            applications: AtomicUsize::new(0),
        })
    }

    /// Right-hand side `y`: the residual at the zero iterate, carrying the
    /// Dirichlet lifting.
    pub fn rhs(&self) -> Result<StochasticSolution> {
        self.residual_at(&StochasticSolution::zeros(self.layout))
    }

    /// `𝓡 = y - [Σ_ℓ H_ℓ ⊗ 𝓟_ℓ(v)] v` with Picard-type blocks; Dirichlet rows
    /// hold `bc - v` and pinned pressure rows `-p`.
    pub fn residual_at(&self, v: &StochasticSolution) -> Result<StochasticSolution> {
        check_len("iterate", self.layout.ngdof(), v.as_slice().len())?;
        let l = self.layout;
        let n = self.mask.len();
        let mut vt = v.clone();
        for k in 0..l.m {
            let r = l.velocity_range(k);
            let u = &mut vt.as_mut_slice()[r];
            for i in 0..n {
                if self.mask[i] {
                    let (gx, gy) = if k == 0 { (self.bc[i], self.bc[n + i]) } else { (0.0, 0.0) };
                    u[i] = gx;
                    u[n + i] = gy;
                }
            }
        }
        let blocks = self.raw_blocks(v, Linearization::Picard)?;
        let mut r = StochasticSolution::zeros(l);
        let mut t = vec![0.0; l.nu];
        for (li, blk) in blocks.iter().enumerate() {
            let Some(f) = blk else { continue };
            let h = self.h.matrix(li);
            for k in 0..l.m {
                let col: Vec<(usize, f64)> = (0..l.m)
                    .filter_map(|j| {
                        let v = h.get(j, k);
                        (v != 0.0).then_some((j, v))
                    })
                    .collect();
                if col.is_empty() {
                    continue;
                }
                t.fill(0.0);
                f.apply_add(1.0, vt.velocity(k), &mut t);
                for (j, hv) in col {
                    let out = &mut r.as_mut_slice()[l.velocity_range(j)];
                    out.iter_mut().zip(&t).for_each(|(o, x)| *o -= hv * x);
                }
            }
        }
        for k in 0..l.m {
            let mut pu = vec![0.0; l.nu];
            self.b_raw.tmatvec_add(1.0, vt.pressure(k), &mut pu);
            let mut dp = vec![0.0; l.np];
            self.b_raw.matvec(vt.velocity(k), &mut dp);
            let data = r.as_mut_slice();
            let vr = l.velocity_range(k);
            data[vr.clone()].iter_mut().zip(&pu).for_each(|(o, x)| *o -= x);
            let pr = l.pressure_range(k);
            data[pr.clone()].iter_mut().zip(&dp).for_each(|(o, x)| *o = -x);
            let u = &mut data[vr];
            let vk = v.velocity(k);
            for i in 0..n {
                if self.mask[i] {
                    let (gx, gy) = if k == 0 { (self.bc[i], self.bc[n + i]) } else { (0.0, 0.0) };
                    u[i] = gx - vk[i];
                    u[n + i] = gy - vk[n + i];
                }
            }
            if let Some(pk) = self.pin {
                data[pr.start + pk] = -v.pressure(k)[pk];
            }
        }
        Ok(r)
    }

    /// Residual of the state's iterate.
    pub fn global_residual(&self, state: &GalerkinState) -> Result<StochasticSolution> {
        self.residual_at(&state.v)
    }
}

/// Current nonlinear iterate with a version counter that invalidates
/// operators built for earlier iterates.
#[derive(Debug, Clone)]
pub struct GalerkinState {
    v: StochasticSolution,
    version: u64,
}

impl GalerkinState {
    pub fn new(v: StochasticSolution) -> Self {
        Self { v, version: 0 }
    }

    pub fn iterate(&self) -> &StochasticSolution {
        &self.v
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn set_iterate(&mut self, v: StochasticSolution) {
        self.v = v;
        self.version += 1;
    }

    /// `v += δv`.
    pub fn update(&mut self, dv: &[f64]) -> Result<()> {
        check_len("update", self.v.as_slice().len(), dv.len())?;
        self.v.as_mut_slice().iter_mut().zip(dv).for_each(|(a, b)| *a += b);
        self.version += 1;
        Ok(())
    }

    pub fn into_solution(self) -> StochasticSolution {
        self.v
    }
}

/// Matrix-free `Σ_{ℓ ∈ 𝓜_t} H_ℓ ⊗ 𝓕_ℓ`. `𝓕_0` is the full saddle-point
/// block with `B`, `Bᵀ` and the pressure pin; `𝓕_ℓ`, `ℓ > 0`, act on the
/// velocity only.
#[derive(Debug)]
pub struct KronSumOperator {
    h: Arc<TripleProducts>,
    blocks: Vec<Option<VelocityBlock>>,
    b: CsrMatrix,
    pin: Option<usize>,
    dirichlet_nodes: usize,
    layout: Layout,
    truncation: usize,
    linearization: Linearization,
    version: u64,
    applications: AtomicUsize,
}

impl Clone for KronSumOperator {
    fn clone(&self) -> Self {
        Self {
            h: self.h.clone(),
            blocks: self.blocks.clone(),
            b: self.b.clone(),
            pin: self.pin,
            dirichlet_nodes: self.dirichlet_nodes,
            layout: self.layout,
            truncation: self.truncation,
            linearization: self.linearization,
            version: self.version,
            applications: AtomicUsize::new(0),
        }
    }
}

impl KronSumOperator {
    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn coupling(&self) -> &Arc<TripleProducts> {
        &self.h
    }

    pub fn linearization(&self) -> Linearization {
        self.linearization
    }

    /// Number of stored terms `M̂`.
    pub fn num_terms(&self) -> usize {
        self.blocks.len()
    }

    pub fn block(&self, l: usize) -> Option<&VelocityBlock> {
        self.blocks.get(l).and_then(Option::as_ref)
    }

    pub fn mean_block(&self) -> &VelocityBlock {
        self.blocks[0].as_ref().expect("mean block always present")
    }

    pub fn divergence(&self) -> &CsrMatrix {
        &self.b
    }

    pub fn pressure_pin(&self) -> Option<usize> {
        self.pin
    }

    /// Number of mesh nodes with eliminated velocity rows.
    pub fn dirichlet_nodes(&self) -> usize {
        self.dirichlet_nodes
    }

    /// Restricts the sum to the first `m_t` coupling matrices.
    pub fn set_truncation(&mut self, m_t: usize) {
        self.truncation = m_t.clamp(1, self.blocks.len());
    }

    pub fn truncation(&self) -> usize {
        self.truncation
    }

    /// Errors if the state has moved on since this operator was built.
    pub fn check_current(&self, state: &GalerkinState) -> Result<()> {
        if state.version == self.version {
            Ok(())
        } else {
            Err(Error::StaleState {
                state: state.version,
                built: self.version,
            })
        }
    }

    /// Count of velocity-block applications since the last reset.
    pub fn applications(&self) -> usize {
        self.applications.load(Ordering::Relaxed)
    }

    pub fn reset_applications(&self) {
        self.applications.store(0, Ordering::Relaxed);
    }

    /// The deterministic mean saddle-point block `𝓕_0` as CSR.
    pub fn mean_saddle(&self) -> CsrMatrix {
        crate::fem::saddle_csr(self.mean_block(), &self.b, self.pin)
    }

    /// Velocity block `Σ_ℓ h_{ℓ,jj} F_ℓ` of the diagonal block `j`.
    pub fn diagonal_velocity_block(&self, j: usize) -> VelocityBlock {
        let mut acc = self.mean_block().clone();
        for (l, b) in self.blocks.iter().enumerate().skip(1) {
            if let Some(b) = b {
                let h = self.h.matrix(l).get(j, j);
                if h != 0.0 {
                    acc = acc.add_scaled(h, b);
                }
            }
        }
        acc
    }

    /// Adds `Σ_{ℓ ∈ terms} Σ_{k: keep(j,k)} h_{ℓ,jk} F_ℓ x_k` to the velocity
    /// parts of `y`, for `1 ≤ ℓ < m_t`. `x` and `y` use the interleaved layout.
    pub fn apply_velocity_coupling<K>(&self, x: &[f64], y: &mut [f64], m_t: usize, keep: K)
    where
        K: Fn(usize, usize) -> bool,
    {
        let l = self.layout;
        for k in 0..l.m {
            let xk = &x[l.velocity_range(k)];
            self.apply_column_coupling(k, xk, y, m_t, |j| keep(j, k));
        }
    }

    /// Adds `h_{ℓ,jk} F_ℓ x_k` for one column `k`, all rows with
    /// `keep_row(j)` and `1 ≤ ℓ < m_t`. Each `F_ℓ` is applied at most once.
    pub fn apply_column_coupling<K>(&self, k: usize, xk: &[f64], y: &mut [f64], m_t: usize, keep_row: K)
    where
        K: Fn(usize) -> bool,
    {
        let l = self.layout;
        let mut t = vec![0.0; l.nu];
        for (li, blk) in self.blocks.iter().enumerate().take(m_t).skip(1) {
            let Some(f) = blk else { continue };
            let h = self.h.matrix(li);
            let mut applied = false;
            for &(j, hv) in h.row(k) {
                if !keep_row(j) {
                    continue;
                }
                if !applied {
                    t.fill(0.0);
                    f.apply_add(1.0, xk, &mut t);
                    self.applications.fetch_add(1, Ordering::Relaxed);
                    applied = true;
                }
                let out = &mut y[l.velocity_range(j)];
                out.iter_mut().zip(&t).for_each(|(o, v)| *o += hv * v);
            }
        }
    }

    /// `y += 𝓕_0 x` on one mode (`x`, `y` of length `N_u + N_p`).
    pub fn apply_mean_block(&self, x: &[f64], y: &mut [f64]) {
        let nu = self.layout.nu;
        let (xu, xp) = x.split_at(nu);
        let (yu, yp) = y.split_at_mut(nu);
        self.mean_block().apply_add(1.0, xu, yu);
        self.applications.fetch_add(1, Ordering::Relaxed);
        self.b.tmatvec_add(1.0, xp, yu);
        self.b.matvec_add(1.0, xu, yp);
        if let Some(k) = self.pin {
            yp[k] += xp[k];
        }
    }

    /// `y = Σ_{ℓ < m_t} (H_ℓ ⊗ 𝓕_ℓ) x`.
    pub fn matvec_truncated(&self, x: &[f64], y: &mut [f64], m_t: usize) {
        let l = self.layout;
        assert_eq!(x.len(), l.ngdof());
        assert_eq!(y.len(), l.ngdof());
        y.fill(0.0);
        for k in 0..l.m {
            let r = l.mode_range(k);
            self.apply_mean_block(&x[r.clone()], &mut y[r]);
        }
        self.apply_velocity_coupling(x, y, m_t, |_, _| true);
    }

    /// `y = 𝓐 x` with the operator's truncation.
    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        self.matvec_truncated(x, y, self.truncation);
    }

    /// Explicit sparse assembly of the global matrix (test oracle).
    pub fn assemble_global(&self) -> CsrMatrix {
        let l = self.layout;
        let mut trips = Vec::new();
        let mean = self.mean_saddle();
        for k in 0..l.m {
            let o = k * l.block();
            for i in 0..mean.nrows() {
                trips.extend(mean.row(i).map(|(j, v)| (o + i, o + j, v)));
            }
        }
        for (li, blk) in self.blocks.iter().enumerate().take(self.truncation).skip(1) {
            let Some(f) = blk else { continue };
            let fc = f.to_csr();
            let h = self.h.matrix(li);
            for j in 0..l.m {
                for &(k, hv) in h.row(j) {
                    let (oj, ok) = (j * l.block(), k * l.block());
                    for i in 0..fc.nrows() {
                        trips.extend(fc.row(i).map(|(c, v)| (oj + i, ok + c, hv * v)));
                    }
                }
            }
        }
        CsrMatrix::from_triplets(l.ngdof(), l.ngdof(), trips)
    }

    /// Writes the assembled global matrix as `row col value` lines.
    pub fn write_coo<W: Write>(&self, w: W) -> Result<()> {
        self.assemble_global().write_coo(w)?;
        Ok(())
    }
}

/// Free-function form of [`KronSumOperator::matvec_truncated`] returning a
/// new solution vector.
pub fn kron_matvec(op: &KronSumOperator, x: &StochasticSolution, m_t: usize) -> Result<StochasticSolution> {
    check_len("kron matvec input", op.layout().ngdof(), x.as_slice().len())?;
    let mut y = StochasticSolution::zeros(op.layout());
    op.matvec_truncated(x.as_slice(), y.as_mut_slice(), m_t);
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_mesh, Geometry};
    use crate::random_field::{KlMethod, ViscosityParams};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn problem(dim: usize, p: usize, cov: f64) -> GalerkinProblem {
        let mesh = Arc::new(build_mesh(&Geometry::Cavity, 4, 4).unwrap());
        let params = ViscosityParams {
            mean: 0.05,
            cov,
            lx: 1.0,
            ly: 1.0,
            dim,
            degree: 2 * p,
            kl_method: KlMethod::Separable,
        };
        let visc = StochasticViscosity::lognormal(&mesh, &params).unwrap();
        GalerkinProblem::new(Arc::new(FemSpace::new(mesh)), &visc, p).unwrap()
    }

    fn random(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn layout_roundtrips() {
        let l = Layout { nu: 4, np: 2, m: 3 };
        let data: Vec<f64> = (0..l.ngdof()).map(|i| i as f64).collect();
        let s = StochasticSolution::from_vec(l, data.clone()).unwrap();
        let b = StochasticSolution::from_blocked(l, &s.to_blocked()).unwrap();
        assert_eq!(b, s);
        let (u, p) = s.mode_extract(1).unwrap();
        assert_eq!(u, vec![6.0, 7.0, 8.0, 9.0]);
        assert_eq!(p, vec![10.0, 11.0]);
        let mut z = StochasticSolution::zeros(l);
        z.mode_inject(1, &u, &p).unwrap();
        assert_eq!(z.mode_extract(1).unwrap(), (u, p));
        assert!(z.mode_extract(3).is_err());
    }

    #[test]
    fn matrix_free_matches_assembled() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (dim, p) in [(1, 2), (2, 1)] {
            let prob = problem(dim, p, 0.3);
            let v = StochasticSolution::from_vec(prob.layout(), random(prob.layout().ngdof(), &mut rng)).unwrap();
            let state = GalerkinState::new(v);
            for lin in [Linearization::Picard, Linearization::Newton] {
                let op = prob.linearized_operator(&state, lin).unwrap();
                let g = op.assemble_global();
                for _ in 0..5 {
                    let x = random(prob.layout().ngdof(), &mut rng);
                    let mut y1 = vec![0.0; x.len()];
                    let mut y2 = vec![0.0; x.len()];
                    op.matvec(&x, &mut y1);
                    g.matvec(&x, &mut y2);
                    let err = y1.iter().zip(&y2).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                    assert!(err <= 1e-12 * norm2(&y2));
                }
            }
        }
    }

    #[test]
    fn truncation_zero_is_block_diagonal() {
        let prob = problem(2, 1, 0.3);
        let op = prob.stokes_operator().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(prob.layout().ngdof(), &mut rng);
        let mut y = vec![0.0; x.len()];
        op.matvec_truncated(&x, &mut y, 1);
        let l = prob.layout();
        for k in 0..l.m {
            let mut want = vec![0.0; l.block()];
            op.apply_mean_block(&x[l.mode_range(k)], &mut want);
            assert_eq!(&y[l.mode_range(k)], want.as_slice());
        }
    }

    #[test]
    fn picard_is_newton_without_derivative() {
        let prob = problem(1, 2, 0.2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let state = GalerkinState::new(
            StochasticSolution::from_vec(prob.layout(), random(prob.layout().ngdof(), &mut rng)).unwrap(),
        );
        let pic = prob.linearized_operator(&state, Linearization::Picard).unwrap();
        let newt = prob.linearized_operator(&state, Linearization::Newton).unwrap();
        let space = prob.space();
        let mask = prob.dirichlet_mask();
        for l in 0..prob.layout().m {
            let w = space
                .assemble_newton_derivative(state.iterate().velocity(l))
                .unwrap()
                .eliminated(mask, 0.0);
            let diff = newt.block(l).unwrap().add_scaled(-1.0, pic.block(l).unwrap()).add_scaled(-1.0, &w);
            assert!(diff.to_csr().max_abs() < 1e-12);
        }
    }

    #[test]
    fn zero_iterate_residual_is_rhs_and_stale_guard() {
        let prob = problem(2, 1, 0.1);
        let mut state = GalerkinState::new(StochasticSolution::zeros(prob.layout()));
        let r = prob.global_residual(&state).unwrap();
        assert_eq!(r, prob.rhs().unwrap());
        let op = prob.linearized_operator(&state, Linearization::Picard).unwrap();
        assert!(op.check_current(&state).is_ok());
        state.update(&vec![0.0; prob.layout().ngdof()]).unwrap();
        assert!(matches!(op.check_current(&state), Err(Error::StaleState { .. })));
    }

    #[test]
    fn linear_in_input() {
        let prob = problem(2, 1, 0.3);
        let op = prob.stokes_operator().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = prob.layout().ngdof();
        let (x, z) = (random(n, &mut rng), random(n, &mut rng));
        let comb: Vec<f64> = x.iter().zip(&z).map(|(a, b)| 2.0 * a - 0.5 * b).collect();
        let (mut yx, mut yz, mut yc) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        op.matvec(&x, &mut yx);
        op.matvec(&z, &mut yz);
        op.matvec(&comb, &mut yc);
        for i in 0..n {
            assert!((yc[i] - (2.0 * yx[i] - 0.5 * yz[i])).abs() < 1e-12 * (1.0 + yc[i].abs()));
        }
    }
}
