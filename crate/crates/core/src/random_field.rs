//! Lognormal random viscosity: discrete Karhunen–Loève expansion of a
//! Gaussian field with separable exponential covariance, and its
//! polynomial chaos coefficients.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::gpc::{gauss_hermite_1d, hermite_table, MultiIndexSet};
use crate::mesh::Mesh;

/// Separable exponential covariance
/// `σ_g² exp(-|Δx|/L_x - |Δy|/L_y)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CovarianceSpec {
    pub sigma: f64,
    pub lx: f64,
    pub ly: f64,
}

impl CovarianceSpec {
    pub fn new(sigma: f64, lx: f64, ly: f64) -> Result<Self> {
        let c = Self { sigma, lx, ly };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0 && self.lx > 0.0 && self.ly > 0.0) {
            return Err(Error::InvalidInput(format!(
                "covariance needs sigma >= 0 and positive lengths, got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn eval(&self, a: [f64; 2], b: [f64; 2]) -> f64 {
        self.sigma * self.sigma * (-(a[0] - b[0]).abs() / self.lx - (a[1] - b[1]).abs() / self.ly).exp()
    }
}

/// Eigensolver used for the discrete KL problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KlMethod {
    /// Products of 1D eigenpairs on the bounding node lattice.
    #[default]
    Separable,
    /// Dense symmetric eigensolve over the mesh nodes.
    Dense,
}

/// Truncated KL expansion with modes scaled by `√λ_j`.
#[derive(Debug, Clone, Serialize)]
pub struct KlExpansion {
    pub eigenvalues: Vec<f64>,
    pub modes: Vec<Vec<f64>>,
}

impl KlExpansion {
    pub fn num_modes(&self) -> usize {
        self.modes.len()
    }

    /// `Σ_j g_j(x)²` at every node.
    pub fn pointwise_variance(&self) -> Vec<f64> {
        let n = self.modes.first().map_or(0, Vec::len);
        (0..n).map(|i| self.modes.iter().map(|g| g[i] * g[i]).sum()).collect()
    }
}

/// Lumped (row-sum) 1D Q2 mass weights on a lattice of `2 cells + 1` nodes.
fn simpson_weights(cells: usize, h: f64) -> Vec<f64> {
    let mut w = vec![0.0; 2 * cells + 1];
    for c in 0..cells {
        w[2 * c] += h / 6.0;
        w[2 * c + 1] += 4.0 * h / 6.0;
        w[2 * c + 2] += h / 6.0;
    }
    w
}

/// Symmetric eigenpairs of `W^½ K W^½`, returned as `(λ, v)` with
/// `v = W^-½ u` sorted by decreasing `λ`.
fn weighted_eigen(k: DMatrix<f64>, w: &[f64]) -> Vec<(f64, Vec<f64>)> {
    let n = w.len();
    let s: Vec<f64> = w.iter().map(|v| v.sqrt()).collect();
    let a = DMatrix::from_fn(n, n, |i, j| s[i] * k[(i, j)] * s[j]);
    let eig = SymmetricEigen::new(a);
    let mut pairs: Vec<(f64, Vec<f64>)> = (0..n)
        .map(|m| {
            let v = (0..n).map(|i| eig.eigenvectors[(i, m)] / s[i]).collect();
            (eig.eigenvalues[m], v)
        })
        .collect();
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    pairs
}

fn exp_kernel_1d(x: &[f64], l: f64) -> DMatrix<f64> {
    DMatrix::from_fn(x.len(), x.len(), |i, j| (-(x[i] - x[j]).abs() / l).exp())
}

fn fix_sign(v: &mut [f64]) {
    let scale = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let lead = v.iter().copied().find(|x| x.abs() > 1e-3 * scale).unwrap_or(0.0);
    if lead < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

fn eig_tolerance(lmax: f64) -> f64 {
    1e-12 * lmax.abs().max(1e-300)
}

/// Discrete KL expansion: Nyström discretization `C W v = λ v` with the
/// lumped Q2 mass `W`, modes `g_j = √λ_j v_j`.
pub fn discrete_kl(cov: &CovarianceSpec, mesh: &Mesh, modes: usize, method: KlMethod) -> Result<KlExpansion> {
    cov.validate()?;
    if modes == 0 || modes > mesh.num_nodes() {
        return Err(Error::InvalidInput(format!(
            "KL mode count {modes} outside 1..={}",
            mesh.num_nodes()
        )));
    }
    let pairs = match method {
        KlMethod::Separable => separable_pairs(cov, mesh, modes),
        KlMethod::Dense => dense_pairs(cov, mesh),
    };
    let lmax = pairs.first().map_or(0.0, |p| p.0);
    let mut out = KlExpansion {
        eigenvalues: Vec::with_capacity(modes),
        modes: Vec::with_capacity(modes),
    };
    for (lam, mut v) in pairs.into_iter().take(modes) {
        if cov.sigma == 0.0 {
            out.eigenvalues.push(0.0);
            out.modes.push(vec![0.0; mesh.num_nodes()]);
            continue;
        }
        if lam <= eig_tolerance(lmax) {
            log::warn!("rejecting KL mode with eigenvalue {lam:e}");
            break;
        }
        fix_sign(&mut v);
        let r = lam.sqrt();
        v.iter_mut().for_each(|x| *x *= r);
        out.eigenvalues.push(lam);
        out.modes.push(v);
    }
    if out.modes.len() < modes {
        return Err(Error::InvalidInput(format!(
            "covariance has only {} positive eigenvalues on this grid",
            out.modes.len()
        )));
    }
    Ok(out)
}

fn separable_pairs(cov: &CovarianceSpec, mesh: &Mesh, modes: usize) -> Vec<(f64, Vec<f64>)> {
    let b = mesh.geometry().bounds();
    let (nx, ny) = mesh.cells();
    let hx = (b.x1 - b.x0) / nx as f64;
    let hy = (b.y1 - b.y0) / ny as f64;
    let xs: Vec<f64> = (0..=2 * nx).map(|i| b.x0 + 0.5 * hx * i as f64).collect();
    let ys: Vec<f64> = (0..=2 * ny).map(|j| b.y0 + 0.5 * hy * j as f64).collect();
    let ex = weighted_eigen(exp_kernel_1d(&xs, cov.lx), &simpson_weights(nx, hx));
    let ey = weighted_eigen(exp_kernel_1d(&ys, cov.ly), &simpson_weights(ny, hy));
    let s2 = cov.sigma * cov.sigma;
    let mut prods: Vec<(f64, usize, usize)> = Vec::new();
    for (a, px) in ex.iter().enumerate().take(modes) {
        for (c, py) in ey.iter().enumerate().take(modes) {
            prods.push((px.0 * py.0, a, c));
        }
    }
    prods.sort_by(|p, q| q.0.total_cmp(&p.0).then((p.1, p.2).cmp(&(q.1, q.2))));
    prods
        .into_iter()
        .take(modes)
        .map(|(lam, a, c)| {
            let v = mesh
                .lattice()
                .iter()
                .map(|&[i, j]| ex[a].1[i] * ey[c].1[j])
                .collect();
            (s2 * lam, v)
        })
        .collect()
}

fn dense_pairs(cov: &CovarianceSpec, mesh: &Mesh) -> Vec<(f64, Vec<f64>)> {
    let nodes = mesh.nodes();
    let n = nodes.len();
    let mut w = vec![0.0; n];
    for el in mesh.elements() {
        let [hx, hy] = el.size;
        let wx = [hx / 6.0, 4.0 * hx / 6.0, hx / 6.0];
        let wy = [hy / 6.0, 4.0 * hy / 6.0, hy / 6.0];
        for b in 0..3 {
            for a in 0..3 {
                w[el.v[b * 3 + a]] += wx[a] * wy[b];
            }
        }
    }
    let k = DMatrix::from_fn(n, n, |i, j| cov.eval(nodes[i], nodes[j]));
    weighted_eigen(k, &w)
}

/// `σ_g = √(ln(1 + CoV²))`.
pub fn calibrate_sigma(cov: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&cov) {
        return Err(Error::InvalidInput(format!("CoV must lie in [0, 1), got {cov}")));
    }
    Ok((1.0 + cov * cov).ln().sqrt())
}

/// Gaussian mean `g_0` giving lognormal mean `mean` for standard deviation `sigma`.
pub fn gaussian_mean(mean: f64, sigma: f64) -> f64 {
    mean.ln() - 0.5 * sigma * sigma
}

/// Parameters of the lognormal viscosity model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViscosityParams {
    /// Target mean viscosity `ν̄ = 1/Re_0`.
    pub mean: f64,
    pub cov: f64,
    pub lx: f64,
    pub ly: f64,
    /// Stochastic dimension `N`.
    pub dim: usize,
    /// Degree of the coefficient expansion (usually `2P`).
    pub degree: usize,
    #[serde(default)]
    pub kl_method: KlMethod,
}

/// Polynomial chaos coefficient fields `ν_ℓ(x)` of the lognormal viscosity
/// `exp(g_0 - Σ_j g_j(x) ξ_j)`.
#[derive(Debug, Clone)]
pub struct StochasticViscosity {
    basis: MultiIndexSet,
    coeffs: Vec<Vec<f64>>,
    g0: f64,
    kl: KlExpansion,
    cov: f64,
    mean: f64,
}

/// One realization of the viscosity field.
#[derive(Debug, Clone, PartialEq)]
pub struct ViscositySample {
    pub field: Vec<f64>,
    /// Number of nodes with non-positive viscosity.
    pub nonpositive: usize,
}

impl StochasticViscosity {
    /// Calibrates `σ_g` and `g_0`, builds the KL expansion and projects.
    pub fn lognormal(mesh: &Mesh, p: &ViscosityParams) -> Result<Self> {
        if !(p.mean > 0.0) {
            return Err(Error::InvalidInput(format!("mean viscosity must be positive, got {}", p.mean)));
        }
        let sigma = calibrate_sigma(p.cov)?;
        let g0 = gaussian_mean(p.mean, sigma);
        let basis = MultiIndexSet::total_degree(p.dim, p.degree)?;
        let kl = discrete_kl(&CovarianceSpec::new(sigma, p.lx, p.ly)?, mesh, p.dim, p.kl_method)?;
        let mut v = Self::from_kl(kl, g0, &basis)?;
        v.cov = p.cov;
        v.mean = p.mean;
        Ok(v)
    }

    /// Coefficients `ν_ℓ = E[ψ_ℓ(ξ - g)] exp(g_0 + ½ Σ g_j²)`, with the
    /// expectation by Gauss–Hermite quadrature per dimension.
    pub fn from_kl(kl: KlExpansion, g0: f64, basis: &MultiIndexSet) -> Result<Self> {
        check_len("KL modes vs basis dimension", basis.dim(), kl.num_modes())?;
        let deg = basis.degree();
        let (qx, qw) = gauss_hermite_1d(deg + 2)?;
        let n = kl.modes[0].len();
        let mut coeffs = vec![vec![0.0; n]; basis.len()];
        let mut shifted = vec![vec![0.0; deg + 1]; basis.dim()];
        for i in 0..n {
            let mut s2 = 0.0;
            for (d, g) in kl.modes.iter().enumerate() {
                let gi = g[i];
                s2 += gi * gi;
                let e = &mut shifted[d];
                e.fill(0.0);
                for (x, w) in qx.iter().zip(&qw) {
                    for (acc, h) in e.iter_mut().zip(hermite_table(deg, x - gi)) {
                        *acc += w * h;
                    }
                }
            }
            let scale = (g0 + 0.5 * s2).exp();
            for (l, a) in basis.indices().iter().enumerate() {
                let e: f64 = a.iter().enumerate().map(|(d, &ad)| shifted[d][ad]).product();
                coeffs[l][i] = e * scale;
            }
        }
        let mean = g0.exp();
        Ok(Self {
            basis: basis.clone(),
            coeffs,
            g0,
            kl,
            cov: 0.0,
            mean,
        })
    }

    /// Deterministic viscosity `ν_0` on every node (`M_ν = 1`).
    pub fn constant(num_nodes: usize, value: f64, dim: usize) -> Result<Self> {
        Self::from_field(vec![value; num_nodes], dim)
    }

    /// A deterministic field viewed as a one-term expansion.
    pub fn from_field(field: Vec<f64>, dim: usize) -> Result<Self> {
        if field.is_empty() || field.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::InvalidInput("viscosity field must be positive and finite".into()));
        }
        let n = field.len();
        let mean = field.iter().sum::<f64>() / n as f64;
        Ok(Self {
            basis: MultiIndexSet::total_degree(dim, 0)?,
            coeffs: vec![field],
            g0: mean.ln(),
            kl: KlExpansion {
                eigenvalues: vec![0.0; dim],
                modes: vec![vec![0.0; n]; dim],
            },
            cov: 0.0,
            mean,
        })
    }

    /// Coefficients by the closed form `∏_d (-g_d)^{α_d}/√(α_d!)`.
    pub fn closed_form_coeffs(&self) -> Vec<Vec<f64>> {
        let n = self.num_nodes();
        let mut out = vec![vec![0.0; n]; self.basis.len()];
        for i in 0..n {
            let s2: f64 = self.kl.modes.iter().map(|g| g[i] * g[i]).sum();
            let scale = (self.g0 + 0.5 * s2).exp();
            for (l, a) in self.basis.indices().iter().enumerate() {
                let mut v = scale;
                for (d, &ad) in a.iter().enumerate() {
                    let f: f64 = (1..=ad).map(|k| k as f64).product();
                    v *= (-self.kl.modes[d][i]).powi(ad as i32) / f.sqrt();
                }
                out[l][i] = v;
            }
        }
        out
    }

    pub fn basis(&self) -> &MultiIndexSet {
        &self.basis
    }

    pub fn coeffs(&self) -> &[Vec<f64>] {
        &self.coeffs
    }

    pub fn coeff(&self, l: usize) -> &[f64] {
        &self.coeffs[l]
    }

    pub fn num_terms(&self) -> usize {
        self.coeffs.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.coeffs[0].len()
    }

    pub fn dim(&self) -> usize {
        self.basis.dim()
    }

    pub fn g0(&self) -> f64 {
        self.g0
    }

    pub fn kl(&self) -> &KlExpansion {
        &self.kl
    }

    pub fn cov(&self) -> f64 {
        self.cov
    }

    pub fn target_mean(&self) -> f64 {
        self.mean
    }

    /// Same coefficient fields multiplied by `alpha`.
    pub fn scaled(&self, alpha: f64) -> Self {
        let mut s = self.clone();
        s.coeffs.iter_mut().flatten().for_each(|v| *v *= alpha);
        s
    }

    /// `Σ_ℓ ν_ℓ(x) ψ_ℓ(ξ)`.
    pub fn sample(&self, xi: &[f64]) -> Result<ViscositySample> {
        let psi = self.basis.eval_all(xi)?;
        let mut field = vec![0.0; self.num_nodes()];
        for (c, p) in self.coeffs.iter().zip(&psi) {
            for (f, v) in field.iter_mut().zip(c) {
                *f += p * v;
            }
        }
        let nonpositive = field.iter().filter(|v| **v <= 0.0).count();
        if nonpositive > 0 {
            log::warn!("viscosity sample has {nonpositive} non-positive nodal values");
        }
        Ok(ViscositySample { field, nonpositive })
    }

    /// The untruncated lognormal field `exp(g_0 - Σ_j g_j ξ_j)`.
    pub fn exact(&self, xi: &[f64]) -> Result<Vec<f64>> {
        check_len("viscosity point", self.dim(), xi.len())?;
        Ok((0..self.num_nodes())
            .map(|i| {
                let s: f64 = self.kl.modes.iter().zip(xi).map(|(g, x)| g[i] * x).sum();
                (self.g0 - s).exp()
            })
            .collect())
    }
}

/// Free-function form of [`StochasticViscosity::sample`].
pub fn sample_viscosity(visc: &StochasticViscosity, xi: &[f64]) -> Result<ViscositySample> {
    visc.sample(xi)
}
