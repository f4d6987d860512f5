//! Moments, probe evaluation, kernel density estimates and cross-method
//! comparisons.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::galerkin::{norm2, StochasticSolution};
use crate::gpc::MultiIndexSet;
use crate::mesh::Mesh;

/// Mean and variance fields of a solution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mean_u: Vec<f64>,
    pub mean_p: Vec<f64>,
    pub var_u: Vec<f64>,
    pub var_p: Vec<f64>,
}

impl Moments {
    /// Writes nodal mean and variance fields (pressure interpolated to all
    /// nodes) as VTK.
    pub fn write_vtk<W: Write>(&self, mesh: &Mesh, w: W) -> Result<()> {
        let n = mesh.num_nodes();
        let (mx, my) = self.mean_u.split_at(n);
        let (vx, vy) = self.var_u.split_at(n);
        let mp = mesh.pressure_to_nodes(&self.mean_p);
        let vp = mesh.pressure_to_nodes(&self.var_p);
        mesh.write_vtk(
            w,
            &[
                ("mean_ux", mx),
                ("mean_uy", my),
                ("mean_p", &mp),
                ("var_ux", vx),
                ("var_uy", vy),
                ("var_p", &vp),
            ],
        )
    }
}

/// Mean is mode 0, variance the sum of squared higher modes.
pub fn moments(sol: &StochasticSolution) -> Moments {
    let layout = sol.layout();
    let mut var_u = vec![0.0; layout.nu];
    let mut var_p = vec![0.0; layout.np];
    for k in 1..layout.m {
        var_u.iter_mut().zip(sol.velocity(k)).for_each(|(v, c)| *v += c * c);
        var_p.iter_mut().zip(sol.pressure(k)).for_each(|(v, c)| *v += c * c);
    }
    Moments {
        mean_u: sol.velocity(0).to_vec(),
        mean_p: sol.pressure(0).to_vec(),
        var_u,
        var_p,
    }
}

/// `∫ (Var u_x + Var u_y) dx` with row-sum lumped Q2 weights.
pub fn integrated_variance(lumped_mass: &[f64], var_u: &[f64]) -> f64 {
    let n = lumped_mass.len();
    lumped_mass
        .iter()
        .enumerate()
        .map(|(i, w)| w * (var_u[i] + var_u[n + i]))
        .sum()
}

/// `‖a − b‖ / ‖b‖` in the discrete 2-norm.
pub fn relative_difference(a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let nb = norm2(b);
    if nb == 0.0 {
        norm2(&d)
    } else {
        norm2(&d) / nb
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeField {
    Ux,
    Uy,
    P,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub x: f64,
    pub y: f64,
    pub field: ProbeField,
}

impl Probe {
    pub fn new(x: f64, y: f64, field: ProbeField) -> Self {
        Self { x, y, field }
    }

    pub fn label(&self) -> String {
        let f = match self.field {
            ProbeField::Ux => "ux",
            ProbeField::Uy => "uy",
            ProbeField::P => "p",
        };
        format!("{f}@({:.4},{:.4})", self.x, self.y)
    }

    /// Interpolation weights into one mode block `[u, p]`.
    pub fn stencil(&self, mesh: &Mesh) -> Result<ProbeStencil> {
        let entries = match self.field {
            ProbeField::Ux => mesh.point_weights(self.x, self.y, false)?,
            ProbeField::Uy => mesh
                .point_weights(self.x, self.y, false)?
                .into_iter()
                .map(|(i, w)| (i + mesh.num_nodes(), w))
                .collect(),
            ProbeField::P => mesh
                .point_weights(self.x, self.y, true)?
                .into_iter()
                .map(|(i, w)| (i + mesh.nu(), w))
                .collect(),
        };
        Ok(ProbeStencil { entries })
    }
}

/// Linear functional on a `[u, p]` block.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeStencil {
    entries: Vec<(usize, f64)>,
}

impl ProbeStencil {
    pub fn eval(&self, block: &[f64]) -> f64 {
        self.entries.iter().map(|&(i, w)| w * block[i]).sum()
    }

    /// Probe value of every gPC mode.
    pub fn coefficients(&self, sol: &StochasticSolution) -> Vec<f64> {
        let layout = sol.layout();
        (0..layout.m)
            .map(|k| self.eval(&sol.as_slice()[layout.mode_range(k)]))
            .collect()
    }
}

/// Evaluates `Σ_k c_k ψ_k(ξ)` at `n` standard normal draws.
pub fn surrogate_samples(coeffs: &[f64], basis: &MultiIndexSet, n: usize, seed: u64) -> Result<Vec<f64>> {
    if coeffs.len() != basis.len() {
        return Err(Error::InvalidInput(format!(
            "surrogate has {} coefficients but the basis has {} members",
            coeffs.len(),
            basis.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut xi = vec![0.0; basis.dim()];
    (0..n)
        .map(|_| {
            xi.iter_mut().for_each(|x| *x = StandardNormal.sample(&mut rng));
            let psi = basis.eval_all(&xi)?;
            Ok(psi.iter().zip(coeffs).map(|(a, b)| a * b).sum())
        })
        .collect()
}

/// Empirical quantile with linear interpolation between order statistics.
pub fn quantile(samples: &[f64], q: f64) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    quantile_sorted(&s, q)
}

fn quantile_sorted(s: &[f64], q: f64) -> f64 {
    if s.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (s.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    s[lo] + (pos - lo as f64) * (s[hi] - s[lo])
}

/// Distance between the 5% and 95% quantiles.
pub fn inter_quantile_range(samples: &[f64]) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    quantile_sorted(&s, 0.95) - quantile_sorted(&s, 0.05)
}

/// Density values on a uniform grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PdfCurve {
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
    pub bandwidth: f64,
}

fn trapezoid(x: &[f64], y: &[f64]) -> f64 {
    x.windows(2).zip(y.windows(2)).map(|(a, b)| 0.5 * (a[1] - a[0]) * (b[0] + b[1])).sum()
}

impl PdfCurve {
    pub fn integral(&self) -> f64 {
        trapezoid(&self.grid, &self.density)
    }

    /// Linear interpolation, zero outside the grid.
    pub fn at(&self, x: f64) -> f64 {
        let g = &self.grid;
        if g.is_empty() || x < g[0] || x > g[g.len() - 1] {
            return 0.0;
        }
        let k = g.partition_point(|&v| v <= x).clamp(1, g.len() - 1);
        let (x0, x1) = (g[k - 1], g[k]);
        let t = if x1 > x0 { (x - x0) / (x1 - x0) } else { 0.0 };
        self.density[k - 1] + t * (self.density[k] - self.density[k - 1])
    }

    /// Trapezoid mass of the density on `[a, b]`, sampled finely.
    pub fn mass_between(&self, a: f64, b: f64) -> f64 {
        let n = 2001;
        let x: Vec<f64> = (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect();
        let y: Vec<f64> = x.iter().map(|&v| self.at(v)).collect();
        trapezoid(&x, &y)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "# bandwidth {:.6e}", self.bandwidth)?;
        writeln!(w, "x,density")?;
        for (x, d) in self.grid.iter().zip(&self.density) {
            writeln!(w, "{x:.10e},{d:.10e}")?;
        }
        Ok(())
    }
}

/// Silverman's rule `0.9 min(σ, IQR/1.34) n^{-1/5}`, floored relative to
/// the sample magnitude.
pub fn silverman_bandwidth(samples: &[f64]) -> f64 {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let sd = (samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt();
    let iqr = quantile(samples, 0.75) - quantile(samples, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    let floor = 1e-9 * mean.abs().max(1.0);
    (0.9 * spread * n.powf(-0.2)).max(floor)
}

/// Gaussian kernel density estimate on `points` grid nodes spanning the
/// samples plus five bandwidths on each side.
pub fn kde(samples: &[f64], points: usize) -> Result<PdfCurve> {
    if samples.len() < 2 || points < 2 {
        return Err(Error::InvalidInput("kernel density estimate needs at least two samples and grid points".into()));
    }
    if samples.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput("non-finite sample in density estimate".into()));
    }
    let h = silverman_bandwidth(samples);
    let lo = samples.iter().copied().fold(f64::INFINITY, f64::min) - 5.0 * h;
    let hi = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 5.0 * h;
    let grid: Vec<f64> = (0..points).map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64).collect();
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let norm = 1.0 / (samples.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
    let density = grid
        .iter()
        .map(|&x| {
            let a = sorted.partition_point(|&s| s < x - 8.0 * h);
            let b = sorted.partition_point(|&s| s <= x + 8.0 * h);
            sorted[a..b]
                .iter()
                .map(|&s| {
                    let z = (x - s) / h;
                    (-0.5 * z * z).exp()
                })
                .sum::<f64>()
                * norm
        })
        .collect();
    Ok(PdfCurve {
        grid,
        density,
        bandwidth: h,
    })
}

/// Grid size used for probe densities.
pub const PDF_POINTS: usize = 512;

/// Surrogate sample count used for probe densities.
pub const PDF_SAMPLES: usize = 100_000;

/// Density of a probe value under a gPC solution.
pub fn probe_pdf(sol: &StochasticSolution, basis: &MultiIndexSet, mesh: &Mesh, probe: &Probe, seed: u64) -> Result<(PdfCurve, Vec<f64>)> {
    let coeffs = probe.stencil(mesh)?.coefficients(sol);
    let samples = surrogate_samples(&coeffs, basis, PDF_SAMPLES, seed)?;
    Ok((kde(&samples, PDF_POINTS)?, samples))
}

/// `∫ |f − g|` on a merged uniform grid.
pub fn pdf_l1_distance(a: &PdfCurve, b: &PdfCurve) -> f64 {
    let lo = a.grid[0].min(b.grid[0]);
    let hi = a.grid[a.grid.len() - 1].max(b.grid[b.grid.len() - 1]);
    let n = 4 * PDF_POINTS;
    let x: Vec<f64> = (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect();
    let d: Vec<f64> = x.iter().map(|&v| (a.at(v) - b.at(v)).abs()).collect();
    trapezoid(&x, &d)
}

/// Summary of one method's output for comparisons.
#[derive(Debug, Clone)]
pub struct MethodOutput {
    pub name: String,
    pub moments: Moments,
    pub probe_pdfs: Vec<PdfCurve>,
    pub probe_means: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeComparison {
    pub probe: String,
    pub l1_distance: f64,
    pub mean_a: f64,
    pub mean_b: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodComparison {
    pub a: String,
    pub b: String,
    pub mean_u_rel: f64,
    pub var_u_rel: f64,
    pub mean_p_rel: f64,
    pub probes: Vec<ProbeComparison>,
}

/// Moment-field differences and probe-pdf distances, `b` as reference.
pub fn compare_methods(a: &MethodOutput, b: &MethodOutput, probes: &[Probe]) -> Result<MethodComparison> {
    if a.moments.mean_u.len() != b.moments.mean_u.len()
        || a.moments.mean_p.len() != b.moments.mean_p.len()
        || a.probe_pdfs.len() != probes.len()
        || b.probe_pdfs.len() != probes.len()
    {
        return Err(Error::Config(format!("methods {} and {} were run on different problems", a.name, b.name)));
    }
    let probes = probes
        .iter()
        .enumerate()
        .map(|(i, p)| ProbeComparison {
            probe: p.label(),
            l1_distance: pdf_l1_distance(&a.probe_pdfs[i], &b.probe_pdfs[i]),
            mean_a: a.probe_means[i],
            mean_b: b.probe_means[i],
        })
        .collect();
    Ok(MethodComparison {
        a: a.name.clone(),
        b: b.name.clone(),
        mean_u_rel: relative_difference(&a.moments.mean_u, &b.moments.mean_u),
        var_u_rel: relative_difference(&a.moments.var_u, &b.moments.var_u),
        mean_p_rel: relative_difference(&a.moments.mean_p, &b.moments.mean_p),
        probes,
    })
}
