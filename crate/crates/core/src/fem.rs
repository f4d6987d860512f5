//! Taylor–Hood assembly: weighted vector Laplacian, divergence, convection,
//! Newton derivative, pressure convection–diffusion operators, and Dirichlet
//! elimination.
//!
//! Velocity vectors are component-blocked: `[u_x(0..n), u_y(0..n)]` over the
//! velocity nodes. The divergence matrix uses `b_cd = -∫ q_c ∇·φ_d`, so the
//! linearized system has the symmetric saddle form `[F Bᵀ; B 0]`.

use std::sync::Arc;

use crate::error::{check_len, Result};
use crate::mesh::{BoundaryTag, Geometry, Mesh};
use crate::sparse::{CsrMatrix, NodalPattern, VelocityBlock};

const GAUSS3_PTS: [f64; 3] = [
    0.5 - 0.387_298_334_620_741_7,
    0.5,
    0.5 + 0.387_298_334_620_741_7,
];
const GAUSS3_WTS: [f64; 3] = [5.0 / 18.0, 8.0 / 18.0, 5.0 / 18.0];

fn quad1d(s: f64) -> ([f64; 3], [f64; 3]) {
    (
        [2.0 * (s - 0.5) * (s - 1.0), -4.0 * s * (s - 1.0), 2.0 * s * (s - 0.5)],
        [4.0 * s - 3.0, 4.0 - 8.0 * s, 4.0 * s - 1.0],
    )
}

/// Reference Q2/Q1 basis tables at the 3x3 Gauss points of `[0,1]^2`.
#[derive(Debug, Clone)]
struct RefTables {
    weight: [f64; 9],
    phi: [[f64; 9]; 9],
    dphi_ds: [[f64; 9]; 9],
    dphi_dt: [[f64; 9]; 9],
    psi: [[f64; 4]; 9],
    dpsi_ds: [[f64; 4]; 9],
    dpsi_dt: [[f64; 4]; 9],
}

impl RefTables {
    fn new() -> Self {
        let mut t = RefTables {
            weight: [0.0; 9],
            phi: [[0.0; 9]; 9],
            dphi_ds: [[0.0; 9]; 9],
            dphi_dt: [[0.0; 9]; 9],
            psi: [[0.0; 4]; 9],
            dpsi_ds: [[0.0; 4]; 9],
            dpsi_dt: [[0.0; 4]; 9],
        };
        for qj in 0..3 {
            for qi in 0..3 {
                let q = qj * 3 + qi;
                let (s, tt) = (GAUSS3_PTS[qi], GAUSS3_PTS[qj]);
                t.weight[q] = GAUSS3_WTS[qi] * GAUSS3_WTS[qj];
                let (ls, dls) = quad1d(s);
                let (lt, dlt) = quad1d(tt);
                for b in 0..3 {
                    for a in 0..3 {
                        let k = b * 3 + a;
                        t.phi[q][k] = ls[a] * lt[b];
                        t.dphi_ds[q][k] = dls[a] * lt[b];
                        t.dphi_dt[q][k] = ls[a] * dlt[b];
                    }
                }
                let ms = [1.0 - s, s];
                let mt = [1.0 - tt, tt];
                for b in 0..2 {
                    for a in 0..2 {
                        let k = b * 2 + a;
                        t.psi[q][k] = ms[a] * mt[b];
                        t.dpsi_ds[q][k] = [-1.0, 1.0][a] * mt[b];
                        t.dpsi_dt[q][k] = ms[a] * [-1.0, 1.0][b];
                    }
                }
            }
        }
        t
    }
}

/// Physical quantities of one element at its quadrature points.
struct ElementGeom {
    jw: [f64; 9],
    dphi_dx: [[f64; 9]; 9],
    dphi_dy: [[f64; 9]; 9],
}

/// Pressure convection–diffusion operators on the Q1 pressure space.
#[derive(Debug, Clone)]
pub struct PcdOperators {
    /// Pressure Laplacian, Dirichlet rows at inflow pressure nodes.
    pub ap: CsrMatrix,
    /// Viscosity-weighted Laplacian plus convection, same boundary rows.
    pub fp: CsrMatrix,
    /// Pressure mass matrix.
    pub mp: CsrMatrix,
}

/// A deterministic saddle-point system `[F Bᵀ; B C] [u; p] = [f; g]`,
/// where `C` is zero except for an optional unit pressure pin.
#[derive(Debug, Clone)]
pub struct SaddleBlocks {
    pub f: VelocityBlock,
    pub b: CsrMatrix,
    pub rhs_u: Vec<f64>,
    pub rhs_p: Vec<f64>,
    pub pressure_pin: Option<usize>,
}

impl SaddleBlocks {
    pub fn nu(&self) -> usize {
        self.f.dim()
    }

    pub fn np(&self) -> usize {
        self.b.nrows()
    }

    /// The assembled `(N_u + N_p)` square matrix.
    pub fn to_csr(&self) -> CsrMatrix {
        saddle_csr(&self.f, &self.b, self.pressure_pin)
    }

    pub fn rhs(&self) -> Vec<f64> {
        let mut r = self.rhs_u.clone();
        r.extend_from_slice(&self.rhs_p);
        r
    }
}

pub(crate) fn saddle_csr(f: &VelocityBlock, b: &CsrMatrix, pin: Option<usize>) -> CsrMatrix {
    let nu = f.dim();
    let np = b.nrows();
    let fc = f.to_csr();
    let mut trips = Vec::with_capacity(fc.nnz() + 2 * b.nnz() + 1);
    for i in 0..nu {
        trips.extend(fc.row(i).map(|(j, v)| (i, j, v)));
    }
    for i in 0..np {
        for (j, v) in b.row(i) {
            trips.push((nu + i, j, v));
            trips.push((j, nu + i, v));
        }
    }
    if let Some(k) = pin {
        trips.push((nu + k, nu + k, 1.0));
    }
    CsrMatrix::from_triplets(nu + np, nu + np, trips)
}

/// Assembly context for one mesh: shared velocity pattern, per-element
/// scatter maps and reference tables.
#[derive(Debug, Clone)]
pub struct FemSpace {
    mesh: Arc<Mesh>,
    pattern: Arc<NodalPattern>,
    scatter: Vec<[usize; 81]>,
    tables: RefTables,
}

impl FemSpace {
    pub fn new(mesh: Arc<Mesh>) -> Self {
        let n = mesh.num_nodes();
        let mut rows: Vec<Vec<usize>> = vec![Vec::new(); n];
        for el in mesh.elements() {
            for &a in &el.v {
                rows[a].extend_from_slice(&el.v);
            }
        }
        let pattern = Arc::new(NodalPattern::from_rows(rows));
        let scatter = mesh
            .elements()
            .iter()
            .map(|el| {
                let mut s = [0usize; 81];
                for a in 0..9 {
                    for b in 0..9 {
                        s[a * 9 + b] = pattern.position(el.v[a], el.v[b]).expect("element pair in pattern");
                    }
                }
                s
            })
            .collect();
        Self {
            mesh,
            pattern,
            scatter,
            tables: RefTables::new(),
        }
    }

    pub fn mesh(&self) -> &Arc<Mesh> {
        &self.mesh
    }

    pub fn pattern(&self) -> &Arc<NodalPattern> {
        &self.pattern
    }

    pub fn nu(&self) -> usize {
        self.mesh.nu()
    }

    pub fn np(&self) -> usize {
        self.mesh.np()
    }

    fn geom(&self, e: usize) -> ElementGeom {
        let el = &self.mesh.elements()[e];
        let [hx, hy] = el.size;
        let t = &self.tables;
        let mut g = ElementGeom {
            jw: [0.0; 9],
            dphi_dx: [[0.0; 9]; 9],
            dphi_dy: [[0.0; 9]; 9],
        };
        for q in 0..9 {
            g.jw[q] = t.weight[q] * hx * hy;
            for a in 0..9 {
                g.dphi_dx[q][a] = t.dphi_ds[q][a] / hx;
                g.dphi_dy[q][a] = t.dphi_dt[q][a] / hy;
            }
        }
        g
    }

    fn interp(&self, e: usize, nodal: &[f64], q: usize) -> f64 {
        let el = &self.mesh.elements()[e];
        (0..9).map(|a| nodal[el.v[a]] * self.tables.phi[q][a]).sum()
    }

    fn interp_grad(&self, e: usize, g: &ElementGeom, nodal: &[f64], q: usize) -> [f64; 2] {
        let el = &self.mesh.elements()[e];
        let mut d = [0.0; 2];
        for a in 0..9 {
            d[0] += nodal[el.v[a]] * g.dphi_dx[q][a];
            d[1] += nodal[el.v[a]] * g.dphi_dy[q][a];
        }
        d
    }

    /// Scalar nodal matrix from an element kernel `k(e, geom, q, a, b)`
    /// integrated with weights `jw[q]`.
    fn assemble_scalar<K>(&self, kernel: K) -> Vec<f64>
    where
        K: Fn(usize, &ElementGeom, usize, usize, usize) -> f64,
    {
        let mut vals = vec![0.0; self.pattern.nnz()];
        for (e, sc) in self.scatter.iter().enumerate() {
            let g = self.geom(e);
            let mut local = [0.0; 81];
            for q in 0..9 {
                let w = g.jw[q];
                for a in 0..9 {
                    for b in 0..9 {
                        local[a * 9 + b] += w * kernel(e, &g, q, a, b);
                    }
                }
            }
            for (k, v) in local.iter().enumerate() {
                vals[sc[k]] += v;
            }
        }
        vals
    }

    fn nodal_len(&self, what: &'static str, f: &[f64]) -> Result<()> {
        check_len(what, self.mesh.num_nodes(), f.len())
    }

    /// `∫ coeff ∇φ_b : ∇φ_a` with `coeff` interpolated through the Q2 basis.
    pub fn assemble_weighted_laplacian(&self, coeff: &[f64]) -> Result<VelocityBlock> {
        self.nodal_len("laplacian coefficient", coeff)?;
        let vals = self.assemble_scalar(|e, g, q, a, b| {
            let c = self.interp(e, coeff, q);
            c * (g.dphi_dx[q][a] * g.dphi_dx[q][b] + g.dphi_dy[q][a] * g.dphi_dy[q][b])
        });
        Ok(VelocityBlock::isotropic(self.pattern.clone(), vals))
    }

    /// `∫ (w·∇φ_b) φ_a` for a velocity coefficient vector `wind`.
    pub fn assemble_convection(&self, wind: &[f64]) -> Result<VelocityBlock> {
        check_len("convection wind", self.nu(), wind.len())?;
        let n = self.mesh.num_nodes();
        let (wx, wy) = wind.split_at(n);
        let phi = &self.tables.phi;
        let vals = self.assemble_scalar(|e, g, q, a, b| {
            let (ux, uy) = (self.interp(e, wx, q), self.interp(e, wy, q));
            phi[q][a] * (ux * g.dphi_dx[q][b] + uy * g.dphi_dy[q][b])
        });
        Ok(VelocityBlock::isotropic(self.pattern.clone(), vals))
    }

    /// `∫ (φ_b·∇u) φ_a`: block `(d, c)` is `∫ φ_a φ_b ∂u_d/∂x_c`.
    pub fn assemble_newton_derivative(&self, state: &[f64]) -> Result<VelocityBlock> {
        check_len("newton state", self.nu(), state.len())?;
        let n = self.mesh.num_nodes();
        let (ux, uy) = state.split_at(n);
        let nnz = self.pattern.nnz();
        let mut parts = [vec![0.0; nnz], vec![0.0; nnz], vec![0.0; nnz], vec![0.0; nnz]];
        let phi = &self.tables.phi;
        for (e, sc) in self.scatter.iter().enumerate() {
            let g = self.geom(e);
            let mut local = [[0.0; 81]; 4];
            for q in 0..9 {
                let gx = self.interp_grad(e, &g, ux, q);
                let gy = self.interp_grad(e, &g, uy, q);
                let grads = [gx[0], gx[1], gy[0], gy[1]];
                for a in 0..9 {
                    for b in 0..9 {
                        let m = g.jw[q] * phi[q][a] * phi[q][b];
                        for (l, gr) in local.iter_mut().zip(grads) {
                            l[a * 9 + b] += m * gr;
                        }
                    }
                }
            }
            for (part, l) in parts.iter_mut().zip(local.iter()) {
                for k in 0..81 {
                    part[sc[k]] += l[k];
                }
            }
        }
        let [xx, xy, yx, yy] = parts;
        Ok(VelocityBlock::coupled(self.pattern.clone(), xx, xy, yx, yy))
    }

    /// Scalar Q2 mass matrix values on the nodal pattern.
    pub fn velocity_mass(&self) -> Vec<f64> {
        let phi = &self.tables.phi;
        self.assemble_scalar(|_, _, q, a, b| phi[q][a] * phi[q][b])
    }

    /// Row sums of the scalar Q2 mass matrix (positive for Lagrange Q2).
    pub fn lumped_velocity_mass(&self) -> Vec<f64> {
        let m = self.velocity_mass();
        let ip = self.pattern.indptr();
        (0..self.mesh.num_nodes())
            .map(|i| m[ip[i]..ip[i + 1]].iter().sum())
            .collect()
    }

    /// Divergence matrix `B` (`N_p x N_u`), `b_cd = -∫ q_c ∇·φ_d`.
    pub fn assemble_divergence(&self) -> CsrMatrix {
        let n = self.mesh.num_nodes();
        let t = &self.tables;
        let mut trips = Vec::with_capacity(self.mesh.elements().len() * 72);
        for (e, el) in self.mesh.elements().iter().enumerate() {
            let g = self.geom(e);
            for c in 0..4 {
                for d in 0..9 {
                    let (mut bx, mut by) = (0.0, 0.0);
                    for q in 0..9 {
                        bx -= g.jw[q] * t.psi[q][c] * g.dphi_dx[q][d];
                        by -= g.jw[q] * t.psi[q][c] * g.dphi_dy[q][d];
                    }
                    trips.push((el.p[c], el.v[d], bx));
                    trips.push((el.p[c], n + el.v[d], by));
                }
            }
        }
        CsrMatrix::from_triplets(self.np(), self.nu(), trips)
    }

    /// Q1 pressure matrix from a kernel `k(e, geom, q, a, b)`.
    fn assemble_pressure<K>(&self, kernel: K) -> CsrMatrix
    where
        K: Fn(usize, &ElementGeom, usize, usize, usize) -> f64,
    {
        let mut trips = Vec::with_capacity(self.mesh.elements().len() * 16);
        for (e, el) in self.mesh.elements().iter().enumerate() {
            let g = self.geom(e);
            for a in 0..4 {
                for b in 0..4 {
                    let v: f64 = (0..9).map(|q| g.jw[q] * kernel(e, &g, q, a, b)).sum();
                    trips.push((el.p[a], el.p[b], v));
                }
            }
        }
        CsrMatrix::from_triplets(self.np(), self.np(), trips)
    }

    pub fn pressure_mass(&self) -> CsrMatrix {
        let t = &self.tables;
        self.assemble_pressure(|_, _, q, a, b| t.psi[q][a] * t.psi[q][b])
    }

    fn pressure_grad(&self, e: usize, q: usize, a: usize) -> [f64; 2] {
        let [hx, hy] = self.mesh.elements()[e].size;
        [self.tables.dpsi_ds[q][a] / hx, self.tables.dpsi_dt[q][a] / hy]
    }

    /// Pressure Laplacian with no boundary treatment.
    pub fn pressure_laplacian(&self) -> CsrMatrix {
        self.assemble_pressure(|e, _, q, a, b| {
            let (ga, gb) = (self.pressure_grad(e, q, a), self.pressure_grad(e, q, b));
            ga[0] * gb[0] + ga[1] * gb[1]
        })
    }

    /// Pressure dofs on the inflow boundary, or the pinned dof for enclosed
    /// flows; these carry Dirichlet rows in the PCD operators.
    pub fn pcd_dirichlet_pressure_dofs(&self) -> Vec<usize> {
        match self.mesh.geometry() {
            Geometry::Channel { .. } => {
                let x0 = self.mesh.geometry().bounds().x0;
                self.mesh
                    .pressure_nodes()
                    .iter()
                    .enumerate()
                    .filter(|(_, &v)| self.mesh.nodes()[v][0] == x0)
                    .map(|(k, _)| k)
                    .collect()
            }
            Geometry::Cavity => self.mesh.pressure_pin().into_iter().collect(),
        }
    }

    /// `(Ap, Fp, Mp)` for the pressure convection–diffusion preconditioner,
    /// built from the mean viscosity field and the mean velocity.
    pub fn assemble_pcd_operators(&self, mean_visc: &[f64], wind: &[f64]) -> Result<PcdOperators> {
        self.nodal_len("pcd viscosity", mean_visc)?;
        check_len("pcd wind", self.nu(), wind.len())?;
        let n = self.mesh.num_nodes();
        let (wx, wy) = wind.split_at(n);
        let t = &self.tables;
        let ap = self.pressure_laplacian();
        let fp = self.assemble_pressure(|e, _, q, a, b| {
            let (ga, gb) = (self.pressure_grad(e, q, a), self.pressure_grad(e, q, b));
            let nu = self.interp(e, mean_visc, q);
            let (ux, uy) = (self.interp(e, wx, q), self.interp(e, wy, q));
            nu * (ga[0] * gb[0] + ga[1] * gb[1]) + t.psi[q][a] * (ux * gb[0] + uy * gb[1])
        });
        let dir = self.pcd_dirichlet_pressure_dofs();
        Ok(PcdOperators {
            ap: dirichlet_rows(&ap, &dir),
            fp: dirichlet_rows(&fp, &dir),
            mp: self.pressure_mass(),
        })
    }

    /// Symmetric Dirichlet elimination of a saddle system: Dirichlet rows and
    /// columns of `F` become identity rows, `B` loses Dirichlet columns, and
    /// the lifting `-[F; B][:, D] g` moves to the right-hand side. A pinned
    /// pressure dof loses its continuity row.
    pub fn apply_dirichlet<G>(&self, blocks: SaddleBlocks, bc: G) -> Result<SaddleBlocks>
    where
        G: Fn(BoundaryTag, [f64; 2]) -> [f64; 2],
    {
        check_len("dirichlet rhs_u", self.nu(), blocks.rhs_u.len())?;
        check_len("dirichlet rhs_p", self.np(), blocks.rhs_p.len())?;
        let g = self.mesh.boundary_vector(bc);
        let mask = self.mesh.dirichlet_mask();
        let mut rhs_u = blocks.rhs_u;
        let mut rhs_p = blocks.rhs_p;
        blocks.f.apply_add(-1.0, &g, &mut rhs_u);
        blocks.b.matvec_add(-1.0, &g, &mut rhs_p);
        let n = self.mesh.num_nodes();
        for k in 0..n {
            if mask[k] {
                rhs_u[k] = g[k];
                rhs_u[n + k] = g[n + k];
            }
        }
        let pin = self.mesh.pressure_pin();
        if let Some(k) = pin {
            rhs_p[k] = 0.0;
        }
        Ok(SaddleBlocks {
            f: blocks.f.eliminated(&mask, 1.0),
            b: eliminate_divergence(&blocks.b, &mask, pin),
            rhs_u,
            rhs_p,
            pressure_pin: pin,
        })
    }
}

/// Zeroes the Dirichlet velocity columns of `B` (both components) and the
/// pinned pressure row.
pub fn eliminate_divergence(b: &CsrMatrix, mask: &[bool], pin: Option<usize>) -> CsrMatrix {
    let n = mask.len();
    let mut out = b.clone();
    let ip = out.indptr().to_vec();
    let ix = out.indices().to_vec();
    let vals = out.values_mut();
    for i in 0..ip.len() - 1 {
        for p in ip[i]..ip[i + 1] {
            if Some(i) == pin || mask[ix[p] % n] {
                vals[p] = 0.0;
            }
        }
    }
    out
}

/// Replaces the listed rows by identity rows.
fn dirichlet_rows(a: &CsrMatrix, rows: &[usize]) -> CsrMatrix {
    let mut out = a.clone();
    let ip = out.indptr().to_vec();
    let ix = out.indices().to_vec();
    let vals = out.values_mut();
    for &r in rows {
        for p in ip[r]..ip[r + 1] {
            vals[p] = if ix[p] == r { 1.0 } else { 0.0 };
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::build_mesh;

    fn cavity(n: usize) -> FemSpace {
        FemSpace::new(Arc::new(build_mesh(&Geometry::Cavity, n, n).unwrap()))
    }

    fn node_field(space: &FemSpace, f: impl Fn([f64; 2]) -> f64) -> Vec<f64> {
        space.mesh().nodes().iter().map(|&p| f(p)).collect()
    }

    #[test]
    fn laplacian_linear_in_coefficient_and_symmetric() {
        let s = cavity(4);
        let n = s.mesh().num_nodes();
        let zero = s.assemble_weighted_laplacian(&vec![0.0; n]).unwrap();
        assert_eq!(zero.to_csr().max_abs(), 0.0);
        let one = s.assemble_weighted_laplacian(&vec![1.0; n]).unwrap();
        let three = s.assemble_weighted_laplacian(&vec![3.0; n]).unwrap();
        let diff = three.add_scaled(-3.0, &one).to_csr().max_abs();
        assert!(diff < 1e-13);
        let var = s
            .assemble_weighted_laplacian(&node_field(&s, |p| 1.0 + p[0] * p[0] + 0.3 * p[1]))
            .unwrap();
        assert!(var.to_csr().asymmetry() <= 1e-12);
    }

    #[test]
    fn laplacian_row_sums_vanish() {
        let s = cavity(4);
        let a = s.assemble_weighted_laplacian(&vec![1.0; s.mesh().num_nodes()]).unwrap().to_csr();
        let ones = vec![1.0; a.ncols()];
        let mut r = vec![0.0; a.nrows()];
        a.matvec(&ones, &mut r);
        assert!(r.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn divergence_shape_and_constant_field() {
        let m = build_mesh(&Geometry::Cavity, 2, 2).unwrap();
        let s = FemSpace::new(Arc::new(m));
        let b = s.assemble_divergence();
        assert_eq!((b.nrows(), b.ncols()), (9, 50));
        let n = s.mesh().num_nodes();
        let mut u = vec![0.0; 2 * n];
        u[..n].fill(1.0);
        let mut r = vec![0.0; b.nrows()];
        b.matvec(&u, &mut r);
        // interior pressure node: the cavity centre
        let centre = s
            .mesh()
            .pressure_nodes()
            .iter()
            .position(|&v| s.mesh().nodes()[v] == [0.0, 0.0])
            .unwrap();
        assert!(r[centre].abs() < 1e-12);
    }

    #[test]
    fn convection_zero_and_linear() {
        let s = cavity(3);
        let nu = s.nu();
        assert_eq!(s.assemble_convection(&vec![0.0; nu]).unwrap().to_csr().max_abs(), 0.0);
        let w: Vec<f64> = (0..nu).map(|i| (i as f64 * 0.37).sin()).collect();
        let w2: Vec<f64> = w.iter().map(|v| 2.5 * v).collect();
        let a = s.assemble_convection(&w).unwrap();
        let b = s.assemble_convection(&w2).unwrap();
        assert!(b.add_scaled(-2.5, &a).to_csr().max_abs() < 1e-13);
    }

    #[test]
    fn convection_is_skew_for_solenoidal_wind() {
        let s = cavity(4);
        let mut w = node_field(&s, |p| p[1]);
        w.extend(node_field(&s, |p| -p[0]));
        let nmat = s.assemble_convection(&w).unwrap().to_csr();
        let sym = nmat.add_scaled(1.0, &nmat.transpose());
        let n = s.mesh().num_nodes();
        let interior: Vec<bool> = s
            .mesh()
            .nodes()
            .iter()
            .map(|p| p.iter().all(|c| c.abs() < 1.0 - 1e-12))
            .collect();
        let mut worst: f64 = 0.0;
        for i in 0..sym.nrows() {
            for (j, v) in sym.row(i) {
                if interior[i % n] && interior[j % n] {
                    worst = worst.max(v.abs());
                }
            }
        }
        assert!(worst <= 1e-12 * nmat.max_abs().max(1.0), "{worst}");
    }

    #[test]
    fn newton_derivative_vanishes_for_constant_state() {
        let s = cavity(3);
        let nu = s.nu();
        assert_eq!(s.assemble_newton_derivative(&vec![0.0; nu]).unwrap().to_csr().max_abs(), 0.0);
        let c = vec![0.7; nu];
        assert!(s.assemble_newton_derivative(&c).unwrap().to_csr().max_abs() < 1e-13);
    }

    #[test]
    fn pressure_mass_integrates_area() {
        let m = build_mesh(&Geometry::obstacle_channel(), 24, 4).unwrap();
        let area = m.area();
        let s = FemSpace::new(Arc::new(m));
        let mp = s.pressure_mass();
        let total: f64 = mp.values().iter().sum();
        assert!((total - area).abs() < 1e-10);
    }

    #[test]
    fn pcd_without_wind_is_weighted_laplacian() {
        let m = build_mesh(&Geometry::obstacle_channel(), 24, 4).unwrap();
        let s = FemSpace::new(Arc::new(m));
        let n = s.mesh().num_nodes();
        let ops = s.assemble_pcd_operators(&vec![0.02; n], &vec![0.0; s.nu()]).unwrap();
        let dir = s.pcd_dirichlet_pressure_dofs();
        assert!(!dir.is_empty());
        let scaled = ops.ap.scaled(0.02);
        for i in 0..s.np() {
            if dir.contains(&i) {
                continue;
            }
            for (j, v) in ops.fp.row(i) {
                assert!((v - scaled.get(i, j)).abs() < 1e-15);
            }
        }
        // Laplacian of a constant pressure vanishes on interior rows
        let raw = s.pressure_laplacian();
        let mut r = vec![0.0; s.np()];
        raw.matvec(&vec![1.0; s.np()], &mut r);
        assert!(r.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn dirichlet_elimination_rows() {
        let s = cavity(3);
        let n = s.mesh().num_nodes();
        let f = s.assemble_weighted_laplacian(&vec![1.0; n]).unwrap();
        let blocks = SaddleBlocks {
            f,
            b: s.assemble_divergence(),
            rhs_u: vec![0.0; s.nu()],
            rhs_p: vec![0.0; s.np()],
            pressure_pin: None,
        };
        let zero = s.apply_dirichlet(blocks.clone(), |_, _| [0.0, 0.0]).unwrap();
        assert!(zero.rhs().iter().all(|v| *v == 0.0));
        let lid = s.apply_dirichlet(blocks, |t, x| s.mesh().default_boundary_value(t, x)).unwrap();
        let k = lid.to_csr();
        let mask = s.mesh().dirichlet_mask();
        for node in (0..n).filter(|&i| mask[i]) {
            for r in [node, n + node] {
                let row: Vec<_> = k.row(r).filter(|&(_, v)| v != 0.0).collect();
                assert_eq!(row, vec![(r, 1.0)]);
            }
        }
    }
}
