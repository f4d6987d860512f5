//! Structured Taylor–Hood (Q2 velocity / Q1 pressure) meshes on axis-aligned
//! rectangles, with whole-cell obstacles.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// Boundary condition class of a boundary edge or node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundaryTag {
    /// Dirichlet inflow (parabolic profile on the channel).
    Inflow,
    /// Dirichlet no-slip wall, including obstacle boundaries.
    Wall,
    /// Dirichlet moving lid of the cavity.
    Lid,
    /// Natural (do-nothing) outflow.
    Outflow,
}

impl BoundaryTag {
    pub fn is_dirichlet(self) -> bool {
        !matches!(self, BoundaryTag::Outflow)
    }

    /// Precedence used for nodes shared by edges of different classes.
    fn rank(self) -> u8 {
        match self {
            BoundaryTag::Wall => 3,
            BoundaryTag::Lid => 2,
            BoundaryTag::Inflow => 1,
            BoundaryTag::Outflow => 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: f64,
    pub x1: f64,
    pub y0: f64,
    pub y1: f64,
}

/// Domain description. Channels span `[0, length] x [-height/2, height/2]`;
/// the cavity is `[-1, 1]^2` with a lid on `y = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Geometry {
    Channel {
        length: f64,
        height: f64,
        #[serde(default)]
        obstacle: Option<Rect>,
    },
    Cavity,
}

impl Geometry {
    /// The 12 x 2 channel with the default square obstacle.
    pub fn obstacle_channel() -> Self {
        Geometry::Channel {
            length: 12.0,
            height: 2.0,
            obstacle: Some(Rect {
                x0: 1.75,
                x1: 2.25,
                y0: -0.25,
                y1: 0.25,
            }),
        }
    }

    pub fn bounds(&self) -> Rect {
        match self {
            Geometry::Channel { length, height, .. } => Rect {
                x0: 0.0,
                x1: *length,
                y0: -height / 2.0,
                y1: height / 2.0,
            },
            Geometry::Cavity => Rect {
                x0: -1.0,
                x1: 1.0,
                y0: -1.0,
                y1: 1.0,
            },
        }
    }
}

/// One Q2 element. Local velocity node `b * 3 + a` sits at lattice offset
/// `(a, b)`; local pressure node `b * 2 + a` is the vertex `(2a, 2b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Element {
    pub v: [usize; 9],
    pub p: [usize; 4],
    pub origin: [f64; 2],
    pub size: [f64; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryEdge {
    pub nodes: [usize; 3],
    pub tag: BoundaryTag,
}

#[derive(Debug, Clone)]
pub struct Mesh {
    geometry: Geometry,
    nx: usize,
    ny: usize,
    nodes: Vec<[f64; 2]>,
    lattice: Vec<[usize; 2]>,
    pressure_nodes: Vec<usize>,
    elements: Vec<Element>,
    node_tags: Vec<Option<BoundaryTag>>,
    boundary_edges: Vec<BoundaryEdge>,
    /// `cell_element[i * ny + j]` is the element occupying cell (i, j).
    cell_element: Vec<Option<usize>>,
    pressure_pin: Option<usize>,
}

/// Builds a uniform `nx x ny` cell mesh of `geometry`.
pub fn build_mesh(geometry: &Geometry, nx: usize, ny: usize) -> Result<Mesh> {
    if nx < 2 || ny < 2 {
        return Err(Error::Geometry(format!("need nx, ny >= 2, got {nx} x {ny}")));
    }
    let b = geometry.bounds();
    let hx = (b.x1 - b.x0) / nx as f64;
    let hy = (b.y1 - b.y0) / ny as f64;
    if !(hx > 0.0 && hy > 0.0 && hx.is_finite() && hy.is_finite()) {
        return Err(Error::Geometry("degenerate element (zero Jacobian)".into()));
    }

    let mut active = vec![true; nx * ny];
    if let Geometry::Channel {
        obstacle: Some(r), ..
    } = geometry
    {
        let snap = |v: f64, o: f64, h: f64| ((v - o) / h).round() as i64;
        let (i0, i1) = (snap(r.x0, b.x0, hx), snap(r.x1, b.x0, hx));
        let (j0, j1) = (snap(r.y0, b.y0, hy), snap(r.y1, b.y0, hy));
        if !(r.x0 < r.x1 && r.y0 < r.y1) {
            return Err(Error::Geometry("obstacle rectangle is empty".into()));
        }
        if i0 <= 0 || j0 <= 0 || i1 >= nx as i64 || j1 >= ny as i64 || i0 >= i1 || j0 >= j1 {
            return Err(Error::Geometry(format!(
                "obstacle [{}, {}] x [{}, {}] is not strictly inside the domain on a {nx} x {ny} grid",
                r.x0, r.x1, r.y0, r.y1
            )));
        }
        for i in i0 as usize..i1 as usize {
            for j in j0 as usize..j1 as usize {
                active[i * ny + j] = false;
            }
        }
    }

    // Velocity lattice (2nx+1) x (2ny+1); keep nodes touched by an active cell.
    let (lx, ly) = (2 * nx + 1, 2 * ny + 1);
    let mut used = vec![false; lx * ly];
    for i in 0..nx {
        for j in 0..ny {
            if active[i * ny + j] {
                for a in 0..3 {
                    for c in 0..3 {
                        used[(2 * i + a) * ly + 2 * j + c] = true;
                    }
                }
            }
        }
    }
    let mut node_of = vec![usize::MAX; lx * ly];
    let mut nodes = Vec::new();
    let mut lattice = Vec::new();
    for li in 0..lx {
        for lj in 0..ly {
            if used[li * ly + lj] {
                node_of[li * ly + lj] = nodes.len();
                nodes.push([b.x0 + 0.5 * hx * li as f64, b.y0 + 0.5 * hy * lj as f64]);
                lattice.push([li, lj]);
            }
        }
    }
    let mut pressure_of = vec![usize::MAX; nodes.len()];
    let mut pressure_nodes = Vec::new();
    for (k, &[li, lj]) in lattice.iter().enumerate() {
        if li % 2 == 0 && lj % 2 == 0 {
            pressure_of[k] = pressure_nodes.len();
            pressure_nodes.push(k);
        }
    }

    let mut elements = Vec::new();
    let mut cell_element = vec![None; nx * ny];
    for i in 0..nx {
        for j in 0..ny {
            if !active[i * ny + j] {
                continue;
            }
            let mut v = [0usize; 9];
            for c in 0..3 {
                for a in 0..3 {
                    v[c * 3 + a] = node_of[(2 * i + a) * ly + 2 * j + c];
                }
            }
            let p = [
                pressure_of[v[0]],
                pressure_of[v[2]],
                pressure_of[v[6]],
                pressure_of[v[8]],
            ];
            cell_element[i * ny + j] = Some(elements.len());
            elements.push(Element {
                v,
                p,
                origin: [b.x0 + hx * i as f64, b.y0 + hy * j as f64],
                size: [hx, hy],
            });
        }
    }

    let cavity = matches!(geometry, Geometry::Cavity);
    let outside_tag = |side: usize| -> BoundaryTag {
        // side: 0 left, 1 right, 2 bottom, 3 top
        match (cavity, side) {
            (false, 0) => BoundaryTag::Inflow,
            (false, 1) => BoundaryTag::Outflow,
            (true, 3) => BoundaryTag::Lid,
            _ => BoundaryTag::Wall,
        }
    };
    let mut boundary_edges = Vec::new();
    let mut node_tags: Vec<Option<BoundaryTag>> = vec![None; nodes.len()];
    for i in 0..nx {
        for j in 0..ny {
            let Some(e) = cell_element[i * ny + j] else {
                continue;
            };
            let v = elements[e].v;
            let sides: [(Option<(usize, usize)>, [usize; 3]); 4] = [
                ((i > 0).then(|| (i - 1, j)), [v[0], v[3], v[6]]),
                ((i + 1 < nx).then(|| (i + 1, j)), [v[2], v[5], v[8]]),
                ((j > 0).then(|| (i, j - 1)), [v[0], v[1], v[2]]),
                ((j + 1 < ny).then(|| (i, j + 1)), [v[6], v[7], v[8]]),
            ];
            for (side, (nb, edge_nodes)) in sides.into_iter().enumerate() {
                let tag = match nb {
                    None => outside_tag(side),
                    Some((ni, nj)) if !active[ni * ny + nj] => BoundaryTag::Wall,
                    Some(_) => continue,
                };
                boundary_edges.push(BoundaryEdge {
                    nodes: edge_nodes,
                    tag,
                });
                for n in edge_nodes {
                    node_tags[n] = match node_tags[n] {
                        Some(t) if t.rank() >= tag.rank() => Some(t),
                        _ => Some(tag),
                    };
                }
            }
        }
    }

    let has_outflow = boundary_edges.iter().any(|e| e.tag == BoundaryTag::Outflow);
    Ok(Mesh {
        geometry: geometry.clone(),
        nx,
        ny,
        nodes,
        lattice,
        pressure_nodes,
        elements,
        node_tags,
        boundary_edges,
        cell_element,
        pressure_pin: if has_outflow { None } else { Some(0) },
    })
}

impl Mesh {
    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn cells(&self) -> (usize, usize) {
        (self.nx, self.ny)
    }

    pub fn nodes(&self) -> &[[f64; 2]] {
        &self.nodes
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Velocity dof count `N_u` (both components).
    pub fn nu(&self) -> usize {
        2 * self.nodes.len()
    }

    /// Pressure dof count `N_p`.
    pub fn np(&self) -> usize {
        self.pressure_nodes.len()
    }

    pub fn elements(&self) -> &[Element] {
        &self.elements
    }

    /// Velocity node index of each pressure dof.
    pub fn pressure_nodes(&self) -> &[usize] {
        &self.pressure_nodes
    }

    pub fn node_tags(&self) -> &[Option<BoundaryTag>] {
        &self.node_tags
    }

    pub fn boundary_edges(&self) -> &[BoundaryEdge] {
        &self.boundary_edges
    }

    /// Lattice coordinates `(i, j)` of every velocity node on the
    /// `(2nx+1) x (2ny+1)` node lattice of the bounding rectangle.
    pub fn lattice(&self) -> &[[usize; 2]] {
        &self.lattice
    }

    /// Pressure dof fixed to zero for enclosed flows.
    pub fn pressure_pin(&self) -> Option<usize> {
        self.pressure_pin
    }

    pub fn dirichlet_mask(&self) -> Vec<bool> {
        self.node_tags
            .iter()
            .map(|t| t.is_some_and(|t| t.is_dirichlet()))
            .collect()
    }

    pub fn area(&self) -> f64 {
        self.elements.iter().map(|e| e.size[0] * e.size[1]).sum()
    }

    /// Standard boundary data: parabolic inflow `u_x = 1 - (2y/H)^2` on the
    /// channel, unit lid speed on the cavity, no-slip elsewhere.
    pub fn default_boundary_value(&self, tag: BoundaryTag, x: [f64; 2]) -> [f64; 2] {
        match (tag, &self.geometry) {
            (BoundaryTag::Inflow, Geometry::Channel { height, .. }) => {
                let s = 2.0 * x[1] / height;
                [1.0 - s * s, 0.0]
            }
            (BoundaryTag::Lid, _) => [1.0, 0.0],
            _ => [0.0, 0.0],
        }
    }

    /// Velocity vector (length `N_u`) holding `bc` on Dirichlet nodes and
    /// zero elsewhere.
    pub fn boundary_vector<F>(&self, bc: F) -> Vec<f64>
    where
        F: Fn(BoundaryTag, [f64; 2]) -> [f64; 2],
    {
        let n = self.num_nodes();
        let mut g = vec![0.0; 2 * n];
        for (k, tag) in self.node_tags.iter().enumerate() {
            if let Some(t) = tag.filter(|t| t.is_dirichlet()) {
                let v = bc(t, self.nodes[k]);
                g[k] = v[0];
                g[n + k] = v[1];
            }
        }
        g
    }

    pub fn default_boundary_vector(&self) -> Vec<f64> {
        self.boundary_vector(|t, x| self.default_boundary_value(t, x))
    }

    /// Finds the element containing `(x, y)` and the local coordinates in
    /// `[0, 1]^2`.
    pub fn locate(&self, x: f64, y: f64) -> Result<(usize, [f64; 2])> {
        let b = self.geometry.bounds();
        let hx = (b.x1 - b.x0) / self.nx as f64;
        let hy = (b.y1 - b.y0) / self.ny as f64;
        let tol = 1e-12;
        if x < b.x0 - tol || x > b.x1 + tol || y < b.y0 - tol || y > b.y1 + tol {
            return Err(Error::OutsideDomain { x, y });
        }
        let fi = ((x - b.x0) / hx).floor().clamp(0.0, (self.nx - 1) as f64) as usize;
        let fj = ((y - b.y0) / hy).floor().clamp(0.0, (self.ny - 1) as f64) as usize;
        // Points on a cell edge may belong to a neighbouring active cell.
        for (di, dj) in [(0i64, 0i64), (-1, 0), (0, -1), (-1, -1), (1, 0), (0, 1)] {
            let (i, j) = (fi as i64 + di, fj as i64 + dj);
            if i < 0 || j < 0 || i >= self.nx as i64 || j >= self.ny as i64 {
                continue;
            }
            if let Some(e) = self.cell_element[i as usize * self.ny + j as usize] {
                let el = &self.elements[e];
                let s = (x - el.origin[0]) / el.size[0];
                let t = (y - el.origin[1]) / el.size[1];
                if (-tol..=1.0 + tol).contains(&s) && (-tol..=1.0 + tol).contains(&t) {
                    return Ok((e, [s.clamp(0.0, 1.0), t.clamp(0.0, 1.0)]));
                }
            }
        }
        Err(Error::OutsideDomain { x, y })
    }

    /// Interpolation weights of a point: velocity nodes with Q2 weights, or
    /// pressure dofs with Q1 weights.
    pub fn point_weights(&self, x: f64, y: f64, pressure: bool) -> Result<Vec<(usize, f64)>> {
        let (e, [s, t]) = self.locate(x, y)?;
        let el = &self.elements[e];
        if pressure {
            let l = [1.0 - s, s];
            let m = [1.0 - t, t];
            Ok((0..4).map(|k| (el.p[k], l[k % 2] * m[k / 2])).collect())
        } else {
            let q = |r: f64| [2.0 * (r - 0.5) * (r - 1.0), -4.0 * r * (r - 1.0), 2.0 * r * (r - 0.5)];
            let (l, m) = (q(s), q(t));
            Ok((0..9).map(|k| (el.v[k], l[k % 3] * m[k / 3])).collect())
        }
    }

    /// Writes point data on the velocity nodes as VTK legacy ASCII; each Q2
    /// element is split into four bilinear quads.
    pub fn write_vtk<W: Write>(&self, mut w: W, fields: &[(&str, &[f64])]) -> Result<()> {
        for (name, f) in fields {
            check_len("vtk field length", self.num_nodes(), f.len())
                .map_err(|_| Error::InvalidInput(format!("field {name} has wrong length")))?;
        }
        writeln!(w, "# vtk DataFile Version 3.0")?;
        writeln!(w, "sgns nodal fields")?;
        writeln!(w, "ASCII")?;
        writeln!(w, "DATASET UNSTRUCTURED_GRID")?;
        writeln!(w, "POINTS {} double", self.num_nodes())?;
        for p in &self.nodes {
            writeln!(w, "{:.12e} {:.12e} 0", p[0], p[1])?;
        }
        let nq = 4 * self.elements.len();
        writeln!(w, "CELLS {} {}", nq, 5 * nq)?;
        for el in &self.elements {
            for (a, b) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                let at = |da: usize, db: usize| el.v[(b + db) * 3 + a + da];
                writeln!(w, "4 {} {} {} {}", at(0, 0), at(1, 0), at(1, 1), at(0, 1))?;
            }
        }
        writeln!(w, "CELL_TYPES {nq}")?;
        for _ in 0..nq {
            writeln!(w, "9")?;
        }
        if !fields.is_empty() {
            writeln!(w, "POINT_DATA {}", self.num_nodes())?;
            for (name, f) in fields {
                writeln!(w, "SCALARS {name} double 1")?;
                writeln!(w, "LOOKUP_TABLE default")?;
                for v in f.iter() {
                    writeln!(w, "{v:.12e}")?;
                }
            }
        }
        Ok(())
    }

    /// CSV with columns `x,y,<field>...` on the velocity nodes.
    pub fn write_csv<W: Write>(&self, mut w: W, fields: &[(&str, &[f64])]) -> Result<()> {
        for (name, f) in fields {
            if f.len() != self.num_nodes() {
                return Err(Error::InvalidInput(format!("field {name} has wrong length")));
            }
        }
        write!(w, "x,y")?;
        for (name, _) in fields {
            write!(w, ",{name}")?;
        }
        writeln!(w)?;
        for (k, p) in self.nodes.iter().enumerate() {
            write!(w, "{:.12e},{:.12e}", p[0], p[1])?;
            for (_, f) in fields {
                write!(w, ",{:.12e}", f[k])?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    /// Expands a pressure vector to the velocity nodes by Q1 interpolation,
    /// for export alongside velocity fields.
    pub fn pressure_to_nodes(&self, p: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.num_nodes()];
        for el in &self.elements {
            for c in 0..3 {
                for a in 0..3 {
                    let (s, t) = (a as f64 / 2.0, c as f64 / 2.0);
                    let l = [1.0 - s, s];
                    let m = [1.0 - t, t];
                    out[el.v[c * 3 + a]] = (0..4).map(|k| p[el.p[k]] * l[k % 2] * m[k / 2]).sum();
                }
            }
        }
        out
    }
}
