//! Multivariate normalized Hermite polynomial chaos: total-degree index sets,
//! basis evaluation, triple-product coupling matrices and Gauss–Hermite
//! quadrature (tensor and Smolyak).

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::Serialize;

use crate::error::{check_len, Error, Result};

/// Binomial coefficient `C(n, k)` as an integer count.
pub fn binomial(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1usize, |acc, i| acc * (n - i) / (i + 1))
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|i| i as f64).product()
}

/// Multi-indices of total degree at most `P` in `N` variables, in graded
/// order: by total degree, then with larger leading components first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MultiIndexSet {
    dim: usize,
    degree: usize,
    indices: Vec<Vec<usize>>,
    #[serde(skip)]
    lookup: HashMap<Vec<usize>, usize>,
}

fn fill_degree(dim: usize, total: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
    if prefix.len() + 1 == dim {
        prefix.push(total);
        out.push(prefix.clone());
        prefix.pop();
        return;
    }
    for a in (0..=total).rev() {
        prefix.push(a);
        fill_degree(dim, total - a, prefix, out);
        prefix.pop();
    }
}

impl MultiIndexSet {
    /// Total-degree set with `C(N+P, P)` members.
    pub fn total_degree(dim: usize, degree: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidInput("stochastic dimension must be at least 1".into()));
        }
        let mut indices = Vec::with_capacity(binomial(dim + degree, degree));
        for d in 0..=degree {
            fill_degree(dim, d, &mut Vec::with_capacity(dim), &mut indices);
        }
        let lookup = indices.iter().enumerate().map(|(k, a)| (a.clone(), k)).collect();
        Ok(Self {
            dim,
            degree,
            indices,
            lookup,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn indices(&self) -> &[Vec<usize>] {
        &self.indices
    }

    pub fn get(&self, k: usize) -> &[usize] {
        &self.indices[k]
    }

    pub fn position(&self, alpha: &[usize]) -> Option<usize> {
        self.lookup.get(alpha).copied()
    }

    /// Total degree `|α_k|`.
    pub fn total(&self, k: usize) -> usize {
        self.indices[k].iter().sum()
    }

    /// Number of members of total degree at most `d`.
    pub fn count_up_to(&self, d: usize) -> usize {
        binomial(self.dim + d.min(self.degree), d.min(self.degree))
    }

    /// Evaluates every basis polynomial at `xi`.
    pub fn eval_all(&self, xi: &[f64]) -> Result<Vec<f64>> {
        check_len("basis point", self.dim, xi.len())?;
        let tables: Vec<Vec<f64>> = xi.iter().map(|&x| hermite_table(self.degree, x)).collect();
        Ok(self
            .indices
            .iter()
            .map(|a| a.iter().zip(&tables).map(|(&ad, t)| t[ad]).product())
            .collect())
    }
}

/// Normalized probabilists' Hermite values `He_n(x)/√n!` for `n = 0..=p`.
pub fn hermite_table(p: usize, x: f64) -> Vec<f64> {
    let mut he = vec![0.0; p + 1];
    he[0] = 1.0;
    if p >= 1 {
        he[1] = x;
    }
    for n in 1..p {
        he[n + 1] = x * he[n] - n as f64 * he[n - 1];
    }
    let mut f = 1.0;
    for (n, v) in he.iter_mut().enumerate() {
        if n > 0 {
            f *= n as f64;
        }
        *v /= f.sqrt();
    }
    he
}

/// `ψ_α(ξ) = ∏_d He_{α_d}(ξ_d)/√(α_d!)`.
pub fn hermite_eval(alpha: &[usize], xi: &[f64]) -> Result<f64> {
    check_len("hermite point", alpha.len(), xi.len())?;
    Ok(alpha
        .iter()
        .zip(xi)
        .map(|(&a, &x)| hermite_table(a, x)[a])
        .product())
}

/// `E[ψ_a ψ_b ψ_c]` for normalized univariate Hermite polynomials.
pub fn hermite_triple_1d(a: usize, b: usize, c: usize) -> f64 {
    let sum = a + b + c;
    if sum % 2 == 1 {
        return 0.0;
    }
    let s = sum / 2;
    if s < a || s < b || s < c {
        return 0.0;
    }
    (factorial(a) * factorial(b) * factorial(c)).sqrt()
        / (factorial(s - a) * factorial(s - b) * factorial(s - c))
}

/// Sparse symmetric `M x M` matrix stored row-wise with both triangles.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingMatrix {
    rows: Vec<Vec<(usize, f64)>>,
}

impl CouplingMatrix {
    fn from_entries(m: usize, entries: &[(usize, usize, f64)]) -> Self {
        let mut rows = vec![Vec::new(); m];
        for &(j, k, v) in entries {
            rows[j].push((k, v));
        }
        for r in &mut rows {
            r.sort_by_key(|e| e.0);
        }
        Self { rows }
    }

    pub fn order(&self) -> usize {
        self.rows.len()
    }

    pub fn row(&self, j: usize) -> &[(usize, f64)] {
        &self.rows[j]
    }

    pub fn get(&self, j: usize, k: usize) -> f64 {
        self.rows[j]
            .binary_search_by_key(&k, |e| e.0)
            .map_or(0.0, |p| self.rows[j][p].1)
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    /// Nonzeros strictly below the diagonal.
    pub fn lower_nnz(&self) -> usize {
        self.rows
            .iter()
            .enumerate()
            .map(|(j, r)| r.iter().filter(|e| e.0 < j).count())
            .sum()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let m = self.order();
        let mut d = DMatrix::zeros(m, m);
        for (j, r) in self.rows.iter().enumerate() {
            for &(k, v) in r {
                d[(j, k)] = v;
            }
        }
        d
    }
}

/// The coupling matrices `H_ℓ` with `h_{ℓ,jk} = E[ψ_ℓ ψ_j ψ_k]`, `ℓ` over the
/// coefficient basis and `j, k` over the solution basis.
#[derive(Debug, Clone)]
pub struct TripleProducts {
    solution: MultiIndexSet,
    coefficient: MultiIndexSet,
    mats: Vec<CouplingMatrix>,
}

impl TripleProducts {
    /// Closed-form construction from the univariate linearization formula.
    pub fn new(dim: usize, p_solution: usize, p_coefficient: usize) -> Result<Self> {
        let solution = MultiIndexSet::total_degree(dim, p_solution)?;
        let coefficient = MultiIndexSet::total_degree(dim, p_coefficient)?;
        let pmax = p_solution.max(p_coefficient);
        let mut t1 = vec![0.0; (pmax + 1).pow(3)];
        let idx = |a: usize, b: usize, c: usize| (a * (pmax + 1) + b) * (pmax + 1) + c;
        for a in 0..=pmax {
            for b in 0..=pmax {
                for c in 0..=pmax {
                    t1[idx(a, b, c)] = hermite_triple_1d(a, b, c);
                }
            }
        }
        let m = solution.len();
        let mats = coefficient
            .indices()
            .iter()
            .map(|al| {
                let mut entries = Vec::new();
                for j in 0..m {
                    let aj = solution.get(j);
                    for k in 0..m {
                        let ak = solution.get(k);
                        let v: f64 = (0..dim).map(|d| t1[idx(al[d], aj[d], ak[d])]).product();
                        if v != 0.0 {
                            entries.push((j, k, v));
                        }
                    }
                }
                CouplingMatrix::from_entries(m, &entries)
            })
            .collect();
        Ok(Self {
            solution,
            coefficient,
            mats,
        })
    }

    /// Construction by tensor Gauss–Hermite quadrature, exact for the
    /// integrand degree `p_coefficient + 2 p_solution`.
    pub fn by_quadrature(dim: usize, p_solution: usize, p_coefficient: usize) -> Result<Self> {
        let solution = MultiIndexSet::total_degree(dim, p_solution)?;
        let coefficient = MultiIndexSet::total_degree(dim, p_coefficient)?;
        let npts = (p_coefficient + 2 * p_solution) / 2 + 1;
        let rule = tensor_rule(npts, dim)?;
        let m = solution.len();
        let mut dense = vec![vec![0.0; m * m]; coefficient.len()];
        for (x, &w) in rule.points().iter().zip(rule.weights()) {
            let ps = solution.eval_all(x)?;
            let pc = coefficient.eval_all(x)?;
            for (l, d) in dense.iter_mut().enumerate() {
                let wl = w * pc[l];
                for j in 0..m {
                    for k in 0..m {
                        d[j * m + k] += wl * ps[j] * ps[k];
                    }
                }
            }
        }
        let mats = dense
            .into_iter()
            .map(|d| {
                let entries: Vec<_> = (0..m * m)
                    .filter(|&i| d[i].abs() > 1e-12)
                    .map(|i| (i / m, i % m, d[i]))
                    .collect();
                CouplingMatrix::from_entries(m, &entries)
            })
            .collect();
        Ok(Self {
            solution,
            coefficient,
            mats,
        })
    }

    pub fn solution_basis(&self) -> &MultiIndexSet {
        &self.solution
    }

    pub fn coefficient_basis(&self) -> &MultiIndexSet {
        &self.coefficient
    }

    /// Solution basis size `M`.
    pub fn m(&self) -> usize {
        self.solution.len()
    }

    /// Coefficient basis size `M_ν`.
    pub fn m_nu(&self) -> usize {
        self.coefficient.len()
    }

    pub fn matrix(&self, l: usize) -> &CouplingMatrix {
        &self.mats[l]
    }

    pub fn matrices(&self) -> &[CouplingMatrix] {
        &self.mats
    }

    /// Number of coupling matrices with coefficient degree at most `lt`.
    pub fn truncation_size(&self, lt: usize) -> usize {
        self.coefficient.count_up_to(lt)
    }

    /// Entries of `H_ℓ`, `ℓ < m_t`, coupling a solution index to one of
    /// strictly lower total degree.
    pub fn accumulated_lower_nnz(&self, m_t: usize) -> usize {
        let deg = |j: usize| self.solution.total(j);
        self.mats[..m_t.min(self.mats.len())]
            .iter()
            .map(|h| {
                (0..h.order())
                    .map(|j| h.row(j).iter().filter(|e| deg(e.0) < deg(j)).count())
                    .sum::<usize>()
            })
            .sum()
    }

    /// `Σ_ℓ nnz(H_ℓ)` over all coefficient indices.
    pub fn total_nnz(&self) -> usize {
        self.mats.iter().map(CouplingMatrix::nnz).sum()
    }

    /// Writes `ℓ j k value` lines for every stored entry.
    pub fn write_coo<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "# l j k h")?;
        for (l, h) in self.mats.iter().enumerate() {
            for j in 0..h.order() {
                for &(k, v) in h.row(j) {
                    writeln!(w, "{l} {j} {k} {v:.17e}")?;
                }
            }
        }
        Ok(())
    }
}

/// Exactness metadata of a quadrature rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum RuleKind {
    Tensor { points_per_dim: usize },
    Smolyak { level: usize },
}

/// Quadrature for the standard Gaussian measure on `R^N`.
#[derive(Debug, Clone)]
pub struct QuadratureRule {
    dim: usize,
    points: Vec<Vec<f64>>,
    weights: Vec<f64>,
    kind: RuleKind,
}

impl QuadratureRule {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn kind(&self) -> RuleKind {
        self.kind
    }

    pub fn integrate<F: FnMut(&[f64]) -> f64>(&self, mut f: F) -> f64 {
        self.points.iter().zip(&self.weights).map(|(x, w)| w * f(x)).sum()
    }
}

/// Gauss–Hermite nodes and weights for the probabilists' measure via the
/// Golub–Welsch eigenproblem; nodes ascending, weights summing to one.
pub fn gauss_hermite_1d(n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if n == 0 {
        return Err(Error::InvalidInput("quadrature needs at least one point".into()));
    }
    let mut j = DMatrix::zeros(n, n);
    for k in 1..n {
        let b = (k as f64).sqrt();
        j[(k, k - 1)] = b;
        j[(k - 1, k)] = b;
    }
    let eig = SymmetricEigen::new(j);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| (eig.eigenvalues[i], eig.eigenvectors[(0, i)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut x: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let mut w: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    for i in 0..n / 2 {
        let xs = 0.5 * (x[n - 1 - i] - x[i]);
        let ws = 0.5 * (w[i] + w[n - 1 - i]);
        x[i] = -xs;
        x[n - 1 - i] = xs;
        w[i] = ws;
        w[n - 1 - i] = ws;
    }
    if n % 2 == 1 {
        x[n / 2] = 0.0;
    }
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    Ok((x, w))
}

fn tensor_from_1d(rules: &[(Vec<f64>, Vec<f64>)]) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut points = vec![Vec::new()];
    let mut weights = vec![1.0];
    for (x, w) in rules {
        let mut np = Vec::with_capacity(points.len() * x.len());
        let mut nw = Vec::with_capacity(points.len() * x.len());
        for (p, pw) in points.iter().zip(&weights) {
            for (xi, wi) in x.iter().zip(w) {
                let mut q = p.clone();
                q.push(*xi);
                np.push(q);
                nw.push(pw * wi);
            }
        }
        points = np;
        weights = nw;
    }
    (points, weights)
}

/// Full tensor Gauss–Hermite rule with `n` points per dimension.
pub fn tensor_rule(n: usize, dim: usize) -> Result<QuadratureRule> {
    if dim == 0 {
        return Err(Error::InvalidInput("stochastic dimension must be at least 1".into()));
    }
    let r = gauss_hermite_1d(n)?;
    let (points, weights) = tensor_from_1d(&vec![r; dim]);
    Ok(QuadratureRule {
        dim,
        points,
        weights,
        kind: RuleKind::Tensor { points_per_dim: n },
    })
}

fn compositions(dim: usize, total: usize, min: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
    if prefix.len() + 1 == dim {
        if total >= min {
            prefix.push(total);
            out.push(prefix.clone());
            prefix.pop();
        }
        return;
    }
    let rest = dim - prefix.len() - 1;
    for a in min..=total.saturating_sub(rest * min) {
        prefix.push(a);
        compositions(dim, total - a, min, prefix, out);
        prefix.pop();
    }
}

/// Smolyak combination of Gauss–Hermite rules with `m(i) = i` points at
/// level `i`; coincident nodes are merged.
pub fn smolyak_rule(level: usize, dim: usize) -> Result<QuadratureRule> {
    if level == 0 || dim == 0 {
        return Err(Error::InvalidInput("smolyak level and dimension must be at least 1".into()));
    }
    let oned: Vec<_> = (1..=level).map(gauss_hermite_1d).collect::<Result<_>>()?;
    let top = level + dim - 1;
    let mut merged: BTreeMap<Vec<i64>, (Vec<f64>, f64)> = BTreeMap::new();
    for s in level.max(dim)..=top {
        let coeff = binomial(dim - 1, top - s) as f64 * if (top - s) % 2 == 0 { 1.0 } else { -1.0 };
        let mut combos = Vec::new();
        compositions(dim, s, 1, &mut Vec::new(), &mut combos);
        for i in combos {
            let rules: Vec<_> = i.iter().map(|&id| oned[id - 1].clone()).collect();
            let (pts, wts) = tensor_from_1d(&rules);
            for (p, w) in pts.into_iter().zip(wts) {
                let key: Vec<i64> = p.iter().map(|v| (v * 1e10).round() as i64).collect();
                merged.entry(key).or_insert_with(|| (p, 0.0)).1 += coeff * w;
            }
        }
    }
    let (points, weights): (Vec<_>, Vec<_>) = merged
        .into_values()
        .filter(|(_, w)| w.abs() > 1e-15)
        .unzip();
    Ok(QuadratureRule {
        dim,
        points,
        weights,
        kind: RuleKind::Smolyak { level },
    })
}
