//! Right-preconditioned flexible GMRES.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::galerkin::{norm2, KronSumOperator};
use crate::sparse::CsrMatrix;

/// A square linear map.
pub trait LinearOperator {
    fn dim(&self) -> usize;
    /// `y = A x`.
    fn apply(&self, x: &[f64], y: &mut [f64]);
}

/// An approximate inverse, possibly varying between applications.
pub trait Preconditioner {
    /// `z ≈ A⁻¹ r`.
    fn apply(&self, r: &[f64], z: &mut [f64]) -> Result<()>;
}

impl LinearOperator for CsrMatrix {
    fn dim(&self) -> usize {
        self.nrows()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        self.matvec(x, y);
    }
}

impl LinearOperator for KronSumOperator {
    fn dim(&self) -> usize {
        self.layout().ngdof()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        self.matvec(x, y);
    }
}

/// Wraps a closure as a linear operator.
pub struct FnOperator<F> {
    n: usize,
    f: F,
}

impl<F: Fn(&[f64], &mut [f64])> FnOperator<F> {
    pub fn new(n: usize, f: F) -> Self {
        Self { n, f }
    }
}

impl<F: Fn(&[f64], &mut [f64])> LinearOperator for FnOperator<F> {
    fn dim(&self) -> usize {
        self.n
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        (self.f)(x, y)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityPreconditioner;

impl Preconditioner for IdentityPreconditioner {
    fn apply(&self, r: &[f64], z: &mut [f64]) -> Result<()> {
        z.copy_from_slice(r);
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FgmresConfig {
    pub tol: f64,
    pub max_iter: usize,
    /// Krylov subspace length before restarting; 0 means never restart.
    #[serde(default)]
    pub restart: usize,
}

impl Default for FgmresConfig {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 500,
            restart: 0,
        }
    }
}

impl FgmresConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) || self.max_iter == 0 {
            return Err(Error::Config(format!("invalid FGMRES settings {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct FgmresResult {
    pub x: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Relative residual estimates `‖r_k‖ / ‖b‖`, starting with the initial one.
    pub history: Vec<f64>,
    /// `‖b - A x‖ / ‖b‖` recomputed at exit.
    pub true_residual: f64,
}

/// Solves `A x = b` from the initial guess `x0` (zero if `None`).
pub fn fgmres<A, P>(a: &A, m: &P, b: &[f64], x0: Option<&[f64]>, cfg: &FgmresConfig) -> Result<FgmresResult>
where
    A: LinearOperator + ?Sized,
    P: Preconditioner + ?Sized,
{
    cfg.validate()?;
    let n = a.dim();
    check_len("fgmres rhs", n, b.len())?;
    let mut x = match x0 {
        Some(v) => {
            check_len("fgmres initial guess", n, v.len())?;
            v.to_vec()
        }
        None => vec![0.0; n],
    };
    let bnorm = norm2(b);
    if bnorm == 0.0 {
        return Ok(FgmresResult {
            x: vec![0.0; n],
            iterations: 0,
            converged: true,
            history: vec![0.0],
            true_residual: 0.0,
        });
    }
    let target = cfg.tol * bnorm;
    let restart = if cfg.restart == 0 { cfg.max_iter } else { cfg.restart };
    let mut r = vec![0.0; n];
    let residual = |x: &[f64], r: &mut [f64]| {
        a.apply(x, r);
        r.iter_mut().zip(b).for_each(|(ri, bi)| *ri = bi - *ri);
        norm2(r)
    };
    let mut beta = residual(&x, &mut r);
    let mut history = vec![beta / bnorm];
    let mut iterations = 0;
    let mut w = vec![0.0; n];
    while beta > target && iterations < cfg.max_iter {
        let kmax = restart.min(cfg.max_iter - iterations);
        let mut vs: Vec<Vec<f64>> = Vec::with_capacity(kmax + 1);
        let mut zs: Vec<Vec<f64>> = Vec::with_capacity(kmax);
        let mut hcols: Vec<Vec<f64>> = Vec::with_capacity(kmax);
        let mut cs: Vec<f64> = Vec::with_capacity(kmax);
        let mut sn: Vec<f64> = Vec::with_capacity(kmax);
        let mut g = vec![beta];
        vs.push(r.iter().map(|v| v / beta).collect());
        let mut est = beta;
        for j in 0..kmax {
            let mut z = vec![0.0; n];
            m.apply(&vs[j], &mut z)?;
            a.apply(&z, &mut w);
            let mut h = vec![0.0; j + 2];
            for (i, v) in vs.iter().enumerate() {
                let d: f64 = w.iter().zip(v).map(|(a, b)| a * b).sum();
                h[i] = d;
                w.iter_mut().zip(v).for_each(|(wi, vi)| *wi -= d * vi);
            }
            let hn = norm2(&w);
            h[j + 1] = hn;
            for i in 0..j {
                let t = cs[i] * h[i] + sn[i] * h[i + 1];
                h[i + 1] = -sn[i] * h[i] + cs[i] * h[i + 1];
                h[i] = t;
            }
            let rho = h[j].hypot(h[j + 1]);
            let (c, s) = if rho == 0.0 { (1.0, 0.0) } else { (h[j] / rho, h[j + 1] / rho) };
            h[j] = rho;
            h[j + 1] = 0.0;
            cs.push(c);
            sn.push(s);
            g.push(-s * g[j]);
            g[j] *= c;
            est = g[j + 1].abs();
            hcols.push(h);
            zs.push(z);
            iterations += 1;
            history.push(est / bnorm);
            if est <= target || hn == 0.0 || !est.is_finite() {
                break;
            }
            vs.push(w.iter().map(|v| v / hn).collect());
        }
        let k = hcols.len();
        let mut y = vec![0.0; k];
        for i in (0..k).rev() {
            let s: f64 = ((i + 1)..k).map(|l| hcols[l][i] * y[l]).sum();
            y[i] = (g[i] - s) / hcols[i][i];
        }
        for (zi, yi) in zs.iter().zip(&y) {
            if yi.is_finite() {
                x.iter_mut().zip(zi).for_each(|(xv, zv)| *xv += yi * zv);
            }
        }
        beta = residual(&x, &mut r);
        if !beta.is_finite() {
            return Err(Error::Solver("FGMRES produced a non-finite residual".into()));
        }
        if est <= target && beta > target {
            log::debug!(
                "FGMRES estimate {:.3e} below target but true residual {:.3e}; restarting",
                est / bnorm,
                beta / bnorm
            );
        }
        if k == 0 {
            break;
        }
    }
    Ok(FgmresResult {
        x,
        iterations,
        converged: beta <= target,
        history,
        true_residual: beta / bnorm,
    })
}
