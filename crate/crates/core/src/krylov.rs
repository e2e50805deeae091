//! Restarted GMRES with right preconditioning, for the matrix-free solves
//! in the Eulerian oracle and the kernel lab.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GmresOptions {
    /// Krylov dimension between restarts.
    pub restart: usize,
    /// Cap on total inner iterations.
    pub max_iter: usize,
    /// Target for `‖b − A x‖₂ · norm_scale`.
    pub tol: f64,
    /// Multiplies every Euclidean norm; `1/√n` gives the RMS norm.
    pub norm_scale: f64,
}

impl GmresOptions {
    pub fn rms(tol: f64, n: usize) -> Self {
        Self {
            restart: 60,
            max_iter: 5000,
            tol,
            norm_scale: 1.0 / (n as f64).sqrt(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GmresReport {
    pub iterations: usize,
    /// Scaled true residual `‖b − A x‖ · norm_scale` at exit.
    pub residual: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Solves `A x = b` starting from the contents of `x`. `apply(u, out)` sets
/// `out = A u`; `precond(u, out)` sets `out = M⁻¹ u`. The iteration runs on
/// `A M⁻¹` and the returned residual is recomputed from scratch.
pub fn gmres(
    what: &'static str,
    mut apply: impl FnMut(&[f64], &mut [f64]),
    mut precond: impl FnMut(&[f64], &mut [f64]),
    b: &[f64],
    x: &mut [f64],
    opts: &GmresOptions,
) -> Result<GmresReport> {
    let n = b.len();
    assert_eq!(x.len(), n, "solution and right-hand side differ in length");
    let m = opts.restart.max(1);
    let mut r = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    let mut z = vec![0.0; n];
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(m + 1);
    let mut h = vec![vec![0.0; m]; m + 1];
    let (mut cs, mut sn, mut g) = (vec![0.0; m], vec![0.0; m], vec![0.0; m + 1]);
    let mut total = 0;

    let residual = |apply: &mut dyn FnMut(&[f64], &mut [f64]), x: &[f64], r: &mut [f64]| {
        apply(x, r);
        for (ri, bi) in r.iter_mut().zip(b) {
            *ri = bi - *ri;
        }
        norm(r)
    };

    loop {
        let beta = residual(&mut apply, x, &mut r);
        if beta * opts.norm_scale <= opts.tol {
            return Ok(GmresReport {
                iterations: total,
                residual: beta * opts.norm_scale,
            });
        }
        if total >= opts.max_iter {
            return Err(Error::NotConverged {
                what,
                iterations: total,
                achieved: beta * opts.norm_scale,
            });
        }
        basis.clear();
        basis.push(r.iter().map(|v| v / beta).collect());
        g.iter_mut().for_each(|v| *v = 0.0);
        g[0] = beta;
        let mut k = 0;
        while k < m && total < opts.max_iter {
            precond(&basis[k], &mut z);
            apply(&z, &mut tmp);
            // modified Gram-Schmidt, twice for stability
            for hj in h.iter_mut() {
                hj[k] = 0.0;
            }
            for _ in 0..2 {
                for (j, vj) in basis.iter().enumerate() {
                    let c = dot(&tmp, vj);
                    h[j][k] += c;
                    for (t, v) in tmp.iter_mut().zip(vj) {
                        *t -= c * v;
                    }
                }
            }
            let hn = norm(&tmp);
            h[k + 1][k] = hn;
            for j in 0..k {
                let t = cs[j] * h[j][k] + sn[j] * h[j + 1][k];
                h[j + 1][k] = -sn[j] * h[j][k] + cs[j] * h[j + 1][k];
                h[j][k] = t;
            }
            let rho = h[k][k].hypot(h[k + 1][k]);
            cs[k] = h[k][k] / rho;
            sn[k] = h[k + 1][k] / rho;
            h[k][k] = rho;
            h[k + 1][k] = 0.0;
            g[k + 1] = -sn[k] * g[k];
            g[k] *= cs[k];
            total += 1;
            k += 1;
            if g[k].abs() * opts.norm_scale <= opts.tol * 0.5 || hn == 0.0 {
                break;
            }
            basis.push(tmp.iter().map(|v| v / hn).collect());
        }
        // back-substitute for the Krylov coefficients, then x += M⁻¹ V y
        let mut y = vec![0.0; k];
        for i in (0..k).rev() {
            let s: f64 = (i + 1..k).map(|j| h[i][j] * y[j]).sum();
            y[i] = (g[i] - s) / h[i][i];
        }
        tmp.iter_mut().for_each(|v| *v = 0.0);
        for (yi, vi) in y.iter().zip(&basis) {
            for (t, v) in tmp.iter_mut().zip(vi) {
                *t += yi * v;
            }
        }
        precond(&tmp, &mut z);
        for (xi, zi) in x.iter_mut().zip(&z) {
            *xi += zi;
        }
    }
}
