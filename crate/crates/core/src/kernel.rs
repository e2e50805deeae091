//! The one-step transition kernel of the splitting scheme on a discretised
//! torus, as a dense row-stochastic matrix.
//!
//! Cells are indexed `i·m + j` for the node `(i·h_p, j·h_q)`. Row `s` holds
//! the wrapped Gaussian centred at the deterministic image of node `s`,
//! sampled at every node, times the cell area, then renormalised to sum
//! to one.

use std::f64::consts::PI;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::eulerian::CorrectorField;
use crate::flows::SeparableFlow2D;
use crate::integrators::IntegratorConfig;
use crate::krylov::{gmres, GmresOptions};

/// Largest supported grid (the dense matrix is `m⁴` doubles).
pub const MAX_GRID: usize = 128;

/// Tail mass per row above which the image sum is reported as too short.
pub const TAIL_LIMIT: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct KernelMatrix {
    pub m: usize,
    pub periods: [f64; 2],
    pub dt: f64,
    pub sigma: f64,
    pub image_cutoff: usize,
    /// Row-major `m² × m²`, row = source cell.
    pub entries: Vec<f64>,
}

/// Starts at `ceil(6 σ √dt / L) + 1` with the shorter period and grows until
/// [`image_tail_bound`] is below [`TAIL_LIMIT`].
pub fn default_image_cutoff(sigma: f64, dt: f64, periods: [f64; 2]) -> usize {
    let s = sigma * dt.sqrt();
    let l = periods[0].min(periods[1]);
    let mut cutoff = (6.0 * s / l).ceil() as usize + 1;
    while image_tail_bound(s, cutoff, periods) > TAIL_LIMIT {
        cutoff += 1;
    }
    cutoff
}

/// Upper bound on the mass a wrapped Gaussian of width `s` loses when the
/// image sum stops at `|k| ≤ cutoff` (both axes).
pub fn image_tail_bound(s: f64, cutoff: usize, periods: [f64; 2]) -> f64 {
    periods
        .iter()
        .map(|&l| {
            // mass beyond distance (cutoff + 1/2)·L, Mills-ratio bound
            let x = (cutoff as f64 + 0.5) * l / s;
            (2.0 / PI).sqrt() * (-0.5 * x * x).exp() / x
        })
        .sum()
}

fn wrapped_gaussian_row(centre: f64, s: f64, l: f64, m: usize, cutoff: usize, out: &mut [f64]) {
    let h = l / m as f64;
    let norm = 1.0 / (s * (2.0 * PI).sqrt());
    let c = cutoff as i64;
    for (t, o) in out.iter_mut().enumerate() {
        let mut d = (t as f64 * h - centre).rem_euclid(l);
        if d >= 0.5 * l {
            d -= l;
        }
        let mut acc = 0.0;
        for k in -c..=c {
            let z = (d + k as f64 * l) / s;
            acc += (-0.5 * z * z).exp();
        }
        *o = acc * norm * h;
    }
}

/// Builds the kernel of the splitting scheme for `flow` on an `m × m` grid.
pub fn build_kernel<S: SeparableFlow2D + ?Sized>(
    flow: &S,
    cfg: &IntegratorConfig,
    m: usize,
    image_cutoff: usize,
) -> Result<KernelMatrix> {
    if !(cfg.sigma() > 0.0) {
        return Err(Error::InvalidArgument("kernel needs sigma > 0".into()));
    }
    if image_cutoff < 1 {
        return Err(Error::InvalidArgument("image cutoff must be at least 1".into()));
    }
    if !(2..=MAX_GRID).contains(&m) {
        return Err(Error::InvalidArgument(format!("grid size must be in 2..={MAX_GRID}, got {m}")));
    }
    let periods = flow.periods();
    let dt = cfg.dt();
    let s = cfg.sigma() * dt.sqrt();
    let tail = image_tail_bound(s, image_cutoff, periods);
    if tail > TAIL_LIMIT {
        return Err(Error::InsufficientImages {
            cutoff: image_cutoff,
            tail,
        });
    }
    let [lp, lq] = periods;
    let (hp, hq) = (lp / m as f64, lq / m as f64);
    let mm = m * m;
    let mut entries = vec![0.0; mm * mm];
    entries.par_chunks_mut(mm).enumerate().for_each(|(src, row)| {
        let (p0, q0) = ((src / m) as f64 * hp, (src % m) as f64 * hq);
        let p1 = p0 - flow.f(q0) * dt;
        let q1 = q0 + flow.g(p1) * dt;
        let mut gp = vec![0.0; m];
        let mut gq = vec![0.0; m];
        wrapped_gaussian_row(p1, s, lp, m, image_cutoff, &mut gp);
        wrapped_gaussian_row(q1, s, lq, m, image_cutoff, &mut gq);
        for (i, a) in gp.iter().enumerate() {
            for (j, b) in gq.iter().enumerate() {
                row[i * m + j] = a * b;
            }
        }
        let total: f64 = row.iter().sum();
        row.iter_mut().for_each(|x| *x /= total);
    });
    Ok(KernelMatrix {
        m,
        periods,
        dt,
        sigma: cfg.sigma(),
        image_cutoff,
        entries,
    })
}

impl KernelMatrix {
    pub fn cells(&self) -> usize {
        self.m * self.m
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.cells();
        &self.entries[i * n..(i + 1) * n]
    }

    /// `out = K φ`, the one-step conditional expectation of `φ`.
    pub fn apply(&self, phi: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.row(i).iter().zip(phi).map(|(k, x)| k * x).sum();
        }
    }

    /// `out = ν K`, one step of density transport.
    pub fn transport(&self, nu: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|x| *x = 0.0);
        for (i, &w) in nu.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            for (o, k) in out.iter_mut().zip(self.row(i)) {
                *o += w * k;
            }
        }
    }

    pub fn max_row_sum_error(&self) -> f64 {
        (0..self.cells())
            .map(|i| (self.row(i).iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    pub fn min_entry(&self) -> f64 {
        self.entries.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Node values of `f(p, q)` in cell order.
    pub fn sample(&self, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        let (hp, hq) = (self.periods[0] / self.m as f64, self.periods[1] / self.m as f64);
        (0..self.cells())
            .map(|c| f((c / self.m) as f64 * hp, (c % self.m) as f64 * hq))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InvariantDensity {
    /// Probability per cell; sums to one.
    pub density: Vec<f64>,
    pub iterations: usize,
    /// Total-variation distance between the last two iterates.
    pub last_change: f64,
}

impl InvariantDensity {
    /// `max |m² π_i − 1|`.
    pub fn max_relative_deviation(&self) -> f64 {
        let n = self.density.len() as f64;
        self.density.iter().map(|p| (p * n - 1.0).abs()).fold(0.0, f64::max)
    }
}

/// Power iteration of `ν ↦ ν K` from `start` (a point mass at cell 0 if
/// `None`) until successive iterates are within `tol` in total variation.
pub fn invariant_density(k: &KernelMatrix, tol: f64, start: Option<&[f64]>, max_iter: usize) -> Result<InvariantDensity> {
    let n = k.cells();
    let mut nu = match start {
        Some(s) => {
            if s.len() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    got: s.len(),
                });
            }
            let total: f64 = s.iter().sum();
            if !(total > 0.0) || s.iter().any(|x| *x < 0.0) {
                return Err(Error::InvalidArgument("start density must be non-negative with positive mass".into()));
            }
            s.iter().map(|x| x / total).collect()
        }
        None => {
            let mut v = vec![0.0; n];
            v[0] = 1.0;
            v
        }
    };
    let mut next = vec![0.0; n];
    let mut change = f64::INFINITY;
    for it in 1..=max_iter {
        k.transport(&nu, &mut next);
        change = 0.5 * nu.iter().zip(&next).map(|(a, b)| (a - b).abs()).sum::<f64>();
        std::mem::swap(&mut nu, &mut next);
        if change < tol {
            return Ok(InvariantDensity {
                density: nu,
                iterations: it,
                last_change: change,
            });
        }
    }
    Err(Error::NotConverged {
        what: "invariant density",
        iterations: max_iter,
        achieved: change,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecayEstimate {
    /// `-ln |λ₂|`.
    pub rho: f64,
    /// `|λ₂|`.
    pub modulus: f64,
    pub iterations: usize,
}

/// Second-eigenvalue modulus by power iteration of `ν ↦ ν K` on zero-sum
/// vectors (a subspace `K` maps to itself exactly). The growth rate is
/// averaged over a window so that a complex pair does not stall it.
pub fn decay_rate(k: &KernelMatrix) -> Result<DecayEstimate> {
    const WINDOW: usize = 50;
    const MAX_ITER: usize = 20_000;
    let n = k.cells();
    let mut nu: Vec<f64> = (0..n).map(|i| (1.3 * i as f64 + 0.7).sin() + 0.5 * (0.37 * i as f64).cos()).collect();
    let mean = nu.iter().sum::<f64>() / n as f64;
    nu.iter_mut().for_each(|x| *x -= mean);
    let mut next = vec![0.0; n];
    let mut logs: Vec<f64> = Vec::new();
    let mut prev_est = f64::NAN;
    for it in 1..=MAX_ITER {
        let norm0 = nu.iter().map(|x| x * x).sum::<f64>().sqrt();
        nu.iter_mut().for_each(|x| *x /= norm0);
        k.transport(&nu, &mut next);
        // rounding drift off the zero-sum subspace
        let drift = next.iter().sum::<f64>() / n as f64;
        next.iter_mut().for_each(|x| *x -= drift);
        let norm1 = next.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm1 == 0.0 {
            return Ok(DecayEstimate {
                rho: f64::INFINITY,
                modulus: 0.0,
                iterations: it,
            });
        }
        logs.push(norm1.ln());
        std::mem::swap(&mut nu, &mut next);
        if it % WINDOW == 0 && it >= 2 * WINDOW {
            let est = logs[it - WINDOW..].iter().sum::<f64>() / WINDOW as f64;
            if (est - prev_est).abs() < 1e-12 {
                return Ok(DecayEstimate {
                    rho: -est,
                    modulus: est.exp(),
                    iterations: it,
                });
            }
            prev_est = est;
        }
    }
    let est = logs[MAX_ITER - WINDOW..].iter().sum::<f64>() / WINDOW as f64;
    Ok(DecayEstimate {
        rho: -est,
        modulus: est.exp(),
        iterations: MAX_ITER,
    })
}

/// Measured decay of `‖K^n φ − <K^n φ>_π‖_∞`: the fitted rate over the
/// second half of the run, which stops once the deviation has fallen by
/// `1e-10` or after `max_steps`.
pub fn mode_decay(k: &KernelMatrix, pi: &[f64], phi: &[f64], max_steps: usize) -> f64 {
    let dev = |u: &[f64]| {
        let c: f64 = u.iter().zip(pi).map(|(a, b)| a * b).sum();
        u.iter().map(|x| (x - c).abs()).fold(0.0, f64::max)
    };
    let mut u = phi.to_vec();
    let mut next = vec![0.0; u.len()];
    let d0 = dev(&u);
    let mut logs = vec![d0.ln()];
    for _ in 0..max_steps {
        k.apply(&u, &mut next);
        std::mem::swap(&mut u, &mut next);
        let d = dev(&u);
        logs.push(d.ln());
        if d < 1e-10 * d0 {
            break;
        }
    }
    let half = logs.len() / 2;
    let pts: Vec<(f64, f64)> = logs[half..].iter().enumerate().map(|(i, &y)| ((half + i) as f64, y)).collect();
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / pts.len() as f64;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / pts.len() as f64;
    let sxy: f64 = pts.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = pts.iter().map(|(x, _)| (x - mx) * (x - mx)).sum();
    -sxy / sxx
}

/// Running average `(1/N) Σ_{n<N} (K^n φ)(cell)`.
pub fn cesaro_average(k: &KernelMatrix, phi: &[f64], cell: usize, n: usize) -> f64 {
    let mut u = phi.to_vec();
    let mut next = vec![0.0; u.len()];
    let mut sum = 0.0;
    for _ in 0..n {
        sum += u[cell];
        k.apply(&u, &mut next);
        std::mem::swap(&mut u, &mut next);
    }
    sum / n as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteCellSolution {
    /// Zero grid mean.
    pub fhat: Vec<f64>,
    pub dt: f64,
    /// RMS residual of `(K − I) f̂ − dt·f` after removing the grid mean.
    pub residual: f64,
    pub iterations: usize,
}

fn grid_mean(u: &[f64]) -> f64 {
    u.iter().sum::<f64>() / u.len() as f64
}

/// Solves `(K − I) f̂ = dt·f` on grid-mean-zero fields.
pub fn discrete_cell_solve(k: &KernelMatrix, f: &[f64], tol: f64) -> Result<DiscreteCellSolution> {
    let n = k.cells();
    if f.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: f.len(),
        });
    }
    let scale = f.iter().map(|x| x.abs()).fold(0.0, f64::max);
    let mean = grid_mean(f);
    if mean.abs() > 1e-12 * scale.max(1.0) {
        return Err(Error::NonZeroMean(mean));
    }
    let b: Vec<f64> = f.iter().map(|x| k.dt * (x - mean)).collect();
    let mut fhat = vec![0.0; n];
    let opts = GmresOptions::rms(tol, n);
    let rep = gmres(
        "discrete cell problem",
        |u, out| {
            k.apply(u, out);
            for (o, x) in out.iter_mut().zip(u) {
                *o -= x;
            }
            let c = grid_mean(out);
            out.iter_mut().for_each(|o| *o -= c);
        },
        |u, out| {
            out.copy_from_slice(u);
            let c = grid_mean(out);
            out.iter_mut().for_each(|o| *o -= c);
        },
        &b,
        &mut fhat,
        &opts,
    )?;
    let c = grid_mean(&fhat);
    fhat.iter_mut().for_each(|x| *x -= c);
    Ok(DiscreteCellSolution {
        fhat,
        dt: k.dt,
        residual: rep.residual,
        iterations: rep.iterations,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LemmaRow {
    pub dt: f64,
    /// `‖f̂(dt) − ψ₁‖_∞` on the kernel grid.
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LemmaRateTable {
    pub rows: Vec<LemmaRow>,
    /// `error(dt_k) / error(dt_{k+1})`.
    pub ratios: Vec<f64>,
}

/// Compares the discrete corrector `f̂` for `f = v_p` with the generator-form
/// corrector `oracle.chi[0]` (see [`crate::eulerian::generator_corrector`])
/// at each step size. The oracle grid must be a multiple of `m` on the same
/// periods, at `D0 = σ²/2`.
pub fn lemma_rate_check<S: SeparableFlow2D + ?Sized>(
    flow: &S,
    sigma: f64,
    dt_list: &[f64],
    m: usize,
    oracle: &CorrectorField,
    tol: f64,
) -> Result<LemmaRateTable> {
    let on = oracle.grid.n();
    if !on.is_multiple_of(m) || oracle.grid.periods() != flow.periods() {
        return Err(Error::InvalidArgument(format!(
            "oracle grid {on} on {:?} is not compatible with kernel grid {m} on {:?}",
            oracle.grid.periods(),
            flow.periods()
        )));
    }
    let d0 = 0.5 * sigma * sigma;
    if (oracle.d0 - d0).abs() > 1e-12 * d0 {
        return Err(Error::InvalidArgument(format!("oracle D0 {} differs from sigma²/2 = {d0}", oracle.d0)));
    }
    let stride = on / m;
    let mut target: Vec<f64> = (0..m * m)
        .map(|c| oracle.chi[0][(c / m) * stride * on + (c % m) * stride])
        .collect();
    let c = grid_mean(&target);
    target.iter_mut().for_each(|x| *x -= c);

    let mut rows = Vec::with_capacity(dt_list.len());
    for &dt in dt_list {
        let cfg = IntegratorConfig::new(dt, sigma)?;
        let k = build_kernel(flow, &cfg, m, default_image_cutoff(sigma, dt, flow.periods()))?;
        let mut f = k.sample(|_, q| -flow.f(q));
        let mean = grid_mean(&f);
        f.iter_mut().for_each(|x| *x -= mean);
        let sol = discrete_cell_solve(&k, &f, tol)?;
        let error = sol.fhat.iter().zip(&target).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        rows.push(LemmaRow { dt, error });
    }
    let ratios = rows.windows(2).map(|w| w[0].error / w[1].error).collect();
    Ok(LemmaRateTable { rows, ratios })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flows::{CellularFlow, ZeroFlow};

    fn diffusion(m: usize, sigma: f64, dt: f64) -> KernelMatrix {
        let cfg = IntegratorConfig::new(dt, sigma).unwrap();
        let z = ZeroFlow { dim: 2 };
        build_kernel(&z, &cfg, m, default_image_cutoff(sigma, dt, [1.0, 1.0])).unwrap()
    }

    #[test]
    fn pure_diffusion_is_circulant() {
        let k = diffusion(16, 0.5, 0.1);
        assert!(k.max_row_sum_error() < 1e-12);
        let m = k.m;
        // row of cell (a, b) is row 0 shifted by (a, b)
        for src in [1, 17, 100] {
            let (a, b) = (src / m, src % m);
            for t in 0..m * m {
                let (i, j) = (t / m, t % m);
                let base = ((i + m - a) % m) * m + (j + m - b) % m;
                assert!((k.row(src)[t] - k.row(0)[base]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn pure_diffusion_spectrum() {
        let (sigma, dt) = (0.5, 0.1);
        let k = diffusion(32, sigma, dt);
        let want = -2.0 * PI * PI * sigma * sigma * dt;
        let est = decay_rate(&k).unwrap();
        assert!((est.modulus - want.exp()).abs() < 1e-6, "{est:?}");
        let half = diffusion(32, sigma / 2f64.sqrt(), dt);
        let r = decay_rate(&half).unwrap().rho / est.rho;
        assert!((r - 0.5).abs() < 1e-6, "{r}");
        let inv = invariant_density(&k, 1e-14, None, 10_000).unwrap();
        assert!(inv.max_relative_deviation() < 1e-10);
    }

    #[test]
    fn insufficient_images_reported() {
        let cfg = IntegratorConfig::new(1.0, 3.0).unwrap();
        let err = build_kernel(&ZeroFlow { dim: 2 }, &cfg, 8, 1).unwrap_err();
        assert!(matches!(err, Error::InsufficientImages { cutoff: 1, .. }), "{err}");
        assert!(build_kernel(&ZeroFlow { dim: 2 }, &cfg, 8, 0).is_err());
    }

    #[test]
    fn positive_entries_above_floor() {
        // σ√dt = 2 cells of width 1/16
        let k = diffusion(16, 0.125 / 0.1f64.sqrt(), 0.1);
        assert!(k.min_entry() > 0.0);
    }

    #[test]
    fn cellular_kernel_properties() {
        let cfg = IntegratorConfig::new(0.1, 0.5).unwrap();
        let k = build_kernel(&CellularFlow, &cfg, 32, default_image_cutoff(0.5, 0.1, [1.0, 0.5])).unwrap();
        assert!(k.max_row_sum_error() < 1e-12);
        let a = invariant_density(&k, 1e-13, None, 10_000).unwrap();
        let start: Vec<f64> = (0..k.cells()).map(|i| 1.0 + (i as f64).sin().abs()).collect();
        let b = invariant_density(&k, 1e-13, Some(&start), 10_000).unwrap();
        let tv: f64 = 0.5 * a.density.iter().zip(&b.density).map(|(x, y)| (x - y).abs()).sum::<f64>();
        assert!(tv < 1e-11, "{tv}");
        assert!(decay_rate(&k).unwrap().rho > 0.0);
        // Cesàro means approach the invariant mean
        let phi = k.sample(|p, q| (2.0 * PI * p).sin() + (4.0 * PI * q).cos());
        let target: f64 = phi.iter().zip(&a.density).map(|(x, w)| x * w).sum();
        let avg = cesaro_average(&k, &phi, 5, 2000);
        assert!((avg - target).abs() < 5e-3, "{avg} vs {target}");
    }

    #[test]
    fn discrete_cell_single_mode() {
        let (sigma, dt) = (0.5, 0.05);
        let k = diffusion(32, sigma, dt);
        let f = k.sample(|_, q| (2.0 * PI * q).sin());
        let sol = discrete_cell_solve(&k, &f, 1e-13).unwrap();
        let lam = (-2.0 * PI * PI * sigma * sigma * dt).exp();
        for (a, b) in sol.fhat.iter().zip(&f) {
            assert!((a - dt * b / (lam - 1.0)).abs() < 1e-10);
        }
        let zero = discrete_cell_solve(&k, &vec![0.0; k.cells()], 1e-13).unwrap();
        assert!(zero.fhat.iter().all(|x| *x == 0.0));
        let shifted: Vec<f64> = f.iter().map(|x| x + 0.1).collect();
        assert!(matches!(discrete_cell_solve(&k, &shifted, 1e-13), Err(Error::NonZeroMean(_))));
    }
}
