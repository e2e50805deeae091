//! Fourier pseudo-spectral solver for the periodic cell problem of a
//! separable 2D flow, and the two Eulerian diffusivity formulas.
//!
//! The unknown is stored as nodal values on an `n × n` grid, row index `p`,
//! column index `q`. Advection products are formed on a `3n/2` grid and
//! truncated back (2/3-rule dealiasing). GMRES is right-preconditioned by the
//! inverse of `-D0 Δ` on the mean-zero modes; the constant mode is kept at
//! zero throughout.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::flows::SeparableFlow2D;
use crate::krylov::{gmres, GmresOptions};

/// Uniform `n × n` grid on `[0, L_p) × [0, L_q)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TorusGrid2D {
    n: usize,
    periods: [f64; 2],
}

impl TorusGrid2D {
    pub fn new(n: usize, periods: [f64; 2]) -> Result<Self> {
        if n < 8 || !n.is_power_of_two() {
            return Err(Error::InvalidArgument(format!("grid size must be a power of two >= 8, got {n}")));
        }
        if periods.iter().any(|l| !(*l > 0.0) || !l.is_finite()) {
            return Err(Error::InvalidArgument(format!("periods must be positive, got {periods:?}")));
        }
        Ok(Self { n, periods })
    }

    pub fn for_flow<S: SeparableFlow2D + ?Sized>(flow: &S, n: usize) -> Result<Self> {
        Self::new(n, flow.periods())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn periods(&self) -> [f64; 2] {
        self.periods
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        self.periods[axis] / self.n as f64
    }

    pub fn coord(&self, axis: usize, i: usize) -> f64 {
        i as f64 * self.spacing(axis)
    }

    pub fn len(&self) -> usize {
        self.n * self.n
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Node values of `f(p, q)`, row-major in `p`.
    pub fn sample(&self, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        for i in 0..self.n {
            for j in 0..self.n {
                out.push(f(self.coord(0, i), self.coord(1, j)));
            }
        }
        out
    }
}

/// Square 2D FFT built from row transforms and transposes.
struct Fft2 {
    n: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl Fft2 {
    fn new(planner: &mut FftPlanner<f64>, n: usize) -> Self {
        Self {
            n,
            forward: planner.plan_fft_forward(n),
            inverse: planner.plan_fft_inverse(n),
        }
    }

    fn transpose(&self, a: &mut [Complex64]) {
        let n = self.n;
        for i in 0..n {
            for j in i + 1..n {
                a.swap(i * n + j, j * n + i);
            }
        }
    }

    /// Unnormalised transform in either direction.
    fn run(&self, a: &mut [Complex64], inverse: bool) {
        let plan = if inverse { &self.inverse } else { &self.forward };
        plan.process(a);
        self.transpose(a);
        plan.process(a);
        self.transpose(a);
    }
}

/// Signed integer frequency of FFT index `i` on an `n` grid.
fn freq(i: usize, n: usize) -> i64 {
    if i <= n / 2 {
        i as i64
    } else {
        i as i64 - n as i64
    }
}

/// Discrete operator `u ↦ -D0 Δu + s·(v·∇u)` for a separable flow.
struct CellOperator {
    n: usize,
    npad: usize,
    d0: f64,
    fft: Fft2,
    fft_pad: Fft2,
    /// Angular wavenumbers per index; derivative variants have Nyquist zeroed.
    kp: Vec<f64>,
    kq: Vec<f64>,
    dkp: Vec<f64>,
    dkq: Vec<f64>,
    /// Advecting velocity on the padded grid: `w_p(q)` and `w_q(p)`.
    wp_pad: Vec<f64>,
    wq_pad: Vec<f64>,
}

impl CellOperator {
    fn new<S: SeparableFlow2D + ?Sized>(flow: &S, d0: f64, grid: &TorusGrid2D, sign: f64) -> Self {
        let n = grid.n;
        let npad = 3 * n / 2;
        let mut planner = FftPlanner::new();
        let [lp, lq] = grid.periods;
        let wave = |l: f64, nyquist: bool| -> Vec<f64> {
            (0..n)
                .map(|i| {
                    if !nyquist && i == n / 2 {
                        0.0
                    } else {
                        2.0 * PI * freq(i, n) as f64 / l
                    }
                })
                .collect()
        };
        let hp = lp / npad as f64;
        let hq = lq / npad as f64;
        Self {
            n,
            npad,
            d0,
            fft: Fft2::new(&mut planner, n),
            fft_pad: Fft2::new(&mut planner, npad),
            kp: wave(lp, true),
            kq: wave(lq, true),
            dkp: wave(lp, false),
            dkq: wave(lq, false),
            wp_pad: (0..npad).map(|j| -sign * flow.f(j as f64 * hq)).collect(),
            wq_pad: (0..npad).map(|i| sign * flow.g(i as f64 * hp)).collect(),
        }
    }

    fn spectrum(&self, u: &[f64]) -> Vec<Complex64> {
        let mut a: Vec<Complex64> = u.iter().map(|&x| Complex64::new(x, 0.0)).collect();
        self.fft.run(&mut a, false);
        a
    }

    fn to_nodes(&self, mut a: Vec<Complex64>, out: &mut [f64]) {
        self.fft.run(&mut a, true);
        let scale = 1.0 / (self.n * self.n) as f64;
        for (o, c) in out.iter_mut().zip(&a) {
            *o = c.re * scale;
        }
    }

    /// Spectral gradient of a field given by its spectrum, at the nodes.
    fn gradient(&self, uh: &[Complex64]) -> [Vec<f64>; 2] {
        let n = self.n;
        let mut out = [vec![0.0; n * n], vec![0.0; n * n]];
        for (axis, o) in out.iter_mut().enumerate() {
            let mut g = uh.to_vec();
            for i in 0..n {
                for j in 0..n {
                    let k = if axis == 0 { self.dkp[i] } else { self.dkq[j] };
                    g[i * n + j] *= Complex64::new(0.0, k);
                }
            }
            self.to_nodes(g, o);
        }
        out
    }

    /// Dealiased spectrum of `w·∇u` on the `n` grid.
    fn advection(&self, uh: &[Complex64]) -> Vec<Complex64> {
        let (n, m) = (self.n, self.npad);
        let embed = |i: usize| -> usize { freq(i, n).rem_euclid(m as i64) as usize };
        let mut prod = vec![0.0; m * m];
        for axis in 0..2 {
            let mut g = vec![Complex64::new(0.0, 0.0); m * m];
            for i in 0..n {
                for j in 0..n {
                    let k = if axis == 0 { self.dkp[i] } else { self.dkq[j] };
                    g[embed(i) * m + embed(j)] = uh[i * n + j] * Complex64::new(0.0, k);
                }
            }
            self.fft_pad.run(&mut g, true);
            let scale = 1.0 / (n * n) as f64;
            for i in 0..m {
                for j in 0..m {
                    let w = if axis == 0 { self.wp_pad[j] } else { self.wq_pad[i] };
                    prod[i * m + j] += w * g[i * m + j].re * scale;
                }
            }
        }
        let mut ph: Vec<Complex64> = prod.iter().map(|&x| Complex64::new(x, 0.0)).collect();
        self.fft_pad.run(&mut ph, false);
        let back = (n * n) as f64 / (m * m) as f64;
        let mut out = vec![Complex64::new(0.0, 0.0); n * n];
        for i in 0..n {
            for j in 0..n {
                if i == n / 2 || j == n / 2 {
                    continue;
                }
                out[i * n + j] = ph[embed(i) * m + embed(j)] * back;
            }
        }
        out
    }

    fn apply(&self, u: &[f64], out: &mut [f64]) {
        let n = self.n;
        let uh = self.spectrum(u);
        let mut a = self.advection(&uh);
        for i in 0..n {
            for j in 0..n {
                let k2 = self.kp[i] * self.kp[i] + self.kq[j] * self.kq[j];
                a[i * n + j] += uh[i * n + j] * (self.d0 * k2);
            }
        }
        a[0] = Complex64::new(0.0, 0.0);
        self.to_nodes(a, out);
    }

    /// Inverse of `-D0 Δ` on mean-zero modes; kills the mean.
    fn precondition(&self, u: &[f64], out: &mut [f64]) {
        let n = self.n;
        let mut a = self.spectrum(u);
        for i in 0..n {
            for j in 0..n {
                let k2 = self.kp[i] * self.kp[i] + self.kq[j] * self.kq[j];
                a[i * n + j] = if k2 == 0.0 {
                    Complex64::new(0.0, 0.0)
                } else {
                    a[i * n + j] / (self.d0 * k2)
                };
            }
        }
        self.to_nodes(a, out);
    }
}

fn remove_mean(u: &mut [f64]) -> f64 {
    let mean = u.iter().sum::<f64>() / u.len() as f64;
    u.iter_mut().for_each(|x| *x -= mean);
    mean
}

fn mean(u: &[f64]) -> f64 {
    u.iter().sum::<f64>() / u.len() as f64
}

/// Spectral energy fraction above a quarter of the grid's frequency range,
/// per component. Values above [`TAIL_WARNING`] suggest the grid does not
/// resolve the corrector's boundary layers.
fn tail_fraction(op: &CellOperator, u: &[f64]) -> f64 {
    let n = op.n;
    let uh = op.spectrum(u);
    let cut = (n / 4) as i64;
    let (mut total, mut tail) = (0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            let e = uh[i * n + j].norm_sqr();
            total += e;
            if freq(i, n).abs() > cut || freq(j, n).abs() > cut {
                tail += e;
            }
        }
    }
    if total == 0.0 {
        0.0
    } else {
        tail / total
    }
}

pub const TAIL_WARNING: f64 = 1e-6;

/// Corrector components on a grid, zero-mean gauge.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrectorField {
    pub grid: TorusGrid2D,
    pub d0: f64,
    /// `chi[j]` solves the problem with right-hand side built from `v_j`.
    pub chi: [Vec<f64>; 2],
    /// RMS residual reached by each solve.
    pub residual: [f64; 2],
    pub iterations: [usize; 2],
    /// Largest high-frequency energy fraction over the two components.
    pub tail_fraction: f64,
}

impl CorrectorField {
    pub fn is_resolved(&self) -> bool {
        self.tail_fraction <= TAIL_WARNING
    }

    pub fn warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        if !self.is_resolved() {
            w.push(format!(
                "corrector spectrum tail fraction {:.3e} exceeds {TAIL_WARNING:e}: grid n = {} may not resolve D0 = {}",
                self.tail_fraction, self.grid.n, self.d0
            ));
        }
        w
    }
}

fn velocity_nodes<S: SeparableFlow2D + ?Sized>(flow: &S, grid: &TorusGrid2D) -> [Vec<f64>; 2] {
    [grid.sample(|_, q| -flow.f(q)), grid.sample(|p, _| flow.g(p))]
}

fn solve_with<S: SeparableFlow2D + ?Sized>(
    flow: &S,
    d0: f64,
    grid: &TorusGrid2D,
    tol: f64,
    sign: f64,
) -> Result<CorrectorField> {
    if !(d0 > 0.0) {
        return Err(Error::InvalidArgument(format!("D0 must be positive, got {d0}")));
    }
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!("tolerance must be positive, got {tol}")));
    }
    let op = CellOperator::new(flow, d0, grid, sign);
    let v = velocity_nodes(flow, grid);
    let opts = GmresOptions::rms(tol, grid.len());
    let mut chi = [vec![0.0; grid.len()], vec![0.0; grid.len()]];
    let mut residual = [0.0; 2];
    let mut iterations = [0; 2];
    for j in 0..2 {
        let mut b: Vec<f64> = v[j].iter().map(|x| -x).collect();
        remove_mean(&mut b);
        let rep = gmres(
            "cell problem",
            |u, o| op.apply(u, o),
            |u, o| op.precondition(u, o),
            &b,
            &mut chi[j],
            &opts,
        )?;
        remove_mean(&mut chi[j]);
        residual[j] = rep.residual;
        iterations[j] = rep.iterations;
    }
    let tail_fraction = tail_fraction(&op, &chi[0]).max(tail_fraction(&op, &chi[1]));
    Ok(CorrectorField {
        grid: *grid,
        d0,
        chi,
        residual,
        iterations,
        tail_fraction,
    })
}

/// Solves `-D0 Δχ_j + v·∇χ_j = -v_j` for `j = 1, 2` to RMS residual `tol`.
pub fn solve_cell_problem<S: SeparableFlow2D + ?Sized>(
    flow: &S,
    d0: f64,
    grid: &TorusGrid2D,
    tol: f64,
) -> Result<CorrectorField> {
    solve_with(flow, d0, grid, tol, 1.0)
}

/// Solves `v·∇ψ_j + D0 Δψ_j = v_j`, the corrector in generator form: the
/// limit of the scheme's discrete cell problem as `dt → 0`. Equal to minus
/// the cell-problem corrector of the time-reversed flow.
pub fn generator_corrector<S: SeparableFlow2D + ?Sized>(
    flow: &S,
    d0: f64,
    grid: &TorusGrid2D,
    tol: f64,
) -> Result<CorrectorField> {
    solve_with(flow, d0, grid, tol, -1.0)
}

/// RMS residual of the cell-problem equation for each component of `chi`.
pub fn cell_residual<S: SeparableFlow2D + ?Sized>(flow: &S, chi: &CorrectorField) -> [f64; 2] {
    let op = CellOperator::new(flow, chi.d0, &chi.grid, 1.0);
    let v = velocity_nodes(flow, &chi.grid);
    let mut out = [0.0; 2];
    let mut au = vec![0.0; chi.grid.len()];
    for j in 0..2 {
        op.apply(&chi.chi[j], &mut au);
        let mut b: Vec<f64> = v[j].iter().map(|x| -x).collect();
        remove_mean(&mut b);
        let ss: f64 = au.iter().zip(&b).map(|(a, b)| (a - b) * (a - b)).sum();
        out[j] = (ss / au.len() as f64).sqrt();
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EulerianDiffusivity {
    /// `D0 I - <v ⊗ χ>`.
    pub cov: [[f64; 2]; 2],
    /// `D0 I + D0 <∇χ ⊗ ∇χ>`.
    pub grad: [[f64; 2]; 2],
}

impl EulerianDiffusivity {
    /// Symmetric part of `cov`. The antisymmetric part of `<v ⊗ χ>` is a
    /// genuine feature of the corrector (it is `<(v·∇χ_i) χ_j>`) and does
    /// not contribute to particle spreading.
    pub fn cov_sym(&self) -> [[f64; 2]; 2] {
        let c = self.cov;
        let off = 0.5 * (c[0][1] + c[1][0]);
        [[c[0][0], off], [off, c[1][1]]]
    }

    /// Largest entry of `|cov_sym - grad|`.
    pub fn max_discrepancy(&self) -> f64 {
        let c = self.cov_sym();
        let mut m: f64 = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                m = m.max((c[i][j] - self.grad[i][j]).abs());
            }
        }
        m
    }
}

/// Both Eulerian formulas from a solved corrector; averages are grid means,
/// i.e. over one cell of the flow's declared periods.
pub fn eulerian_diffusivity<S: SeparableFlow2D + ?Sized>(flow: &S, chi: &CorrectorField) -> EulerianDiffusivity {
    let grid = &chi.grid;
    let d0 = chi.d0;
    let v = velocity_nodes(flow, grid);
    let op = CellOperator::new(flow, d0, grid, 1.0);
    let grads: Vec<[Vec<f64>; 2]> = chi.chi.iter().map(|c| op.gradient(&op.spectrum(c))).collect();
    let mut cov = [[0.0; 2]; 2];
    let mut grad = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            let delta = if i == j { d0 } else { 0.0 };
            let vc: Vec<f64> = v[i].iter().zip(&chi.chi[j]).map(|(a, b)| a * b).collect();
            cov[i][j] = delta - mean(&vc);
            let gg: Vec<f64> = (0..grid.len())
                .map(|k| grads[i][0][k] * grads[j][0][k] + grads[i][1][k] * grads[j][1][k])
                .collect();
            grad[i][j] = delta + d0 * mean(&gg);
        }
    }
    EulerianDiffusivity { cov, grad }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub n: usize,
    pub d_cov11: f64,
    pub d_grad11: f64,
    pub tail_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResolutionSweep {
    pub rows: Vec<SweepRow>,
    /// Smallest `n` whose `D_cov[0][0]` agrees with the next resolution's to
    /// 0.1%.
    pub converged_at: Option<usize>,
}

pub fn resolution_sweep<S: SeparableFlow2D + ?Sized>(
    flow: &S,
    d0: f64,
    n_list: &[usize],
    tol: f64,
) -> Result<ResolutionSweep> {
    if n_list.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument(format!("grid sizes must increase: {n_list:?}")));
    }
    let mut rows = Vec::with_capacity(n_list.len());
    for &n in n_list {
        let grid = TorusGrid2D::for_flow(flow, n)?;
        let chi = solve_cell_problem(flow, d0, &grid, tol)?;
        let d = eulerian_diffusivity(flow, &chi);
        rows.push(SweepRow {
            n,
            d_cov11: d.cov[0][0],
            d_grad11: d.grad[0][0],
            tail_fraction: chi.tail_fraction,
        });
    }
    let converged_at = rows
        .windows(2)
        .find(|w| (w[0].d_cov11 - w[1].d_cov11).abs() <= 1e-3 * w[1].d_cov11.abs())
        .map(|w| w[0].n);
    Ok(ResolutionSweep { rows, converged_at })
}
