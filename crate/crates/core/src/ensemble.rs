//! Particle ensembles, checkpoint schedules and displacement moments.
//!
//! Particles are stored unwrapped in `R^d`. Work is split into fixed-size
//! shards of [`SHARD_SIZE`] particles; each shard is advanced and reduced
//! independently and shard results are combined in shard-index order, so
//! results are bit-identical for any worker count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::flows::{Flow, VelocityField, MAX_DIM};
use crate::integrators::{add_noise, euler_drift, splitting_drift, IntegratorConfig, Scheme};
use crate::rng::{NoiseSchedule, RngStream};
use crate::with_field;

/// Particles per shard. Part of the reduction order, so changing it changes
/// results in the last bits.
pub const SHARD_SIZE: usize = 512;

/// Worker pool for ensemble work.
pub struct Workers {
    pool: rayon::ThreadPool,
}

impl Workers {
    pub fn new(threads: usize) -> Result<Self> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads.max(1))
            .build()
            .map_err(|e| Error::InvalidArgument(format!("cannot build worker pool: {e}")))?;
        Ok(Self { pool })
    }

    pub fn available() -> Self {
        let n = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
        Self::new(n).expect("default worker pool")
    }

    pub fn threads(&self) -> usize {
        self.pool.current_num_threads()
    }

    fn install<R: Send>(&self, op: impl FnOnce() -> R + Send) -> R {
        self.pool.install(op)
    }
}

impl std::fmt::Debug for Workers {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Workers({})", self.threads())
    }
}

/// Strictly increasing checkpoint times, stored as step counts.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointSchedule {
    dt: f64,
    steps: Vec<u64>,
}

impl CheckpointSchedule {
    /// Validates explicit times; each must be an integer multiple of `dt`.
    pub fn new(times: &[f64], dt: f64) -> Result<Self> {
        let steps = times
            .iter()
            .map(|&t| steps_for(t, dt))
            .collect::<Result<Vec<_>>>()?;
        Self::from_steps(steps, dt)
    }

    pub fn from_steps(steps: Vec<u64>, dt: f64) -> Result<Self> {
        if steps.is_empty() {
            return Err(Error::InvalidArgument("checkpoint schedule is empty".into()));
        }
        if steps[0] == 0 || steps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument(format!(
                "checkpoint steps must be positive and strictly increasing: {steps:?}"
            )));
        }
        Ok(Self { dt, steps })
    }

    /// `count` log-spaced times between `t_final/1000` and `t_final`,
    /// rounded to whole steps with duplicates dropped.
    pub fn log_spaced(t_final: f64, dt: f64, count: usize) -> Result<Self> {
        let last = steps_for(t_final, dt)?;
        if count <= 1 {
            return Self::from_steps(vec![last], dt);
        }
        let first = (last as f64 / 1000.0).max(1.0);
        let ratio = (last as f64 / first).ln() / (count - 1) as f64;
        let mut steps: Vec<u64> = (0..count)
            .map(|k| ((first.ln() + ratio * k as f64).exp().round() as u64).clamp(1, last))
            .collect();
        *steps.last_mut().unwrap() = last;
        steps.dedup();
        Self::from_steps(steps, dt)
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn steps(&self) -> &[u64] {
        &self.steps
    }

    pub fn times(&self) -> Vec<f64> {
        self.steps.iter().map(|&s| s as f64 * self.dt).collect()
    }

    pub fn final_step(&self) -> u64 {
        *self.steps.last().unwrap()
    }
}

/// Number of steps of size `dt` in `t`; rejects non-multiples.
pub fn steps_for(t: f64, dt: f64) -> Result<u64> {
    if !(t > 0.0) || !(dt > 0.0) {
        return Err(Error::InvalidArgument(format!("need t > 0 and dt > 0 (t = {t}, dt = {dt})")));
    }
    let ratio = t / dt;
    let n = ratio.round();
    if (ratio - n).abs() > 1e-9 * n.max(1.0) {
        return Err(Error::InvalidArgument(format!(
            "t = {t} is not a multiple of dt = {dt} (remainder {:e})",
            t - n * dt
        )));
    }
    Ok(n as u64)
}

/// Streaming displacement moments at one checkpoint time.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentAccumulator {
    pub t: f64,
    pub dim: usize,
    pub count: u64,
    /// Per-axis sums of displacements.
    pub sum_disp: Vec<f64>,
    /// Row-major `dim × dim` sums of displacement products.
    pub sum_prod: Vec<f64>,
    /// Row-major sums of squared displacement products, for standard errors.
    pub sum_prod_sq: Vec<f64>,
}

impl MomentAccumulator {
    pub fn empty(dim: usize, t: f64) -> Self {
        Self {
            t,
            dim,
            count: 0,
            sum_disp: vec![0.0; dim],
            sum_prod: vec![0.0; dim * dim],
            sum_prod_sq: vec![0.0; dim * dim],
        }
    }

    /// Adds one particle's displacement.
    pub fn push(&mut self, disp: &[f64]) {
        let d = self.dim;
        self.count += 1;
        for i in 0..d {
            self.sum_disp[i] += disp[i];
            for j in 0..d {
                let prod = disp[i] * disp[j];
                self.sum_prod[i * d + j] += prod;
                self.sum_prod_sq[i * d + j] += prod * prod;
            }
        }
    }

    pub fn prod(&self, i: usize, j: usize) -> f64 {
        self.sum_prod[i * self.dim + j]
    }

    /// Component-wise sum. Empty accumulators merge with any time.
    pub fn merge(&self, other: &Self) -> Result<Self> {
        if self.dim != other.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: other.dim,
            });
        }
        if self.count > 0 && other.count > 0 && self.t != other.t {
            return Err(Error::CheckpointMismatch(self.t, other.t));
        }
        let t = if self.count > 0 { self.t } else { other.t };
        let add = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x + y).collect::<Vec<_>>();
        Ok(Self {
            t,
            dim: self.dim,
            count: self.count + other.count,
            sum_disp: add(&self.sum_disp, &other.sum_disp),
            sum_prod: add(&self.sum_prod, &other.sum_prod),
            sum_prod_sq: add(&self.sum_prod_sq, &other.sum_prod_sq),
        })
    }
}

/// Particle positions plus the bookkeeping needed to resume their streams.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleState {
    dim: usize,
    master_seed: u64,
    /// Index of the first particle; shards of a larger ensemble keep their
    /// global stream ids.
    first_particle: u64,
    positions: Vec<f64>,
    initial_positions: Vec<f64>,
    step_index: u64,
    dt: Option<f64>,
}

impl EnsembleState {
    /// `n` particles i.i.d. uniform over `init_box`, one init stream each.
    pub fn init(n: usize, init_box: &[(f64, f64)], master_seed: u64) -> Result<Self> {
        let dim = init_box.len();
        if n == 0 {
            return Err(Error::InvalidArgument("ensemble needs at least one particle".into()));
        }
        if dim == 0 || dim > MAX_DIM {
            return Err(Error::InvalidArgument(format!("dimension must be in 1..={MAX_DIM}, got {dim}")));
        }
        if init_box.iter().any(|&(lo, hi)| !(hi >= lo) || !lo.is_finite() || !hi.is_finite()) {
            return Err(Error::InvalidArgument(format!("invalid init box {init_box:?}")));
        }
        let mut positions = Vec::with_capacity(n * dim);
        for i in 0..n {
            let mut s = RngStream::for_init(master_seed, i as u64);
            for &(lo, hi) in init_box {
                positions.push(lo + (hi - lo) * s.next_uniform());
            }
        }
        Ok(Self::from_positions(positions, dim, master_seed, 0))
    }

    /// Ensemble starting at explicit positions; particle `k` of the slice
    /// uses stream `first_particle + k`.
    pub fn from_positions(positions: Vec<f64>, dim: usize, master_seed: u64, first_particle: u64) -> Self {
        assert!(dim > 0 && positions.len().is_multiple_of(dim), "positions must be n × dim");
        Self {
            dim,
            master_seed,
            first_particle,
            initial_positions: positions.clone(),
            positions,
            step_index: 0,
            dt: None,
        }
    }

    pub fn n(&self) -> usize {
        self.positions.len() / self.dim
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    pub fn initial_positions(&self) -> &[f64] {
        &self.initial_positions
    }

    pub fn step_index(&self) -> u64 {
        self.step_index
    }

    /// Simulated time, `step_index · dt`.
    pub fn t(&self) -> f64 {
        self.dt.map_or(0.0, |dt| self.step_index as f64 * dt)
    }

    /// Splits off particles `[at, n)` into a new ensemble that keeps their
    /// stream ids.
    pub fn split_off(&mut self, at: usize) -> Self {
        Self {
            dim: self.dim,
            master_seed: self.master_seed,
            first_particle: self.first_particle + at as u64,
            positions: self.positions.split_off(at * self.dim),
            initial_positions: self.initial_positions.split_off(at * self.dim),
            step_index: self.step_index,
            dt: self.dt,
        }
    }

    /// Advances every particle `n_steps` steps with independent noise.
    pub fn advance(
        &mut self,
        scheme: Scheme,
        flow: &Flow,
        cfg: &IntegratorConfig,
        n_steps: u64,
        workers: &Workers,
    ) -> Result<()> {
        self.advance_with_noise(scheme, flow, cfg, NoiseSchedule::plain(cfg.dt()), n_steps, workers)
    }

    /// As [`advance`](Self::advance), with increments assembled by `noise`.
    pub fn advance_with_noise(
        &mut self,
        scheme: Scheme,
        flow: &Flow,
        cfg: &IntegratorConfig,
        noise: NoiseSchedule,
        n_steps: u64,
        workers: &Workers,
    ) -> Result<()> {
        let field = flow.field();
        if field.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: field.dim(),
            });
        }
        if scheme.is_splitting() && !field.component_independent() {
            return Err(Error::NotComponentIndependent {
                scheme: scheme.name(),
                field: field.name().to_string(),
            });
        }
        match self.dt {
            Some(dt) if dt != cfg.dt() && self.step_index > 0 => {
                return Err(Error::InvalidArgument(format!(
                    "ensemble was advanced with dt = {dt}, cannot continue with dt = {}",
                    cfg.dt()
                )))
            }
            _ => self.dt = Some(cfg.dt()),
        }
        if n_steps == 0 {
            return Ok(());
        }
        let job = ShardJob {
            dim: self.dim,
            seed: self.master_seed,
            dt: cfg.dt(),
            sigma: cfg.sigma(),
            noise,
            step0: self.step_index,
            n_steps,
        };
        let first = self.first_particle;
        let dim = self.dim;
        let results: Vec<Result<()>> = workers.install(|| {
            self.positions
                .par_chunks_mut(SHARD_SIZE * dim)
                .enumerate()
                .map(|(s, chunk)| {
                    let base = first + (s * SHARD_SIZE) as u64;
                    with_field!(flow, f => match scheme {
                        Scheme::Euler => job.run::<_, EulerRule>(f, base, chunk),
                        _ => job.run::<_, SplittingRule>(f, base, chunk),
                    })
                })
                .collect()
        });
        results.into_iter().collect::<Result<()>>()?;
        self.step_index += n_steps;
        Ok(())
    }

    /// Displacement moments at the current time, reduced shard by shard in
    /// index order.
    pub fn record(&self, workers: &Workers) -> MomentAccumulator {
        let d = self.dim;
        let t = self.t();
        let shards: Vec<MomentAccumulator> = workers.install(|| {
            self.positions
                .par_chunks(SHARD_SIZE * d)
                .zip(self.initial_positions.par_chunks(SHARD_SIZE * d))
                .map(|(now, init)| {
                    let mut acc = MomentAccumulator::empty(d, t);
                    let mut disp = [0.0; MAX_DIM];
                    for (x, x0) in now.chunks_exact(d).zip(init.chunks_exact(d)) {
                        for k in 0..d {
                            disp[k] = x[k] - x0[k];
                        }
                        acc.push(&disp[..d]);
                    }
                    acc
                })
                .collect()
        });
        shards
            .iter()
            .fold(MomentAccumulator::empty(d, t), |acc, s| acc.merge(s).expect("same checkpoint"))
    }

    /// Advances through every checkpoint, recording moments at each.
    pub fn run_schedule(
        &mut self,
        scheme: Scheme,
        flow: &Flow,
        cfg: &IntegratorConfig,
        noise: NoiseSchedule,
        schedule: &CheckpointSchedule,
        workers: &Workers,
    ) -> Result<Vec<MomentAccumulator>> {
        let mut out = Vec::with_capacity(schedule.steps().len());
        for &target in schedule.steps() {
            if target < self.step_index {
                return Err(Error::InvalidArgument(format!(
                    "checkpoint step {target} is behind the ensemble (step {})",
                    self.step_index
                )));
            }
            self.advance_with_noise(scheme, flow, cfg, noise, target - self.step_index, workers)?;
            out.push(self.record(workers));
        }
        Ok(out)
    }
}

/// Convenience wrapper: a fresh ensemble driven through `schedule`.
#[allow(clippy::too_many_arguments)]
pub fn simulate(
    flow: &Flow,
    scheme: Scheme,
    cfg: &IntegratorConfig,
    noise: NoiseSchedule,
    n: usize,
    init_box: &[(f64, f64)],
    seed: u64,
    schedule: &CheckpointSchedule,
    workers: &Workers,
) -> Result<Vec<MomentAccumulator>> {
    let mut ens = EnsembleState::init(n, init_box, seed)?;
    ens.run_schedule(scheme, flow, cfg, noise, schedule, workers)
}

/// One level of a [`coupled_ladder`] run: step size and the number of
/// fine increments summed per step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LadderLevel {
    pub dt: f64,
    pub substeps: u64,
}

/// Runs the same particles at several step sizes driven by one fine
/// Brownian path, in a single pass over the fine increments.
///
/// Level `l` sees exactly the increments that
/// `NoiseSchedule::coupled(fine_dt, levels[l].substeps)` would give it, so
/// each level's result is bit-identical to a separate [`simulate`] run with
/// that schedule. Returns one accumulator per level after `fine_steps` fine
/// steps, which must be a multiple of every level's substep count.
#[allow(clippy::too_many_arguments)]
pub fn coupled_ladder(
    flow: &Flow,
    scheme: Scheme,
    sigma: f64,
    fine_dt: f64,
    levels: &[LadderLevel],
    n: usize,
    init_box: &[(f64, f64)],
    seed: u64,
    fine_steps: u64,
    workers: &Workers,
) -> Result<Vec<MomentAccumulator>> {
    let field = flow.field();
    let d = field.dim();
    if init_box.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: init_box.len(),
        });
    }
    if scheme.is_splitting() && !field.component_independent() {
        return Err(Error::NotComponentIndependent {
            scheme: scheme.name(),
            field: field.name().to_string(),
        });
    }
    if levels.is_empty() || levels.iter().any(|l| l.substeps == 0 || !fine_steps.is_multiple_of(l.substeps)) {
        return Err(Error::InvalidArgument(format!(
            "every level needs substeps >= 1 dividing {fine_steps} fine steps: {levels:?}"
        )));
    }
    let ens = EnsembleState::init(n, init_box, seed)?;
    let job = LadderJob {
        dim: d,
        seed,
        sigma,
        scale: fine_dt.sqrt(),
        levels: levels.to_vec(),
        fine_steps,
    };
    let shards: Vec<Result<Vec<MomentAccumulator>>> = workers.install(|| {
        ens.initial_positions
            .par_chunks(SHARD_SIZE * d)
            .enumerate()
            .map(|(s, chunk)| {
                let base = (s * SHARD_SIZE) as u64;
                with_field!(flow, f => match scheme {
                    Scheme::Euler => job.run::<_, EulerRule>(f, base, chunk),
                    _ => job.run::<_, SplittingRule>(f, base, chunk),
                })
            })
            .collect()
    });
    let mut out: Vec<MomentAccumulator> = levels
        .iter()
        .map(|l| MomentAccumulator::empty(d, (fine_steps / l.substeps) as f64 * l.dt))
        .collect();
    for shard in shards {
        let shard = shard?;
        for (acc, s) in out.iter_mut().zip(&shard) {
            *acc = acc.merge(s)?;
        }
    }
    Ok(out)
}

struct LadderJob {
    dim: usize,
    seed: u64,
    sigma: f64,
    scale: f64,
    levels: Vec<LadderLevel>,
    fine_steps: u64,
}

impl LadderJob {
    fn run<F: VelocityField + ?Sized, R: StepRule>(
        &self,
        field: &F,
        first_particle: u64,
        chunk: &[f64],
    ) -> Result<Vec<MomentAccumulator>> {
        let d = self.dim;
        let nl = self.levels.len();
        let mut accs: Vec<MomentAccumulator> = self
            .levels
            .iter()
            .map(|l| MomentAccumulator::empty(d, (self.fine_steps / l.substeps) as f64 * l.dt))
            .collect();
        let mut x = vec![0.0; nl * d];
        let mut w = vec![0.0; nl * d];
        let mut fine = [0.0; MAX_DIM];
        let mut disp = [0.0; MAX_DIM];
        for (k, x0) in chunk.chunks_exact(d).enumerate() {
            let id = first_particle + k as u64;
            let mut stream = RngStream::new(self.seed, id, 0);
            for l in 0..nl {
                x[l * d..(l + 1) * d].copy_from_slice(x0);
            }
            for s in 0..self.fine_steps {
                for v in fine[..d].iter_mut() {
                    *v = self.scale * stream.next_normal();
                }
                for (l, level) in self.levels.iter().enumerate() {
                    let xl = &mut x[l * d..(l + 1) * d];
                    let wl = &mut w[l * d..(l + 1) * d];
                    // same accumulation order as NoiseSchedule::fill
                    let phase = s % level.substeps;
                    if level.substeps == 1 {
                        wl.copy_from_slice(&fine[..d]);
                    } else {
                        if phase == 0 {
                            wl.iter_mut().for_each(|v| *v = 0.0);
                        }
                        for (a, b) in wl.iter_mut().zip(&fine[..d]) {
                            *a += b;
                        }
                    }
                    if phase + 1 == level.substeps {
                        R::drift(field, xl, level.dt);
                        add_noise(xl, self.sigma, wl);
                        if !xl.iter().all(|v| v.is_finite()) {
                            return Err(Error::NonFinite {
                                particle: id as usize,
                                step: (s + 1) / level.substeps,
                            });
                        }
                    }
                }
            }
            for (l, acc) in accs.iter_mut().enumerate() {
                for i in 0..d {
                    disp[i] = x[l * d + i] - x0[i];
                }
                acc.push(&disp[..d]);
            }
        }
        Ok(accs)
    }
}

trait StepRule {
    fn drift<F: VelocityField + ?Sized>(field: &F, x: &mut [f64], dt: f64);

    /// `drift` on each of several independent states.
    #[inline(always)]
    fn drift_lanes<F: VelocityField + ?Sized>(field: &F, xs: &mut [[f64; MAX_DIM]], d: usize, dt: f64) {
        for x in xs.iter_mut() {
            Self::drift(field, &mut x[..d], dt);
        }
    }
}

struct SplittingRule;
struct EulerRule;

impl StepRule for SplittingRule {
    #[inline(always)]
    fn drift<F: VelocityField + ?Sized>(field: &F, x: &mut [f64], dt: f64) {
        splitting_drift(field, x, dt)
    }

    // axis-major so the shears of different particles interleave
    #[inline(always)]
    fn drift_lanes<F: VelocityField + ?Sized>(field: &F, xs: &mut [[f64; MAX_DIM]], d: usize, dt: f64) {
        for i in 0..d {
            for x in xs.iter_mut() {
                let v = field.component(i, &x[..d]);
                x[i] += dt * v;
            }
        }
    }
}

impl StepRule for EulerRule {
    #[inline(always)]
    fn drift<F: VelocityField + ?Sized>(field: &F, x: &mut [f64], dt: f64) {
        euler_drift(field, x, dt)
    }
}

struct ShardJob {
    dim: usize,
    seed: u64,
    dt: f64,
    sigma: f64,
    noise: NoiseSchedule,
    step0: u64,
    n_steps: u64,
}

/// Particles stepped together in one inner loop. They are independent, so
/// interleaving them hides the latency of the drift evaluations; results are
/// the same as stepping them one at a time.
const LANES: usize = 8;

impl ShardJob {
    fn run<F: VelocityField + ?Sized, R: StepRule>(&self, field: &F, first_particle: u64, chunk: &mut [f64]) -> Result<()> {
        let d = self.dim;
        for (g, group) in chunk.chunks_mut(LANES * d).enumerate() {
            let lanes = group.len() / d;
            let id0 = first_particle + (g * LANES) as u64;
            let counter = self.noise.counter_at(self.step0, d);
            let mut streams: [Option<RngStream>; LANES] = Default::default();
            let mut x = [[0.0; MAX_DIM]; LANES];
            let mut w = [[0.0; MAX_DIM]; LANES];
            for l in 0..lanes {
                streams[l] = Some(RngStream::new(self.seed, id0 + l as u64, counter));
                x[l][..d].copy_from_slice(&group[l * d..(l + 1) * d]);
            }
            let mut failed: [Option<u64>; LANES] = [None; LANES];
            for s in 0..self.n_steps {
                for l in 0..lanes {
                    self.noise.fill(streams[l].as_mut().unwrap(), &mut w[l][..d]);
                }
                R::drift_lanes(field, &mut x[..lanes], d, self.dt);
                for l in 0..lanes {
                    add_noise(&mut x[l][..d], self.sigma, &w[l][..d]);
                    if failed[l].is_none() && !x[l][..d].iter().all(|v| v.is_finite()) {
                        failed[l] = Some(self.step0 + s + 1);
                    }
                }
            }
            if let Some((l, step)) = failed.iter().enumerate().find_map(|(l, f)| f.map(|s| (l, s))) {
                return Err(Error::NonFinite {
                    particle: (id0 + l as u64) as usize,
                    step,
                });
            }
            for l in 0..lanes {
                group[l * d..(l + 1) * d].copy_from_slice(&x[l][..d]);
            }
        }
        Ok(())
    }
}
