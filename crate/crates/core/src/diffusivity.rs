//! Effective-diffusivity estimates from displacement moments, step-size
//! convergence studies and enhancement scans over the molecular
//! diffusivity.

use std::time::Instant;

use crate::ensemble::{
    coupled_ladder, simulate, steps_for, CheckpointSchedule, EnsembleState, LadderLevel, MomentAccumulator, Workers,
};
use crate::error::{Error, Result};
use crate::flows::Flow;
use crate::integrators::{IntegratorConfig, Scheme};
use crate::rng::NoiseSchedule;

/// `D_ij ≈ <Δx_i Δx_j> / 2t` with per-entry standard errors.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusivityEstimate {
    pub dim: usize,
    pub t: f64,
    pub n: u64,
    /// Row-major `dim × dim`.
    pub matrix: Vec<f64>,
    pub stderr: Vec<f64>,
}

impl DiffusivityEstimate {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.matrix[i * self.dim + j]
    }

    pub fn stderr_of(&self, i: usize, j: usize) -> f64 {
        self.stderr[i * self.dim + j]
    }

    pub fn d11(&self) -> f64 {
        self.get(0, 0)
    }

    pub fn stderr11(&self) -> f64 {
        self.stderr_of(0, 0)
    }
}

pub fn estimate_d(acc: &MomentAccumulator) -> Result<DiffusivityEstimate> {
    if !(acc.t > 0.0) {
        return Err(Error::InvalidArgument(format!("need t > 0 to estimate D, got {}", acc.t)));
    }
    if acc.count < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 particles, got {}", acc.count)));
    }
    let n = acc.count as f64;
    let two_t = 2.0 * acc.t;
    let matrix = acc.sum_prod.iter().map(|s| s / n / two_t).collect();
    let stderr = acc
        .sum_prod
        .iter()
        .zip(&acc.sum_prod_sq)
        .map(|(s, sq)| {
            let var = ((sq - s * s / n) / (n - 1.0)).max(0.0);
            (var / n).sqrt() / two_t
        })
        .collect();
    Ok(DiffusivityEstimate {
        dim: acc.dim,
        t: acc.t,
        n: acc.count,
        matrix,
        stderr,
    })
}

/// Least-squares line through `(ln x, ln y)`; returns `(slope, intercept)`.
pub fn loglog_fit(points: &[(f64, f64)]) -> Result<(f64, f64)> {
    if points.len() < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 points, got {}", points.len())));
    }
    if let Some(p) = points.iter().find(|(x, y)| !(*x > 0.0 && *y > 0.0)) {
        return Err(Error::InvalidArgument(format!("log-log fit needs positive values, got {p:?}")));
    }
    let m = points.len() as f64;
    let lx: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = lx.iter().sum::<f64>() / m;
    let my = ly.iter().sum::<f64>() / m;
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidArgument("log-log fit needs at least two distinct x".into()));
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    Ok((slope, my - slope * mx))
}

/// True when the last four estimates of `D_11` lie within one pooled
/// standard error of their mean.
pub fn mixing_detected(series: &[DiffusivityEstimate]) -> bool {
    if series.len() < 4 {
        return false;
    }
    let tail = &series[series.len() - 4..];
    let mean = tail.iter().map(|e| e.d11()).sum::<f64>() / 4.0;
    let pooled = (tail.iter().map(|e| e.stderr11().powi(2)).sum::<f64>() / 4.0).sqrt();
    tail.iter().all(|e| (e.d11() - mean).abs() <= pooled)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceRow {
    pub dt: f64,
    pub d11: f64,
    pub stderr11: f64,
    pub abs_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceTable {
    /// Strictly decreasing in `dt`.
    pub rows: Vec<ConvergenceRow>,
    pub dt_ref: f64,
    pub reference: DiffusivityEstimate,
    /// `None` when some error is not positive, so no log-log fit exists.
    pub slope: Option<f64>,
    pub intercept: Option<f64>,
}

/// Error of `D_11` against a self-computed fine reference, over a list of
/// step sizes.
#[derive(Debug, Clone)]
pub struct ConvergenceStudy {
    pub flow: Flow,
    pub scheme: Scheme,
    pub dt_list: Vec<f64>,
    pub dt_ref: f64,
    pub sigma: f64,
    pub t_final: f64,
    pub n: usize,
    pub seed: u64,
    /// Drive every run with sums of the reference run's increments.
    pub couple: bool,
    pub init_box: Option<Vec<(f64, f64)>>,
}

impl ConvergenceStudy {
    /// A quarter of the smallest step.
    pub fn default_dt_ref(dt_list: &[f64]) -> f64 {
        dt_list.iter().copied().fold(f64::INFINITY, f64::min) / 4.0
    }

    fn sorted_dts(&self) -> Result<Vec<f64>> {
        let mut dts = self.dt_list.clone();
        if dts.is_empty() {
            return Err(Error::InvalidArgument("dt list is empty".into()));
        }
        dts.sort_by(|a, b| b.total_cmp(a));
        if dts.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidArgument(format!("dt list has duplicates: {:?}", self.dt_list)));
        }
        let smallest = *dts.last().unwrap();
        if !(self.dt_ref > 0.0 && self.dt_ref < smallest) {
            return Err(Error::InvalidArgument(format!(
                "reference dt {} must be positive and below every tested dt (min {smallest})",
                self.dt_ref
            )));
        }
        Ok(dts)
    }

    pub fn run(&self, workers: &Workers) -> Result<ConvergenceTable> {
        let dts = self.sorted_dts()?;
        for &dt in &dts {
            steps_for(self.t_final, dt)?;
        }
        let fine_steps = steps_for(self.t_final, self.dt_ref)?;
        let init_box = self.init_box.clone().unwrap_or_else(|| self.flow.default_init_box());

        let estimates: Vec<DiffusivityEstimate> = if self.couple {
            let mut levels = vec![LadderLevel {
                dt: self.dt_ref,
                substeps: 1,
            }];
            for &dt in &dts {
                levels.push(LadderLevel {
                    dt,
                    substeps: substeps_for(dt, self.dt_ref)?,
                });
            }
            let accs = coupled_ladder(
                &self.flow,
                self.scheme,
                self.sigma,
                self.dt_ref,
                &levels,
                self.n,
                &init_box,
                self.seed,
                fine_steps,
                workers,
            )?;
            accs.iter().map(estimate_d).collect::<Result<_>>()?
        } else {
            std::iter::once(self.dt_ref)
                .chain(dts.iter().copied())
                .map(|dt| {
                    let cfg = IntegratorConfig::new(dt, self.sigma)?;
                    let sched = CheckpointSchedule::from_steps(vec![steps_for(self.t_final, dt)?], dt)?;
                    let accs = simulate(
                        &self.flow,
                        self.scheme,
                        &cfg,
                        NoiseSchedule::plain(dt),
                        self.n,
                        &init_box,
                        self.seed,
                        &sched,
                        workers,
                    )?;
                    estimate_d(&accs[0])
                })
                .collect::<Result<_>>()?
        };

        let reference = estimates[0].clone();
        let rows: Vec<ConvergenceRow> = dts
            .iter()
            .zip(&estimates[1..])
            .map(|(&dt, e)| ConvergenceRow {
                dt,
                d11: e.d11(),
                stderr11: e.stderr11(),
                abs_error: (e.d11() - reference.d11()).abs(),
            })
            .collect();
        let pts: Vec<(f64, f64)> = rows.iter().map(|r| (r.dt, r.abs_error)).collect();
        let fit = if rows.len() >= 2 { loglog_fit(&pts).ok() } else { None };
        Ok(ConvergenceTable {
            rows,
            dt_ref: self.dt_ref,
            reference,
            slope: fit.map(|f| f.0),
            intercept: fit.map(|f| f.1),
        })
    }
}

/// `dt / dt_ref` as an integer, or an error if it is not one.
pub fn substeps_for(dt: f64, dt_ref: f64) -> Result<u64> {
    let r = dt / dt_ref;
    let k = r.round();
    if k < 1.0 || (r - k).abs() > 1e-9 * k {
        return Err(Error::InvalidArgument(format!(
            "coupling needs dt_ref = {dt_ref} to divide dt = {dt} (ratio {r})"
        )));
    }
    Ok(k as u64)
}

/// Final time as a function of `D0`: `clamp(factor / D0, min, max)`,
/// rounded to whole steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TRule {
    pub factor: f64,
    pub min: f64,
    pub max: f64,
}

impl Default for TRule {
    fn default() -> Self {
        Self {
            factor: 10.0,
            min: 1e3,
            max: f64::INFINITY,
        }
    }
}

impl TRule {
    pub fn steps(&self, d0: f64, dt: f64) -> u64 {
        let t = (self.factor / d0).clamp(self.min, self.max);
        ((t / dt).round() as u64).max(1)
    }

    pub fn t_final(&self, d0: f64, dt: f64) -> f64 {
        self.steps(d0, dt) as f64 * dt
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnhancementRow {
    pub d0: f64,
    pub estimate: DiffusivityEstimate,
    pub t_final: f64,
    /// `D_11` at every checkpoint, for plateau inspection.
    pub series: Vec<DiffusivityEstimate>,
    pub mixed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnhancementTable {
    pub rows: Vec<EnhancementRow>,
    pub slope: Option<f64>,
    pub intercept: Option<f64>,
    /// Set when the time budget stopped the scan early; `rows` holds the
    /// completed legs.
    pub exhausted: bool,
}

#[derive(Debug, Clone)]
pub struct EnhancementScan {
    pub flow: Flow,
    pub scheme: Scheme,
    pub d0_list: Vec<f64>,
    pub dt: f64,
    pub t_rule: TRule,
    pub n: usize,
    pub seed: u64,
    /// Log-spaced checkpoints per leg (at least 4 for mixing detection).
    pub checkpoints: usize,
    pub budget_seconds: Option<f64>,
    pub init_box: Option<Vec<(f64, f64)>>,
}

impl EnhancementScan {
    pub fn run(&self, workers: &Workers) -> Result<EnhancementTable> {
        if let Some(bad) = self.d0_list.iter().find(|d| !(**d > 0.0)) {
            return Err(Error::InvalidArgument(format!("D0 must be positive, got {bad}")));
        }
        let start = Instant::now();
        let over_budget = || self.budget_seconds.is_some_and(|b| start.elapsed().as_secs_f64() > b);
        let init_box = self.init_box.clone().unwrap_or_else(|| self.flow.default_init_box());
        let mut rows = Vec::with_capacity(self.d0_list.len());
        let mut exhausted = false;
        'legs: for &d0 in &self.d0_list {
            if over_budget() {
                exhausted = true;
                break;
            }
            let cfg = IntegratorConfig::from_d0(self.dt, d0)?;
            let last = self.t_rule.steps(d0, self.dt);
            let sched = CheckpointSchedule::log_spaced(last as f64 * self.dt, self.dt, self.checkpoints.max(1))?;
            let mut ens = EnsembleState::init(self.n, &init_box, self.seed)?;
            let mut series = Vec::with_capacity(sched.steps().len());
            for &target in sched.steps() {
                if over_budget() {
                    exhausted = true;
                    break 'legs;
                }
                ens.advance(self.scheme, &self.flow, &cfg, target - ens.step_index(), workers)?;
                series.push(estimate_d(&ens.record(workers))?);
            }
            rows.push(EnhancementRow {
                d0,
                estimate: series.last().unwrap().clone(),
                t_final: last as f64 * self.dt,
                mixed: mixing_detected(&series),
                series,
            });
        }
        let pts: Vec<(f64, f64)> = rows.iter().map(|r| (r.d0, r.estimate.d11())).collect();
        let fit = if pts.len() >= 2 { loglog_fit(&pts).ok() } else { None };
        Ok(EnhancementTable {
            rows,
            slope: fit.map(|f| f.0),
            intercept: fit.map(|f| f.1),
            exhausted,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flows::ZeroFlow;

    fn acc_from(disps: &[[f64; 2]], t: f64) -> MomentAccumulator {
        let mut a = MomentAccumulator::empty(2, t);
        for d in disps {
            a.push(d);
        }
        a
    }

    #[test]
    fn estimate_definition() {
        let a = acc_from(&[[1.0, 2.0], [3.0, -1.0]], 0.5);
        let e = estimate_d(&a).unwrap();
        assert_eq!(e.matrix, vec![5.0, -0.5, -0.5, 2.5]);
        // products 1 and 9: sample var 32, stderr sqrt(16)/1
        assert_eq!(e.stderr11(), 4.0);
        let z = estimate_d(&acc_from(&[[0.0, 0.0]; 3], 1.0)).unwrap();
        assert!(z.matrix.iter().all(|v| *v == 0.0));
        assert!(estimate_d(&acc_from(&[[1.0, 1.0]; 3], 0.0)).is_err());
        assert!(estimate_d(&acc_from(&[[1.0, 1.0]], 1.0)).is_err());
    }

    #[test]
    fn brownian_estimate() {
        let d0 = 0.01;
        let cfg = IntegratorConfig::from_d0(0.01, d0).unwrap();
        let sched = CheckpointSchedule::from_steps(vec![1000], 0.01).unwrap();
        let flow = Flow::Zero(ZeroFlow { dim: 2 });
        let accs = simulate(
            &flow,
            Scheme::Symplectic,
            &cfg,
            NoiseSchedule::plain(0.01),
            20_000,
            &flow.default_init_box(),
            1,
            &sched,
            &Workers::new(1).unwrap(),
        )
        .unwrap();
        let e = estimate_d(&accs[0]).unwrap();
        for i in 0..2 {
            assert!((e.get(i, i) - d0).abs() < 3.0 * e.stderr_of(i, i), "{e:?}");
        }
        assert_eq!(e.get(0, 1), e.get(1, 0));
    }

    #[test]
    fn fit_examples() {
        let pts: Vec<(f64, f64)> = [1.0, 2.0, 4.0, 8.0].iter().map(|&x| (x, 3.0 * x * x)).collect();
        let (s, c) = loglog_fit(&pts).unwrap();
        assert!((s - 2.0).abs() < 1e-12 && (c - 3f64.ln()).abs() < 1e-12);
        assert!((loglog_fit(&[(1.0, 1.0), (2.0, 2.0)]).unwrap().0 - 1.0).abs() < 1e-15);
        let wobble: Vec<(f64, f64)> = (0..8)
            .map(|k| {
                let x = 2f64.powi(k);
                (x, x.powf(1.5) * (1.0 + 0.01 * if k % 2 == 0 { 1.0 } else { -1.0 }))
            })
            .collect();
        let s = loglog_fit(&wobble).unwrap().0;
        assert!((1.45..=1.55).contains(&s), "{s}");
        assert!(loglog_fit(&[(1.0, 0.0), (2.0, 1.0)]).is_err());
        assert!(loglog_fit(&[(1.0, 1.0)]).is_err());
    }

    #[test]
    fn coupled_brownian_study_has_no_error() {
        let study = ConvergenceStudy {
            flow: Flow::Zero(ZeroFlow { dim: 2 }),
            scheme: Scheme::Symplectic,
            dt_list: vec![0.1, 0.2, 0.05],
            dt_ref: 0.0125,
            sigma: 0.2,
            t_final: 2.0,
            n: 600,
            seed: 3,
            couple: true,
            init_box: None,
        };
        let t = study.run(&Workers::new(1).unwrap()).unwrap();
        assert_eq!(t.rows.iter().map(|r| r.dt).collect::<Vec<_>>(), vec![0.2, 0.1, 0.05]);
        // exact in exact arithmetic; only summation order differs
        for r in &t.rows {
            assert!(r.abs_error < 1e-14, "{r:?}");
        }
    }

    #[test]
    fn coupling_requires_divisibility() {
        let mut study = ConvergenceStudy {
            flow: Flow::Zero(ZeroFlow { dim: 2 }),
            scheme: Scheme::Symplectic,
            dt_list: vec![0.1, 0.05],
            dt_ref: 0.03,
            sigma: 0.2,
            t_final: 0.3,
            n: 10,
            seed: 3,
            couple: true,
            init_box: None,
        };
        assert!(study.run(&Workers::new(1).unwrap()).is_err());
        study.dt_ref = 0.2;
        assert!(study.run(&Workers::new(1).unwrap()).is_err());
        study.dt_ref = 0.025;
        study.t_final = 0.25;
        assert!(study.run(&Workers::new(1).unwrap()).is_err(), "t_final not a multiple of 0.1");
        assert_eq!(substeps_for(0.2, 0.00625).unwrap(), 32);
    }

    #[test]
    fn t_rule() {
        let r = TRule::default();
        assert_eq!(r.t_final(0.1, 0.1), 1000.0);
        assert_eq!(r.steps(1e-4, 0.1), 1_000_000);
        let capped = TRule {
            factor: 10.0,
            min: 0.0,
            max: 1e4,
        };
        assert_eq!(capped.t_final(0.1, 0.01), 100.0);
        assert_eq!(capped.steps(1e-3, 0.01), 1_000_000);
    }

    #[test]
    fn zero_flow_scan_recovers_d0() {
        let scan = EnhancementScan {
            flow: Flow::Zero(ZeroFlow { dim: 2 }),
            scheme: Scheme::Symplectic,
            d0_list: vec![0.1, 0.01],
            dt: 0.1,
            t_rule: TRule {
                factor: 1.0,
                min: 10.0,
                max: 10.0,
            },
            n: 4000,
            seed: 9,
            checkpoints: 6,
            budget_seconds: None,
            init_box: None,
        };
        let t = scan.run(&Workers::new(1).unwrap()).unwrap();
        assert!(!t.exhausted);
        for r in &t.rows {
            assert!((r.estimate.d11() - r.d0).abs() < 3.0 * r.estimate.stderr11(), "{r:?}");
            assert_eq!(r.t_final, 10.0);
        }
        assert!((t.slope.unwrap() - 1.0).abs() < 0.1);
    }

    #[test]
    fn zero_budget_stops_before_first_leg() {
        let scan = EnhancementScan {
            flow: Flow::Zero(ZeroFlow { dim: 2 }),
            scheme: Scheme::Symplectic,
            d0_list: vec![0.1],
            dt: 0.1,
            t_rule: TRule::default(),
            n: 10,
            seed: 9,
            checkpoints: 4,
            budget_seconds: Some(-1.0),
            init_box: None,
        };
        let t = scan.run(&Workers::new(1).unwrap()).unwrap();
        assert!(t.exhausted && t.rows.is_empty() && t.slope.is_none());
    }

    #[test]
    fn mixing_needs_a_plateau() {
        let est = |d: f64| DiffusivityEstimate {
            dim: 1,
            t: 1.0,
            n: 10,
            matrix: vec![d],
            stderr: vec![0.01],
        };
        let flat: Vec<_> = [0.5, 0.2, 0.201, 0.199, 0.2, 0.2005].iter().map(|&d| est(d)).collect();
        assert!(mixing_detected(&flat));
        let rising: Vec<_> = [0.1, 0.12, 0.14, 0.16].iter().map(|&d| est(d)).collect();
        assert!(!mixing_detected(&rising));
        assert!(!mixing_detected(&flat[..3]));
    }
}
