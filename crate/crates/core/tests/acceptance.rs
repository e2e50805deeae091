//! Acceptance criteria, run in order with one PASS/FAIL line each.
//!
//! This target has its own `main` so the long runs execute sequentially and
//! can share results. A FAIL is reported, not raised; the process exits 0
//! unless the harness itself breaks. `ACCEPTANCE_ONLY=2,13` restricts the
//! run to the listed criteria.
//!
//! Expect roughly an hour on one core: criteria 2, 10 and 13 each move
//! about 1e10 particle-steps.

use std::path::PathBuf;
use std::process::Command;
use std::time::Instant;

use effdiff::diffusivity::{estimate_d, mixing_detected, ConvergenceStudy, EnhancementScan, TRule};
use effdiff::ensemble::{simulate, CheckpointSchedule, Workers};
use effdiff::error::Result;
use effdiff::eulerian::{eulerian_diffusivity, generator_corrector, solve_cell_problem, TorusGrid2D};
use effdiff::flows::{CellularFlow, Flow, SeparableFlow2D, ZeroFlow};
use effdiff::integrators::{deterministic_jacobian_det, IntegratorConfig, Scheme};
use effdiff::kernel::{build_kernel, decay_rate, default_image_cutoff, invariant_density, lemma_rate_check, mode_decay};
use effdiff::rng::{NoiseSchedule, RngStream};

const CELLULAR_D11: f64 = 0.12629;
const KOLMOGOROV3D_D11: f64 = 0.13106;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Result<Verdict> {
    Ok(Verdict { pass, detail })
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

/// Runs shared between criteria.
struct Shared {
    dir: tempfile::TempDir,
    lagrangian_csv: Option<(PathBuf, f64)>,
    abc_fine_d11: Option<f64>,
    abc_slope: Option<f64>,
}

fn binary_simulate(out: &PathBuf, workers: usize) -> Result<()> {
    let status = Command::new(env!("CARGO_BIN_EXE_effdiff"))
        .args(["--kind", "simulate", "--flow", "cellular2d", "--scheme", "symplectic"])
        .args(["--d0", "0.01", "--dt", "0.01", "--particles", "50000", "--t-final", "2000"])
        .args(["--seed", "2", "--checkpoints", "10", "--workers", &workers.to_string()])
        .arg("--out")
        .arg(out)
        .status()?;
    if !status.success() {
        return Err(effdiff::error::Error::InvalidArgument(format!("effdiff exited with {status}")));
    }
    Ok(())
}

fn last_d11(csv: &PathBuf) -> Result<f64> {
    let text = std::fs::read_to_string(csv)?;
    let last = text.lines().rfind(|l| !l.starts_with('#')).unwrap_or_default();
    last.split(',')
        .nth(1)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| effdiff::error::Error::InvalidArgument(format!("no d11 in `{last}`")))
}

impl Shared {
    fn lagrangian(&mut self) -> Result<(PathBuf, f64)> {
        if self.lagrangian_csv.is_none() {
            let out = self.dir.path().join("cellular_w8.csv");
            binary_simulate(&out, 8)?;
            let d = last_d11(&out)?;
            self.lagrangian_csv = Some((out, d));
        }
        Ok(self.lagrangian_csv.clone().unwrap())
    }

    fn abc_scan(&mut self) -> Result<(f64, f64)> {
        if self.abc_slope.is_none() {
            let scan = EnhancementScan {
                flow: Flow::from_name("abc")?,
                scheme: Scheme::Symplectic,
                d0_list: vec![1e-1, 1e-2, 1e-3],
                dt: 0.01,
                t_rule: TRule {
                    factor: 10.0,
                    min: 0.0,
                    max: 1e4,
                },
                n: 10_000,
                seed: 10,
                checkpoints: 8,
                budget_seconds: None,
                init_box: None,
            };
            let table = scan.run(&Workers::available())?;
            for r in &table.rows {
                println!(
                    "    abc D0={:<6} T={:<6} D11={:.5} ± {:.5} mixed={}",
                    r.d0,
                    r.t_final,
                    r.estimate.d11(),
                    r.estimate.stderr11(),
                    r.mixed
                );
            }
            self.abc_fine_d11 = table.rows.last().map(|r| r.estimate.d11());
            self.abc_slope = table.slope;
        }
        Ok((self.abc_slope.unwrap_or(f64::NAN), self.abc_fine_d11.unwrap_or(f64::NAN)))
    }
}

fn c1_brownian(_: &mut Shared) -> Result<Verdict> {
    let flow = Flow::from_name("none")?;
    let cfg = IntegratorConfig::from_d0(0.01, 0.01)?;
    let sched = CheckpointSchedule::new(&[100.0], 0.01)?;
    let acc = simulate(
        &flow,
        Scheme::Symplectic,
        &cfg,
        NoiseSchedule::plain(0.01),
        20_000,
        &flow.default_init_box(),
        1,
        &sched,
        &Workers::available(),
    )?;
    let e = estimate_d(&acc[0])?;
    let z11 = (e.get(0, 0) - 0.01).abs() / e.stderr_of(0, 0);
    let z22 = (e.get(1, 1) - 0.01).abs() / e.stderr_of(1, 1);
    verdict(
        z11 <= 3.0 && z22 <= 3.0,
        format!("D11={:.6} ({z11:.2} se), D22={:.6} ({z22:.2} se)", e.get(0, 0), e.get(1, 1)),
    )
}

fn c2_cross_framework(sh: &mut Shared) -> Result<Verdict> {
    let flow = CellularFlow;
    let chi = solve_cell_problem(&flow, 0.01, &TorusGrid2D::for_flow(&flow, 256)?, 1e-8)?;
    let e = eulerian_diffusivity(&flow, &chi).cov[0][0];
    let (_, l) = sh.lagrangian()?;
    let agree = rel(l, e);
    let (re, rl) = (rel(e, CELLULAR_D11), rel(l, CELLULAR_D11));
    verdict(
        agree <= 0.05 && re <= 0.05 && rl <= 0.05,
        format!(
            "eulerian {e:.6}, lagrangian {l:.6} (mutual {:.2}%); vs {CELLULAR_D11}: {:.1}% and {:.1}%",
            100.0 * agree,
            100.0 * re,
            100.0 * rl
        ),
    )
}

fn convergence(flow: &str, t_final: f64, seed: u64) -> Result<(f64, String)> {
    let study = ConvergenceStudy {
        flow: Flow::from_name(flow)?,
        scheme: Scheme::Symplectic,
        dt_list: vec![0.2, 0.1, 0.05, 0.025],
        dt_ref: 0.00625,
        sigma: 0.02f64.sqrt(),
        t_final,
        n: 20_000,
        seed,
        couple: true,
        init_box: None,
    };
    let t = study.run(&Workers::available())?;
    let errs: Vec<String> = t.rows.iter().map(|r| format!("{:.2e}", r.abs_error)).collect();
    let slope = t.slope.unwrap_or(f64::NAN);
    Ok((slope, format!("slope {slope:.3}, errors [{}], ref D11 {:.5}", errs.join(", "), t.reference.d11())))
}

fn c3_slope_2d(_: &mut Shared) -> Result<Verdict> {
    let (s, d) = convergence("cellular2d", 500.0, 3)?;
    verdict((0.8..=1.6).contains(&s), d)
}

fn c4_slope_3d(_: &mut Shared) -> Result<Verdict> {
    let (s, d) = convergence("kolmogorov3d-type", 300.0, 4)?;
    verdict((0.9..=1.7).contains(&s), d)
}

fn c5_uniform_in_time(_: &mut Shared) -> Result<Verdict> {
    let flow = Flow::from_name("cellular2d")?;
    let dt = 0.1;
    let cfg = IntegratorConfig::from_d0(dt, 0.01)?;
    let sched = CheckpointSchedule::new(&[125.0, 250.0, 500.0, 1000.0, 2000.0], dt)?;
    let accs = simulate(
        &flow,
        Scheme::Symplectic,
        &cfg,
        NoiseSchedule::plain(dt),
        20_000,
        &flow.default_init_box(),
        5,
        &sched,
        &Workers::available(),
    )?;
    let est: Vec<_> = accs.iter().map(estimate_d).collect::<Result<_>>()?;
    let (a, b) = (&est[3], &est[4]);
    let pooled = a.stderr11().hypot(b.stderr11());
    let gap = (a.d11() - b.d11()).abs();
    verdict(
        gap <= 3.0 * pooled,
        format!(
            "D11(1000)={:.5}, D11(2000)={:.5}, gap {:.2} pooled se; plateau detected: {}",
            a.d11(),
            b.d11(),
            gap / pooled,
            mixing_detected(&est[1..])
        ),
    )
}

fn random_state(rng: &mut RngStream, flow: &Flow) -> Vec<f64> {
    (0..flow.dim()).map(|i| rng.next_uniform() * flow.field().period(i)).collect()
}

fn c6_jacobian(_: &mut Shared) -> Result<Verdict> {
    let cfg = IntegratorConfig::new(0.1, 0.0)?;
    let mut rng = RngStream::new(6, 0, 0);
    let mut worst: f64 = 0.0;
    let mut euler_counts = Vec::new();
    for (name, scheme) in [
        ("cellular2d", Scheme::Symplectic),
        ("abc", Scheme::VolumePreserving),
        ("kolmogorov", Scheme::VolumePreserving),
        ("kolmogorov3d-type", Scheme::VolumePreserving),
    ] {
        let flow = Flow::from_name(name)?;
        let mut violations = 0;
        for _ in 0..100 {
            let x = random_state(&mut rng, &flow);
            let det = deterministic_jacobian_det(scheme, flow.field(), &x, &cfg, 1e-6)?;
            worst = worst.max((det - 1.0).abs());
            let e = deterministic_jacobian_det(Scheme::Euler, flow.field(), &x, &cfg, 1e-6)?;
            if (e - 1.0).abs() > 1e-6 {
                violations += 1;
            }
        }
        euler_counts.push((name, violations));
    }
    let euler_ok = euler_counts.iter().all(|(_, v)| *v >= 90);
    verdict(
        worst <= 1e-6 && euler_ok,
        format!("splitting max |det-1| {worst:.1e}; euler violations per 100: {euler_counts:?}"),
    )
}

fn c7_pure_diffusion(_: &mut Shared) -> Result<Verdict> {
    let (sigma, dt) = (0.5, 0.1);
    let cfg = IntegratorConfig::new(dt, sigma)?;
    let z = ZeroFlow { dim: 2 };
    let k = build_kernel(&z, &cfg, 64, default_image_cutoff(sigma, dt, [1.0, 1.0]))?;
    let rows = k.max_row_sum_error();
    let dev = invariant_density(&k, 1e-14, None, 100_000)?.max_relative_deviation();
    let want = (-2.0 * std::f64::consts::PI.powi(2) * sigma * sigma * dt).exp();
    let got = decay_rate(&k)?.modulus;
    verdict(
        rows <= 1e-12 && dev <= 1e-10 && (got - want).abs() <= 1e-6,
        format!(
            "row sums {rows:.1e}, density deviation {dev:.1e}, |lambda2| {got:.9} vs {want:.9} ({:.1e})",
            (got - want).abs()
        ),
    )
}

fn c8_cellular_kernel(_: &mut Shared) -> Result<Verdict> {
    let flow = CellularFlow;
    let (sigma, dt) = (0.5, 0.1);
    let cfg = IntegratorConfig::new(dt, sigma)?;
    let k = build_kernel(&flow, &cfg, 64, default_image_cutoff(sigma, dt, flow.periods()))?;
    let inv = invariant_density(&k, 1e-14, None, 100_000)?;
    let dev = inv.max_relative_deviation();
    let rho = decay_rate(&k)?.rho;
    let [lp, lq] = flow.periods();
    let tau = 2.0 * std::f64::consts::PI;
    let modes = [
        k.sample(|p, _| (tau * p / lp).sin()),
        k.sample(|_, q| (tau * q / lq).sin()),
        k.sample(|p, q| (tau * p / lp).sin() * (tau * q / lq).sin()),
    ];
    let ratios: Vec<f64> = modes.iter().map(|m| mode_decay(&k, &inv.density, m, 400) / rho).collect();
    let ok = dev <= 1e-6 && ratios.iter().all(|r| (r - 1.0).abs() <= 0.1);
    verdict(ok, format!("density deviation {dev:.1e}, rho {rho:.5}, mode/rho {ratios:.3?}"))
}

fn c9_lemma_rate(_: &mut Shared) -> Result<Verdict> {
    let flow = CellularFlow;
    let sigma = 0.5;
    let oracle = generator_corrector(&flow, 0.5 * sigma * sigma, &TorusGrid2D::for_flow(&flow, 128)?, 1e-10)?;
    let t = lemma_rate_check(&flow, sigma, &[0.2, 0.1, 0.05, 0.025], 64, &oracle, 1e-11)?;
    let errs: Vec<String> = t.rows.iter().map(|r| format!("{:.3e}", r.error)).collect();
    verdict(
        t.ratios.iter().all(|r| (1.4..=2.8).contains(r)),
        format!("errors [{}], ratios {:.3?}", errs.join(", "), t.ratios),
    )
}

fn c10_abc(sh: &mut Shared) -> Result<Verdict> {
    let (slope, _) = sh.abc_scan()?;
    verdict((-1.25..=-0.75).contains(&slope), format!("log-log slope {slope:.3}"))
}

fn c11_kolmogorov(sh: &mut Shared) -> Result<Verdict> {
    let scan = EnhancementScan {
        flow: Flow::from_name("kolmogorov")?,
        scheme: Scheme::Symplectic,
        d0_list: vec![1e-3, 1e-2, 1e-1],
        dt: 0.1,
        t_rule: TRule::default(),
        n: 10_000,
        seed: 11,
        checkpoints: 8,
        budget_seconds: None,
        init_box: None,
    };
    let table = scan.run(&Workers::available())?;
    for r in &table.rows {
        println!(
            "    kolmogorov D0={:<6} T={:<6} D11={:.5} ± {:.5} mixed={}",
            r.d0,
            r.t_final,
            r.estimate.d11(),
            r.estimate.stderr11(),
            r.mixed
        );
    }
    let slope = table.slope.unwrap_or(f64::NAN);
    let (abc, _) = sh.abc_scan()?;
    // "markedly flatter": at most half the ABC slope's magnitude
    let flatter = slope.abs() <= 0.5 * abc.abs();
    verdict(
        slope > -0.5 && slope <= 0.0 && flatter,
        format!("slope {slope:.3} vs abc {abc:.3}"),
    )
}

fn c12_euler_baseline(sh: &mut Shared) -> Result<Verdict> {
    let flow = Flow::from_name("abc")?;
    let (dt, d0, t) = (0.1, 1e-3, 1e4);
    let cfg = IntegratorConfig::from_d0(dt, d0)?;
    let sched = CheckpointSchedule::new(&[t], dt)?;
    let run = |scheme| -> Result<f64> {
        let acc = simulate(
            &flow,
            scheme,
            &cfg,
            NoiseSchedule::plain(dt),
            10_000,
            &flow.default_init_box(),
            12,
            &sched,
            &Workers::available(),
        )?;
        Ok(estimate_d(&acc[0])?.d11())
    };
    let euler = run(Scheme::Euler)?;
    let coarse = run(Scheme::Symplectic)?;
    let (_, fine) = sh.abc_scan()?;
    let (gap_e, gap_s) = (rel(euler, coarse), rel(coarse, fine));
    verdict(
        gap_e > 0.5 && gap_s <= 0.15,
        format!(
            "euler {euler:.4}, symplectic dt=0.1 {coarse:.4}, dt=0.01 {fine:.4}; euler gap {:.0}%, step gap {:.1}%",
            100.0 * gap_e,
            100.0 * gap_s
        ),
    )
}

fn c13_determinism(sh: &mut Shared) -> Result<Verdict> {
    let (w8, _) = sh.lagrangian()?;
    let w1 = sh.dir.path().join("cellular_w1.csv");
    binary_simulate(&w1, 1)?;
    let (a, b) = (std::fs::read(&w8)?, std::fs::read(&w1)?);
    verdict(a == b, format!("{} bytes, identical: {}", a.len(), a == b))
}

fn c14_reference_3d(_: &mut Shared) -> Result<Verdict> {
    let flow = Flow::from_name("kolmogorov3d-type")?;
    let dt = 0.01;
    let cfg = IntegratorConfig::from_d0(dt, 0.01)?;
    let sched = CheckpointSchedule::new(&[150.0, 300.0, 600.0], dt)?;
    let accs = simulate(
        &flow,
        Scheme::VolumePreserving,
        &cfg,
        NoiseSchedule::plain(dt),
        50_000,
        &flow.default_init_box(),
        14,
        &sched,
        &Workers::available(),
    )?;
    let e = estimate_d(accs.last().unwrap())?;
    let r = rel(e.d11(), KOLMOGOROV3D_D11);
    verdict(
        r <= 0.10,
        format!("D11(600)={:.5} ± {:.5}, {:.1}% from {KOLMOGOROV3D_D11}", e.d11(), e.stderr11(), 100.0 * r),
    )
}

type Criterion = fn(&mut Shared) -> Result<Verdict>;

fn main() {
    let criteria: [(u32, &str, Criterion); 14] = [
        (1, "brownian sanity", c1_brownian),
        (2, "cellular eulerian vs lagrangian", c2_cross_framework),
        (3, "convergence slope 2D", c3_slope_2d),
        (4, "convergence slope 3D", c4_slope_3d),
        (5, "uniform-in-time error", c5_uniform_in_time),
        (6, "unit jacobian", c6_jacobian),
        (7, "kernel pure diffusion", c7_pure_diffusion),
        (8, "kernel cellular flow", c8_cellular_kernel),
        (9, "discrete cell problem rate", c9_lemma_rate),
        (10, "abc maximal enhancement", c10_abc),
        (11, "kolmogorov sub-maximal enhancement", c11_kolmogorov),
        (12, "euler baseline failure", c12_euler_baseline),
        (13, "worker-count determinism", c13_determinism),
        (14, "3D reference value", c14_reference_3d),
    ];
    let only: Option<Vec<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|v| v.trim().parse().ok()).collect());
    let mut shared = Shared {
        dir: tempfile::tempdir().expect("temporary directory"),
        lagrangian_csv: None,
        abc_fine_d11: None,
        abc_slope: None,
    };
    let total = Instant::now();
    let mut passed = 0;
    let mut ran = 0;
    for (id, name, f) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let (pass, detail) = match f(&mut shared) {
            Ok(v) => (v.pass, v.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        ran += 1;
        passed += pass as u32;
        println!(
            "criterion {id:>2} {name:<36} {} [{:.0} s] {detail}",
            if pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {passed}/{ran} PASS in {:.0} s", total.elapsed().as_secs_f64());
}
