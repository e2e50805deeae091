//! Particle ensemble in the 2D cellular flow; prints D(t) at log-spaced
//! checkpoints.
//!
//! cargo run --release --example simulate -- [particles] [t_final]

use std::time::Instant;

use effdiff::diffusivity::estimate_d;
use effdiff::ensemble::{simulate, CheckpointSchedule, Workers};
use effdiff::flows::Flow;
use effdiff::integrators::{IntegratorConfig, Scheme};
use effdiff::rng::NoiseSchedule;

fn main() -> effdiff::error::Result<()> {
    let mut args = std::env::args().skip(1);
    let n: usize = args.next().map_or(10_000, |s| s.parse().expect("particles"));
    let t_final: f64 = args.next().map_or(200.0, |s| s.parse().expect("t_final"));

    let flow = Flow::from_name("cellular2d")?;
    let cfg = IntegratorConfig::from_d0(0.01, 0.01)?;
    let sched = CheckpointSchedule::log_spaced(t_final, cfg.dt(), 10)?;
    let workers = Workers::available();

    let start = Instant::now();
    let accs = simulate(
        &flow,
        Scheme::Symplectic,
        &cfg,
        NoiseSchedule::plain(cfg.dt()),
        n,
        &flow.default_init_box(),
        7,
        &sched,
        &workers,
    )?;
    let secs = start.elapsed().as_secs_f64();

    println!("{:>10} {:>12} {:>12} {:>12}", "t", "D11", "D22", "stderr11");
    for acc in &accs {
        let e = estimate_d(acc)?;
        println!("{:>10.2} {:>12.6} {:>12.6} {:>12.2e}", e.t, e.d11(), e.get(1, 1), e.stderr11());
    }
    let steps = sched.final_step() as f64 * n as f64;
    println!("{steps:.3e} particle-steps in {secs:.2} s ({:.3e}/s)", steps / secs);
    Ok(())
}
