//! Transition kernel of the splitting scheme for the cellular flow:
//! invariant density, mixing rate, and the discrete cell problem's
//! first-order convergence to the continuous corrector.
//!
//! cargo run --release --example kernel_lab

use std::f64::consts::PI;
use std::time::Instant;

use effdiff::eulerian::{generator_corrector, TorusGrid2D};
use effdiff::flows::{CellularFlow, SeparableFlow2D};
use effdiff::integrators::IntegratorConfig;
use effdiff::kernel::{build_kernel, decay_rate, default_image_cutoff, invariant_density, lemma_rate_check, mode_decay};

fn main() -> effdiff::error::Result<()> {
    let flow = CellularFlow;
    let (m, sigma, dt) = (64, 0.5, 0.1);
    let [lp, lq] = flow.periods();

    let start = Instant::now();
    let cfg = IntegratorConfig::new(dt, sigma)?;
    let k = build_kernel(&flow, &cfg, m, default_image_cutoff(sigma, dt, flow.periods()))?;
    println!("kernel {m}x{m} built in {:.1} s", start.elapsed().as_secs_f64());
    println!("  max |row sum - 1|      = {:.2e}", k.max_row_sum_error());

    let inv = invariant_density(&k, 1e-14, None, 100_000)?;
    println!(
        "  invariant density      : {} iterations, max relative deviation from uniform {:.2e}",
        inv.iterations,
        inv.max_relative_deviation()
    );

    let decay = decay_rate(&k)?;
    println!("  |lambda_2| = {:.8}, rho = {:.6}", decay.modulus, decay.rho);
    let modes: [(&str, Box<dyn Fn(f64, f64) -> f64>); 3] = [
        ("sin 2pi p/Lp", Box::new(move |p, _| (2.0 * PI * p / lp).sin())),
        ("sin 2pi q/Lq", Box::new(move |_, q| (2.0 * PI * q / lq).sin())),
        ("product", Box::new(move |p, q| (2.0 * PI * p / lp).sin() * (2.0 * PI * q / lq).sin())),
    ];
    for (name, phi) in &modes {
        let r = mode_decay(&k, &inv.density, &k.sample(phi), 400);
        println!("  decay of {name:<14}: {r:.6} (ratio to rho {:.4})", r / decay.rho);
    }

    let oracle_grid = TorusGrid2D::for_flow(&flow, 128)?;
    let oracle = generator_corrector(&flow, 0.5 * sigma * sigma, &oracle_grid, 1e-10)?;
    let table = lemma_rate_check(&flow, sigma, &[0.2, 0.1, 0.05, 0.025], m, &oracle, 1e-11)?;
    println!("{:>8} {:>14}", "dt", "max error");
    for r in &table.rows {
        println!("{:>8} {:>14.6e}", r.dt, r.error);
    }
    println!("successive ratios: {:?}", table.ratios);
    println!("total {:.1} s", start.elapsed().as_secs_f64());
    Ok(())
}
