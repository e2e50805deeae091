//! Spectral cell-problem solve for the cellular flow, with a resolution
//! sweep and both diffusivity formulas.
//!
//! cargo run --release --example eulerian_oracle -- [d0]

use std::time::Instant;

use effdiff::eulerian::{eulerian_diffusivity, resolution_sweep, solve_cell_problem, TorusGrid2D};
use effdiff::flows::CellularFlow;

fn main() -> effdiff::error::Result<()> {
    let d0: f64 = std::env::args().nth(1).map_or(0.01, |s| s.parse().expect("d0"));
    let flow = CellularFlow;

    let start = Instant::now();
    let grid = TorusGrid2D::for_flow(&flow, 256)?;
    let chi = solve_cell_problem(&flow, d0, &grid, 1e-8)?;
    let d = eulerian_diffusivity(&flow, &chi);
    println!(
        "n=256: {} + {} GMRES iterations, residuals {:.2e} {:.2e}, {:.1} s",
        chi.iterations[0],
        chi.iterations[1],
        chi.residual[0],
        chi.residual[1],
        start.elapsed().as_secs_f64()
    );
    println!("  D_cov  = [{:.8}, {:.8}; {:.8}, {:.8}]", d.cov[0][0], d.cov[0][1], d.cov[1][0], d.cov[1][1]);
    println!("  D_grad = [{:.8}, {:.8}; {:.8}, {:.8}]", d.grad[0][0], d.grad[0][1], d.grad[1][0], d.grad[1][1]);
    println!("  |sym(D_cov) - D_grad| = {:.2e}", d.max_discrepancy());
    for w in chi.warnings() {
        println!("  warning: {w}");
    }

    let sweep = resolution_sweep(&flow, d0, &[32, 64, 128, 256], 1e-10)?;
    println!("{:>6} {:>14} {:>14} {:>10}", "n", "D_cov11", "D_grad11", "tail");
    for r in &sweep.rows {
        println!("{:>6} {:>14.10} {:>14.10} {:>10.2e}", r.n, r.d_cov11, r.d_grad11, r.tail_fraction);
    }
    match sweep.converged_at {
        Some(n) => println!("resolved to 0.1% from n = {n}"),
        None => println!("not resolved to 0.1% over this sweep"),
    }
    Ok(())
}
