//! Phase-space volume: the splitting schemes keep the Jacobian determinant
//! of the deterministic map at 1, Euler–Maruyama does not.
//!
//! cargo run --release --example jacobian

use effdiff::flows::{divergence_probe, Flow, FLOW_NAMES};
use effdiff::integrators::{deterministic_jacobian_det, IntegratorConfig, Scheme};
use effdiff::rng::RngStream;

fn main() -> effdiff::error::Result<()> {
    let mut rng = RngStream::new(1, 0, 0);
    println!("{:<18} {:>6} {:>14} {:>14} {:>12}", "flow", "dt", "split |det-1|", "euler |det-1|", "div v");
    for name in &FLOW_NAMES[..4] {
        let flow = Flow::from_name(name)?;
        let field = flow.field();
        let div = divergence_probe(field, 1000, 1e-5)?;
        for dt in [0.01, 0.1, 0.5] {
            let cfg = IntegratorConfig::new(dt, 0.0)?;
            let (mut split, mut euler) = (0.0f64, 0.0f64);
            for _ in 0..200 {
                let x: Vec<f64> = (0..field.dim()).map(|i| rng.next_uniform() * field.period(i)).collect();
                let s = deterministic_jacobian_det(Scheme::Symplectic, field, &x, &cfg, 1e-6)?;
                let e = deterministic_jacobian_det(Scheme::Euler, field, &x, &cfg, 1e-6)?;
                split = split.max((s - 1.0).abs());
                euler = euler.max((e - 1.0).abs());
            }
            println!("{name:<18} {dt:>6} {split:>14.2e} {euler:>14.2e} {div:>12.1e}");
        }
    }
    Ok(())
}
