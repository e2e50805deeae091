//! Weak error of D11 against step size with coupled Brownian paths, and the
//! fitted log-log slope.
//!
//! cargo run --release --example convergence -- [cellular2d|kolmogorov3d-type] [particles] [t_final]

use effdiff::diffusivity::ConvergenceStudy;
use effdiff::ensemble::Workers;
use effdiff::flows::Flow;
use effdiff::integrators::Scheme;

fn main() -> effdiff::error::Result<()> {
    let mut args = std::env::args().skip(1);
    let flow = args.next().unwrap_or_else(|| "cellular2d".into());
    let n: usize = args.next().map_or(4_000, |s| s.parse().expect("particles"));
    let t_final: f64 = args.next().map_or(50.0, |s| s.parse().expect("t_final"));

    let dt_list = vec![0.2, 0.1, 0.05, 0.025];
    let study = ConvergenceStudy {
        flow: Flow::from_name(&flow)?,
        scheme: Scheme::Symplectic,
        dt_ref: ConvergenceStudy::default_dt_ref(&dt_list),
        dt_list,
        sigma: 0.02f64.sqrt(),
        t_final,
        n,
        seed: 3,
        couple: true,
        init_box: None,
    };
    let table = study.run(&Workers::available())?;
    println!("reference dt={} D11={:.6}", table.dt_ref, table.reference.d11());
    println!("{:>8} {:>12} {:>12} {:>12}", "dt", "D11", "stderr11", "|error|");
    for r in &table.rows {
        println!("{:>8} {:>12.6} {:>12.2e} {:>12.3e}", r.dt, r.d11, r.stderr11, r.abs_error);
    }
    match table.slope {
        Some(s) => println!("slope {s:.3}"),
        None => println!("slope undefined (an error is zero)"),
    }
    Ok(())
}
