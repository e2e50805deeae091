//! D11 against D0 for the ABC and Kolmogorov flows at modest cost; the
//! ABC slope sits near -1, the Kolmogorov one much flatter.
//!
//! cargo run --release --example enhancement -- [particles] [budget_seconds]

use effdiff::diffusivity::{EnhancementScan, TRule};
use effdiff::ensemble::Workers;
use effdiff::flows::Flow;
use effdiff::integrators::Scheme;

fn main() -> effdiff::error::Result<()> {
    let mut args = std::env::args().skip(1);
    let n: usize = args.next().map_or(2_000, |s| s.parse().expect("particles"));
    let budget: Option<f64> = args.next().map(|s| s.parse().expect("budget_seconds"));

    for (name, dt) in [("abc", 0.05), ("kolmogorov", 0.1)] {
        let scan = EnhancementScan {
            flow: Flow::from_name(name)?,
            scheme: Scheme::Symplectic,
            d0_list: vec![0.3, 0.1, 0.03],
            dt,
            t_rule: TRule {
                factor: 10.0,
                min: 100.0,
                max: 1e3,
            },
            n,
            seed: 10,
            checkpoints: 8,
            budget_seconds: budget,
            init_box: None,
        };
        let table = scan.run(&Workers::available())?;
        println!("{name}");
        for r in &table.rows {
            println!(
                "  D0={:<6} T={:<7} D11={:>10.5} ± {:.5}{}",
                r.d0,
                r.t_final,
                r.estimate.d11(),
                r.estimate.stderr11(),
                if r.mixed { "" } else { "  (no plateau yet)" }
            );
        }
        if let Some(s) = table.slope {
            println!("  log-log slope {s:.3}");
        }
        if table.exhausted {
            println!("  budget exhausted");
        }
    }
    Ok(())
}
