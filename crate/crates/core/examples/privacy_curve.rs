//! Epsilon as a function of the noise multiplier and delta for q = 1e-3,
//! T = 1e5, and the noise needed for a target epsilon.

use dplm::accountant::{self, PrivacyLedger};

fn main() -> dplm::Result<()> {
    let (q, steps) = (1e-3, 100_000);
    let deltas = [1e-10, 1e-7, 1e-5, 1e-3];
    let orders = accountant::default_orders();

    print!("{:>6}", "sigma");
    for d in deltas {
        print!(" {:>12}", format!("d={d:e}"));
    }
    println!();
    for sigma in [0.5, 0.75, 1.0, 1.1, 1.5, 2.0, 4.0] {
        let curve = accountant::compose(&PrivacyLedger::uniform(q, sigma, steps)?, &orders)?;
        print!("{sigma:>6}");
        for d in deltas {
            print!(" {:>12.4}", accountant::epsilon(&curve, d)?.0);
        }
        println!();
    }

    println!();
    for target in [0.5, 1.0, 2.0, 8.0] {
        let sigma = accountant::calibrate_sigma(target, 1e-5, q, steps)?;
        println!("epsilon <= {target:<4} at delta=1e-5 needs sigma >= {sigma:.3}");
    }
    Ok(())
}
