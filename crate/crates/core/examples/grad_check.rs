//! Central-difference check of every parameter gradient of the full training
//! objective on a tiny random model.
//!
//!     cargo run --release --example grad_check [entries_per_tensor]

use std::time::Instant;

use geodtr::losses::LossConfig;
use geodtr::training::{grad_check, quadratic_self_test, GradCheckConfig};

fn main() -> geodtr::Result<()> {
    let entries = std::env::args().nth(1).map(|s| s.parse().expect("entries_per_tensor must be an integer"));
    println!("harness on x^2 at x=1: rel err {:.2e}", quadratic_self_test(1.0, 1e-5));

    let cfg = GradCheckConfig { entries_per_tensor: entries, ..GradCheckConfig::default() };
    let t = Instant::now();
    let report = grad_check(&cfg)?;
    print!("{}", report.table());
    println!("{} in {:.1}s\n", if report.passed(1e-3) { "PASS" } else { "FAIL" }, t.elapsed().as_secs_f64());

    // without the counterfactual terms every tensor reports cf-zero
    let off = GradCheckConfig { loss: LossConfig { cf_enabled: false, ..cfg.loss }, entries_per_tensor: Some(2), ..cfg };
    let report = grad_check(&off)?;
    print!("{}", report.table());
    Ok(())
}
