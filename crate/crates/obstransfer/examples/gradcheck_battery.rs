//! Verifies every differentiable operation in the autodiff tape against
//! central finite differences, composed into the same network shapes the
//! training code builds (dense stacks, the convolutional pixel encoder,
//! action-indexed selection, the stop-gradient regularizer loss).
//!
//! Run with: `cargo run --release --example gradcheck_battery`

use obstransfer::derive_rng;
use obstransfer::nn::gradcheck::run_all;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let tolerance = 1e-4;
    let report = run_all(&mut derive_rng(0, "gradcheck"))?;
    println!("{:<36} max relative error", "case");
    for case in &report.cases {
        println!("{:<36} {:.3e}", case.name, case.max_rel_err);
    }
    if report.passed(tolerance) {
        println!("all {} cases within {tolerance:.0e}", report.cases.len());
        Ok(())
    } else {
        Err(format!(
            "worst relative error {:.3e} exceeds {tolerance:.0e}",
            report.max_rel_err()
        )
        .into())
    }
}
