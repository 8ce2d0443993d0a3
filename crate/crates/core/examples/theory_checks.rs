//! Convergence under partially aligned ascent directions, and the quadratic
//! regularizer expansion of the mixup loss at shrinking weight scales.
//!
//! cargo run --release --example theory_checks

use selmix::theory::{
    convergence_check, mixup_regularization_check, ConvergenceConfig, MixupRegConfig,
};

fn main() -> selmix::Result<()> {
    for c in [1.0, 0.5, 0.25] {
        let r = convergence_check(&ConvergenceConfig::new(c, 0))?;
        println!(
            "c={c:<4} exponent={:>8.2} envelope held={}",
            r.fitted_rate_exponent.unwrap_or(f64::NAN),
            r.bound_satisfied
        );
    }
    println!();
    for scale in [0.2, 0.1, 0.05, 0.025] {
        let r = mixup_regularization_check(&MixupRegConfig::new(scale, 0))?;
        println!(
            "scale={scale:<6} mixup={:.6} plain={:.6} taylor={:.6} rel_error={:.2e}",
            r.mixup_loss_mc, r.plain_mixup_loss_mc, r.taylor_approx, r.rel_error
        );
    }
    Ok(())
}
