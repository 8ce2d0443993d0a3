//! Approximate gain matrix against finite differences of the smoothed metric,
//! on one synthetic problem, then the agreement study across cluster widths.
//!
//! cargo run --release --example gain_check

use selmix::classifier::class_centroids;
use selmix::data::{generate_longtail, LtSpec};
use selmix::gain::{gain_agreement_study, gain_fd_oracle, gain_matrix, GainStudyConfig};
use selmix::metrics::{soft_confusion, update_lagrange, MetricKind, MetricSpec};
use selmix::LinearModel;

fn main() -> selmix::Result<()> {
    let k = 4;
    let val = generate_longtail(&LtSpec {
        num_classes: k,
        dim: 6,
        head_count: 60,
        rho: 1.0,
        within_std: 0.05,
        seed: 1,
        ..LtSpec::default()
    })?;
    let model = LinearModel::from_row_slice(
        6,
        k,
        &(0..6 * k)
            .map(|n| ((n * 7 % 11) as f64 - 5.0) / 5.0)
            .collect::<Vec<_>>(),
    )?;
    let spec = MetricSpec::new(MetricKind::GMean, k);
    let c = soft_confusion(&model, &val)?;
    let lam = update_lagrange(&spec, &c);
    let centroids = class_centroids(&val)?;
    let beta_bar = 0.75;
    let g = gain_matrix(&model, &centroids, &c, &spec, &lam, beta_bar)?;
    println!(" i j   approx        finite-diff");
    for i in 0..k {
        for j in 0..k {
            let fd = gain_fd_oracle(&model, &val, &spec, &lam, &centroids, i, j, beta_bar, 1e-5)?;
            println!(" {i} {j}  {:+.6e}  {fd:+.6e}", g.get(i, j));
        }
    }

    let rows = gain_agreement_study(&GainStudyConfig::default(), &[0.5, 0.1, 0.02], &[0, 1, 2])?;
    println!("\nwithin_std  median relative error");
    for r in rows {
        println!("{:<10}  {:.4}", r.within_std, r.median_rel_error);
    }
    Ok(())
}
