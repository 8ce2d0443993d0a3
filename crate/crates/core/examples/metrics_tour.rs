//! Every objective on one confusion matrix, with its gradient in the
//! unconstrained parameterization and the refreshed multipliers.
//!
//! cargo run --example metrics_tour

use nalgebra::DMatrix;
use selmix::metrics::{
    evaluate_metric, metric_grad_unconstrained, update_lagrange, ConfusionMatrix, MetricKind,
    MetricSpec,
};

fn main() -> selmix::Result<()> {
    let labels = [0, 0, 0, 0, 0, 0, 1, 1, 1, 2, 2, 2];
    let preds = [0, 0, 0, 0, 0, 1, 1, 1, 0, 2, 0, 1];
    let c = ConfusionMatrix::from_predictions(&labels, &preds, 3)?;
    println!("C =\n{:.4}", c.entries());
    println!("recalls   {:?}", c.recalls());
    println!("coverages {:?}\n", c.coverages());

    for kind in MetricKind::ALL {
        let mut spec = MetricSpec::new(kind, 3);
        spec.head = vec![0];
        let lam = update_lagrange(&spec, &c);
        let psi = evaluate_metric(&spec, &c, &lam);
        let d: DMatrix<f64> = metric_grad_unconstrained(&spec, &c, &lam)?;
        // each row of the unconstrained gradient sums to zero
        let row_sums: Vec<f64> = (0..3).map(|i| d.row(i).sum()).collect();
        println!(
            "{:<32} psi={psi:+.4}  lambdas={:?}  max|row sum|={:.1e}",
            kind.name(),
            lam.lambdas
                .iter()
                .map(|l| (l * 1e3).round() / 1e3)
                .collect::<Vec<_>>(),
            row_sums.iter().fold(0.0f64, |m, s| m.max(s.abs()))
        );
    }
    Ok(())
}
