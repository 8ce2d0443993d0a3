use nalgebra::DMatrix;
use proptest::prelude::*;

use selmix::classifier::LinearModel;
use selmix::data::{parse_csv, write_csv, FeatureDataset};
use selmix::gain::GainMatrix;
use selmix::metrics::{evaluate_metric, metric_grad_unconstrained, update_lagrange};
use selmix::policy::selmix_distribution;
use selmix::theory::{convergence_check, ConvergenceConfig};
use selmix::trainer::{run_selmix, Benchmark, BenchmarkSpec, Evaluation};
use selmix::{ConfusionMatrix, LagrangeState, LtSpec, MetricKind, MetricSpec, TrainerConfig};

fn square(k: usize, range: std::ops::Range<f64>) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(range, k * k).prop_map(move |v| DMatrix::from_row_slice(k, k, &v))
}

fn instance() -> impl Strategy<Value = (DMatrix<f64>, Vec<f64>)> {
    (2usize..7).prop_flat_map(|k| {
        (
            square(k, -3.0..3.0),
            prop::collection::vec(0.05f64..1.0, k).prop_map(|p| {
                let t: f64 = p.iter().sum();
                p.iter().map(|x| x / t).collect()
            }),
        )
    })
}

proptest! {
    #[test]
    fn confusion_rows_sum_to_priors((ct, priors) in instance()) {
        let c = ConfusionMatrix::from_unconstrained(&ct, &priors).unwrap();
        for (i, p) in priors.iter().enumerate() {
            let row: f64 = c.entries().row(i).iter().sum();
            prop_assert!((row - p).abs() < 1e-12);
        }
    }

    #[test]
    fn unconstrained_gradient_rows_sum_to_zero((ct, priors) in instance(), kind in 0usize..9) {
        let kind = MetricKind::ALL[kind];
        let k = priors.len();
        let c = ConfusionMatrix::from_unconstrained(&ct, &priors).unwrap();
        let spec = MetricSpec::new(kind, k);
        prop_assume!(spec.validate(k).is_ok());
        let lam = update_lagrange(&spec, &c);
        let g = metric_grad_unconstrained(&spec, &c, &lam).unwrap();
        let scale = g.amax().max(1.0);
        for i in 0..k {
            prop_assert!(g.row(i).iter().sum::<f64>().abs() <= 1e-10 * scale);
        }
    }

    #[test]
    fn arithmetic_geometric_harmonic_order((ct, priors) in instance()) {
        let k = priors.len();
        let c = ConfusionMatrix::from_unconstrained(&ct, &priors).unwrap();
        let lam = LagrangeState::neutral();
        let psi = |kind| evaluate_metric(&MetricSpec::new(kind, k), &c, &lam);
        let (am, gm, hm) = (psi(MetricKind::MeanRecall), psi(MetricKind::GMean), psi(MetricKind::HMean));
        prop_assert!(am >= gm - 1e-12 && gm >= hm - 1e-12);
    }

    #[test]
    fn selmix_policy_is_a_distribution(g in (1usize..6).prop_flat_map(|k| square(k, -1.0..1.0)), s in 0.0f64..50.0) {
        let gains = GainMatrix::new(g.clone()).unwrap();
        let p = selmix_distribution(&gains, s, true);
        prop_assert!((p.probs().sum() - 1.0).abs() < 1e-12);
        prop_assert!(p.probs().iter().all(|&x| x >= 0.0));
        if g.iter().any(|&x| x >= 0.0) {
            for (x, q) in g.iter().zip(p.probs().iter()) {
                if *x < 0.0 {
                    prop_assert_eq!(*q, 0.0);
                }
            }
        }
    }

    #[test]
    fn dataset_csv_round_trip(
        k in 1usize..5,
        dim in 1usize..4,
        rows in prop::collection::vec((0usize..5, prop::collection::vec(-1e6f64..1e6, 4)), 1..30),
    ) {
        let labels: Vec<usize> = rows.iter().map(|r| r.0 % k).collect();
        let features: Vec<f64> = rows.iter().flat_map(|r| r.1[..dim].to_vec()).collect();
        let ds = FeatureDataset::new(dim, k, features, labels).unwrap();
        let mut buf = Vec::new();
        write_csv(&ds, &mut buf).unwrap();
        let back = parse_csv(std::str::from_utf8(&buf).unwrap(), Some(k)).unwrap();
        prop_assert_eq!(back, ds);
    }

    #[test]
    fn model_csv_round_trip(w in (1usize..5, 2usize..6).prop_flat_map(|(d, k)| {
        prop::collection::vec(-1e3f64..1e3, d * k).prop_map(move |v| DMatrix::from_row_slice(d, k, &v))
    })) {
        let model = LinearModel::from_weights(w).unwrap();
        let mut buf = Vec::new();
        model.write_csv(&mut buf).unwrap();
        let back = LinearModel::parse_csv(std::str::from_utf8(&buf).unwrap()).unwrap();
        prop_assert_eq!(back, model);
    }
}

fn small_bench(seed: u64) -> Benchmark {
    let mut spec = BenchmarkSpec::default().with_seed(seed);
    spec.data = LtSpec {
        num_classes: 5,
        dim: 8,
        head_count: 400,
        rho: 20.0,
        seed,
        ..LtSpec::default()
    };
    spec.val_per_class = 60;
    spec.test_per_class = 60;
    spec.pretrain.steps = 600;
    Benchmark::build(&spec).unwrap()
}

#[test]
fn fine_tuning_improves_every_objective() {
    let benches: Vec<Benchmark> = (0..5).map(small_bench).collect();
    for kind in MetricKind::ALL {
        let spec = MetricSpec::new(kind, 5);
        let mut improved = 0;
        for (seed, bench) in benches.iter().enumerate() {
            let mut cfg = TrainerConfig::new(spec.clone());
            cfg.cycles = 20;
            cfg.sgd_steps = 50;
            cfg.seed = seed as u64;
            let before = Evaluation::of(&bench.init, &bench.validation, &spec).unwrap();
            let (model, _) =
                run_selmix(&cfg, &bench.train, None, &bench.validation, &bench.init).unwrap();
            let after = Evaluation::of(&model, &bench.validation, &spec).unwrap();
            if after.psi > before.psi {
                improved += 1;
            }
        }
        assert!(
            improved >= 4,
            "{}: improved in {improved}/5 seeds",
            kind.name()
        );
    }
}

#[test]
fn coverage_run_keeps_most_of_the_mean_recall() {
    let bench = small_bench(11);
    let run = |kind| {
        let spec = MetricSpec::new(kind, 5);
        let mut cfg = TrainerConfig::new(spec.clone());
        cfg.cycles = 20;
        cfg.sgd_steps = 50;
        let (model, _) =
            run_selmix(&cfg, &bench.train, None, &bench.validation, &bench.init).unwrap();
        Evaluation::of(&model, &bench.test, &spec).unwrap()
    };
    let free = run(MetricKind::MeanRecall);
    let constrained = run(MetricKind::MeanRecallCoverage);
    assert!(
        constrained.mean_recall >= free.mean_recall - 0.03,
        "{} vs {}",
        constrained.mean_recall,
        free.mean_recall
    );
}

#[test]
fn convergence_suboptimality_shrinks_by_decade() {
    let reports: Vec<_> = (0..20)
        .map(|seed| convergence_check(&ConvergenceConfig::new(1.0, seed)).unwrap())
        .collect();
    let mean_at = |t: usize| reports.iter().map(|r| r.suboptimality[t - 1]).sum::<f64>() / 20.0;
    let (a, b, c) = (mean_at(1), mean_at(10), mean_at(100));
    assert!(a > b && b > c, "{a} {b} {c}");
    assert!(mean_at(1000) <= c);
}
