//! Semi-supervised fine-tuning: the second element of each mixup pair comes
//! from an unlabeled pool whose pseudo-labels are refreshed every cycle.
//!
//! cargo run --release --example semi_supervised

use selmix::data::generate_with_counts;
use selmix::metrics::{MetricKind, MetricSpec};
use selmix::trainer::{
    refresh_pseudo_labels, run_selmix, Benchmark, BenchmarkSpec, Evaluation, TrainMode,
};
use selmix::TrainerConfig;

fn main() -> selmix::Result<()> {
    let bench_spec = BenchmarkSpec::default();
    let bench = Benchmark::build(&bench_spec)?;
    let mut unl_spec = bench_spec.data.clone();
    unl_spec.seed += 1000;
    let unlabeled = generate_with_counts(&unl_spec, &unl_spec.class_counts())?.hide_labels();

    let spec = MetricSpec::new(MetricKind::GMean, 10);
    let mut cfg = TrainerConfig::new(spec.clone());
    cfg.cycles = 50;
    cfg.sgd_steps = 100;
    cfg.mode = TrainMode::Ssl;

    let before = refresh_pseudo_labels(&bench.init, &unlabeled)?;
    let (model, history) = run_selmix(
        &cfg,
        &bench.train,
        Some(&unlabeled),
        &bench.validation,
        &bench.init,
    )?;
    let after = refresh_pseudo_labels(&model, &unlabeled)?;
    let init_eval = Evaluation::of(&bench.init, &bench.test, &spec)?;
    let final_eval = Evaluation::of(&model, &bench.test, &spec)?;
    println!(
        "test G-mean       {:.4} -> {:.4}",
        init_eval.psi, final_eval.psi
    );
    println!(
        "test min recall   {:.4} -> {:.4}",
        init_eval.min_recall, final_eval.min_recall
    );
    println!(
        "pseudo-label acc  {:.4} -> {:.4}",
        before.pseudo_label_accuracy().unwrap_or(0.0),
        after.pseudo_label_accuracy().unwrap_or(0.0)
    );
    println!(
        "sgd steps {}  empty-class redraws {}",
        history.sgd_steps, history.pseudo_label_resamples
    );
    Ok(())
}
