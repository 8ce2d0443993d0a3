//! Paired comparison of the SelMix, uniform and greedy pair policies on the
//! synthetic long-tailed benchmark, optimizing min recall.
//!
//! cargo run --release --example policy_comparison -- [seeds] [lr]

use selmix::metrics::{MetricKind, MetricSpec};
use selmix::trainer::{run_selmix, Benchmark, BenchmarkSpec, Evaluation, PairPolicy};
use selmix::TrainerConfig;

fn main() -> selmix::Result<()> {
    let mut args = std::env::args().skip(1);
    let seeds: u64 = args.next().map_or(Ok(5), |s| s.parse()).expect("seeds");
    let lr: f64 = args.next().map_or(Ok(0.5), |s| s.parse()).expect("lr");
    let kind = args
        .next()
        .map(|s| MetricKind::from_name(&s).expect("metric name"))
        .unwrap_or(MetricKind::MinRecall);

    println!("seed  policy   min_rec  mean_rec  min_cov");
    for seed in 0..seeds {
        let bench = Benchmark::build(&BenchmarkSpec::default().with_seed(seed))?;
        let spec = MetricSpec::new(kind, 10);
        let before = Evaluation::of(&bench.init, &bench.test, &spec)?;
        println!(
            "{seed:>4}  init     {:.4}   {:.4}    {:.4}",
            before.min_recall, before.mean_recall, before.min_coverage
        );
        for policy in [PairPolicy::Selmix, PairPolicy::Uniform, PairPolicy::Greedy] {
            let mut cfg = TrainerConfig::new(spec.clone());
            cfg.cycles = 50;
            cfg.sgd_steps = 100;
            cfg.lr = lr;
            cfg.seed = seed;
            cfg.policy = policy;
            let (model, _) = run_selmix(&cfg, &bench.train, None, &bench.validation, &bench.init)?;
            let ev = Evaluation::of(&model, &bench.test, &spec)?;
            println!(
                "{seed:>4}  {:<8} {:.4}   {:.4}    {:.4}",
                format!("{policy:?}").to_lowercase(),
                ev.min_recall,
                ev.mean_recall,
                ev.min_coverage
            );
        }
    }
    Ok(())
}
