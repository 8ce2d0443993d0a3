//! Regret of the softmax policies against the built-in gain generators,
//! next to the uniform and follow-the-leader baselines.
//!
//! cargo run --release --example policy_game

use selmix::policy::{
    run_online_game, summarize_regret, GainGenerator, GamePolicy, OnlineGameConfig,
};

fn main() -> selmix::Result<()> {
    let (k, horizon) = (3, 2000);
    println!(
        "{:<18} {:<22} {:>10} {:>10}",
        "generator", "policy", "regret", "bound"
    );
    for generator in GainGenerator::BUILTIN {
        for policy in [
            GamePolicy::SelmixHedge,
            GamePolicy::SelmixHedgeVariant,
            GamePolicy::Uniform,
            GamePolicy::Greedy,
        ] {
            let reports = (0..10)
                .map(|seed| {
                    run_online_game(&OnlineGameConfig {
                        num_classes: k,
                        horizon,
                        s: 1.0,
                        generator,
                        policy,
                        seed,
                    })
                })
                .collect::<selmix::Result<Vec<_>>>()?;
            let sum = summarize_regret(&reports)?;
            let bound = sum.bound.map_or("-".to_string(), |b| format!("{b:.4}"));
            println!(
                "{:<18} {:<22} {:>10.4} {:>10}",
                generator.name(),
                policy.name(),
                sum.mean_regret,
                bound
            );
        }
    }
    Ok(())
}
