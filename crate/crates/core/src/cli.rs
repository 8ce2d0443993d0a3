//! The `selmix` command line.
//!
//! Exit status: 0 on success, 2 on usage or configuration errors (including
//! unreadable input files), 1 when a computation fails.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::classifier::{fit_cross_entropy, LinearModel, PretrainConfig};
use crate::data::{generate_with_counts, load_dataset, save_dataset, FeatureDataset, LtSpec};
use crate::error::{Result, SelmixError};
use crate::gain::{gain_agreement_study, GainStudyConfig};
use crate::metrics::{evaluate_metric, ConfusionMatrix, LagrangeState, MetricKind, MetricSpec};
use crate::policy::{
    run_online_game, summarize_regret, GainGenerator, GamePolicy, OnlineGameConfig,
};
use crate::theory::{
    convergence_check, mixup_regularization_check, ConvergenceConfig, MixupRegConfig,
};
use crate::trainer::{run_selmix, Evaluation, LrSchedule, PairPolicy, TrainMode, TrainerConfig};

/// Validation samples per class written by `gen-data`.
pub const VAL_PER_CLASS: usize = 100;
/// Test samples per class written by `gen-data`.
pub const TEST_PER_CLASS: usize = 300;

/// Recognized configuration keys.
pub const CONFIG_KEYS: [&str; 22] = [
    "metric",
    "omega",
    "alpha",
    "lambda_max",
    "tau",
    "head_tail_split",
    "s",
    "beta_min",
    "cycles",
    "sgd_steps",
    "batch_size",
    "lr",
    "lr_schedule",
    "mode",
    "seed",
    "mask_negative",
    "K",
    "d",
    "n1",
    "rho",
    "within_std",
    "cluster_separation",
];

/// A parsed key=value run configuration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub trainer: TrainerConfig,
    pub data: LtSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::parse("").expect("empty config is valid")
    }
}

fn config_err(msg: impl Into<String>) -> SelmixError {
    SelmixError::Config(msg.into())
}

fn parse_value<T: std::str::FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| config_err(format!("invalid value {raw:?} for key {key}")))
}

impl RunConfig {
    /// Parses `key = value` lines. Blank lines and `#` comments are ignored;
    /// missing keys take their defaults and unknown keys are rejected.
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| config_err(format!("line {}: expected key=value", idx + 1)))?;
            let key = key.trim();
            if !CONFIG_KEYS.contains(&key) {
                return Err(config_err(format!("line {}: unknown key {key:?}", idx + 1)));
            }
            if map
                .insert(key.to_string(), value.trim().to_string())
                .is_some()
            {
                return Err(config_err(format!(
                    "line {}: duplicate key {key:?}",
                    idx + 1
                )));
            }
        }
        let get = |key: &str| map.get(key).map(String::as_str);

        let mut data = LtSpec::default();
        if let Some(v) = get("K") {
            data.num_classes = parse_value("K", v)?;
        }
        if let Some(v) = get("d") {
            data.dim = parse_value("d", v)?;
        }
        if let Some(v) = get("n1") {
            data.head_count = parse_value("n1", v)?;
        }
        if let Some(v) = get("rho") {
            data.rho = parse_value("rho", v)?;
        }
        if let Some(v) = get("within_std") {
            data.within_std = parse_value("within_std", v)?;
        }
        if let Some(v) = get("cluster_separation") {
            data.cluster_separation = parse_value("cluster_separation", v)?;
        }
        if let Some(v) = get("seed") {
            data.seed = parse_value("seed", v)?;
        }
        data.validate().map_err(|e| config_err(e.to_string()))?;
        let k = data.num_classes;

        let kind = match get("metric") {
            Some(name) => MetricKind::from_name(name)
                .ok_or_else(|| config_err(format!("unknown metric {name:?}")))?,
            None => MetricKind::MeanRecall,
        };
        let mut metric = MetricSpec::new(kind, k);
        if let Some(v) = get("omega") {
            metric.omega = parse_value("omega", v)?;
        }
        if let Some(v) = get("alpha") {
            metric.alpha = parse_value("alpha", v)?;
        }
        if let Some(v) = get("lambda_max") {
            metric.lambda_max = parse_value("lambda_max", v)?;
        }
        if let Some(v) = get("tau") {
            metric.tau = parse_value("tau", v)?;
        }
        if let Some(v) = get("head_tail_split") {
            let heads: usize = parse_value("head_tail_split", v)?;
            metric.head = (0..heads).collect();
        }

        let mut trainer = TrainerConfig::new(metric);
        trainer.seed = data.seed;
        if let Some(v) = get("s") {
            trainer.s = parse_value("s", v)?;
        }
        if let Some(v) = get("beta_min") {
            trainer.beta_min = parse_value("beta_min", v)?;
        }
        if let Some(v) = get("cycles") {
            trainer.cycles = parse_value("cycles", v)?;
        }
        if let Some(v) = get("sgd_steps") {
            trainer.sgd_steps = parse_value("sgd_steps", v)?;
        }
        if let Some(v) = get("batch_size") {
            trainer.batch_size = parse_value("batch_size", v)?;
        }
        if let Some(v) = get("lr") {
            trainer.lr = parse_value("lr", v)?;
        }
        if let Some(v) = get("lr_schedule") {
            trainer.lr_schedule = match v {
                "constant" => LrSchedule::Constant,
                "cosine" => LrSchedule::Cosine,
                other => return Err(config_err(format!("unknown lr_schedule {other:?}"))),
            };
        }
        if let Some(v) = get("mode") {
            trainer.mode = match v {
                "supervised" => TrainMode::Supervised,
                "ssl" => TrainMode::Ssl,
                other => return Err(config_err(format!("unknown mode {other:?}"))),
            };
        }
        if let Some(v) = get("mask_negative") {
            trainer.mask_negative = parse_value("mask_negative", v)?;
        }
        trainer.validate(k).map_err(|e| config_err(e.to_string()))?;
        Ok(RunConfig { trainer, data })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| config_err(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "selmix",
    version,
    about = "Selective mixup fine-tuning for non-decomposable metrics"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate long-tailed train, balanced val/test and unlabeled CSVs.
    GenData { config: PathBuf, out: PathBuf },
    /// Fine-tune on a generated data directory.
    Train {
        config: PathBuf,
        data: PathBuf,
        out: PathBuf,
        /// Pair policy: selmix, uniform or greedy.
        #[arg(long, default_value = "selmix")]
        policy: String,
        /// Starting weights (d×K CSV). Defaults to cross-entropy pre-training.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Record per-cycle wall time (histories are then not reproducible).
        #[arg(long)]
        wall_time: bool,
    },
    /// Play the online pair-selection game against a gain generator.
    SimulatePolicy {
        #[arg(long = "classes", short = 'k', default_value_t = 3)]
        classes: usize,
        #[arg(long = "horizon", short = 't', default_value_t = 1000)]
        horizon: usize,
        #[arg(long, default_value_t = 1.0)]
        s: f64,
        #[arg(long, default_value = "selmix_hedge")]
        policy: String,
        #[arg(long, default_value = "stochastic")]
        generator: String,
        #[arg(long, default_value_t = 20)]
        seeds: u64,
    },
    /// Compare approximate gains with finite differences on synthetic clusters.
    CheckGain {
        #[arg(long, value_delimiter = ',', default_value = "0.5,0.1,0.02")]
        within_std: Vec<f64>,
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        #[arg(long = "classes", short = 'k', default_value_t = 10)]
        classes: usize,
        #[arg(long, short = 'd', default_value_t = 16)]
        dim: usize,
        #[arg(long, default_value = "mean_recall")]
        metric: String,
    },
    /// Convergence-rate and mixup-regularization checks.
    CheckTheory {
        #[command(subcommand)]
        check: TheoryCheck,
    },
    /// Print all metrics of a saved model on a dataset as JSON.
    Eval {
        model: PathBuf,
        data: PathBuf,
        /// Also report psi for this objective.
        #[arg(long)]
        metric: Option<String>,
    },
}

#[derive(Debug, Subcommand)]
enum TheoryCheck {
    Convergence {
        #[arg(long, default_value_t = 1.0)]
        alignment: f64,
        #[arg(long, default_value_t = 1000)]
        horizon: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    Mixup {
        #[arg(long, default_value_t = 0.05)]
        theta_scale: f64,
        #[arg(long, default_value_t = 2.0)]
        alpha: f64,
        #[arg(long, default_value_t = 2.0)]
        beta: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

enum CliError {
    Usage(String),
    Runtime(String),
}

impl From<SelmixError> for CliError {
    fn from(e: SelmixError) -> Self {
        match e {
            SelmixError::Config(_) | SelmixError::Parse { .. } => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

/// Input errors are usage errors.
fn input<T>(what: &Path, r: Result<T>) -> std::result::Result<T, CliError> {
    r.map_err(|e| CliError::Usage(format!("{}: {e}", what.display())))
}

/// Parses `args` (including the program name) and runs the subcommand.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            2
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            1
        }
    }
}

fn dispatch(command: Command) -> std::result::Result<(), CliError> {
    match command {
        Command::GenData { config, out } => gen_data(&config, &out),
        Command::Train {
            config,
            data,
            out,
            policy,
            init,
            wall_time,
        } => train(&config, &data, &out, &policy, init.as_deref(), wall_time),
        Command::SimulatePolicy {
            classes,
            horizon,
            s,
            policy,
            generator,
            seeds,
        } => simulate_policy(classes, horizon, s, &policy, &generator, seeds),
        Command::CheckGain {
            within_std,
            seeds,
            classes,
            dim,
            metric,
        } => check_gain(&within_std, seeds, classes, dim, &metric),
        Command::CheckTheory { check } => check_theory(check),
        Command::Eval {
            model,
            data,
            metric,
        } => eval(&model, &data, metric.as_deref()),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn print_json(value: &impl Serialize) -> std::result::Result<(), CliError> {
    let text = serde_json::to_string(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    println!("{text}");
    Ok(())
}

fn gen_data(config: &Path, out: &Path) -> std::result::Result<(), CliError> {
    let cfg = RunConfig::load(config)?;
    let spec = &cfg.data;
    let k = spec.num_classes;
    let counts = spec.class_counts();
    fs::create_dir_all(out).map_err(|e| CliError::Runtime(e.to_string()))?;

    let with_seed = |offset: u64| LtSpec {
        seed: spec.seed.wrapping_add(offset),
        ..spec.clone()
    };
    let train = generate_with_counts(spec, &counts)?;
    let val = generate_with_counts(&with_seed(0x5e1_0001), &vec![VAL_PER_CLASS; k])?;
    let test = generate_with_counts(&with_seed(0x5e1_0002), &vec![TEST_PER_CLASS; k])?;
    let unlabeled = generate_with_counts(&with_seed(0x5e1_0003), &counts)?.hide_labels();
    for (name, ds) in [
        ("train.csv", &train),
        ("val.csv", &val),
        ("test.csv", &test),
        ("unlabeled.csv", &unlabeled),
    ] {
        save_dataset(ds, out.join(name))?;
    }
    let manifest = json!({
        "spec": spec,
        "class_counts": counts,
        "files": {
            "train": {"path": "train.csv", "rows": train.len()},
            "val": {"path": "val.csv", "rows": val.len(), "per_class": VAL_PER_CLASS},
            "test": {"path": "test.csv", "rows": test.len(), "per_class": TEST_PER_CLASS},
            "unlabeled": {"path": "unlabeled.csv", "rows": unlabeled.len()},
        },
    });
    write_json(&out.join("manifest.json"), &manifest)?;
    Ok(())
}

fn train(
    config: &Path,
    data: &Path,
    out: &Path,
    policy: &str,
    init: Option<&Path>,
    wall_time: bool,
) -> std::result::Result<(), CliError> {
    let cfg = RunConfig::load(config)?;
    let mut trainer = cfg.trainer.clone();
    trainer.policy = PairPolicy::parse(policy)
        .ok_or_else(|| CliError::Usage(format!("unknown policy {policy:?}")))?;
    trainer.record_wall_time = wall_time;
    let k = cfg.data.num_classes;

    let load = |name: &str| {
        let path = data.join(name);
        let ds = load_dataset(&path, Some(k));
        input(&path, ds)
    };
    let train_set = load("train.csv")?;
    let val = load("val.csv")?;
    let unlabeled = match trainer.mode {
        TrainMode::Ssl => Some(load("unlabeled.csv")?.hide_labels()),
        TrainMode::Supervised => None,
    };
    let start = match init {
        Some(path) => input(path, LinearModel::load(path))?,
        None => fit_cross_entropy(
            &train_set,
            &LinearModel::zeros(train_set.dim(), k),
            &PretrainConfig {
                seed: trainer.seed,
                ..PretrainConfig::default()
            },
        )?,
    };
    let (model, history) = run_selmix(&trainer, &train_set, unlabeled.as_ref(), &val, &start)?;

    fs::create_dir_all(out).map_err(|e| CliError::Runtime(e.to_string()))?;
    let mut buf = Vec::new();
    history.write_jsonl(&mut buf)?;
    fs::write(out.join("history.jsonl"), buf).map_err(|e| CliError::Runtime(e.to_string()))?;
    model.save(out.join("final_model.csv"))?;
    let summary = json!({
        "config": trainer,
        "cycles": history.records.len(),
        "sgd_steps": history.sgd_steps,
        "pseudo_label_resamples": history.pseudo_label_resamples,
        "psi": history.final_eval.psi,
        "initial": Evaluation::of(&start, &val, &trainer.metric)?,
        "final": history.final_eval,
    });
    write_json(&out.join("summary.json"), &summary)?;
    Ok(())
}

fn simulate_policy(
    k: usize,
    horizon: usize,
    s: f64,
    policy: &str,
    generator: &str,
    seeds: u64,
) -> std::result::Result<(), CliError> {
    let policy = GamePolicy::parse(policy)
        .ok_or_else(|| CliError::Usage(format!("unknown policy {policy:?}")))?;
    let generator = GainGenerator::parse(generator)
        .ok_or_else(|| CliError::Usage(format!("unknown generator {generator:?}")))?;
    if seeds == 0 {
        return Err(CliError::Usage("seeds must be >= 1".into()));
    }
    let reports = (0..seeds)
        .into_par_iter()
        .map(|seed| {
            run_online_game(&OnlineGameConfig {
                num_classes: k,
                horizon,
                s,
                generator,
                policy,
                seed,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    for r in &reports {
        print_json(r)?;
    }
    print_json(&summarize_regret(&reports)?)
}

fn check_gain(
    stds: &[f64],
    seeds: u64,
    k: usize,
    dim: usize,
    metric: &str,
) -> std::result::Result<(), CliError> {
    let kind = MetricKind::from_name(metric)
        .ok_or_else(|| CliError::Usage(format!("unknown metric {metric:?}")))?;
    if stds.is_empty() || seeds == 0 {
        return Err(CliError::Usage(
            "need at least one within_std and one seed".into(),
        ));
    }
    let cfg = GainStudyConfig {
        num_classes: k,
        dim,
        metric: kind,
        ..GainStudyConfig::default()
    };
    let seed_list: Vec<u64> = (0..seeds).collect();
    let rows = gain_agreement_study(&cfg, stds, &seed_list)?;
    println!("within_std  median_rel  mean_rel   max_rel    pairs");
    for r in &rows {
        println!(
            "{:<10}  {:<10.4e}  {:<9.3e}  {:<9.3e}  {}",
            r.within_std, r.median_rel_error, r.mean_rel_error, r.max_rel_error, r.pairs
        );
    }
    let tightest = rows
        .iter()
        .min_by(|a, b| a.within_std.total_cmp(&b.within_std))
        .expect("nonempty");
    if tightest.median_rel_error > 0.15 {
        return Err(CliError::Runtime(format!(
            "median relative error {:.4} at within_std {} exceeds 0.15",
            tightest.median_rel_error, tightest.within_std
        )));
    }
    Ok(())
}

fn check_theory(check: TheoryCheck) -> std::result::Result<(), CliError> {
    match check {
        TheoryCheck::Convergence {
            alignment,
            horizon,
            seed,
        } => {
            let mut cfg = ConvergenceConfig::new(alignment, seed);
            cfg.horizon = horizon;
            let r = convergence_check(&cfg).map_err(|e| CliError::Usage(e.to_string()))?;
            print_json(&json!({
                "fitted_rate_exponent": r.fitted_rate_exponent,
                "bound_satisfied": r.bound_satisfied,
                "violations": r.violations,
                "r0": r.r0,
                "gamma": r.gamma,
            }))
        }
        TheoryCheck::Mixup {
            theta_scale,
            alpha,
            beta,
            seed,
        } => {
            let mut cfg = MixupRegConfig::new(theta_scale, seed);
            cfg.alpha_beta = (alpha, beta);
            let r = mixup_regularization_check(&cfg).map_err(|e| CliError::Usage(e.to_string()))?;
            print_json(&r)
        }
    }
}

/// Metrics of `model` on `data` as a JSON object.
pub fn evaluation_json(
    model: &LinearModel,
    data: &FeatureDataset,
    metric: Option<&MetricSpec>,
) -> Result<serde_json::Value> {
    let c = ConfusionMatrix::of_model(model, data)?;
    let k = data.num_classes();
    let neutral = LagrangeState::neutral();
    let plain = |kind| evaluate_metric(&MetricSpec::new(kind, k), &c, &neutral);
    let recalls = c.recalls();
    let coverages = c.coverages();
    let mut value = json!({
        "mean_recall": plain(MetricKind::MeanRecall),
        "min_recall": recalls.iter().copied().fold(f64::INFINITY, f64::min),
        "gmean": plain(MetricKind::GMean),
        "hmean": plain(MetricKind::HMean),
        "min_coverage": coverages.iter().copied().fold(f64::INFINITY, f64::min),
        "recalls": recalls,
        "coverages": coverages,
    });
    if let Some(spec) = metric {
        let ev = Evaluation::of(model, data, spec)?;
        value["metric"] = json!(spec.kind.name());
        value["psi"] = json!(ev.psi);
    }
    Ok(value)
}

fn eval(model: &Path, data: &Path, metric: Option<&str>) -> std::result::Result<(), CliError> {
    let w = input(model, LinearModel::load(model))?;
    let ds = input(data, load_dataset(data, Some(w.num_classes())))?;
    let spec = match metric {
        Some(name) => Some(MetricSpec::new(
            MetricKind::from_name(name)
                .ok_or_else(|| CliError::Usage(format!("unknown metric {name:?}")))?,
            w.num_classes(),
        )),
        None => None,
    };
    let value = evaluation_json(&w, &ds, spec.as_ref())?;
    let mut stdout = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut stdout, &value)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    writeln!(stdout).map_err(|e| CliError::Runtime(e.to_string()))?;
    Ok(())
}
