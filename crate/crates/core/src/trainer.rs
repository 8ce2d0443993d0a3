//! The SelMix fine-tuning loop.
//!
//! Each cycle evaluates the hard confusion matrix on the validation set,
//! refreshes the multipliers, builds the gain matrix and the pair policy, and
//! then runs `n` minibatch SGD steps on mixup samples whose class pairs are
//! drawn from that policy. In semi-supervised mode the second element of every
//! pair comes from the pseudo-labeled pool, which is relabeled after each cycle.

use std::io::Write;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::{
    class_centroids, fit_cross_entropy, sgd_mixup_step, LinearModel, MixupSample, PretrainConfig,
};
use crate::data::{generate_with_counts, FeatureDataset, LtSpec};
use crate::error::{Result, SelmixError};
use crate::gain::gain_matrix;
use crate::metrics::{evaluate_metric, update_lagrange, ConfusionMatrix, MetricSpec};
use crate::policy::{greedy_distribution, selmix_distribution, MixPolicy};
use crate::rng::{stream, Stream};

/// Diagonal floor applied to the validation confusion matrix before gradients.
const DIAGONAL_FLOOR: f64 = 1e-12;
/// Attempts at drawing a pair whose classes both have samples.
const MAX_PAIR_ATTEMPTS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Both mixup elements come from the labeled set.
    Supervised,
    /// First element labeled, second from the pseudo-labeled pool.
    Ssl,
}

/// How the pair distribution is built from the gain matrix each cycle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairPolicy {
    Selmix,
    Uniform,
    Greedy,
}

impl PairPolicy {
    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "selmix" => Some(PairPolicy::Selmix),
            "uniform" => Some(PairPolicy::Uniform),
            "greedy" => Some(PairPolicy::Greedy),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub cycles: usize,
    pub sgd_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    /// Inverse temperature applied to the gains.
    pub s: f64,
    pub beta_min: f64,
    pub metric: MetricSpec,
    pub mode: TrainMode,
    pub seed: u64,
    pub mask_negative: bool,
    pub policy: PairPolicy,
    /// Measure per-cycle wall time. Off by default so that histories are
    /// reproducible byte for byte.
    pub record_wall_time: bool,
}

impl TrainerConfig {
    pub fn new(metric: MetricSpec) -> Self {
        TrainerConfig {
            cycles: 200,
            sgd_steps: 50,
            batch_size: 64,
            lr: 0.5,
            lr_schedule: LrSchedule::Cosine,
            s: 10.0,
            beta_min: 0.5,
            metric,
            mode: TrainMode::Supervised,
            seed: 0,
            mask_negative: true,
            policy: PairPolicy::Selmix,
            record_wall_time: false,
        }
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.cycles < 1 {
            return Err(SelmixError::invalid("cycles must be >= 1"));
        }
        if self.batch_size < 1 {
            return Err(SelmixError::invalid("batch_size must be >= 1"));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(SelmixError::invalid("lr must be finite and >= 0"));
        }
        if !(self.s >= 0.0) || !self.s.is_finite() {
            return Err(SelmixError::invalid("s must be finite and >= 0"));
        }
        if !(0.0..=1.0).contains(&self.beta_min) {
            return Err(SelmixError::invalid("beta_min must lie in [0, 1]"));
        }
        self.metric.validate(num_classes)
    }

    /// Mean of the mixing weight `β ~ U[β_min, 1]`.
    pub fn beta_bar(&self) -> f64 {
        (1.0 + self.beta_min) / 2.0
    }

    pub fn total_steps(&self) -> usize {
        self.cycles * self.sgd_steps
    }

    fn lr_at(&self, step: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => cosine_lr(self.lr, step, self.total_steps().max(1)),
        }
    }
}

/// `base · (1 + cos(π · step / total)) / 2`.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    let frac = step.min(total) as f64 / total.max(1) as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Relabels every sample with the model's argmax prediction.
pub fn refresh_pseudo_labels(
    model: &LinearModel,
    unlabeled: &FeatureDataset,
) -> Result<FeatureDataset> {
    let preds = model.predict_all(unlabeled)?;
    unlabeled.with_pseudo_labels(preds)
}

/// One validation pass, taken at the start of a cycle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleRecord {
    /// 1-based cycle index.
    pub t: usize,
    pub psi: f64,
    pub recalls: Vec<f64>,
    pub coverages: Vec<f64>,
    pub lambdas: Vec<f64>,
    pub gain_max: f64,
    pub gain_min: f64,
    pub policy_entropy: f64,
    pub wall_ms: f64,
}

/// Validation metrics of a model outside the cycle loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub psi: f64,
    pub mean_recall: f64,
    pub min_recall: f64,
    pub min_coverage: f64,
    pub recalls: Vec<f64>,
    pub coverages: Vec<f64>,
    pub lambdas: Vec<f64>,
}

impl Evaluation {
    pub fn of(model: &LinearModel, ds: &FeatureDataset, spec: &MetricSpec) -> Result<Self> {
        let c = ConfusionMatrix::of_model(model, ds)?;
        let lam = update_lagrange(spec, &c);
        let recalls = c.recalls();
        let coverages = c.coverages();
        Ok(Evaluation {
            psi: evaluate_metric(spec, &c, &lam),
            mean_recall: recalls.iter().sum::<f64>() / recalls.len() as f64,
            min_recall: recalls.iter().copied().fold(f64::INFINITY, f64::min),
            min_coverage: coverages.iter().copied().fold(f64::INFINITY, f64::min),
            recalls,
            coverages,
            lambdas: lam.lambdas,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunHistory {
    pub records: Vec<CycleRecord>,
    /// Validation metrics of the returned model.
    pub final_eval: Evaluation,
    pub sgd_steps: usize,
    /// Pair draws rejected because the pseudo-labeled class was empty.
    pub pseudo_label_resamples: usize,
}

impl RunHistory {
    /// One JSON object per cycle, newline terminated.
    pub fn write_jsonl(&self, out: &mut impl Write) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut *out, r)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Index sets of the pool that supplies the second pair element.
struct Pools<'a> {
    first: &'a FeatureDataset,
    second: &'a FeatureDataset,
}

impl Pools<'_> {
    fn draw_pair<R: Rng>(
        &self,
        policy: &MixPolicy,
        rng: &mut R,
        pseudo_resamples: &mut usize,
    ) -> Result<(usize, usize)> {
        let ssl = !std::ptr::eq(self.first, self.second);
        for _ in 0..MAX_PAIR_ATTEMPTS {
            let (i, j) = policy.sample_pair(rng);
            if self.first.class_index(i).is_empty() {
                continue;
            }
            if self.second.class_index(j).is_empty() {
                if ssl {
                    *pseudo_resamples += 1;
                }
                continue;
            }
            return Ok((i, j));
        }
        Err(SelmixError::Sampling(format!(
            "no class pair with samples on both sides after {MAX_PAIR_ATTEMPTS} draws"
        )))
    }
}

/// Runs the fine-tuning loop from `init`.
pub fn run_selmix(
    cfg: &TrainerConfig,
    train: &FeatureDataset,
    unlabeled: Option<&FeatureDataset>,
    validation: &FeatureDataset,
    init: &LinearModel,
) -> Result<(LinearModel, RunHistory)> {
    let k = init.num_classes();
    cfg.validate(k)?;
    for ds in [train, validation].into_iter().chain(unlabeled) {
        if ds.num_classes() != k {
            return Err(SelmixError::DimensionMismatch {
                expected: k,
                got: ds.num_classes(),
            });
        }
        if ds.dim() != init.dim() {
            return Err(SelmixError::DimensionMismatch {
                expected: init.dim(),
                got: ds.dim(),
            });
        }
    }
    validation.require_all_classes()?;
    let centroids = class_centroids(validation)?;
    let mut pseudo = match (cfg.mode, unlabeled) {
        (TrainMode::Ssl, Some(u)) => Some(refresh_pseudo_labels(init, u)?),
        (TrainMode::Ssl, None) => {
            return Err(SelmixError::invalid("ssl mode requires an unlabeled set"))
        }
        (TrainMode::Supervised, _) => None,
    };
    if train.is_empty() {
        return Err(SelmixError::invalid("empty training set"));
    }

    let mut pair_rng = stream(cfg.seed, Stream::PairSampling);
    let mut beta_rng = stream(cfg.seed, Stream::Beta);
    let mut elem_rng = stream(cfg.seed, Stream::BatchElement);
    let beta_bar = cfg.beta_bar();

    let mut model = init.clone();
    let mut records = Vec::with_capacity(cfg.cycles);
    let mut step = 0;
    let mut pseudo_resamples = 0;
    for t in 1..=cfg.cycles {
        let started = Instant::now();
        let c = ConfusionMatrix::of_model(&model, validation)?;
        let lam = update_lagrange(&cfg.metric, &c);
        let psi = evaluate_metric(&cfg.metric, &c, &lam);
        let gains = gain_matrix(
            &model,
            &centroids,
            &c.with_min_diagonal(DIAGONAL_FLOOR),
            &cfg.metric,
            &lam,
            beta_bar,
        )?;
        let policy = match cfg.policy {
            PairPolicy::Selmix => selmix_distribution(&gains, cfg.s, cfg.mask_negative),
            PairPolicy::Uniform => MixPolicy::uniform(k),
            PairPolicy::Greedy => greedy_distribution(&gains),
        };

        let pools = Pools {
            first: train,
            second: pseudo.as_ref().unwrap_or(train),
        };
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.sgd_steps {
            batch.clear();
            for _ in 0..cfg.batch_size {
                let (i, j) = pools.draw_pair(&policy, &mut pair_rng, &mut pseudo_resamples)?;
                let a = pick(pools.first.class_index(i), &mut elem_rng);
                let b = pick(pools.second.class_index(j), &mut elem_rng);
                let beta = beta_rng.random_range(cfg.beta_min..=1.0);
                batch.push(MixupSample {
                    feat_a: pools.first.row(a),
                    feat_b: pools.second.row(b),
                    label: i,
                    beta,
                });
            }
            model = sgd_mixup_step(&model, &batch, cfg.lr_at(step))?;
            step += 1;
        }
        drop(batch);

        if let (Some(p), Some(u)) = (pseudo.as_mut(), unlabeled) {
            *p = refresh_pseudo_labels(&model, u)?;
        }
        log::debug!("cycle {t}: psi={psi:.5} gain_max={:.4e}", gains.max());
        records.push(CycleRecord {
            t,
            psi,
            recalls: c.recalls(),
            coverages: c.coverages(),
            lambdas: lam.lambdas,
            gain_max: gains.max(),
            gain_min: gains.min(),
            policy_entropy: policy.entropy(),
            wall_ms: if cfg.record_wall_time {
                started.elapsed().as_secs_f64() * 1e3
            } else {
                0.0
            },
        });
    }
    let final_eval = Evaluation::of(&model, validation, &cfg.metric)?;
    Ok((
        model,
        RunHistory {
            records,
            final_eval,
            sgd_steps: step,
            pseudo_label_resamples: pseudo_resamples,
        },
    ))
}

fn pick<R: Rng>(indices: &[usize], rng: &mut R) -> usize {
    indices[rng.random_range(0..indices.len())]
}

/// Long-tailed train set, balanced validation and test sets drawn from the
/// same class means, and a cross-entropy pre-trained starting model.
#[derive(Debug, Clone)]
pub struct Benchmark {
    pub train: FeatureDataset,
    pub validation: FeatureDataset,
    pub test: FeatureDataset,
    pub init: LinearModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSpec {
    pub data: LtSpec,
    pub val_per_class: usize,
    pub test_per_class: usize,
    pub pretrain: PretrainConfig,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        BenchmarkSpec {
            data: LtSpec::default(),
            val_per_class: 100,
            test_per_class: 300,
            pretrain: PretrainConfig::default(),
        }
    }
}

impl BenchmarkSpec {
    /// Same spec with every seed derived from `seed`.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut out = self.clone();
        out.data.seed = seed;
        out.pretrain.seed = seed;
        out
    }
}

impl Benchmark {
    pub fn build(spec: &BenchmarkSpec) -> Result<Self> {
        spec.data.validate()?;
        let k = spec.data.num_classes;
        let train = generate_with_counts(&spec.data, &spec.data.class_counts())?;
        // distinct sub-seeds keep the three sets independent
        let mut val_spec = spec.data.clone();
        val_spec.seed = spec.data.seed.wrapping_add(0x5e1_0001);
        let validation = generate_with_counts(&val_spec, &vec![spec.val_per_class; k])?;
        let mut test_spec = spec.data.clone();
        test_spec.seed = spec.data.seed.wrapping_add(0x5e1_0002);
        let test = generate_with_counts(&test_spec, &vec![spec.test_per_class; k])?;
        let init = fit_cross_entropy(
            &train,
            &LinearModel::zeros(spec.data.dim, k),
            &spec.pretrain,
        )?;
        Ok(Benchmark {
            train,
            validation,
            test,
            init,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_longtail;
    use crate::metrics::MetricKind;

    fn small_bench(seed: u64) -> Benchmark {
        let spec = BenchmarkSpec {
            data: LtSpec {
                num_classes: 4,
                dim: 6,
                head_count: 120,
                rho: 10.0,
                ..LtSpec::default()
            },
            val_per_class: 20,
            test_per_class: 20,
            pretrain: PretrainConfig {
                steps: 200,
                ..PretrainConfig::default()
            },
        };
        Benchmark::build(&spec.with_seed(seed)).unwrap()
    }

    fn small_cfg(kind: MetricKind) -> TrainerConfig {
        let mut cfg = TrainerConfig::new(MetricSpec::new(kind, 4));
        cfg.cycles = 3;
        cfg.sgd_steps = 5;
        cfg.batch_size = 8;
        cfg
    }

    #[test]
    fn cosine_schedule_points() {
        assert_eq!(cosine_lr(0.2, 0, 100), 0.2);
        assert!(cosine_lr(0.2, 100, 100).abs() < 1e-17);
        assert!((cosine_lr(0.2, 50, 100) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn zero_steps_returns_init() {
        let b = small_bench(1);
        let mut cfg = small_cfg(MetricKind::MeanRecall);
        cfg.cycles = 1;
        cfg.sgd_steps = 0;
        let (m, h) = run_selmix(&cfg, &b.train, None, &b.validation, &b.init).unwrap();
        assert_eq!(m, b.init);
        assert_eq!(h.records.len(), 1);
        assert_eq!(h.sgd_steps, 0);
    }

    #[test]
    fn zero_lr_keeps_model_and_metric() {
        let b = small_bench(2);
        let mut cfg = small_cfg(MetricKind::MinRecall);
        cfg.lr = 0.0;
        let (m, h) = run_selmix(&cfg, &b.train, None, &b.validation, &b.init).unwrap();
        assert_eq!(m, b.init);
        assert!(h.records.iter().all(|r| r.psi == h.records[0].psi));
        assert_eq!(h.final_eval.psi, h.records[0].psi);
    }

    #[test]
    fn budget_and_record_count() {
        let b = small_bench(3);
        let cfg = small_cfg(MetricKind::GMean);
        let (_, h) = run_selmix(&cfg, &b.train, None, &b.validation, &b.init).unwrap();
        assert_eq!(h.records.len(), 3);
        assert_eq!(h.sgd_steps, 15);
        assert_eq!(
            h.records.iter().map(|r| r.t).collect::<Vec<_>>(),
            vec![1, 2, 3]
        );
    }

    #[test]
    fn same_seed_same_history() {
        let b = small_bench(4);
        let cfg = small_cfg(MetricKind::MeanRecallCoverage);
        let run = || {
            let (m, h) = run_selmix(&cfg, &b.train, None, &b.validation, &b.init).unwrap();
            let mut buf = Vec::new();
            h.write_jsonl(&mut buf).unwrap();
            (m, buf)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn ssl_requires_unlabeled() {
        let b = small_bench(5);
        let mut cfg = small_cfg(MetricKind::MeanRecall);
        cfg.mode = TrainMode::Ssl;
        assert!(run_selmix(&cfg, &b.train, None, &b.validation, &b.init).is_err());
        let unl = b.test.clone().hide_labels();
        let (_, h) = run_selmix(&cfg, &b.train, Some(&unl), &b.validation, &b.init).unwrap();
        assert_eq!(h.records.len(), 3);
    }

    #[test]
    fn missing_validation_class_is_rejected() {
        let b = small_bench(6);
        let keep: Vec<usize> = (0..b.validation.len())
            .filter(|&n| b.validation.label(n) != 2)
            .collect();
        let val = b.validation.subset(&keep);
        let cfg = small_cfg(MetricKind::MeanRecall);
        assert!(matches!(
            run_selmix(&cfg, &b.train, None, &val, &b.init),
            Err(SelmixError::ClassAbsent(2))
        ));
    }

    #[test]
    fn pseudo_labels_from_zero_model_are_class_zero() {
        let ds = generate_longtail(&LtSpec {
            num_classes: 3,
            dim: 4,
            head_count: 10,
            rho: 1.0,
            ..LtSpec::default()
        })
        .unwrap()
        .hide_labels();
        let p = refresh_pseudo_labels(&LinearModel::zeros(4, 3), &ds).unwrap();
        assert!(p.labels().iter().all(|&y| y == 0));
        assert_eq!(p.class_index(0).len(), ds.len());
    }

    #[test]
    fn pseudo_labels_match_latents_for_separable_clusters() {
        let spec = LtSpec {
            num_classes: 3,
            dim: 3,
            head_count: 30,
            rho: 1.0,
            cluster_separation: 5.0,
            within_std: 0.05,
            seed: 9,
        };
        let ds = generate_longtail(&spec).unwrap().hide_labels();
        // W = identity scores each sample by its projection on each mean
        let model =
            LinearModel::from_row_slice(3, 3, &[1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let p = refresh_pseudo_labels(&model, &ds).unwrap();
        assert_eq!(p.pseudo_label_accuracy(), Some(1.0));
        let again = refresh_pseudo_labels(&model, &p).unwrap();
        assert_eq!(again.labels(), p.labels());
    }
}
