//! Linear classifier over frozen features.
//!
//! Logits are `Wᵀx` for a weight matrix `W` of shape d×K. All softmax and
//! log-softmax evaluations subtract the maximum logit first.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::FeatureDataset;
use crate::error::{Result, SelmixError};
use crate::rng::{stream, Stream};

#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    weights: DMatrix<f64>,
}

impl LinearModel {
    pub fn zeros(dim: usize, classes: usize) -> Self {
        LinearModel {
            weights: DMatrix::zeros(dim, classes),
        }
    }

    pub fn from_weights(weights: DMatrix<f64>) -> Result<Self> {
        if weights.nrows() < 1 || weights.ncols() < 2 {
            return Err(SelmixError::invalid(
                "weights must be d×K with d >= 1, K >= 2",
            ));
        }
        if weights.iter().any(|v| !v.is_finite()) {
            return Err(SelmixError::NonFinite("weights"));
        }
        Ok(LinearModel { weights })
    }

    /// Builds a model from row-major d×K values.
    pub fn from_row_slice(dim: usize, classes: usize, values: &[f64]) -> Result<Self> {
        if values.len() != dim * classes {
            return Err(SelmixError::DimensionMismatch {
                expected: dim * classes,
                got: values.len(),
            });
        }
        Self::from_weights(DMatrix::from_row_slice(dim, classes, values))
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    pub fn dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn num_classes(&self) -> usize {
        self.weights.ncols()
    }

    fn check_dim(&self, len: usize) -> Result<()> {
        if len != self.dim() {
            return Err(SelmixError::DimensionMismatch {
                expected: self.dim(),
                got: len,
            });
        }
        Ok(())
    }

    /// `Wᵀ·feature`.
    pub fn logits(&self, feature: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(feature.len())?;
        Ok(self.logits_unchecked(feature))
    }

    pub(crate) fn logits_unchecked(&self, feature: &[f64]) -> Vec<f64> {
        let d = self.dim();
        self.weights
            .as_slice()
            .chunks_exact(d)
            .map(|col| col.iter().zip(feature).map(|(w, x)| w * x).sum())
            .collect()
    }

    /// Argmax class; ties go to the smallest index.
    pub fn predict(&self, feature: &[f64]) -> Result<usize> {
        Ok(argmax(&self.logits(feature)?))
    }

    pub fn predict_all(&self, ds: &FeatureDataset) -> Result<Vec<usize>> {
        self.check_dim(ds.dim())?;
        Ok(ds
            .rows()
            .map(|x| argmax(&self.logits_unchecked(x)))
            .collect())
    }

    /// Writes `W` as `d` rows of `K` comma-separated values.
    pub fn write_csv(&self, out: &mut impl Write) -> Result<()> {
        for r in 0..self.dim() {
            let row: Vec<String> = (0..self.num_classes())
                .map(|c| self.weights[(r, c)].to_string())
                .collect();
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = BufWriter::new(fs::File::create(path)?);
        self.write_csv(&mut out)?;
        out.flush()?;
        Ok(())
    }

    /// Parses the format of [`LinearModel::write_csv`].
    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut values = Vec::new();
        let mut width = None;
        let mut rows = 0;
        for (idx, raw) in text.lines().enumerate() {
            let raw = raw.trim();
            if raw.is_empty() {
                continue;
            }
            let row = raw
                .split(',')
                .map(|f| {
                    f.trim().parse::<f64>().map_err(|_| SelmixError::Parse {
                        line: idx + 1,
                        message: format!("invalid number {f:?}"),
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            if *width.get_or_insert(row.len()) != row.len() {
                return Err(SelmixError::Parse {
                    line: idx + 1,
                    message: "ragged weight matrix".into(),
                });
            }
            values.extend(row);
            rows += 1;
        }
        LinearModel::from_row_slice(rows, width.unwrap_or(0), &values)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse_csv(&fs::read_to_string(path)?)
    }

    /// `self + scale · direction`.
    pub fn perturbed(&self, direction: &DMatrix<f64>, scale: f64) -> LinearModel {
        LinearModel {
            weights: &self.weights + direction * scale,
        }
    }
}

/// Index of the largest value, smallest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = k;
        }
    }
    best
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln()
}

/// Softmax cross-entropy `log Σ e^{z} − z_label`.
pub fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    (log_sum_exp(logits) - logits[label]).max(0.0)
}

/// One feature-space mixup: `beta·feat_a + (1−beta)·feat_b`, labeled with the
/// class of `feat_a`.
#[derive(Debug, Clone, Copy)]
pub struct MixupSample<'a> {
    pub feat_a: &'a [f64],
    pub feat_b: &'a [f64],
    pub label: usize,
    pub beta: f64,
}

impl MixupSample<'_> {
    pub fn mixed(&self) -> Vec<f64> {
        mix(self.feat_a, self.feat_b, self.beta)
    }
}

fn mix(a: &[f64], b: &[f64], beta: f64) -> Vec<f64> {
    a.iter()
        .zip(b)
        .map(|(x, y)| beta * x + (1.0 - beta) * y)
        .collect()
}

fn check_sample(model: &LinearModel, sample: &MixupSample<'_>) -> Result<()> {
    model.check_dim(sample.feat_a.len())?;
    model.check_dim(sample.feat_b.len())?;
    if sample.label >= model.num_classes() {
        return Err(SelmixError::LabelOutOfRange {
            label: sample.label,
            classes: model.num_classes(),
        });
    }
    Ok(())
}

pub fn mixup_loss(model: &LinearModel, sample: &MixupSample<'_>) -> Result<f64> {
    check_sample(model, sample)?;
    Ok(cross_entropy(
        &model.logits_unchecked(&sample.mixed()),
        sample.label,
    ))
}

/// Adds `scale · ζ (p − e_y)ᵀ` (the loss gradient at mixed feature ζ) into `acc`.
fn accumulate_ce_grad(
    model: &LinearModel,
    mixed: &[f64],
    label: usize,
    scale: f64,
    acc: &mut DMatrix<f64>,
) {
    let mut p = softmax(&model.logits_unchecked(mixed));
    p[label] -= 1.0;
    let d = model.dim();
    for (col, pk) in acc.as_mut_slice().chunks_exact_mut(d).zip(&p) {
        for (a, x) in col.iter_mut().zip(mixed) {
            *a += scale * pk * x;
        }
    }
}

/// `∂ mixup_loss / ∂W` for one sample.
pub fn mixup_loss_grad(model: &LinearModel, sample: &MixupSample<'_>) -> Result<DMatrix<f64>> {
    check_sample(model, sample)?;
    let mut g = DMatrix::zeros(model.dim(), model.num_classes());
    accumulate_ce_grad(model, &sample.mixed(), sample.label, 1.0, &mut g);
    Ok(g)
}

/// Per-class means of validation features.
#[derive(Debug, Clone, PartialEq)]
pub struct CentroidSet {
    centroids: Vec<Vec<f64>>,
}

impl CentroidSet {
    pub fn new(centroids: Vec<Vec<f64>>) -> Result<Self> {
        let d = centroids.first().map_or(0, Vec::len);
        if centroids.is_empty() || d == 0 {
            return Err(SelmixError::invalid("centroid set must be nonempty"));
        }
        if let Some(bad) = centroids.iter().find(|c| c.len() != d) {
            return Err(SelmixError::DimensionMismatch {
                expected: d,
                got: bad.len(),
            });
        }
        Ok(CentroidSet { centroids })
    }

    pub fn get(&self, k: usize) -> &[f64] {
        &self.centroids[k]
    }

    pub fn len(&self) -> usize {
        self.centroids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centroids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.centroids[0].len()
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.centroids.iter().map(Vec::as_slice)
    }
}

pub fn class_centroids(validation: &FeatureDataset) -> Result<CentroidSet> {
    let d = validation.dim();
    let centroids = (0..validation.num_classes())
        .map(|k| {
            let idx = validation.class_index(k);
            if idx.is_empty() {
                return Err(SelmixError::EmptyClass(k));
            }
            let mut sum = vec![0.0; d];
            for &n in idx {
                for (s, x) in sum.iter_mut().zip(validation.row(n)) {
                    *s += x;
                }
            }
            Ok(sum.into_iter().map(|s| s / idx.len() as f64).collect())
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    CentroidSet::new(centroids)
}

/// The mixed centroid `ζ = beta_bar·z_i + (1−beta_bar)·z_j`.
pub fn mixed_centroid(centroids: &CentroidSet, i: usize, j: usize, beta_bar: f64) -> Vec<f64> {
    mix(centroids.get(i), centroids.get(j), beta_bar)
}

/// `V_ij = −∂L/∂W` of the centroid mixup loss, i.e. `ζ (e_i − p)ᵀ` with
/// `p = softmax(Wᵀζ)`.
pub fn direction_matrix(
    model: &LinearModel,
    centroids: &CentroidSet,
    i: usize,
    j: usize,
    beta_bar: f64,
) -> DMatrix<f64> {
    let zeta = mixed_centroid(centroids, i, j, beta_bar);
    let mut v = DMatrix::zeros(model.dim(), model.num_classes());
    accumulate_ce_grad(model, &zeta, i, -1.0, &mut v);
    v
}

/// `W − lr · mean_b ∂L_b/∂W` over the batch.
pub fn sgd_mixup_step(
    model: &LinearModel,
    batch: &[MixupSample<'_>],
    lr: f64,
) -> Result<LinearModel> {
    if batch.is_empty() {
        return Err(SelmixError::invalid("empty mixup batch"));
    }
    let mut grad = DMatrix::zeros(model.dim(), model.num_classes());
    let scale = 1.0 / batch.len() as f64;
    for sample in batch {
        check_sample(model, sample)?;
        accumulate_ce_grad(model, &sample.mixed(), sample.label, scale, &mut grad);
    }
    Ok(model.perturbed(&grad, -lr))
}

/// Settings for plain cross-entropy SGD, used to produce the pre-trained model
/// that mixup fine-tuning starts from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 2000,
            batch_size: 64,
            lr: 0.5,
            seed: 0,
        }
    }
}

/// Minibatch SGD on the instance-uniform cross-entropy (no rebalancing), so on
/// long-tailed data the result is biased towards head classes.
pub fn fit_cross_entropy(
    train: &FeatureDataset,
    init: &LinearModel,
    cfg: &PretrainConfig,
) -> Result<LinearModel> {
    if train.is_empty() {
        return Err(SelmixError::EmptyEvaluationSet);
    }
    init.check_dim(train.dim())?;
    let mut rng = stream(cfg.seed, Stream::BatchElement);
    let mut model = init.clone();
    let batch = cfg.batch_size.max(1);
    for _ in 0..cfg.steps {
        let mut grad = DMatrix::zeros(model.dim(), model.num_classes());
        for _ in 0..batch {
            let n = rng.random_range(0..train.len());
            accumulate_ce_grad(
                &model,
                train.row(n),
                train.label(n),
                1.0 / batch as f64,
                &mut grad,
            );
        }
        model = model.perturbed(&grad, -cfg.lr);
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(dim: usize, k: usize, vals: &[f64]) -> LinearModel {
        LinearModel::from_row_slice(dim, k, vals).unwrap()
    }

    #[test]
    fn model_csv_round_trip() {
        let m = model(2, 3, &[0.1, -2.5e-17, 3.0, 1.0 / 3.0, 0.0, -7.25]);
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        let back = LinearModel::parse_csv(std::str::from_utf8(&buf).unwrap()).unwrap();
        assert_eq!(back, m);
        assert!(LinearModel::parse_csv("1,2\n3\n").is_err());
        assert!(LinearModel::parse_csv("1,x\n").is_err());
    }

    #[test]
    fn logits_basic_cases() {
        assert_eq!(
            LinearModel::zeros(3, 4).logits(&[1.0, 2.0, 3.0]).unwrap(),
            vec![0.0; 4]
        );
        let m = model(1, 2, &[1.0, -1.0]);
        assert_eq!(m.logits(&[2.0]).unwrap(), vec![2.0, -2.0]);
        assert_eq!(m.logits(&[6.0]).unwrap(), vec![6.0, -6.0]);
        assert!(matches!(
            m.logits(&[1.0, 2.0]),
            Err(SelmixError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn zero_model_loss_is_log_k() {
        let m = LinearModel::zeros(2, 5);
        let s = MixupSample {
            feat_a: &[1.0, 2.0],
            feat_b: &[-3.0, 0.5],
            label: 3,
            beta: 0.7,
        };
        assert_eq!(mixup_loss(&m, &s).unwrap(), 5f64.ln());
    }

    #[test]
    fn beta_one_is_plain_cross_entropy() {
        let m = model(2, 3, &[0.3, -0.2, 1.0, 0.5, 0.1, -0.7]);
        let a = [0.4, -1.2];
        let s = MixupSample {
            feat_a: &a,
            feat_b: &[9.0, 9.0],
            label: 1,
            beta: 1.0,
        };
        let plain = cross_entropy(&m.logits(&a).unwrap(), 1);
        assert!((mixup_loss(&m, &s).unwrap() - plain).abs() < 1e-15);
    }

    #[test]
    fn two_class_margin_two_loss() {
        let m = model(1, 2, &[1.0, -1.0]);
        let s = MixupSample {
            feat_a: &[1.0],
            feat_b: &[1.0],
            label: 0,
            beta: 0.6,
        };
        let expected = (1.0 + (-2f64).exp()).ln();
        assert!((mixup_loss(&m, &s).unwrap() - expected).abs() < 1e-15);
        assert!((expected - 0.12693).abs() < 1e-5);
    }

    #[test]
    fn huge_logits_stay_finite() {
        let m = model(1, 2, &[1e4, -1e4]);
        let s = MixupSample {
            feat_a: &[1.0],
            feat_b: &[1.0],
            label: 1,
            beta: 1.0,
        };
        let loss = mixup_loss(&m, &s).unwrap();
        assert!((loss - 2e4).abs() < 1e-9);
    }

    #[test]
    fn centroids_are_class_means() {
        let ds = FeatureDataset::new(1, 2, vec![0.0, 2.0, 5.0], vec![0, 0, 1]).unwrap();
        let c = class_centroids(&ds).unwrap();
        assert_eq!(c.get(0), &[1.0]);
        assert_eq!(c.get(1), &[5.0]);
        let missing = FeatureDataset::new(1, 3, vec![0.0, 2.0], vec![0, 1]).unwrap();
        assert!(matches!(
            class_centroids(&missing),
            Err(SelmixError::EmptyClass(2))
        ));
    }

    #[test]
    fn direction_hand_case() {
        let m = LinearModel::zeros(1, 2);
        let c = CentroidSet::new(vec![vec![1.0], vec![1.0]]).unwrap();
        let v = direction_matrix(&m, &c, 0, 1, 0.75);
        assert!((v[(0, 0)] - 0.5).abs() < 1e-15);
        assert!((v[(0, 1)] + 0.5).abs() < 1e-15);
    }

    #[test]
    fn direction_vanishes_for_confident_model() {
        let m = model(1, 2, &[200.0, -200.0]);
        let c = CentroidSet::new(vec![vec![1.0], vec![1.0]]).unwrap();
        let v = direction_matrix(&m, &c, 0, 1, 0.75);
        assert!(v.iter().all(|x| x.abs() < 1e-100));
    }

    #[test]
    fn zero_lr_and_zero_gradient_leave_model_unchanged() {
        let m = model(2, 2, &[0.3, -0.1, 0.2, 0.4]);
        let s = MixupSample {
            feat_a: &[1.0, 0.0],
            feat_b: &[0.0, 1.0],
            label: 0,
            beta: 0.8,
        };
        assert_eq!(sgd_mixup_step(&m, &[s], 0.0).unwrap(), m);

        let confident = model(1, 2, &[100.0, -100.0]);
        let s = MixupSample {
            feat_a: &[1.0],
            feat_b: &[1.0],
            label: 0,
            beta: 1.0,
        };
        let next = sgd_mixup_step(&confident, &[s], 1.0).unwrap();
        assert!((next.weights() - confident.weights()).amax() < 1e-12);
        assert!(sgd_mixup_step(&m, &[], 0.1).is_err());
    }

    #[test]
    fn single_sample_step_matches_direction_matrix() {
        let m = model(1, 2, &[0.2, -0.4]);
        let (a, b) = ([1.5], [-0.5]);
        let beta = 0.7;
        let s = MixupSample {
            feat_a: &a,
            feat_b: &b,
            label: 0,
            beta,
        };
        let lr = 0.3;
        let next = sgd_mixup_step(&m, &[s], lr).unwrap();
        let c = CentroidSet::new(vec![a.to_vec(), b.to_vec()]).unwrap();
        let v = direction_matrix(&m, &c, 0, 1, beta);
        let expected = m.weights() + v * lr;
        assert!((next.weights() - expected).amax() < 1e-15);
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }
}
