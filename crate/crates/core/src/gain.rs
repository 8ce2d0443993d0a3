//! Gain matrix: the first-order change in `ψ` produced by a step along each
//! class-pair mixup direction `V_ij`.
//!
//! With `D = ∂ψ/∂C̃` and class centroids `z_k`,
//!
//! ```text
//! G_ij = Σ_{k,l} D_kl · (V_ij[:, l] · z_k)
//! ```
//!
//! `V_ij = ζ (e_i − p)ᵀ` is rank one, so `V_ij[:, l] · z_k = (ζ·z_k)(δ_il − p_l)`
//! and `G_ij = r_i − r·p` with `r = (Zζ)ᵀ D`. Precomputing the centroid Gram
//! matrix `Γ = Z Zᵀ`, `B = Γ D` and the centroid logits `L = Z W` makes every
//! pair O(K), for O(K³ + K²d) overall.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{class_centroids, direction_matrix, softmax, CentroidSet, LinearModel};
use crate::data::{generate_with_counts, FeatureDataset, LtSpec};
use crate::error::{Result, SelmixError};
use crate::metrics::{
    evaluate_metric, metric_grad_unconstrained, soft_confusion, ConfusionMatrix, LagrangeState,
    MetricKind, MetricSpec,
};
use crate::rng::{stream, Stream};

#[derive(Debug, Clone, PartialEq)]
pub struct GainMatrix {
    values: DMatrix<f64>,
}

impl GainMatrix {
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(SelmixError::NonFinite("gain matrix"));
        }
        Ok(GainMatrix { values })
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[(i, j)]
    }

    pub fn num_classes(&self) -> usize {
        self.values.nrows()
    }

    pub fn max(&self) -> f64 {
        self.values.max()
    }

    pub fn min(&self) -> f64 {
        self.values.min()
    }
}

/// Gains for every pair from a precomputed `D = ∂ψ/∂C̃`.
pub fn gain_matrix_from_grad(
    model: &LinearModel,
    centroids: &CentroidSet,
    dgrad: &DMatrix<f64>,
    beta_bar: f64,
) -> Result<GainMatrix> {
    let k = model.num_classes();
    if centroids.len() != k || dgrad.nrows() != k || dgrad.ncols() != k {
        return Err(SelmixError::DimensionMismatch {
            expected: k,
            got: centroids.len(),
        });
    }
    if centroids.dim() != model.dim() {
        return Err(SelmixError::DimensionMismatch {
            expected: model.dim(),
            got: centroids.dim(),
        });
    }
    let z = DMatrix::from_fn(k, model.dim(), |r, c| centroids.get(r)[c]);
    let logits = &z * model.weights();
    let gram = &z * z.transpose();
    let b = &gram * dgrad;

    let mut g = DMatrix::zeros(k, k);
    let mut mixed_logits = vec![0.0; k];
    for i in 0..k {
        for j in 0..k {
            for (l, m) in mixed_logits.iter_mut().enumerate() {
                *m = beta_bar * logits[(i, l)] + (1.0 - beta_bar) * logits[(j, l)];
            }
            let p = softmax(&mixed_logits);
            let r = |l: usize| beta_bar * b[(i, l)] + (1.0 - beta_bar) * b[(j, l)];
            let rp: f64 = p.iter().enumerate().map(|(l, pl)| r(l) * pl).sum();
            g[(i, j)] = r(i) - rp;
        }
    }
    GainMatrix::new(g)
}

/// Gain matrix for `spec` at confusion matrix `c` (multipliers held fixed).
pub fn gain_matrix(
    model: &LinearModel,
    centroids: &CentroidSet,
    c: &ConfusionMatrix,
    spec: &MetricSpec,
    lam: &LagrangeState,
    beta_bar: f64,
) -> Result<GainMatrix> {
    let dgrad = metric_grad_unconstrained(spec, c, lam)?;
    gain_matrix_from_grad(model, centroids, &dgrad, beta_bar)
}

/// Central-difference directional derivative of `ψ(soft_confusion(W))` along
/// `V_ij`, with the multipliers held fixed.
#[allow(clippy::too_many_arguments)]
pub fn gain_fd_oracle(
    model: &LinearModel,
    validation: &FeatureDataset,
    spec: &MetricSpec,
    lam: &LagrangeState,
    centroids: &CentroidSet,
    i: usize,
    j: usize,
    beta_bar: f64,
    eta: f64,
) -> Result<f64> {
    let v = direction_matrix(model, centroids, i, j, beta_bar);
    directional_fd(model, validation, spec, lam, &v, eta)
}

/// Central difference of `ψ ∘ soft_confusion` along an arbitrary direction.
pub fn directional_fd(
    model: &LinearModel,
    validation: &FeatureDataset,
    spec: &MetricSpec,
    lam: &LagrangeState,
    direction: &DMatrix<f64>,
    eta: f64,
) -> Result<f64> {
    let plus = soft_confusion(&model.perturbed(direction, eta), validation)?;
    let minus = soft_confusion(&model.perturbed(direction, -eta), validation)?;
    Ok((evaluate_metric(spec, &plus, lam) - evaluate_metric(spec, &minus, lam)) / (2.0 * eta))
}

/// Setup of the synthetic agreement study between [`gain_matrix`] and the
/// finite-difference oracle.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GainStudyConfig {
    pub num_classes: usize,
    pub dim: usize,
    pub per_class: usize,
    pub cluster_separation: f64,
    /// Standard deviation of the random weight entries.
    pub weight_scale: f64,
    pub beta_bar: f64,
    pub eta: f64,
    pub metric: MetricKind,
}

impl Default for GainStudyConfig {
    fn default() -> Self {
        GainStudyConfig {
            num_classes: 10,
            dim: 16,
            per_class: 50,
            cluster_separation: 1.0,
            weight_scale: 1.0,
            beta_bar: 0.75,
            eta: 1e-4,
            metric: MetricKind::MeanRecall,
        }
    }
}

/// Relative errors `|G_ij − oracle| / (|oracle| + 1e-8)` over all pairs for
/// one seed. Both sides use the soft confusion matrix of the validation set.
pub fn gain_agreement_errors(
    cfg: &GainStudyConfig,
    within_std: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    let k = cfg.num_classes;
    let spec_data = LtSpec {
        num_classes: k,
        dim: cfg.dim,
        head_count: cfg.per_class,
        rho: 1.0,
        cluster_separation: cfg.cluster_separation,
        within_std,
        seed,
    };
    let validation = generate_with_counts(&spec_data, &vec![cfg.per_class; k])?;
    let mut rng = stream(seed, Stream::Perturbation);
    let weights = DMatrix::from_fn(cfg.dim, k, |_, _| {
        cfg.weight_scale * rng.sample::<f64, _>(StandardNormal)
    });
    let model = LinearModel::from_weights(weights)?;
    let centroids = class_centroids(&validation)?;
    let spec = MetricSpec::new(cfg.metric, k);
    let c = soft_confusion(&model, &validation)?;
    let lam = crate::metrics::update_lagrange(&spec, &c);
    let gains = gain_matrix(&model, &centroids, &c, &spec, &lam, cfg.beta_bar)?;
    let mut errors = Vec::with_capacity(k * k);
    for i in 0..k {
        for j in 0..k {
            let oracle = gain_fd_oracle(
                &model,
                &validation,
                &spec,
                &lam,
                &centroids,
                i,
                j,
                cfg.beta_bar,
                cfg.eta,
            )?;
            errors.push((gains.get(i, j) - oracle).abs() / (oracle.abs() + 1e-8));
        }
    }
    Ok(errors)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GainStudyRow {
    pub within_std: f64,
    pub median_rel_error: f64,
    pub mean_rel_error: f64,
    pub max_rel_error: f64,
    pub pairs: usize,
}

pub fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// One row per `within_std`, pooling the pair errors of all seeds.
pub fn gain_agreement_study(
    cfg: &GainStudyConfig,
    within_stds: &[f64],
    seeds: &[u64],
) -> Result<Vec<GainStudyRow>> {
    within_stds
        .iter()
        .map(|&std| {
            let per_seed = seeds
                .par_iter()
                .map(|&seed| gain_agreement_errors(cfg, std, seed))
                .collect::<Result<Vec<_>>>()?;
            let mut all: Vec<f64> = per_seed.into_iter().flatten().collect();
            let mean = all.iter().sum::<f64>() / all.len() as f64;
            let max = all.iter().copied().fold(0.0, f64::max);
            let pairs = all.len();
            Ok(GainStudyRow {
                within_std: std,
                median_rel_error: median(&mut all),
                mean_rel_error: mean,
                max_rel_error: max,
                pairs,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct quadruple sum with an explicit `V_ij` per pair.
    fn brute_force(
        model: &LinearModel,
        centroids: &CentroidSet,
        dgrad: &DMatrix<f64>,
        beta_bar: f64,
    ) -> DMatrix<f64> {
        let k = model.num_classes();
        DMatrix::from_fn(k, k, |i, j| {
            let v = direction_matrix(model, centroids, i, j, beta_bar);
            let mut total = 0.0;
            for kk in 0..k {
                for l in 0..k {
                    let dot: f64 = v
                        .column(l)
                        .iter()
                        .zip(centroids.get(kk))
                        .map(|(a, b)| a * b)
                        .sum();
                    total += dgrad[(kk, l)] * dot;
                }
            }
            total
        })
    }

    fn hand_case() -> (LinearModel, CentroidSet, ConfusionMatrix) {
        let model = LinearModel::zeros(1, 2);
        let centroids = CentroidSet::new(vec![vec![1.0], vec![1.0]]).unwrap();
        let c = ConfusionMatrix::new(
            DMatrix::from_row_slice(2, 2, &[0.4, 0.1, 0.2, 0.3]),
            vec![0.5, 0.5],
        )
        .unwrap();
        (model, centroids, c)
    }

    #[test]
    fn two_class_hand_case_matches_brute_force() {
        let (model, centroids, c) = hand_case();
        let spec = MetricSpec::new(MetricKind::MeanRecall, 2);
        let lam = LagrangeState::neutral();
        let g = gain_matrix(&model, &centroids, &c, &spec, &lam, 0.75).unwrap();
        let dgrad = metric_grad_unconstrained(&spec, &c, &lam).unwrap();
        let reference = brute_force(&model, &centroids, &dgrad, 0.75);
        // D row 0 = (0.08, -0.08), row 1 = (-0.12, 0.12); V_00 = [[0.5, -0.5]].
        // G_00 = 0.08*0.5 + 0.08*0.5 - 0.12*0.5 - 0.12*0.5 = -0.04
        assert!((reference[(0, 0)] + 0.04).abs() < 1e-15);
        assert!((g.values() - &reference).amax() < 1e-15);
    }

    #[test]
    fn zero_gradient_gives_zero_gains() {
        let (model, centroids, _) = hand_case();
        let g = gain_matrix_from_grad(&model, &centroids, &DMatrix::zeros(2, 2), 0.75).unwrap();
        assert!(g.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn confident_model_gives_zero_gains() {
        let model = LinearModel::from_row_slice(2, 2, &[400.0, 0.0, 0.0, 400.0]).unwrap();
        // both centroids on class 0's side: every mixed centroid is confidently class 0,
        // so only pairs with i = 0 could move and V vanishes there too
        let centroids = CentroidSet::new(vec![vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let dgrad = DMatrix::from_row_slice(2, 2, &[0.3, -0.3, -0.1, 0.1]);
        let g = gain_matrix_from_grad(&model, &centroids, &dgrad, 0.75).unwrap();
        assert!(g.values()[(0, 0)].abs() < 1e-100);
        assert!(g.values()[(0, 1)].abs() < 1e-100);
    }

    #[test]
    fn factored_form_matches_brute_force_on_random_instances() {
        let mut rng = stream(11, Stream::Perturbation);
        for _ in 0..20 {
            let (k, d) = (rng.random_range(2..7), rng.random_range(1..6));
            let w = DMatrix::from_fn(d, k, |_, _| rng.sample::<f64, _>(StandardNormal));
            let model = LinearModel::from_weights(w).unwrap();
            let cents = (0..k)
                .map(|_| {
                    (0..d)
                        .map(|_| rng.sample::<f64, _>(StandardNormal))
                        .collect()
                })
                .collect();
            let centroids = CentroidSet::new(cents).unwrap();
            let dgrad = DMatrix::from_fn(k, k, |_, _| rng.sample::<f64, _>(StandardNormal));
            let beta = rng.random_range(0.5..1.0);
            let fast = gain_matrix_from_grad(&model, &centroids, &dgrad, beta).unwrap();
            let slow = brute_force(&model, &centroids, &dgrad, beta);
            assert!((fast.values() - slow).amax() < 1e-12);
        }
    }

    #[test]
    fn oracle_zero_direction_and_constant_metric() {
        let ds = FeatureDataset::new(1, 2, vec![1.0, -1.0], vec![0, 1]).unwrap();
        let model = LinearModel::from_row_slice(1, 2, &[0.5, -0.2]).unwrap();
        let spec = MetricSpec::new(MetricKind::MeanRecall, 2);
        let lam = LagrangeState::neutral();
        let zero = DMatrix::zeros(1, 2);
        assert_eq!(
            directional_fd(&model, &ds, &spec, &lam, &zero, 1e-4).unwrap(),
            0.0
        );
        // min-recall with a one-hot multiplier on a class whose row is constant in W
        let constant = FeatureDataset::new(1, 2, vec![1.0, 0.0], vec![0, 1]).unwrap();
        let spec = MetricSpec::new(MetricKind::MinRecall, 2);
        let lam = LagrangeState::new(vec![0.0, 1.0]);
        let v = DMatrix::from_row_slice(1, 2, &[1.0, -1.0]);
        assert_eq!(
            directional_fd(&model, &constant, &spec, &lam, &v, 1e-4).unwrap(),
            0.0
        );
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
