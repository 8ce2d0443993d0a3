//! Confusion matrices and the objectives defined on them.
//!
//! `C[i][j]` is the joint probability of true class `i` and predicted class
//! `j`; row `i` sums to the prior `π_i`. Recall of class `i` is `C_ii / π_i`
//! and coverage of class `j` is the column sum `Σ_i C_ij`.
//!
//! Gradients are taken with respect to the unconstrained matrix `C̃` where
//! `C_i = π_i · softmax(C̃_i)`. The Jacobian of that map is
//!
//! ```text
//! ∂C_il / ∂C̃_ij = C_il (δ_lj − C_ij / π_i)
//! ```
//!
//! so the diagonal entry is `C_ij − C_ij² / π_i`. Lagrange multipliers are
//! treated as constants when differentiating.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::classifier::{softmax, LinearModel};
use crate::data::FeatureDataset;
use crate::error::{Result, SelmixError};

const TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionMatrix {
    entries: DMatrix<f64>,
    priors: Vec<f64>,
}

impl ConfusionMatrix {
    /// Validating constructor.
    pub fn new(entries: DMatrix<f64>, priors: Vec<f64>) -> Result<Self> {
        let k = priors.len();
        if entries.nrows() != k || entries.ncols() != k {
            return Err(SelmixError::DimensionMismatch {
                expected: k,
                got: entries.nrows(),
            });
        }
        if entries.iter().chain(&priors).any(|v| !v.is_finite()) {
            return Err(SelmixError::NonFinite("confusion matrix"));
        }
        if entries.iter().any(|&v| v < 0.0) || priors.iter().any(|&p| p <= 0.0) {
            return Err(SelmixError::invalid(
                "confusion entries must be >= 0 and priors > 0",
            ));
        }
        if (priors.iter().sum::<f64>() - 1.0).abs() > TOL {
            return Err(SelmixError::invalid("priors must sum to 1"));
        }
        for (i, p) in priors.iter().enumerate() {
            if (entries.row(i).sum() - p).abs() > TOL {
                return Err(SelmixError::invalid(format!(
                    "row {i} does not sum to its prior"
                )));
            }
        }
        Ok(ConfusionMatrix { entries, priors })
    }

    /// Counts `(label, prediction)` pairs; `entries[i][j] = #{y=i, ŷ=j} / N`.
    pub fn from_predictions(labels: &[usize], predictions: &[usize], k: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(SelmixError::EmptyEvaluationSet);
        }
        if labels.len() != predictions.len() {
            return Err(SelmixError::DimensionMismatch {
                expected: labels.len(),
                got: predictions.len(),
            });
        }
        let mut counts = DMatrix::<f64>::zeros(k, k);
        for (&y, &p) in labels.iter().zip(predictions) {
            if y >= k || p >= k {
                return Err(SelmixError::LabelOutOfRange {
                    label: y.max(p),
                    classes: k,
                });
            }
            counts[(y, p)] += 1.0;
        }
        let n = labels.len() as f64;
        let mut priors = Vec::with_capacity(k);
        for i in 0..k {
            let row = counts.row(i).sum();
            if row == 0.0 {
                return Err(SelmixError::ClassAbsent(i));
            }
            priors.push(row / n);
        }
        Ok(ConfusionMatrix {
            entries: counts / n,
            priors,
        })
    }

    /// Hard confusion matrix of `model` on a labeled set.
    pub fn of_model(model: &LinearModel, ds: &FeatureDataset) -> Result<Self> {
        let preds = model.predict_all(ds)?;
        Self::from_predictions(ds.labels(), &preds, ds.num_classes())
    }

    /// `C_i = π_i · softmax(C̃_i)`.
    pub fn from_unconstrained(c_tilde: &DMatrix<f64>, priors: &[f64]) -> Result<Self> {
        let k = priors.len();
        if c_tilde.nrows() != k || c_tilde.ncols() != k {
            return Err(SelmixError::DimensionMismatch {
                expected: k,
                got: c_tilde.nrows(),
            });
        }
        if c_tilde.iter().any(|v| !v.is_finite()) {
            return Err(SelmixError::NonFinite("unconstrained confusion matrix"));
        }
        if priors.iter().any(|&p| !(p > 0.0)) || (priors.iter().sum::<f64>() - 1.0).abs() > TOL {
            return Err(SelmixError::invalid("priors must be positive and sum to 1"));
        }
        let mut entries = DMatrix::zeros(k, k);
        for i in 0..k {
            let row: Vec<f64> = c_tilde.row(i).iter().copied().collect();
            for (j, p) in softmax(&row).into_iter().enumerate() {
                entries[(i, j)] = priors[i] * p;
            }
        }
        Ok(ConfusionMatrix {
            entries,
            priors: priors.to_vec(),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.priors.len()
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[(i, j)]
    }

    pub fn priors(&self) -> &[f64] {
        &self.priors
    }

    pub fn recalls(&self) -> Vec<f64> {
        (0..self.num_classes())
            .map(|i| self.entries[(i, i)] / self.priors[i])
            .collect()
    }

    pub fn coverages(&self) -> Vec<f64> {
        (0..self.num_classes())
            .map(|j| self.entries.column(j).sum())
            .collect()
    }

    /// Copy with every diagonal entry raised to at least `floor`. Used before
    /// gradient calls on G-mean/H-mean objectives.
    pub fn with_min_diagonal(&self, floor: f64) -> Self {
        let mut entries = self.entries.clone();
        for i in 0..self.num_classes() {
            entries[(i, i)] = entries[(i, i)].max(floor);
        }
        ConfusionMatrix {
            entries,
            priors: self.priors.clone(),
        }
    }
}

/// Smooth surrogate confusion matrix `C_ij = π_i · mean_{x∈class i} softmax_j(Wᵀx)`.
pub fn soft_confusion(model: &LinearModel, ds: &FeatureDataset) -> Result<ConfusionMatrix> {
    ds.require_all_classes()?;
    if ds.dim() != model.dim() {
        return Err(SelmixError::DimensionMismatch {
            expected: model.dim(),
            got: ds.dim(),
        });
    }
    let k = ds.num_classes();
    let n = ds.len() as f64;
    let mut entries = DMatrix::zeros(k, k);
    for (row, &y) in ds.rows().zip(ds.labels()) {
        let p = softmax(&model.logits_unchecked(row));
        for (j, pj) in p.into_iter().enumerate() {
            entries[(y, j)] += pj / n;
        }
    }
    Ok(ConfusionMatrix {
        entries,
        priors: ds.priors(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MetricKind {
    MeanRecall,
    GMean,
    HMean,
    MinRecall,
    MinRecallHeadTail,
    MeanRecallCoverage,
    HMeanCoverage,
    MeanRecallCoverageHeadTail,
    HMeanCoverageHeadTail,
}

impl MetricKind {
    pub const ALL: [MetricKind; 9] = [
        MetricKind::MeanRecall,
        MetricKind::GMean,
        MetricKind::HMean,
        MetricKind::MinRecall,
        MetricKind::MinRecallHeadTail,
        MetricKind::MeanRecallCoverage,
        MetricKind::HMeanCoverage,
        MetricKind::MeanRecallCoverageHeadTail,
        MetricKind::HMeanCoverageHeadTail,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MetricKind::MeanRecall => "mean_recall",
            MetricKind::GMean => "gmean",
            MetricKind::HMean => "hmean",
            MetricKind::MinRecall => "min_recall",
            MetricKind::MinRecallHeadTail => "min_recall_head_tail",
            MetricKind::MeanRecallCoverage => "mean_recall_coverage",
            MetricKind::HMeanCoverage => "hmean_coverage",
            MetricKind::MeanRecallCoverageHeadTail => "mean_recall_coverage_head_tail",
            MetricKind::HMeanCoverageHeadTail => "hmean_coverage_head_tail",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    pub fn uses_head_tail(self) -> bool {
        matches!(
            self,
            MetricKind::MinRecallHeadTail
                | MetricKind::MeanRecallCoverageHeadTail
                | MetricKind::HMeanCoverageHeadTail
        )
    }

    fn base(self) -> Base {
        match self {
            MetricKind::MeanRecall
            | MetricKind::MeanRecallCoverage
            | MetricKind::MeanRecallCoverageHeadTail => Base::Mean,
            MetricKind::GMean => Base::Geometric,
            MetricKind::HMean | MetricKind::HMeanCoverage | MetricKind::HMeanCoverageHeadTail => {
                Base::Harmonic
            }
            MetricKind::MinRecall => Base::WeightedRecall,
            MetricKind::MinRecallHeadTail => Base::WeightedGroupRecall,
        }
    }

    fn coverage(self) -> Coverage {
        match self {
            MetricKind::MeanRecallCoverage | MetricKind::HMeanCoverage => Coverage::PerClass,
            MetricKind::MeanRecallCoverageHeadTail | MetricKind::HMeanCoverageHeadTail => {
                Coverage::HeadTail
            }
            _ => Coverage::None,
        }
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Base {
    Mean,
    Geometric,
    Harmonic,
    WeightedRecall,
    WeightedGroupRecall,
}

#[derive(Clone, Copy, PartialEq)]
enum Coverage {
    None,
    PerClass,
    HeadTail,
}

/// Objective description: which metric plus its softness and constraint knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSpec {
    pub kind: MetricKind,
    /// Min-recall softness ω.
    pub omega: f64,
    /// Coverage target α (constraint is `Cov_j ≥ α/K`).
    pub alpha: f64,
    pub lambda_max: f64,
    pub tau: f64,
    /// Head classes ℋ; the tail 𝒯 is the complement.
    pub head: Vec<usize>,
}

impl MetricSpec {
    /// Defaults: ω=40, α=0.95, Λ_max=100, τ=0.01, tail = last ⌈K/10⌉ classes.
    pub fn new(kind: MetricKind, num_classes: usize) -> Self {
        MetricSpec {
            kind,
            omega: 40.0,
            alpha: 0.95,
            lambda_max: 100.0,
            tau: 0.01,
            head: default_head(num_classes),
        }
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if !(self.omega > 0.0 && self.lambda_max > 0.0 && self.tau > 0.0) {
            return Err(SelmixError::invalid(
                "omega, lambda_max and tau must be positive",
            ));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(SelmixError::invalid("alpha must lie in (0, 1]"));
        }
        if self.head.iter().any(|&h| h >= num_classes) {
            return Err(SelmixError::invalid("head class out of range"));
        }
        if self.kind.uses_head_tail() {
            let mut h = self.head.clone();
            h.sort_unstable();
            h.dedup();
            if h.is_empty() || h.len() >= num_classes {
                return Err(SelmixError::invalid(
                    "head set must be a nonempty proper subset of the classes",
                ));
            }
        }
        Ok(())
    }

    fn groups(&self, k: usize) -> [Vec<usize>; 2] {
        let head: Vec<usize> = (0..k).filter(|c| self.head.contains(c)).collect();
        let tail: Vec<usize> = (0..k).filter(|c| !self.head.contains(c)).collect();
        [head, tail]
    }

    /// Number of multipliers the kind carries for `k` classes.
    pub fn lambda_len(&self, k: usize) -> usize {
        match (self.kind.base(), self.kind.coverage()) {
            (Base::WeightedRecall, _) | (_, Coverage::PerClass) => k,
            (Base::WeightedGroupRecall, _) | (_, Coverage::HeadTail) => 2,
            _ => 0,
        }
    }
}

/// All classes except the last `⌈K/10⌉`.
pub fn default_head(num_classes: usize) -> Vec<usize> {
    let tail = num_classes.div_ceil(10);
    (0..num_classes.saturating_sub(tail)).collect()
}

/// Lagrange multipliers. Empty for unconstrained kinds; K entries for
/// per-class kinds; `[λ_ℋ, λ_𝒯]` for head/tail kinds.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LagrangeState {
    pub lambdas: Vec<f64>,
}

impl LagrangeState {
    pub fn neutral() -> Self {
        LagrangeState::default()
    }

    pub fn new(lambdas: Vec<f64>) -> Self {
        LagrangeState { lambdas }
    }

    /// Checks the shape and feasibility constraints for `spec`.
    pub fn validate(&self, spec: &MetricSpec, k: usize) -> Result<()> {
        if self.lambdas.len() != spec.lambda_len(k) {
            return Err(SelmixError::DimensionMismatch {
                expected: spec.lambda_len(k),
                got: self.lambdas.len(),
            });
        }
        if self.lambdas.iter().any(|&l| !(l >= 0.0)) {
            return Err(SelmixError::invalid("multipliers must be nonnegative"));
        }
        match spec.kind.base() {
            Base::WeightedRecall | Base::WeightedGroupRecall => {
                if (self.lambdas.iter().sum::<f64>() - 1.0).abs() > TOL {
                    return Err(SelmixError::invalid("min-recall multipliers must sum to 1"));
                }
            }
            _ => {
                if self.lambdas.iter().any(|&l| l > spec.lambda_max) {
                    return Err(SelmixError::invalid(
                        "coverage multiplier exceeds lambda_max",
                    ));
                }
            }
        }
        Ok(())
    }
}

fn group_means(values: &[f64], groups: &[Vec<usize>; 2]) -> [f64; 2] {
    let mean = |g: &Vec<usize>| g.iter().map(|&c| values[c]).sum::<f64>() / g.len() as f64;
    [mean(&groups[0]), mean(&groups[1])]
}

/// `ψ(C)` with the multipliers in `lam` plugged in.
pub fn evaluate_metric(spec: &MetricSpec, c: &ConfusionMatrix, lam: &LagrangeState) -> f64 {
    let k = c.num_classes();
    let kf = k as f64;
    let recalls = c.recalls();
    let base = match spec.kind.base() {
        Base::Mean => recalls.iter().sum::<f64>() / kf,
        Base::Geometric => {
            if recalls.iter().any(|&r| r <= 0.0) {
                0.0
            } else {
                (recalls.iter().map(|r| r.ln()).sum::<f64>() / kf).exp()
            }
        }
        Base::Harmonic => {
            if recalls.iter().any(|&r| r <= 0.0) {
                0.0
            } else {
                kf / recalls.iter().map(|r| 1.0 / r).sum::<f64>()
            }
        }
        Base::WeightedRecall => lam.lambdas.iter().zip(&recalls).map(|(l, r)| l * r).sum(),
        Base::WeightedGroupRecall => {
            let g = group_means(&recalls, &spec.groups(k));
            lam.lambdas[0] * g[0] + lam.lambdas[1] * g[1]
        }
    };
    let target = spec.alpha / kf;
    let coverages = c.coverages();
    let penalty = match spec.kind.coverage() {
        Coverage::None => 0.0,
        Coverage::PerClass => lam
            .lambdas
            .iter()
            .zip(&coverages)
            .map(|(l, cov)| l * (cov - target))
            .sum(),
        Coverage::HeadTail => {
            let g = group_means(&coverages, &spec.groups(k));
            lam.lambdas[0] * (g[0] - target) + lam.lambdas[1] * (g[1] - target)
        }
    };
    base + penalty
}

/// `∂ψ/∂C` treating priors and multipliers as constants.
pub fn metric_grad_confusion(
    spec: &MetricSpec,
    c: &ConfusionMatrix,
    lam: &LagrangeState,
) -> Result<DMatrix<f64>> {
    let k = c.num_classes();
    let kf = k as f64;
    let pi = c.priors();
    let recalls = c.recalls();
    let mut g = DMatrix::zeros(k, k);
    match spec.kind.base() {
        Base::Mean => {
            for i in 0..k {
                g[(i, i)] = 1.0 / (kf * pi[i]);
            }
        }
        Base::Geometric => {
            if recalls.iter().any(|&r| r <= 0.0) {
                return Err(SelmixError::ZeroRecall);
            }
            let psi = (recalls.iter().map(|r| r.ln()).sum::<f64>() / kf).exp();
            for i in 0..k {
                g[(i, i)] = psi / (kf * c.get(i, i));
            }
        }
        Base::Harmonic => {
            if recalls.iter().any(|&r| r <= 0.0) {
                return Err(SelmixError::ZeroRecall);
            }
            let s: f64 = recalls.iter().map(|r| 1.0 / r).sum();
            for i in 0..k {
                let cii = c.get(i, i);
                g[(i, i)] = kf / (s * s) * pi[i] / (cii * cii);
            }
        }
        Base::WeightedRecall => {
            for i in 0..k {
                g[(i, i)] = lam.lambdas[i] / pi[i];
            }
        }
        Base::WeightedGroupRecall => {
            for (lambda, group) in lam.lambdas.iter().zip(spec.groups(k)) {
                let size = group.len() as f64;
                for &i in &group {
                    g[(i, i)] = lambda / (size * pi[i]);
                }
            }
        }
    }
    match spec.kind.coverage() {
        Coverage::None => {}
        Coverage::PerClass => {
            for j in 0..k {
                for i in 0..k {
                    g[(i, j)] += lam.lambdas[j];
                }
            }
        }
        Coverage::HeadTail => {
            for (lambda, group) in lam.lambdas.iter().zip(spec.groups(k)) {
                let w = lambda / group.len() as f64;
                for &j in &group {
                    for i in 0..k {
                        g[(i, j)] += w;
                    }
                }
            }
        }
    }
    Ok(g)
}

/// Pulls a `∂ψ/∂C` matrix back through `C_i = π_i softmax(C̃_i)`:
/// `∂ψ/∂C̃_ij = C_ij (g_ij − Σ_l g_il C_il / π_i)`.
pub fn chain_to_unconstrained(c: &ConfusionMatrix, grad_c: &DMatrix<f64>) -> DMatrix<f64> {
    let k = c.num_classes();
    let mut out = DMatrix::zeros(k, k);
    for i in 0..k {
        let pi = c.priors()[i];
        let weighted: f64 = (0..k).map(|l| grad_c[(i, l)] * c.get(i, l)).sum::<f64>() / pi;
        for j in 0..k {
            out[(i, j)] = c.get(i, j) * (grad_c[(i, j)] - weighted);
        }
    }
    out
}

/// `∂ψ/∂C̃` for every kind.
pub fn metric_grad_unconstrained(
    spec: &MetricSpec,
    c: &ConfusionMatrix,
    lam: &LagrangeState,
) -> Result<DMatrix<f64>> {
    let grad_c = metric_grad_confusion(spec, c, lam)?;
    Ok(chain_to_unconstrained(c, &grad_c))
}

/// Closed-form multiplier refresh.
///
/// Min-recall kinds: `λ = softmax(−ω · recall)` (over classes, or over the
/// head/tail mean recalls). Coverage kinds:
/// `λ_j = max(0, Λ_max (1 − exp((Cov_j − α/K)/τ)))`. Other kinds: empty.
pub fn update_lagrange(spec: &MetricSpec, c: &ConfusionMatrix) -> LagrangeState {
    let k = c.num_classes();
    let recalls = c.recalls();
    let target = spec.alpha / k as f64;
    let coverage_lambda =
        |cov: f64| (spec.lambda_max * (1.0 - ((cov - target) / spec.tau).exp())).max(0.0);
    let lambdas = match (spec.kind.base(), spec.kind.coverage()) {
        (Base::WeightedRecall, _) => {
            let scaled: Vec<f64> = recalls.iter().map(|r| -spec.omega * r).collect();
            softmax(&scaled)
        }
        (Base::WeightedGroupRecall, _) => {
            let g = group_means(&recalls, &spec.groups(k));
            softmax(&[-spec.omega * g[0], -spec.omega * g[1]])
        }
        (_, Coverage::PerClass) => c.coverages().into_iter().map(coverage_lambda).collect(),
        (_, Coverage::HeadTail) => group_means(&c.coverages(), &spec.groups(k))
            .into_iter()
            .map(coverage_lambda)
            .collect(),
        _ => Vec::new(),
    };
    LagrangeState { lambdas }
}
