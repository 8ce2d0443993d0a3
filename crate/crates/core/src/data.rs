//! Feature datasets: synthetic long-tailed Gaussian generation, CSV I/O and
//! stratified splitting.
//!
//! Class counts follow the exponential profile
//! `N_k = round(N_1 · ρ^(-k/(K-1)))` for `k = 0..K`, so that `N_1 / N_K = ρ`.
//!
//! The CSV format is a header `label,f0,...,f{d-1}` followed by one row per
//! sample. Floats are written in shortest round-trip form, so a save/load cycle
//! reproduces every value bit for bit.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SelmixError};
use crate::rng::{indexed_stream, stream, Stream};

/// Where the labels of a dataset come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LabelKind {
    True,
    Pseudo,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDataset {
    dim: usize,
    num_classes: usize,
    features: Vec<f64>,
    labels: Vec<usize>,
    kind: LabelKind,
    /// Ground truth retained for pseudo-labeled sets (never used for training).
    hidden_labels: Option<Vec<usize>>,
    class_index: Vec<Vec<usize>>,
}

fn build_index(labels: &[usize], num_classes: usize) -> Vec<Vec<usize>> {
    let mut index = vec![Vec::new(); num_classes];
    for (n, &y) in labels.iter().enumerate() {
        index[y].push(n);
    }
    index
}

impl FeatureDataset {
    /// Builds a labeled dataset from row-major features (`labels.len()` rows of
    /// `dim` values each).
    pub fn new(
        dim: usize,
        num_classes: usize,
        features: Vec<f64>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(SelmixError::invalid("feature dimension must be at least 1"));
        }
        if num_classes < 1 {
            return Err(SelmixError::invalid("at least one class is required"));
        }
        if features.len() != labels.len() * dim {
            return Err(SelmixError::DimensionMismatch {
                expected: labels.len() * dim,
                got: features.len(),
            });
        }
        if let Some(&label) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(SelmixError::LabelOutOfRange {
                label,
                classes: num_classes,
            });
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(SelmixError::NonFinite("features"));
        }
        let class_index = build_index(&labels, num_classes);
        Ok(FeatureDataset {
            dim,
            num_classes,
            features,
            labels,
            kind: LabelKind::True,
            hidden_labels: None,
            class_index,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn kind(&self) -> LabelKind {
        self.kind
    }

    pub fn row(&self, n: usize) -> &[f64] {
        &self.features[n * self.dim..(n + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.features.chunks_exact(self.dim)
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn label(&self, n: usize) -> usize {
        self.labels[n]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Ground-truth labels of a pseudo-labeled set, if retained.
    pub fn hidden_labels(&self) -> Option<&[usize]> {
        self.hidden_labels.as_deref()
    }

    /// Row indices currently carrying label `k`.
    pub fn class_index(&self, k: usize) -> &[usize] {
        &self.class_index[k]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        self.class_index.iter().map(Vec::len).collect()
    }

    /// Empirical class priors `count_k / N` (all zeros for an empty set).
    pub fn priors(&self) -> Vec<f64> {
        let n = self.len();
        if n == 0 {
            return vec![0.0; self.num_classes];
        }
        self.class_counts()
            .into_iter()
            .map(|c| c as f64 / n as f64)
            .collect()
    }

    /// Checks that every class has at least one sample.
    pub fn require_all_classes(&self) -> Result<()> {
        if self.is_empty() {
            return Err(SelmixError::EmptyEvaluationSet);
        }
        match self.class_index.iter().position(Vec::is_empty) {
            Some(k) => Err(SelmixError::ClassAbsent(k)),
            None => Ok(()),
        }
    }

    /// Converts to an unlabeled pool: the current labels are kept as hidden
    /// ground truth and the visible labels become pseudo-label slots.
    pub fn hide_labels(mut self) -> Self {
        self.hidden_labels = Some(self.labels.clone());
        self.kind = LabelKind::Pseudo;
        self
    }

    /// Returns a copy with the visible labels replaced by `labels` (marked pseudo).
    pub fn with_pseudo_labels(&self, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != self.len() {
            return Err(SelmixError::DimensionMismatch {
                expected: self.len(),
                got: labels.len(),
            });
        }
        if let Some(&label) = labels.iter().find(|&&y| y >= self.num_classes) {
            return Err(SelmixError::LabelOutOfRange {
                label,
                classes: self.num_classes,
            });
        }
        let class_index = build_index(&labels, self.num_classes);
        Ok(FeatureDataset {
            dim: self.dim,
            num_classes: self.num_classes,
            features: self.features.clone(),
            hidden_labels: Some(
                self.hidden_labels
                    .clone()
                    .unwrap_or_else(|| self.labels.clone()),
            ),
            labels,
            kind: LabelKind::Pseudo,
            class_index,
        })
    }

    /// Fraction of pseudo-labels matching the hidden ground truth.
    pub fn pseudo_label_accuracy(&self) -> Option<f64> {
        let truth = self.hidden_labels.as_ref()?;
        if truth.is_empty() {
            return None;
        }
        let hits = truth
            .iter()
            .zip(&self.labels)
            .filter(|(a, b)| a == b)
            .count();
        Some(hits as f64 / truth.len() as f64)
    }

    /// Rows at `indices` (in the given order) as a new dataset of the same kind.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &n in indices {
            features.extend_from_slice(self.row(n));
            labels.push(self.labels[n]);
        }
        let hidden_labels = self
            .hidden_labels
            .as_ref()
            .map(|h| indices.iter().map(|&n| h[n]).collect());
        let class_index = build_index(&labels, self.num_classes);
        FeatureDataset {
            dim: self.dim,
            num_classes: self.num_classes,
            features,
            labels,
            kind: self.kind,
            hidden_labels,
            class_index,
        }
    }

    /// Appends the rows of `other` (same dim and class count).
    pub fn concat(&self, other: &FeatureDataset) -> Result<Self> {
        if other.dim != self.dim || other.num_classes != self.num_classes {
            return Err(SelmixError::invalid(
                "cannot concatenate datasets of different shape",
            ));
        }
        let mut features = self.features.clone();
        features.extend_from_slice(&other.features);
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        FeatureDataset::new(self.dim, self.num_classes, features, labels)
    }
}

/// Parameters of a synthetic long-tailed Gaussian feature set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LtSpec {
    pub num_classes: usize,
    pub dim: usize,
    /// Sample count of the most frequent class.
    pub head_count: usize,
    /// Imbalance factor `N_1 / N_K`.
    pub rho: f64,
    pub cluster_separation: f64,
    pub within_std: f64,
    pub seed: u64,
}

impl Default for LtSpec {
    fn default() -> Self {
        LtSpec {
            num_classes: 10,
            dim: 16,
            head_count: 1500,
            rho: 100.0,
            cluster_separation: 1.0,
            within_std: 0.4,
            seed: 0,
        }
    }
}

impl LtSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 1 {
            return Err(SelmixError::invalid("d must be at least 1"));
        }
        if self.num_classes < 2 {
            return Err(SelmixError::invalid("K must be at least 2"));
        }
        if self.head_count < 1 {
            return Err(SelmixError::invalid("n1 must be at least 1"));
        }
        if !(self.rho >= 1.0) || !self.rho.is_finite() {
            return Err(SelmixError::invalid("rho must be a finite value >= 1"));
        }
        if !(self.within_std >= 0.0) || !self.within_std.is_finite() {
            return Err(SelmixError::invalid("within_std must be finite and >= 0"));
        }
        if !(self.cluster_separation > 0.0) || !self.cluster_separation.is_finite() {
            return Err(SelmixError::invalid("cluster_separation must be positive"));
        }
        if self.class_counts().last().copied().unwrap_or(0) < 1 {
            return Err(SelmixError::invalid("tail class would have no samples"));
        }
        Ok(())
    }

    /// Per-class counts under the exponential profile.
    pub fn class_counts(&self) -> Vec<usize> {
        let k = self.num_classes;
        (0..k)
            .map(|c| {
                let exponent = if k > 1 {
                    c as f64 / (k - 1) as f64
                } else {
                    0.0
                };
                (self.head_count as f64 * self.rho.powf(-exponent)).round() as usize
            })
            .collect()
    }

    /// Class means: scaled standard basis directions when `d >= K`, otherwise
    /// seeded random unit directions.
    pub fn class_means(&self) -> Vec<Vec<f64>> {
        let (k, d) = (self.num_classes, self.dim);
        if d >= k {
            return (0..k)
                .map(|c| {
                    let mut m = vec![0.0; d];
                    m[c] = self.cluster_separation;
                    m
                })
                .collect();
        }
        let mut rng = indexed_stream(self.seed, Stream::Features, u64::MAX);
        (0..k)
            .map(|_| {
                let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
                v.iter()
                    .map(|x| x / norm * self.cluster_separation)
                    .collect()
            })
            .collect()
    }
}

/// Draws the long-tailed dataset described by `spec`. Rows are grouped by class.
pub fn generate_longtail(spec: &LtSpec) -> Result<FeatureDataset> {
    spec.validate()?;
    generate_with_counts(spec, &spec.class_counts())
}

/// Draws `counts[k]` samples around each class mean of `spec`.
pub fn generate_with_counts(spec: &LtSpec, counts: &[usize]) -> Result<FeatureDataset> {
    if counts.len() != spec.num_classes {
        return Err(SelmixError::DimensionMismatch {
            expected: spec.num_classes,
            got: counts.len(),
        });
    }
    let means = spec.class_means();
    let mut rng = stream(spec.seed, Stream::Features);
    let total: usize = counts.iter().sum();
    let mut features = Vec::with_capacity(total * spec.dim);
    let mut labels = Vec::with_capacity(total);
    for (c, &count) in counts.iter().enumerate() {
        for _ in 0..count {
            for &m in &means[c] {
                let z: f64 = rng.sample(StandardNormal);
                features.push(m + spec.within_std * z);
            }
            labels.push(c);
        }
    }
    FeatureDataset::new(spec.dim, spec.num_classes, features, labels)
}

pub fn save_dataset(ds: &FeatureDataset, path: impl AsRef<Path>) -> Result<()> {
    let file = fs::File::create(path)?;
    let mut out = BufWriter::new(file);
    write_csv(ds, &mut out)?;
    out.flush()?;
    Ok(())
}

pub fn write_csv(ds: &FeatureDataset, out: &mut impl Write) -> Result<()> {
    write!(out, "label")?;
    for f in 0..ds.dim() {
        write!(out, ",f{f}")?;
    }
    writeln!(out)?;
    // Pseudo-labeled pools are stored with their ground truth.
    let labels = ds.hidden_labels().unwrap_or(ds.labels());
    for (n, row) in ds.rows().enumerate() {
        write!(out, "{}", labels[n])?;
        for v in row {
            write!(out, ",{v}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

/// Loads a CSV dataset. With `num_classes = None` the class count is inferred
/// as `max label + 1`.
pub fn load_dataset(path: impl AsRef<Path>, num_classes: Option<usize>) -> Result<FeatureDataset> {
    let text = fs::read_to_string(path)?;
    parse_csv(&text, num_classes)
}

pub fn parse_csv(text: &str, num_classes: Option<usize>) -> Result<FeatureDataset> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| SelmixError::Parse {
        line: 1,
        message: "missing header".into(),
    })?;
    let columns: Vec<&str> = header.trim_end_matches('\r').split(',').collect();
    if columns.first() != Some(&"label") || columns.len() < 2 {
        return Err(SelmixError::Parse {
            line: 1,
            message: "header must be label,f0,...".into(),
        });
    }
    for (f, name) in columns[1..].iter().enumerate() {
        if *name != format!("f{f}") {
            return Err(SelmixError::Parse {
                line: 1,
                message: format!("expected column f{f}, found {name:?}"),
            });
        }
    }
    let dim = columns.len() - 1;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (idx, raw) in lines {
        let line = idx + 1;
        let raw = raw.trim_end_matches('\r');
        if raw.is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split(',').collect();
        if fields.len() != dim + 1 {
            return Err(SelmixError::Parse {
                line,
                message: format!("expected {} fields, found {}", dim + 1, fields.len()),
            });
        }
        let label: usize = fields[0].trim().parse().map_err(|_| SelmixError::Parse {
            line,
            message: format!("invalid label {:?}", fields[0]),
        })?;
        if let Some(k) = num_classes {
            if label >= k {
                return Err(SelmixError::Parse {
                    line,
                    message: format!("label {label} out of range for {k} classes"),
                });
            }
        }
        for field in &fields[1..] {
            let v: f64 = field.trim().parse().map_err(|_| SelmixError::Parse {
                line,
                message: format!("invalid number {field:?}"),
            })?;
            if !v.is_finite() {
                return Err(SelmixError::Parse {
                    line,
                    message: "non-finite feature".into(),
                });
            }
            features.push(v);
        }
        labels.push(label);
    }
    let k = match num_classes {
        Some(k) => k,
        None => labels.iter().max().map_or(1, |m| m + 1),
    };
    FeatureDataset::new(dim, k, features, labels)
}

/// Fractions of each class assigned to the train, validation and unlabeled splits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub unlabeled: f64,
}

impl SplitFractions {
    pub fn new(train: f64, val: f64, unlabeled: f64) -> Self {
        SplitFractions {
            train,
            val,
            unlabeled,
        }
    }
}

/// Per-class stratified split. Within each split rows keep their original
/// order. The unlabeled split has its labels hidden (retained as ground truth).
pub fn split(
    ds: &FeatureDataset,
    fractions: SplitFractions,
    seed: u64,
) -> Result<(FeatureDataset, FeatureDataset, FeatureDataset)> {
    let SplitFractions {
        train,
        val,
        unlabeled,
    } = fractions;
    if [train, val, unlabeled].iter().any(|f| !(*f >= 0.0)) {
        return Err(SelmixError::invalid("split fractions must be nonnegative"));
    }
    if ((train + val + unlabeled) - 1.0).abs() > 1e-9 {
        return Err(SelmixError::invalid("split fractions must sum to 1"));
    }
    let mut parts: [Vec<usize>; 3] = Default::default();
    for k in 0..ds.num_classes() {
        let mut idx = ds.class_index(k).to_vec();
        let n = idx.len();
        if n == 0 {
            continue;
        }
        idx.shuffle(&mut indexed_stream(seed, Stream::Shuffle, k as u64));
        let n_val = ((val * n as f64).round() as usize).min(n);
        let n_unl = ((unlabeled * n as f64).round() as usize).min(n - n_val);
        let n_train = n - n_val - n_unl;
        for (frac, count) in [(train, n_train), (val, n_val), (unlabeled, n_unl)] {
            if frac > 0.0 && count == 0 {
                return Err(SelmixError::invalid(format!(
                    "class {k} has {n} samples, too few to appear in every requested split"
                )));
            }
        }
        parts[0].extend_from_slice(&idx[..n_train]);
        parts[1].extend_from_slice(&idx[n_train..n_train + n_val]);
        parts[2].extend_from_slice(&idx[n_train + n_val..]);
    }
    for p in parts.iter_mut() {
        p.sort_unstable();
    }
    Ok((
        ds.subset(&parts[0]),
        ds.subset(&parts[1]),
        ds.subset(&parts[2]).hide_labels(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(k: usize, n1: usize, rho: f64) -> LtSpec {
        LtSpec {
            num_classes: k,
            dim: 4,
            head_count: n1,
            rho,
            ..LtSpec::default()
        }
    }

    #[test]
    fn no_imbalance_gives_equal_counts() {
        assert_eq!(spec(5, 40, 1.0).class_counts(), vec![40; 5]);
    }

    #[test]
    fn tail_count_follows_imbalance_factor() {
        let counts = spec(10, 1500, 100.0).class_counts();
        assert_eq!(counts[9], 15);
        assert_eq!(counts[0], 1500);
        // 1500 * 100^(-3/9) = 1500 * 10^(-2/3) = 323.16...
        assert_eq!(counts[3], 323);
        assert!(counts.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn rejects_degenerate_specs() {
        let mut s = spec(10, 100, 10.0);
        s.dim = 0;
        assert!(generate_longtail(&s).is_err());
        let mut s = spec(1, 100, 10.0);
        s.num_classes = 1;
        assert!(generate_longtail(&s).is_err());
        assert!(generate_longtail(&spec(10, 10, 1000.0)).is_err());
    }

    #[test]
    fn generation_is_deterministic() {
        let s = spec(4, 20, 4.0);
        assert_eq!(
            generate_longtail(&s).unwrap(),
            generate_longtail(&s).unwrap()
        );
        let mut other = s.clone();
        other.seed = 1;
        assert_ne!(
            generate_longtail(&s).unwrap(),
            generate_longtail(&other).unwrap()
        );
    }

    #[test]
    fn parses_minimal_file() {
        let ds = parse_csv("label,f0,f1\n0,1.5,-2.0\n", None).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.label(0), 0);
        assert_eq!(ds.row(0), &[1.5, -2.0]);
    }

    #[test]
    fn out_of_range_label_names_line() {
        let err = parse_csv("label,f0\n0,1.0\n7,2.0\n", Some(3)).unwrap_err();
        match err {
            SelmixError::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn ragged_rows_and_bad_headers_are_rejected() {
        assert!(matches!(
            parse_csv("label,f0,f1\n0,1.0\n", None),
            Err(SelmixError::Parse { line: 2, .. })
        ));
        assert!(matches!(
            parse_csv("y,f0\n0,1.0\n", None),
            Err(SelmixError::Parse { line: 1, .. })
        ));
        assert!(matches!(
            parse_csv("label,f0\n0,abc\n", None),
            Err(SelmixError::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn split_all_train_is_identity() {
        let ds = generate_longtail(&spec(3, 10, 2.0)).unwrap();
        let (train, val, unl) = split(&ds, SplitFractions::new(1.0, 0.0, 0.0), 3).unwrap();
        assert_eq!(train, ds);
        assert!(val.is_empty());
        assert!(unl.is_empty());
    }

    #[test]
    fn split_halves_are_stratified() {
        let ds = generate_longtail(&spec(3, 10, 1.0)).unwrap();
        let (train, val, _) = split(&ds, SplitFractions::new(0.5, 0.5, 0.0), 3).unwrap();
        assert_eq!(train.class_counts(), vec![5, 5, 5]);
        assert_eq!(val.class_counts(), vec![5, 5, 5]);
    }

    #[test]
    fn split_is_seeded() {
        let ds = generate_longtail(&spec(3, 10, 1.0)).unwrap();
        let f = SplitFractions::new(0.5, 0.3, 0.2);
        let a = split(&ds, f, 1).unwrap();
        let b = split(&ds, f, 1).unwrap();
        let c = split(&ds, f, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.0, c.0);
        assert_eq!(a.2.kind(), LabelKind::Pseudo);
        assert!(a.2.hidden_labels().is_some());
    }

    #[test]
    fn split_rejects_tiny_classes() {
        let ds = generate_longtail(&spec(3, 4, 4.0)).unwrap();
        assert!(split(&ds, SplitFractions::new(0.5, 0.3, 0.2), 0).is_err());
    }

    #[test]
    fn class_index_partitions_rows() {
        let ds = generate_longtail(&spec(4, 30, 5.0)).unwrap();
        let mut all: Vec<usize> = (0..4).flat_map(|k| ds.class_index(k).to_vec()).collect();
        all.sort_unstable();
        assert_eq!(all, (0..ds.len()).collect::<Vec<_>>());
        assert!((ds.priors().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
