//! Pair-sampling distributions over `[K]×[K]` and the full-information online
//! game used to check the regret guarantees of the softmax policy.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SelmixError};
use crate::gain::GainMatrix;
use crate::rng::{indexed_stream, Stream};

#[derive(Debug, Clone, PartialEq)]
pub struct MixPolicy {
    probs: DMatrix<f64>,
}

impl MixPolicy {
    pub fn new(probs: DMatrix<f64>) -> Result<Self> {
        if probs.nrows() != probs.ncols() || probs.is_empty() {
            return Err(SelmixError::invalid(
                "policy must be a nonempty square matrix",
            ));
        }
        if probs.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(SelmixError::invalid(
                "policy entries must be finite and >= 0",
            ));
        }
        if (probs.sum() - 1.0).abs() > 1e-9 {
            return Err(SelmixError::invalid("policy must sum to 1"));
        }
        Ok(MixPolicy { probs })
    }

    pub fn uniform(k: usize) -> Self {
        MixPolicy {
            probs: DMatrix::from_element(k, k, 1.0 / (k * k) as f64),
        }
    }

    pub fn one_hot(k: usize, i: usize, j: usize) -> Self {
        let mut probs = DMatrix::zeros(k, k);
        probs[(i, j)] = 1.0;
        MixPolicy { probs }
    }

    pub fn probs(&self) -> &DMatrix<f64> {
        &self.probs
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.probs[(i, j)]
    }

    pub fn num_classes(&self) -> usize {
        self.probs.nrows()
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        -self
            .probs
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|p| p * p.ln())
            .sum::<f64>()
    }

    /// Probability of row-major cell `cell`.
    fn cell(&self, cell: usize) -> f64 {
        let k = self.num_classes();
        self.probs[(cell / k, cell % k)]
    }

    /// Inverse-CDF draw over the K² cells in row-major order.
    pub fn sample_pair<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, usize) {
        let k = self.num_classes();
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut last_positive = 0;
        for cell in 0..k * k {
            let p = self.cell(cell);
            if p > 0.0 {
                last_positive = cell;
            }
            acc += p;
            if u < acc {
                return (cell / k, cell % k);
            }
        }
        // u landed in the rounding gap at the top of the CDF
        (last_positive / k, last_positive % k)
    }
}

/// Softmax over `scores` restricted to `support`, row-major, max-subtracted.
fn masked_softmax(scores: &DMatrix<f64>, support: impl Fn(usize, usize) -> bool) -> DMatrix<f64> {
    let k = scores.nrows();
    let mut max = f64::NEG_INFINITY;
    for i in 0..k {
        for j in 0..k {
            if support(i, j) {
                max = max.max(scores[(i, j)]);
            }
        }
    }
    let mut probs = DMatrix::zeros(k, k);
    let mut total = 0.0;
    for i in 0..k {
        for j in 0..k {
            if support(i, j) {
                let e = (scores[(i, j)] - max).exp();
                probs[(i, j)] = e;
                total += e;
            }
        }
    }
    probs / total
}

/// `softmax(s·G)` over all pairs. With `mask_negative`, pairs with negative
/// gain get probability 0 unless every gain is negative, in which case the
/// unmasked softmax is used.
pub fn selmix_distribution(gains: &GainMatrix, s: f64, mask_negative: bool) -> MixPolicy {
    let scores = gains.values() * s;
    let any_nonnegative = gains.values().iter().any(|&g| g >= 0.0);
    let probs = if mask_negative && any_nonnegative {
        masked_softmax(&scores, |i, j| gains.get(i, j) >= 0.0)
    } else {
        masked_softmax(&scores, |_, _| true)
    };
    MixPolicy { probs }
}

/// One-hot on the largest gain; ties go to the first cell in row-major order.
pub fn greedy_distribution(gains: &GainMatrix) -> MixPolicy {
    let k = gains.num_classes();
    let (mut bi, mut bj) = (0, 0);
    for i in 0..k {
        for j in 0..k {
            if gains.get(i, j) > gains.get(bi, bj) {
                (bi, bj) = (i, j);
            }
        }
    }
    MixPolicy::one_hot(k, bi, bj)
}

/// Policies available in the online game.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum GamePolicy {
    /// `P_t = softmax(s Σ_{τ≤t} G_τ)`: sees the current round's gains.
    SelmixHedge,
    /// `P_t = softmax(s Σ_{τ<t} G_τ)` with the tuned `s = ln(1 + 2√(ln K / T))`.
    SelmixHedgeVariant,
    Uniform,
    Fixed(usize, usize),
    /// One-hot on the cumulative leader (follow the leader).
    Greedy,
}

impl GamePolicy {
    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "selmix_hedge" | "selmix" => Some(GamePolicy::SelmixHedge),
            "selmix_hedge_variant" | "variant" => Some(GamePolicy::SelmixHedgeVariant),
            "uniform" => Some(GamePolicy::Uniform),
            "greedy" => Some(GamePolicy::Greedy),
            other => {
                let rest = other.strip_prefix("fixed:")?;
                let (i, j) = rest.split_once(',')?;
                Some(GamePolicy::Fixed(
                    i.trim().parse().ok()?,
                    j.trim().parse().ok()?,
                ))
            }
        }
    }

    pub fn name(&self) -> String {
        match self {
            GamePolicy::SelmixHedge => "selmix_hedge".into(),
            GamePolicy::SelmixHedgeVariant => "selmix_hedge_variant".into(),
            GamePolicy::Uniform => "uniform".into(),
            GamePolicy::Fixed(i, j) => format!("fixed:{i},{j}"),
            GamePolicy::Greedy => "greedy".into(),
        }
    }
}

/// Synthetic gain sequences. Each emits values in `[0, 1]` before the game
/// maps them to its range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum GainGenerator {
    /// Every cell gets the same value every round.
    Constant(f64),
    /// Cell `t mod 2` (row-major) gets 1, everything else 0.
    Alternating,
    /// Fixed random cell means in [0,1]; Bernoulli draws per round.
    Stochastic,
    /// Cell means drift sinusoidally with random phases, so the leader changes.
    Drifting,
    /// Gives 1 to the cell with the lowest cumulative gain so far, 0 elsewhere.
    LeaderAdversary,
    /// Stochastic means plus Gaussian noise (σ = 0.5); out-of-range values are clamped.
    Noisy,
}

impl GainGenerator {
    /// The adversarial and stochastic families exercised by the regret checks.
    pub const BUILTIN: [GainGenerator; 5] = [
        GainGenerator::Alternating,
        GainGenerator::Stochastic,
        GainGenerator::Drifting,
        GainGenerator::LeaderAdversary,
        GainGenerator::Noisy,
    ];

    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "alternating" => Some(GainGenerator::Alternating),
            "stochastic" => Some(GainGenerator::Stochastic),
            "drifting" => Some(GainGenerator::Drifting),
            "leader_adversary" => Some(GainGenerator::LeaderAdversary),
            "noisy" => Some(GainGenerator::Noisy),
            other => {
                let v = other.strip_prefix("constant")?;
                let v = v.strip_prefix(':').unwrap_or("0.5");
                let v = if v.is_empty() { "0.5" } else { v };
                v.parse().ok().map(GainGenerator::Constant)
            }
        }
    }

    pub fn name(&self) -> String {
        match self {
            GainGenerator::Constant(c) => format!("constant:{c}"),
            GainGenerator::Alternating => "alternating".into(),
            GainGenerator::Stochastic => "stochastic".into(),
            GainGenerator::Drifting => "drifting".into(),
            GainGenerator::LeaderAdversary => "leader_adversary".into(),
            GainGenerator::Noisy => "noisy".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnlineGameConfig {
    pub num_classes: usize,
    pub horizon: usize,
    /// Inverse temperature (ignored by the variant, which uses its tuned value).
    pub s: f64,
    pub generator: GainGenerator,
    pub policy: GamePolicy,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GameReport {
    pub policy: String,
    pub generator: String,
    pub num_classes: usize,
    pub horizon: usize,
    pub seed: u64,
    pub s: f64,
    /// Mean realized gain of the sampled cells.
    pub avg_gain_policy: f64,
    /// Mean of `⟨P_t, G_t⟩` (the policy's expected gain).
    pub avg_expected_gain_policy: f64,
    pub avg_gain_best_fixed: f64,
    /// `avg_gain_best_fixed − avg_gain_policy`.
    pub regret: f64,
    /// Theoretical bound on the average regret, for the two softmax policies.
    pub bound: Option<f64>,
    /// Generator values that fell outside `[0, 1]` and were clamped.
    pub clamped: usize,
}

/// Tuned inverse temperature of the variant: `ln(1 + 2√(ln K / T))`.
pub fn variant_inverse_temperature(k: usize, horizon: usize) -> f64 {
    let alpha = 2.0 * ((k as f64).ln() / horizon as f64).sqrt();
    alpha.ln_1p()
}

struct GeneratorState {
    kind: GainGenerator,
    means: Vec<f64>,
    phases: Vec<f64>,
    cumulative: Vec<f64>,
}

impl GeneratorState {
    fn new<R: Rng>(kind: GainGenerator, cells: usize, rng: &mut R) -> Self {
        let means = (0..cells).map(|_| rng.random::<f64>()).collect();
        let phases = (0..cells)
            .map(|_| rng.random::<f64>() * std::f64::consts::TAU)
            .collect();
        GeneratorState {
            kind,
            means,
            phases,
            cumulative: vec![0.0; cells],
        }
    }

    /// Raw values for round `t` (may leave `[0,1]` for the noisy generator).
    fn emit<R: Rng>(&mut self, t: usize, horizon: usize, rng: &mut R) -> Vec<f64> {
        let cells = self.means.len();
        let out: Vec<f64> = match self.kind {
            GainGenerator::Constant(c) => vec![c; cells],
            GainGenerator::Alternating => (0..cells)
                .map(|c| if c == t % 2 % cells { 1.0 } else { 0.0 })
                .collect(),
            GainGenerator::Stochastic => self
                .means
                .iter()
                .map(|&m| if rng.random::<f64>() < m { 1.0 } else { 0.0 })
                .collect(),
            GainGenerator::Drifting => {
                let x = std::f64::consts::TAU * 3.0 * t as f64 / horizon.max(1) as f64;
                self.phases
                    .iter()
                    .map(|ph| 0.5 + 0.5 * (x + ph).sin())
                    .collect()
            }
            GainGenerator::LeaderAdversary => {
                let mut low = 0;
                for c in 1..cells {
                    if self.cumulative[c] < self.cumulative[low] {
                        low = c;
                    }
                }
                (0..cells)
                    .map(|c| if c == low { 1.0 } else { 0.0 })
                    .collect()
            }
            GainGenerator::Noisy => self
                .means
                .iter()
                .map(|&m| m + 0.5 * rng.sample::<f64, _>(StandardNormal))
                .collect(),
        };
        out
    }
}

/// Plays `cfg.horizon` rounds. Gains live in `[−1, 1]` (`2u − 1`) for every
/// policy except the variant, which is played on `[0, 1]`.
pub fn run_online_game(cfg: &OnlineGameConfig) -> Result<GameReport> {
    let k = cfg.num_classes;
    if k < 1 || cfg.horizon < 1 {
        return Err(SelmixError::invalid("online game needs K >= 1 and T >= 1"));
    }
    if let GamePolicy::Fixed(i, j) = cfg.policy {
        if i >= k || j >= k {
            return Err(SelmixError::invalid("fixed cell out of range"));
        }
    }
    let cells = k * k;
    let horizon = cfg.horizon;
    let variant = cfg.policy == GamePolicy::SelmixHedgeVariant;
    let s = if variant {
        variant_inverse_temperature(k, horizon)
    } else {
        cfg.s
    };
    let mut gen_rng = indexed_stream(cfg.seed, Stream::Game, 0);
    let mut policy_rng = indexed_stream(cfg.seed, Stream::Game, 1);
    let mut generator = GeneratorState::new(cfg.generator, cells, &mut gen_rng);

    let mut cumulative = vec![0.0; cells];
    let mut realized = 0.0;
    let mut expected = 0.0;
    let mut clamped = 0;
    for t in 0..horizon {
        let raw = generator.emit(t, horizon, &mut gen_rng);
        let gains: Vec<f64> = raw
            .into_iter()
            .map(|u| {
                if !(0.0..=1.0).contains(&u) {
                    clamped += 1;
                }
                let u = u.clamp(0.0, 1.0);
                if variant {
                    u
                } else {
                    2.0 * u - 1.0
                }
            })
            .collect();

        let scores: Vec<f64> = match cfg.policy {
            GamePolicy::SelmixHedge => cumulative
                .iter()
                .zip(&gains)
                .map(|(c, g)| s * (c + g))
                .collect(),
            GamePolicy::SelmixHedgeVariant => cumulative.iter().map(|c| s * c).collect(),
            _ => Vec::new(),
        };
        let probs: Vec<f64> = match cfg.policy {
            GamePolicy::SelmixHedge | GamePolicy::SelmixHedgeVariant => {
                crate::classifier::softmax(&scores)
            }
            GamePolicy::Uniform => vec![1.0 / cells as f64; cells],
            GamePolicy::Fixed(i, j) => one_hot_cells(cells, i * k + j),
            GamePolicy::Greedy => one_hot_cells(cells, crate::classifier::argmax(&cumulative)),
        };
        let policy = MixPolicy {
            probs: DMatrix::from_row_slice(k, k, &probs),
        };
        let (i, j) = policy.sample_pair(&mut policy_rng);
        realized += gains[i * k + j];
        expected += probs.iter().zip(&gains).map(|(p, g)| p * g).sum::<f64>();

        for (c, g) in cumulative.iter_mut().zip(&gains) {
            *c += g;
        }
        for (c, u) in generator.cumulative.iter_mut().zip(&gains) {
            *c += u;
        }
    }
    let best = cumulative.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let tf = horizon as f64;
    let ln_k = (k as f64).ln();
    let bound = match cfg.policy {
        GamePolicy::SelmixHedge => Some(2.0 * ln_k / (s * tf)),
        GamePolicy::SelmixHedgeVariant => Some(2.0 * (tf * ln_k).sqrt() / tf),
        _ => None,
    };
    Ok(GameReport {
        policy: cfg.policy.name(),
        generator: cfg.generator.name(),
        num_classes: k,
        horizon,
        seed: cfg.seed,
        s,
        avg_gain_policy: realized / tf,
        avg_expected_gain_policy: expected / tf,
        avg_gain_best_fixed: best / tf,
        regret: (best - realized) / tf,
        bound,
        clamped,
    })
}

fn one_hot_cells(cells: usize, hot: usize) -> Vec<f64> {
    let mut v = vec![0.0; cells];
    v[hot] = 1.0;
    v
}

/// Aggregate of one (policy, generator, K, T) cell over several seeds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegretSummary {
    pub policy: String,
    pub generator: String,
    pub num_classes: usize,
    pub horizon: usize,
    pub seeds: usize,
    pub mean_regret: f64,
    /// Standard error of the mean regret across seeds.
    pub std_error: f64,
    pub bound: Option<f64>,
    /// `mean_regret ≤ bound + 3·std_error` (true when there is no bound).
    pub within_bound: bool,
}

pub fn summarize_regret(reports: &[GameReport]) -> Result<RegretSummary> {
    let first = reports
        .first()
        .ok_or_else(|| SelmixError::invalid("no game reports to summarize"))?;
    let n = reports.len() as f64;
    let mean = reports.iter().map(|r| r.regret).sum::<f64>() / n;
    let var = if reports.len() > 1 {
        reports
            .iter()
            .map(|r| (r.regret - mean).powi(2))
            .sum::<f64>()
            / (n - 1.0)
    } else {
        0.0
    };
    let std_error = (var / n).sqrt();
    let within_bound = first.bound.is_none_or(|b| mean <= b + 3.0 * std_error);
    Ok(RegretSummary {
        policy: first.policy.clone(),
        generator: first.generator.clone(),
        num_classes: first.num_classes,
        horizon: first.horizon,
        seeds: reports.len(),
        mean_regret: mean,
        std_error,
        bound: first.bound,
        within_bound,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn gains(k: usize, vals: &[f64]) -> GainMatrix {
        GainMatrix::new(DMatrix::from_row_slice(k, k, vals)).unwrap()
    }

    #[test]
    fn zero_temperature_is_uniform_over_support() {
        let g = gains(2, &[1.0, 0.0, 0.5, -2.0]);
        let p = selmix_distribution(&g, 0.0, true);
        for (i, j) in [(0, 0), (0, 1), (1, 0)] {
            assert_eq!(p.get(i, j), 1.0 / 3.0);
        }
        assert_eq!(p.get(1, 1), 0.0);
        let p = selmix_distribution(&g, 0.0, false);
        assert!(p.probs().iter().all(|&x| x == 0.25));
    }

    #[test]
    fn masked_three_term_softmax() {
        let g = gains(2, &[1.0, 0.0, 0.0, -5.0]);
        let p = selmix_distribution(&g, 1.0, true);
        let e = std::f64::consts::E;
        let z = e + 2.0;
        assert!((p.get(0, 0) - e / z).abs() < 1e-15);
        assert!((p.get(0, 1) - 1.0 / z).abs() < 1e-15);
        assert!((p.get(1, 0) - 1.0 / z).abs() < 1e-15);
        assert_eq!(p.get(1, 1), 0.0);
        assert!((p.get(0, 0) - 0.5761).abs() < 1e-4);
    }

    #[test]
    fn all_negative_falls_back_to_full_softmax() {
        let g = gains(2, &[-1.0, -2.0, -3.0, -4.0]);
        let p = selmix_distribution(&g, 1.0, true);
        assert!(p.probs().iter().all(|&x| x > 0.0));
        assert!(p.get(0, 0) > p.get(0, 1));
    }

    #[test]
    fn large_scale_concentrates_on_argmax() {
        let g = gains(3, &[0.1, 0.5, 0.2, 0.3, 0.0, 0.4, 0.1, 0.2, 0.3]);
        let p = selmix_distribution(&g, 100.0, true);
        assert!(p.get(0, 1) >= 1.0 - 1e-4);
    }

    #[test]
    fn greedy_cases() {
        let g = gains(2, &[0.1, 0.9, 0.3, 0.2]);
        assert_eq!(greedy_distribution(&g), MixPolicy::one_hot(2, 0, 1));
        let flat = gains(2, &[0.7; 4]);
        assert_eq!(greedy_distribution(&flat), MixPolicy::one_hot(2, 0, 0));
        let scaled = GainMatrix::new(g.values() * 7.5).unwrap();
        assert_eq!(greedy_distribution(&scaled), greedy_distribution(&g));
    }

    #[test]
    fn one_hot_sampling_is_constant() {
        let p = MixPolicy::one_hot(3, 2, 1);
        let mut rng = stream(0, Stream::PairSampling);
        assert!((0..1000).all(|_| p.sample_pair(&mut rng) == (2, 1)));
    }

    #[test]
    fn two_cell_ratio() {
        let mut probs = DMatrix::zeros(2, 2);
        probs[(0, 1)] = 0.75;
        probs[(1, 0)] = 0.25;
        let p = MixPolicy::new(probs).unwrap();
        let mut rng = stream(5, Stream::PairSampling);
        let n = 100_000;
        let hits = (0..n).filter(|_| p.sample_pair(&mut rng) == (0, 1)).count() as f64;
        let sd = (n as f64 * 0.75 * 0.25).sqrt();
        assert!((hits - 0.75 * n as f64).abs() <= 3.0 * sd);
    }

    #[test]
    fn constant_generator_has_zero_regret() {
        for policy in [
            GamePolicy::SelmixHedge,
            GamePolicy::SelmixHedgeVariant,
            GamePolicy::Uniform,
            GamePolicy::Greedy,
        ] {
            let r = run_online_game(&OnlineGameConfig {
                num_classes: 3,
                horizon: 200,
                s: 1.0,
                generator: GainGenerator::Constant(0.3),
                policy,
                seed: 1,
            })
            .unwrap();
            assert!(r.regret.abs() < 1e-12, "{policy:?}: {}", r.regret);
        }
    }

    #[test]
    fn single_cell_game_has_zero_regret() {
        let r = run_online_game(&OnlineGameConfig {
            num_classes: 1,
            horizon: 50,
            s: 1.0,
            generator: GainGenerator::Stochastic,
            policy: GamePolicy::SelmixHedgeVariant,
            seed: 3,
        })
        .unwrap();
        assert_eq!(r.regret, 0.0);
        assert_eq!(r.bound, Some(0.0));
    }

    #[test]
    fn names_parse_back() {
        for p in [
            GamePolicy::SelmixHedge,
            GamePolicy::SelmixHedgeVariant,
            GamePolicy::Uniform,
            GamePolicy::Greedy,
            GamePolicy::Fixed(1, 2),
        ] {
            assert_eq!(GamePolicy::parse(&p.name()), Some(p));
        }
        for g in GainGenerator::BUILTIN {
            assert_eq!(GainGenerator::parse(&g.name()), Some(g));
        }
        assert_eq!(
            GainGenerator::parse("constant:0.25"),
            Some(GainGenerator::Constant(0.25))
        );
        assert_eq!(GamePolicy::parse("bogus"), None);
    }

    #[test]
    fn noisy_generator_counts_clamps() {
        let r = run_online_game(&OnlineGameConfig {
            num_classes: 2,
            horizon: 100,
            s: 1.0,
            generator: GainGenerator::Noisy,
            policy: GamePolicy::Uniform,
            seed: 0,
        })
        .unwrap();
        assert!(r.clamped > 0);
    }
}
