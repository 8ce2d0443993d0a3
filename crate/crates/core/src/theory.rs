//! Numerical checks of two theoretical statements: the `O(1/t)` convergence
//! of ascent along directions that are only partially aligned with the
//! gradient, and the second-order expansion of the mixup loss as the standard
//! loss plus a quadratic regularizer.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::classifier::{log_sum_exp, softmax};
use crate::error::{Result, SelmixError};
use crate::rng::{indexed_stream, stream, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceConfig {
    pub num_classes: usize,
    pub dim: usize,
    /// Probability of stepping along the exact gradient direction; otherwise
    /// the direction is uniform on the sphere.
    pub alignment_c: f64,
    pub horizon: usize,
    pub seed: u64,
    /// Start the iterates at the maximizer.
    pub start_at_optimum: bool,
}

impl ConvergenceConfig {
    pub fn new(alignment_c: f64, seed: u64) -> Self {
        ConvergenceConfig {
            num_classes: 10,
            dim: 16,
            alignment_c,
            horizon: 1000,
            seed,
            start_at_optimum: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    /// `ψ(W*) − ψ(W⁽ᵗ⁾)` for `t = 1..=T`.
    pub suboptimality: Vec<f64>,
    /// Smoothness constant of `ψ(W) = −‖W − W*‖²`.
    pub gamma: f64,
    /// `‖W*‖ + max_t ‖W⁽ᵗ⁾‖`.
    pub r0: f64,
    /// Log-log decay slope (see [`fit_decay_exponent`]). `None` when fewer
    /// than two points are usable.
    pub fitted_rate_exponent: Option<f64>,
    /// Every `t > 10` satisfies `subopt ≤ 4γR₀²/(c²(t−1))`.
    pub bound_satisfied: bool,
    pub violations: usize,
}

fn random_unit(len: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    loop {
        let v = DMatrix::from_fn(len, 1, |_, _| rng.sample::<f64, _>(StandardNormal));
        let n = v.norm();
        if n > 1e-12 {
            return v / n;
        }
    }
}

/// Runs partially aligned ascent on a concave quadratic and compares the
/// trajectory with the `4γR₀²/(c²(t−1))` envelope.
pub fn convergence_check(cfg: &ConvergenceConfig) -> Result<ConvergenceReport> {
    if cfg.horizon < 100 {
        return Err(SelmixError::invalid("convergence check needs T >= 100"));
    }
    if !(cfg.alignment_c > 0.0 && cfg.alignment_c <= 1.0) {
        return Err(SelmixError::invalid("alignment_c must lie in (0, 1]"));
    }
    let len = cfg.num_classes * cfg.dim;
    if len == 0 {
        return Err(SelmixError::invalid("empty parameter space"));
    }
    let gamma = 2.0;
    let c = cfg.alignment_c;
    let mut init_rng = stream(cfg.seed, Stream::Features);
    let mut dir_rng = stream(cfg.seed, Stream::Perturbation);
    let optimum = DMatrix::from_fn(len, 1, |_, _| init_rng.sample::<f64, _>(StandardNormal));
    let mut w = if cfg.start_at_optimum {
        optimum.clone()
    } else {
        DMatrix::from_fn(len, 1, |_, _| init_rng.sample::<f64, _>(StandardNormal))
    };

    let mut subopt = Vec::with_capacity(cfg.horizon);
    let mut max_norm = w.norm();
    for _ in 0..cfg.horizon {
        let diff = &w - &optimum;
        subopt.push(diff.norm_squared());
        let grad = diff * -2.0;
        let grad_norm = grad.norm();
        let direction = if grad_norm == 0.0 {
            DMatrix::zeros(len, 1)
        } else if dir_rng.random::<f64>() < c {
            &grad / grad_norm
        } else {
            random_unit(len, &mut dir_rng)
        };
        let eta = c / (2.0 * gamma) * grad_norm;
        w += direction * eta;
        max_norm = max_norm.max(w.norm());
    }
    let r0 = optimum.norm() + max_norm;
    let envelope = |t: usize| 4.0 * gamma * r0 * r0 / (c * c * (t as f64 - 1.0));
    let violations = subopt
        .iter()
        .enumerate()
        .map(|(idx, &s)| (idx + 1, s))
        .filter(|&(t, s)| t > 10 && s > envelope(t))
        .count();
    Ok(ConvergenceReport {
        fitted_rate_exponent: fit_decay_exponent(&subopt),
        suboptimality: subopt,
        gamma,
        r0,
        bound_satisfied: violations == 0,
        violations,
    })
}

/// Least-squares slope of `ln s_t` against `ln t` over `[t_end/2, t_end]`.
///
/// `t_end` is the last step before the suboptimality first drops to
/// `s_1 · ε` (machine epsilon); past that point the iterates sit on the
/// floating-point floor and the trajectory carries no rate information.
pub fn fit_decay_exponent(subopt: &[f64]) -> Option<f64> {
    let floor = subopt.first()? * f64::EPSILON;
    let end = subopt
        .iter()
        .position(|&s| s <= floor)
        .unwrap_or(subopt.len());
    let points: Vec<(f64, f64)> = (end / 2..=end)
        .filter(|&t| t >= 1 && subopt[t - 1] > 0.0)
        .map(|t| ((t as f64).ln(), subopt[t - 1].ln()))
        .collect();
    if points.len() < 2 {
        return None;
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = points.iter().map(|(x, _)| (x - mx).powi(2)).sum();
    Some(sxy / sxx)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixupRegConfig {
    pub num_classes: usize,
    pub dim: usize,
    /// Parameters `(α, β)` of the mixing distribution `Beta(α, β)`.
    pub alpha_beta: (f64, f64),
    /// `Θ = theta_scale · Θ₀` with `Θ₀` standard normal and `θ_K = 0`.
    pub theta_scale: f64,
    pub num_samples: usize,
    pub mc_pairs: usize,
    /// Draws for the moment `E[(1−λ)²/(2λ²)]` under the reweighted mixture.
    pub moment_draws: usize,
    pub seed: u64,
}

impl MixupRegConfig {
    pub fn new(theta_scale: f64, seed: u64) -> Self {
        MixupRegConfig {
            num_classes: 4,
            dim: 5,
            alpha_beta: (2.0, 2.0),
            theta_scale,
            num_samples: 200,
            mc_pairs: 20_000,
            moment_draws: 200_000,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixupRegReport {
    /// Monte-Carlo loss on rescaled mixtures `x_n + ((1−λ)/λ)·x_m`, the form
    /// whose second-order expansion is `taylor_approx`.
    pub mixup_loss_mc: f64,
    /// Monte-Carlo loss of plain input-and-label mixup. It differs from
    /// `mixup_loss_mc` at first order in `Θ`.
    pub plain_mixup_loss_mc: f64,
    pub std_loss: f64,
    /// `E[(1−λ)²/(2λ²)]` under the reweighted mixture, by Monte Carlo.
    pub moment: f64,
    /// `Tr(Ĥ Θ̃ Σ̂ Θ̃ᵀ)` with `Ĥ` averaged over samples.
    pub regularizer: f64,
    pub taylor_approx: f64,
    pub rel_error: f64,
    pub hessian_min_eigenvalue: f64,
}

/// Mixture `α/(α+β)·Beta(α+1, β) + β/(α+β)·Beta(β+1, α)`.
#[derive(Debug, Clone, Copy)]
pub struct ReweightedBeta {
    first_weight: f64,
    first: Beta<f64>,
    second: Beta<f64>,
}

impl ReweightedBeta {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        let bad = |e: rand_distr::BetaError| SelmixError::Sampling(e.to_string());
        Ok(ReweightedBeta {
            first_weight: alpha / (alpha + beta),
            first: Beta::new(alpha + 1.0, beta).map_err(bad)?,
            second: Beta::new(beta + 1.0, alpha).map_err(bad)?,
        })
    }
}

impl Distribution<f64> for ReweightedBeta {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if rng.random::<f64>() < self.first_weight {
            self.first.sample(rng)
        } else {
            self.second.sample(rng)
        }
    }
}

/// Hessian of `ξ ↦ log(1 + Σ exp ξ_i)` at the first `K−1` logits (`θ_K = 0`).
fn softplus_hessian(logits: &[f64]) -> DMatrix<f64> {
    let p = softmax(logits);
    let m = logits.len() - 1;
    DMatrix::from_fn(m, m, |a, b| {
        let diag = if a == b { p[a] } else { 0.0 };
        diag - p[a] * p[b]
    })
}

/// Compares a Monte-Carlo estimate of the mixup loss with its second-order
/// expansion around the standard loss.
pub fn mixup_regularization_check(cfg: &MixupRegConfig) -> Result<MixupRegReport> {
    let (a, b) = cfg.alpha_beta;
    if !(a > 1.0 && b > 1.0) {
        return Err(SelmixError::RegularizerMomentDiverges);
    }
    let k = cfg.num_classes;
    let d = cfg.dim;
    if k < 2 || d < 1 || cfg.num_samples < 2 || cfg.mc_pairs < 1 || cfg.moment_draws < 1 {
        return Err(SelmixError::invalid(
            "need K >= 2, d >= 1, N >= 2 and positive draw counts",
        ));
    }
    if !(cfg.theta_scale >= 0.0) || !cfg.theta_scale.is_finite() {
        return Err(SelmixError::invalid("theta_scale must be finite and >= 0"));
    }

    // Data and Θ₀ do not depend on theta_scale, so runs at different scales
    // share every random draw.
    let mut data_rng = stream(cfg.seed, Stream::Features);
    let n = cfg.num_samples;
    let means: Vec<Vec<f64>> = (0..k)
        .map(|_| {
            (0..d)
                .map(|_| data_rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();
    let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    let mut xs: Vec<Vec<f64>> = labels
        .iter()
        .map(|&y| {
            means[y]
                .iter()
                .map(|m| m + 0.5 * data_rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();
    let center: Vec<f64> = (0..d)
        .map(|c| xs.iter().map(|x| x[c]).sum::<f64>() / n as f64)
        .collect();
    for x in &mut xs {
        for (v, m) in x.iter_mut().zip(&center) {
            *v -= m;
        }
    }
    let mut theta_rng = stream(cfg.seed, Stream::Perturbation);
    let theta = DMatrix::from_fn(k, d, |r, _| {
        let z: f64 = theta_rng.sample(StandardNormal);
        if r == k - 1 {
            0.0
        } else {
            cfg.theta_scale * z
        }
    });
    let logits = |x: &[f64]| -> Vec<f64> {
        (0..k)
            .map(|r| (0..d).map(|c| theta[(r, c)] * x[c]).sum())
            .collect()
    };
    let ce = |y: usize, x: &[f64]| {
        let l = logits(x);
        log_sum_exp(&l) - l[y]
    };

    let std_losses: Vec<f64> = xs.iter().zip(&labels).map(|(x, &y)| ce(y, x)).collect();
    let std_loss = std_losses.iter().sum::<f64>() / n as f64;
    // ∇_x ℓ(y, Θx) = Θ̃ᵀ(p̃ − e_y) including the zero last row
    let input_grads: Vec<Vec<f64>> = xs
        .iter()
        .zip(&labels)
        .map(|(x, &y)| {
            let mut p = softmax(&logits(x));
            p[y] -= 1.0;
            (0..d)
                .map(|c| (0..k).map(|r| theta[(r, c)] * p[r]).sum())
                .collect()
        })
        .collect();

    // Rescaled mixup: x_n + ((1−λ)/λ)·x_m with λ from the reweighted mixture.
    // The linear term in x_m has mean zero over m and is subtracted as a
    // control variate.
    let reweighted = ReweightedBeta::new(a, b)?;
    let mut pair_rng = indexed_stream(cfg.seed, Stream::PairSampling, 0);
    let mut mixed = vec![0.0; d];
    let mut excess = 0.0;
    for _ in 0..cfg.mc_pairs {
        let i = pair_rng.random_range(0..n);
        let j = pair_rng.random_range(0..n);
        let lam = reweighted.sample(&mut pair_rng);
        let ratio = (1.0 - lam) / lam;
        for (c, m) in mixed.iter_mut().enumerate() {
            *m = xs[i][c] + ratio * xs[j][c];
        }
        let linear: f64 = input_grads[i].iter().zip(&xs[j]).map(|(g, x)| g * x).sum();
        excess += ce(labels[i], &mixed) - std_losses[i] - ratio * linear;
    }
    let mixup_loss_mc = std_loss + excess / cfg.mc_pairs as f64;

    // The plain definition: mix inputs and labels with λ ~ Beta(α, β).
    let plain = Beta::new(a, b).map_err(|e| SelmixError::Sampling(e.to_string()))?;
    let mut plain_rng = indexed_stream(cfg.seed, Stream::PairSampling, 1);
    let mut total = 0.0;
    for _ in 0..cfg.mc_pairs {
        let i = plain_rng.random_range(0..n);
        let j = plain_rng.random_range(0..n);
        let lam = plain.sample(&mut plain_rng);
        for (c, m) in mixed.iter_mut().enumerate() {
            *m = lam * xs[i][c] + (1.0 - lam) * xs[j][c];
        }
        total += lam * ce(labels[i], &mixed) + (1.0 - lam) * ce(labels[j], &mixed);
    }
    let plain_mixup_loss_mc = total / cfg.mc_pairs as f64;

    let mut hessian = DMatrix::zeros(k - 1, k - 1);
    for x in &xs {
        hessian += softplus_hessian(&logits(x));
    }
    hessian /= n as f64;
    let sigma = DMatrix::from_fn(d, d, |r, c| {
        xs.iter().map(|x| x[r] * x[c]).sum::<f64>() / n as f64
    });
    let theta_tilde = theta.rows(0, k - 1).into_owned();
    let regularizer = (&hessian * &theta_tilde * sigma * theta_tilde.transpose()).trace();

    let moment = mixture_moment(a, b, cfg.moment_draws, cfg.seed)?;
    let taylor_approx = std_loss + moment * regularizer;
    let rel_error = if mixup_loss_mc == taylor_approx {
        0.0
    } else {
        (mixup_loss_mc - taylor_approx).abs() / mixup_loss_mc.abs()
    };
    let hessian_min_eigenvalue = SymmetricEigen::new(hessian)
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    Ok(MixupRegReport {
        mixup_loss_mc,
        plain_mixup_loss_mc,
        std_loss,
        moment,
        regularizer,
        taylor_approx,
        rel_error,
        hessian_min_eigenvalue,
    })
}

/// Monte-Carlo `E[(1−λ)²/(2λ²)]` with `λ` from the reweighted mixture.
pub fn mixture_moment(alpha: f64, beta: f64, draws: usize, seed: u64) -> Result<f64> {
    if !(alpha > 1.0 && beta > 1.0) {
        return Err(SelmixError::RegularizerMomentDiverges);
    }
    let dist = ReweightedBeta::new(alpha, beta)?;
    let mut rng = stream(seed, Stream::Beta);
    let sum: f64 = (0..draws)
        .map(|_| {
            let lam = dist.sample(&mut rng);
            (1.0 - lam).powi(2) / (2.0 * lam * lam)
        })
        .sum();
    Ok(sum / draws.max(1) as f64)
}
