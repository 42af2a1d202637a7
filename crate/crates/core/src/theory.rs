//! First-order coverage and set-size bounds under calibration and test-time
//! attacks, together with the estimators that feed them.
//!
//! All bounds drop their `o(eps^2)` remainders; comparisons against
//! empirical coverage should allow a margin at larger strengths.

use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::AttackSpec;
use crate::conformal::{calibrate, evaluate, CalibrationResult, ScoreKind};
use crate::dataio::{LabeledDataset, SplitIndices};
use crate::error::{Error, Result};
use crate::model::Classifier;
use crate::seed;

/// Minimum samples for a kernel density estimate.
pub const MIN_KDE_SAMPLES: usize = 50;
/// Minimum samples inside the window of [`estimate_c`].
pub const MIN_WINDOW_SAMPLES: usize = 20;
pub const DEFAULT_C_WINDOW: f64 = 0.05;
/// Lemma checks need at least this many Monte-Carlo draws.
pub const MIN_LEMMA_SAMPLES: usize = 100_000;
pub const MAX_LEMMA_EPS: f64 = 0.05;

/// Concentration and stability constants of the exchangeable coverage bound.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ErrorBudget {
    pub e_train: f64,
    pub d_cal: f64,
    pub e_cal: f64,
}

impl ErrorBudget {
    pub fn new(e_train: f64, d_cal: f64, e_cal: f64) -> Result<Self> {
        let b = Self { e_train, d_cal, e_cal };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if [self.e_train, self.d_cal, self.e_cal]
            .iter()
            .all(|v| v.is_finite() && *v >= 0.0)
        {
            Ok(())
        } else {
            Err(Error::arg(format!("error budget terms must be finite and >= 0: {self:?}")))
        }
    }

    pub fn total(&self) -> f64 {
        self.e_train + self.d_cal + self.e_cal
    }
}

/// Local sensitivity of `f_y(x)` around the calibrated threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalGeometry {
    /// Mean `||grad_x f_y(x)||`.
    pub grad_norm: f64,
    /// Mean gradient norm conditional on `f_y(x)` sitting at the threshold.
    pub c: f64,
    /// Density of `f_y(x)` at the threshold.
    pub density_at_q: f64,
}

/// Range of test-time strengths whose coverage stays within `beta` of target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToleranceBand {
    pub beta: f64,
    pub eps_lo: f64,
    pub eps_hi: f64,
    pub length: f64,
}

fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `(f_y(x), ||grad_x f_y(x)||)` for every clean sample in `idx`, in order.
pub fn prob_and_grad_norms(model: &Classifier, ds: &LabeledDataset, idx: &[usize]) -> Result<Vec<(f64, f64)>> {
    ds.check_indices(idx)?;
    idx.par_iter()
        .map(|&i| {
            let (x, y) = (ds.row(i), ds.label(i));
            let p = model.forward(x)?[y];
            Ok((p, l2_norm(&model.grad_prob_input(x, y)?)))
        })
        .collect()
}

/// Mean l2 norm of the true-class probability gradient over `idx`.
pub fn estimate_grad_norm(model: &Classifier, ds: &LabeledDataset, idx: &[usize]) -> Result<f64> {
    if idx.is_empty() {
        return Err(Error::arg("gradient-norm estimate over an empty index list"));
    }
    let pairs = prob_and_grad_norms(model, ds, idx)?;
    Ok(pairs.iter().map(|&(_, g)| g).sum::<f64>() / pairs.len() as f64)
}

/// Silverman's rule of thumb, `0.9 min(sd, IQR / 1.34) n^(-1/5)`.
pub fn silverman_bandwidth(samples: &[f64]) -> Result<f64> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::InsufficientData("bandwidth needs at least 2 samples".into()));
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    let sd = (samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let at = |q: f64| sorted[((q * (n - 1) as f64).round() as usize).min(n - 1)];
    let iqr = at(0.75) - at(0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    if !(spread > 0.0) {
        return Err(Error::InsufficientData("samples have zero spread".into()));
    }
    Ok(0.9 * spread * (n as f64).powf(-0.2))
}

/// Gaussian kernel density estimate at `point`.
pub fn estimate_density_at(samples: &[f64], point: f64, bandwidth: f64) -> Result<f64> {
    if samples.len() < MIN_KDE_SAMPLES {
        return Err(Error::InsufficientData(format!(
            "density estimate needs at least {MIN_KDE_SAMPLES} samples, got {}",
            samples.len()
        )));
    }
    if !(bandwidth > 0.0 && bandwidth.is_finite()) {
        return Err(Error::arg(format!("bandwidth must be > 0, got {bandwidth}")));
    }
    let norm = 1.0 / (bandwidth * (2.0 * PI).sqrt() * samples.len() as f64);
    let sum: f64 = samples
        .iter()
        .map(|&s| {
            let z = (point - s) / bandwidth;
            (-0.5 * z * z).exp()
        })
        .sum();
    Ok(norm * sum)
}

/// Mean gradient norm among samples with `|f_y(x) - q| <= window`.
pub fn estimate_c(model: &Classifier, ds: &LabeledDataset, idx: &[usize], q: f64, window: f64) -> Result<f64> {
    if !(window > 0.0) {
        return Err(Error::arg(format!("window must be > 0, got {window}")));
    }
    let pairs = prob_and_grad_norms(model, ds, idx)?;
    let inside: Vec<f64> = pairs
        .iter()
        .filter(|(p, _)| (p - q).abs() <= window)
        .map(|&(_, g)| g)
        .collect();
    if inside.len() < MIN_WINDOW_SAMPLES {
        return Err(Error::InsufficientData(format!(
            "only {} samples with f_y(x) within {window} of {q}; need {MIN_WINDOW_SAMPLES}",
            inside.len()
        )));
    }
    Ok(inside.iter().sum::<f64>() / inside.len() as f64)
}

/// `((2 eps_test - eps_cal) ||grad f|| - eps_cal c) g`; signed.
pub fn theorem1_gradient_term(geom: &LocalGeometry, eps_cal: f64, eps_test: f64) -> f64 {
    ((2.0 * eps_test - eps_cal) * geom.grad_norm - eps_cal * geom.c) * geom.density_at_q
}

/// Right-hand side of the coverage-deviation bound, without remainders.
pub fn theorem1_bound(budget: &ErrorBudget, geom: &LocalGeometry, eps_cal: f64, eps_test: f64) -> f64 {
    budget.total() + theorem1_gradient_term(geom, eps_cal, eps_test)
}

/// Test-time strengths for which the bound stays inside `[-beta, beta]`.
pub fn theorem2_band(budget: &ErrorBudget, geom: &LocalGeometry, eps_cal: f64, beta: f64) -> Result<ToleranceBand> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::arg(format!("beta must be > 0, got {beta}")));
    }
    if !(geom.grad_norm > 0.0 && geom.density_at_q > 0.0) {
        return Err(Error::DegenerateGeometry(format!(
            "grad_norm = {} and density_at_q = {} must both be positive",
            geom.grad_norm, geom.density_at_q
        )));
    }
    let scale = 2.0 * geom.grad_norm * geom.density_at_q;
    let shift = (geom.c + geom.grad_norm) * eps_cal / (2.0 * geom.grad_norm);
    let e = budget.total();
    let eps_lo = (-beta - e) / scale + shift;
    let eps_hi = (beta - e) / scale + shift;
    let length = 2.0 * beta / scale;
    debug_assert!(((eps_hi - eps_lo) - length).abs() <= 1e-12 * length.abs().max(shift.abs()).max(1.0));
    Ok(ToleranceBand {
        beta,
        eps_lo,
        eps_hi,
        length,
    })
}

/// `P(Beta(1, K - 2) >= t) = (1 - t)^(K - 2)` for `t` in `[0, 1]`.
pub fn beta_one_tail(t: f64, num_classes: usize) -> f64 {
    (1.0 - t.clamp(0.0, 1.0)).powi(num_classes as i32 - 2)
}

/// `(1 - q_hat) / (1 - p_true)`, clamped to `[0, 1]`.
pub fn threshold_ratio(q_hat: f64, p_true: f64) -> f64 {
    ((1.0 - q_hat) / (1.0 - p_true)).clamp(0.0, 1.0)
}

/// `1 - alpha + h + (K - 1)(1 - (1 - q_hat)/(1 - p_true))^(K - 2)`.
pub fn theorem3_setsize_bound(alpha: f64, h: f64, num_classes: usize, q_hat: f64, p_true: f64) -> Result<f64> {
    if num_classes < 3 {
        return Err(Error::arg(format!("set-size bound needs K >= 3, got {num_classes}")));
    }
    if !(0.0..=1.0).contains(&p_true) {
        return Err(Error::arg(format!("p_true must lie in [0, 1), got {p_true}")));
    }
    if p_true == 1.0 {
        return Err(Error::arg("degenerate input: p_true = 1 leaves no mass for wrong classes"));
    }
    let wrong = (num_classes - 1) as f64 * beta_one_tail(threshold_ratio(q_hat, p_true), num_classes);
    Ok(1.0 - alpha + h + wrong)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lemma1Point {
    pub eps: f64,
    pub empirical_q: f64,
    pub predicted_q: f64,
    pub deviation: f64,
    /// `|Q(f - eps g) - Q(f)|`
    pub shift: f64,
    /// `eps * max(g)`
    pub lipschitz_bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lemma1Report {
    pub alpha: f64,
    pub n_mc: usize,
    pub q0: f64,
    pub conditional_mean_g: f64,
    pub predicted_slope: f64,
    pub fitted_slope: f64,
    pub slope_error: f64,
    pub max_abs_deviation: f64,
    pub g_max: f64,
    pub lipschitz_ok: bool,
    pub points: Vec<Lemma1Point>,
}

/// The `ceil(level * n)`-th smallest value.
pub fn empirical_quantile(values: &mut [f64], level: f64) -> f64 {
    let n = values.len();
    let k = ((level * n as f64).ceil() as usize).clamp(1, n);
    *values.select_nth_unstable_by(k - 1, f64::total_cmp).1
}

/// Monte-Carlo check of the first-order quantile shift
/// `Q(f - eps g) = Q(f) - eps E[g | f = Q(f)] + o(eps)`.
///
/// One sample of `(f, g)` pairs is shared by every `eps`. The conditional
/// mean uses the samples whose rank in `f` lies within `n^0.8 / 2` of the
/// quantile rank.
pub fn lemma1_check<S>(mut sampler: S, alpha: f64, eps_grid: &[f64], n_mc: usize, seed: u64) -> Result<Lemma1Report>
where
    S: FnMut(&mut ChaCha8Rng) -> (f64, f64),
{
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::arg(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    if n_mc < MIN_LEMMA_SAMPLES {
        return Err(Error::arg(format!("n_mc must be >= {MIN_LEMMA_SAMPLES}, got {n_mc}")));
    }
    if eps_grid.is_empty() || eps_grid.iter().any(|&e| !(e > 0.0 && e <= MAX_LEMMA_EPS)) {
        return Err(Error::arg(format!("eps grid must be non-empty with values in (0, {MAX_LEMMA_EPS}]")));
    }
    let mut rng = seed::rng(seed);
    let mut pairs: Vec<(f64, f64)> = (0..n_mc).map(|_| sampler(&mut rng)).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));

    let level = 1.0 - alpha;
    let rank = ((level * n_mc as f64).ceil() as usize).clamp(1, n_mc) - 1;
    let q0 = pairs[rank].0;
    let half = ((n_mc as f64).powf(0.8) / 2.0).ceil() as usize;
    let window = &pairs[rank.saturating_sub(half)..(rank + half + 1).min(n_mc)];
    let conditional_mean_g = window.iter().map(|p| p.1).sum::<f64>() / window.len() as f64;
    let g_max = pairs.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);

    let mut buf = vec![0.0; n_mc];
    let points: Vec<Lemma1Point> = eps_grid
        .iter()
        .map(|&eps| {
            for (b, (f, g)) in buf.iter_mut().zip(&pairs) {
                *b = f - eps * g;
            }
            let empirical_q = empirical_quantile(&mut buf, level);
            let predicted_q = q0 - eps * conditional_mean_g;
            Lemma1Point {
                eps,
                empirical_q,
                predicted_q,
                deviation: empirical_q - predicted_q,
                shift: (empirical_q - q0).abs(),
                lipschitz_bound: eps * g_max.max(0.0),
            }
        })
        .collect();

    // least squares through the origin on (eps, Q(eps) - Q(0))
    let sxy: f64 = points.iter().map(|p| p.eps * (p.empirical_q - q0)).sum();
    let sxx: f64 = points.iter().map(|p| p.eps * p.eps).sum();
    let fitted_slope = sxy / sxx;
    let predicted_slope = -conditional_mean_g;
    Ok(Lemma1Report {
        alpha,
        n_mc,
        q0,
        conditional_mean_g,
        predicted_slope,
        fitted_slope,
        slope_error: (fitted_slope - predicted_slope).abs(),
        max_abs_deviation: points.iter().map(|p| p.deviation.abs()).fold(0.0, f64::max),
        g_max,
        lipschitz_ok: points.iter().all(|p| p.shift <= p.lipschitz_bound * (1.0 + 1e-12) + 1e-15),
        points,
    })
}

/// Geometry at the calibrated threshold. Requires an HPS calibration so the
/// calibration probabilities are `1 - score`; the threshold on the
/// probability scale is `1 - q_hat`.
pub fn local_geometry(
    model: &Classifier,
    ds: &LabeledDataset,
    idx: &[usize],
    cal: &CalibrationResult,
    bandwidth: Option<f64>,
    window: f64,
) -> Result<LocalGeometry> {
    if cal.score_kind != ScoreKind::Hps {
        return Err(Error::arg("local geometry needs an HPS calibration"));
    }
    if !cal.q_hat.is_finite() {
        return Err(Error::DegenerateGeometry("calibrated threshold is infinite".into()));
    }
    let probs: Vec<f64> = cal.cal_scores.iter().map(|s| 1.0 - s).collect();
    let point = 1.0 - cal.q_hat;
    let bandwidth = match bandwidth {
        Some(b) => b,
        None => silverman_bandwidth(&probs)?,
    };
    Ok(LocalGeometry {
        grad_norm: estimate_grad_norm(model, ds, idx)?,
        c: estimate_c(model, ds, idx, point, window)?,
        density_at_q: estimate_density_at(&probs, point, bandwidth)?,
    })
}

/// One seed's clean and adversarially trained models on a shared split.
#[derive(Debug, Clone)]
pub struct ModelPair {
    pub seed: u64,
    pub split: SplitIndices,
    pub clean: Classifier,
    pub adversarial: Classifier,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SetSizeSummary {
    pub q_hat: f64,
    /// Mean true-class probability on the attacked calibration set.
    pub p_true: f64,
    /// `(1 - q_hat) / (1 - p_true)`, unclamped.
    pub ratio: f64,
    pub wrong_class_term: f64,
    pub coverage: f64,
    pub mean_set_size: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeedComparison {
    pub seed: u64,
    pub clean: SetSizeSummary,
    pub adversarial: SetSizeSummary,
    /// Adversarial minus clean.
    pub set_size_diff: f64,
    pub ratio_diff: f64,
    pub p_true_diff: f64,
}

impl SeedComparison {
    pub fn adversarial_smaller(&self) -> bool {
        self.set_size_diff < 0.0
    }

    /// The set-size bound orders the two models like their set sizes do.
    /// The bound decreases in the ratio, so a smaller set should come with a
    /// larger ratio.
    pub fn ratio_consistent_with_bound(&self) -> bool {
        self.set_size_diff != 0.0 && self.ratio_diff.signum() == -self.set_size_diff.signum()
    }

    /// The adversarial model has the smaller ratio, `(1 - Q_adv)/(1 - P_adv) <
    /// (1 - Q_clean)/(1 - P_clean)`. Reported for comparison only.
    pub fn adversarial_ratio_smaller(&self) -> bool {
        self.ratio_diff < 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem3Report {
    pub alpha: f64,
    pub eps_cal: f64,
    pub eps_test: f64,
    pub per_seed: Vec<SeedComparison>,
    pub seeds_adversarial_smaller: usize,
    /// Seeds where the adversarial model is smaller and its ratio orders
    /// consistently with the bound.
    pub seeds_smaller_and_consistent: usize,
    pub seeds_adversarial_ratio_smaller: usize,
}

fn summarize_model(
    model: &Classifier,
    ds: &LabeledDataset,
    split: &SplitIndices,
    alpha: f64,
    cal_attack: &AttackSpec,
    test_attack: &AttackSpec,
    seed: u64,
) -> Result<SetSizeSummary> {
    let cal = calibrate(model, ds, &split.cal, alpha, ScoreKind::Hps, cal_attack, seed)?;
    let p_true = 1.0 - cal.cal_scores.iter().sum::<f64>() / cal.cal_scores.len() as f64;
    let ratio = (1.0 - cal.q_hat) / (1.0 - p_true);
    let wrong_class_term = if model.num_classes() >= 3 && p_true < 1.0 {
        theorem3_setsize_bound(alpha, 0.0, model.num_classes(), cal.q_hat, p_true)? - (1.0 - alpha)
    } else {
        f64::NAN
    };
    let ev = evaluate(model, ds, &split.test, &cal, test_attack, seed)?;
    Ok(SetSizeSummary {
        q_hat: cal.q_hat,
        p_true,
        ratio,
        wrong_class_term,
        coverage: ev.coverage,
        mean_set_size: ev.mean_set_size,
    })
}

/// Calibrate (HPS, `eps_cal`) and evaluate (`eps_test`) both models of every
/// pair, and compare set sizes and threshold ratios.
pub fn theorem3_empirical_compare(
    pairs: &[ModelPair],
    ds: &LabeledDataset,
    alpha: f64,
    cal_attack: &AttackSpec,
    test_attack: &AttackSpec,
) -> Result<Theorem3Report> {
    let per_seed = pairs
        .iter()
        .map(|p| {
            let clean = summarize_model(&p.clean, ds, &p.split, alpha, cal_attack, test_attack, p.seed)?;
            let adversarial = summarize_model(&p.adversarial, ds, &p.split, alpha, cal_attack, test_attack, p.seed)?;
            Ok(SeedComparison {
                seed: p.seed,
                clean,
                adversarial,
                set_size_diff: adversarial.mean_set_size - clean.mean_set_size,
                ratio_diff: adversarial.ratio - clean.ratio,
                p_true_diff: adversarial.p_true - clean.p_true,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Theorem3Report {
        alpha,
        eps_cal: cal_attack.epsilon.value(),
        eps_test: test_attack.epsilon.value(),
        seeds_adversarial_smaller: per_seed.iter().filter(|s| s.adversarial_smaller()).count(),
        seeds_smaller_and_consistent: per_seed
            .iter()
            .filter(|s| s.adversarial_smaller() && s.ratio_consistent_with_bound())
            .count(),
        seeds_adversarial_ratio_smaller: per_seed.iter().filter(|s| s.adversarial_ratio_smaller()).count(),
        per_seed,
    })
}

/// Uniform `[0, 1)` draw; convenience for samplers passed to [`lemma1_check`].
pub fn uniform(rng: &mut ChaCha8Rng) -> f64 {
    rng.random::<f64>()
}
