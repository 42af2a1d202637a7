//! Compare the first-order coverage and set-size bounds with empirical
//! behaviour on one trained model. Uses l2 attacks and HPS scores, where the
//! bounds are stated.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{prepare_run, SweepConfig};
use crate::attack::{AttackSpec, Epsilon, Norm};
use crate::conformal::{calibrate, evaluate, ScoreKind};
use crate::error::Result;
use crate::theory::{
    lemma1_check, local_geometry, prob_and_grad_norms, theorem1_bound, theorem2_band, theorem3_setsize_bound,
    threshold_ratio, uniform, ErrorBudget, Lemma1Report, LocalGeometry, ToleranceBand,
};
use crate::train::{accuracy, train};

const LEMMA_EPS: [f64; 5] = [0.01, 0.02, 0.03, 0.04, 0.05];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverageCheck {
    pub eps_test: Epsilon,
    pub coverage: f64,
    /// `coverage - (1 - alpha)`
    pub deviation: f64,
    /// First-order coverage-deviation bound.
    pub bound: f64,
    /// `|deviation| <= |bound|`
    pub within_bound: bool,
    pub inside_predicted_band: bool,
    pub mean_set_size: f64,
    /// Set-size bound using `bound` as the coverage slack; `None` for K < 3.
    pub set_size_bound: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryCheckReport {
    pub dataset: String,
    pub seed: u64,
    pub alpha: f64,
    pub beta: f64,
    pub num_classes: usize,
    pub hidden: usize,
    pub eps_cal: Epsilon,
    pub budget: ErrorBudget,
    pub clean_acc: f64,
    pub q_hat: f64,
    /// Mean true-class probability on the attacked calibration set.
    pub p_true: f64,
    pub threshold_ratio: f64,
    pub geometry: LocalGeometry,
    /// `None` with the reason when the geometry is degenerate.
    pub band: Option<ToleranceBand>,
    pub band_error: Option<String>,
    pub coverage: Vec<CoverageCheck>,
    /// Quantile shift on `f ~ U(0, 1)`, `g = f`.
    pub lemma_uniform: Lemma1Report,
    /// Quantile shift on `(f_y(x), ||grad f_y(x)||)` resampled from the test split.
    pub lemma_model: Lemma1Report,
}

impl TheoryCheckReport {
    /// `key: value` lines for terminals and logs.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| s.push_str(&format!("{k}: {v}\n"));
        kv("dataset", self.dataset.clone());
        kv("seed", self.seed.to_string());
        kv("alpha", self.alpha.to_string());
        kv("beta", self.beta.to_string());
        kv("num_classes", self.num_classes.to_string());
        kv("hidden", self.hidden.to_string());
        kv("eps_cal", self.eps_cal.to_string());
        kv("budget_total", self.budget.total().to_string());
        kv("clean_acc", format!("{:.4}", self.clean_acc));
        kv("q_hat", format!("{:.6}", self.q_hat));
        kv("p_true", format!("{:.6}", self.p_true));
        kv("threshold_ratio", format!("{:.6}", self.threshold_ratio));
        kv("grad_norm", format!("{:.6}", self.geometry.grad_norm));
        kv("c", format!("{:.6}", self.geometry.c));
        kv("density_at_q", format!("{:.6}", self.geometry.density_at_q));
        match (&self.band, &self.band_error) {
            (Some(b), _) => {
                kv("band_eps_lo", format!("{:.6}", b.eps_lo));
                kv("band_eps_hi", format!("{:.6}", b.eps_hi));
                kv("band_length", format!("{:.6}", b.length));
            }
            (None, Some(e)) => kv("band_error", e.clone()),
            (None, None) => {}
        }
        for c in &self.coverage {
            let ss = c.set_size_bound.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"));
            kv(
                &format!("eps_test {}", c.eps_test),
                format!(
                    "coverage {:.4} deviation {:+.4} bound {:+.4} within_bound {} in_band {} set_size {:.4} set_size_bound {ss}",
                    c.coverage, c.deviation, c.bound, c.within_bound, c.inside_predicted_band, c.mean_set_size
                ),
            );
        }
        for (name, l) in [("lemma_uniform", &self.lemma_uniform), ("lemma_model", &self.lemma_model)] {
            kv(
                name,
                format!(
                    "q0 {:.6} predicted_slope {:.6} fitted_slope {:.6} max_abs_deviation {:.2e} lipschitz_ok {}",
                    l.q0, l.predicted_slope, l.fitted_slope, l.max_abs_deviation, l.lipschitz_ok
                ),
            );
        }
        s
    }
}

/// Train on the first configured seed without attacks, calibrate at
/// `theory.eps_cal`, and report geometry, bounds and empirical coverage over
/// `theory.eps_test`.
pub fn run_theory_check(cfg: &SweepConfig) -> Result<TheoryCheckReport> {
    cfg.validate()?;
    let ds = cfg.data.load()?;
    let th = &cfg.theory;
    let (alpha, beta) = (cfg.conformal.alpha, cfg.conformal.beta);
    let seed = cfg.sweep.seeds[0];
    let mut model_cfg = cfg.clone();
    model_cfg.model.hidden = th.hidden;
    let (rs, split, init) = prepare_run(&model_cfg, &ds, seed)?;
    let l2 = |e: Epsilon| AttackSpec::new(Norm::L2, e);
    let model = train(&init, &ds, &split.train, &cfg.train.config(l2(Epsilon::ZERO), rs))?;
    let clean_acc = accuracy(&model, &ds, &split.test, &AttackSpec::none())?;

    let cal = calibrate(&model, &ds, &split.cal, alpha, ScoreKind::Hps, &l2(th.eps_cal), rs)?;
    let p_true = 1.0 - cal.cal_scores.iter().sum::<f64>() / cal.cal_scores.len() as f64;
    let geometry = local_geometry(&model, &ds, &split.test, &cal, th.bandwidth, th.c_window)?;
    let (band, band_error) = match theorem2_band(&th.budget, &geometry, th.eps_cal.value(), beta) {
        Ok(b) => (Some(b), None),
        Err(e) => (None, Some(e.to_string())),
    };
    let k = ds.num_classes();

    let coverage = th
        .eps_test
        .iter()
        .map(|&eps_test| {
            let ev = evaluate(&model, &ds, &split.test, &cal, &l2(eps_test), rs)?;
            let bound = theorem1_bound(&th.budget, &geometry, th.eps_cal.value(), eps_test.value());
            let deviation = ev.coverage - (1.0 - alpha);
            let set_size_bound = if k >= 3 && p_true < 1.0 {
                Some(theorem3_setsize_bound(alpha, bound.abs(), k, cal.q_hat, p_true)?)
            } else {
                None
            };
            Ok(CoverageCheck {
                eps_test,
                coverage: ev.coverage,
                deviation,
                bound,
                within_bound: deviation.abs() <= bound.abs(),
                inside_predicted_band: band.is_some_and(|b| (b.eps_lo..=b.eps_hi).contains(&eps_test.value())),
                mean_set_size: ev.mean_set_size,
                set_size_bound,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let lemma_uniform = lemma1_check(
        |rng| {
            let f = uniform(rng);
            (f, f)
        },
        alpha,
        &LEMMA_EPS,
        th.lemma_n_mc,
        crate::seed::derive(rs, &[1]),
    )?;
    let pairs = prob_and_grad_norms(&model, &ds, &split.test)?;
    let lemma_model = lemma1_check(
        |rng| pairs[rng.random_range(0..pairs.len())],
        alpha,
        &LEMMA_EPS,
        th.lemma_n_mc,
        crate::seed::derive(rs, &[2]),
    )?;

    Ok(TheoryCheckReport {
        dataset: cfg.data.id(),
        seed,
        alpha,
        beta,
        num_classes: k,
        hidden: th.hidden,
        eps_cal: th.eps_cal,
        budget: th.budget,
        clean_acc,
        q_hat: cal.q_hat,
        p_true,
        threshold_ratio: threshold_ratio(cal.q_hat, p_true),
        geometry,
        band,
        band_error,
        coverage,
        lemma_uniform,
        lemma_model,
    })
}
