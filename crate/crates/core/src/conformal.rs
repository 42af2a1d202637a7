//! Split conformal calibration and prediction sets.
//!
//! Calibration inputs are attacked with `eps_cal` before scoring; test inputs
//! are attacked with `eps_test` before their prediction sets are formed. A
//! label enters the set when its score is `<= q_hat`, so ties at the
//! threshold are included and sets may be empty.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{attack_dataset, perturb, AttackSpec, Epsilon};
use crate::dataio::LabeledDataset;
use crate::error::{Error, Result};
use crate::model::Classifier;
use crate::seed;

/// Rank slack for `(1 - alpha)(n + 1)`, so exact integer ranks survive rounding.
const RANK_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreKind {
    /// `1 - f_y(x)`
    #[default]
    Hps,
    /// Mass of strictly more likely classes plus `u * f_y(x)`.
    Aps,
}

impl fmt::Display for ScoreKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScoreKind::Hps => "hps",
            ScoreKind::Aps => "aps",
        })
    }
}

impl FromStr for ScoreKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "hps" => Ok(ScoreKind::Hps),
            "aps" => Ok(ScoreKind::Aps),
            other => Err(Error::arg(format!("unknown score kind {other:?}, expected hps or aps"))),
        }
    }
}

/// Nonconformity score of label `y` given class probabilities.
pub fn score_from_probs(probs: &[f64], y: usize, kind: ScoreKind, u: f64) -> f64 {
    let py = probs[y];
    match kind {
        ScoreKind::Hps => 1.0 - py,
        ScoreKind::Aps => {
            let above: f64 = probs.iter().filter(|&&p| p > py).sum();
            (above + u * py).min(1.0)
        }
    }
}

pub fn score(model: &Classifier, x: &[f64], y: usize, kind: ScoreKind, u: f64) -> Result<f64> {
    let probs = model.forward(x)?;
    if y >= probs.len() {
        return Err(Error::arg(format!("label {y} out of range for {} classes", probs.len())));
    }
    Ok(score_from_probs(&probs, y, kind, u))
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::arg(format!("alpha must lie in (0, 1), got {alpha}")))
    }
}

/// 1-based rank of the conformal quantile among `n` scores, or `None` when
/// the level `(1 - alpha)(1 + 1/n)` exceeds 1.
pub fn quantile_rank(n: usize, alpha: f64) -> Option<usize> {
    let r = (1.0 - alpha) * (n as f64 + 1.0);
    let k = ((r - RANK_SLACK).ceil() as usize).max(1);
    (k <= n).then_some(k)
}

/// The `(1 - alpha)(1 + 1/n)` empirical quantile: the `ceil(level * n)`-th
/// smallest score, or `+inf` when the level exceeds 1.
pub fn conformal_quantile(scores: &[f64], alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    if scores.is_empty() {
        return Err(Error::arg("conformal quantile of an empty score list"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::arg("NaN score"));
    }
    let Some(k) = quantile_rank(scores.len(), alpha) else {
        return Ok(f64::INFINITY);
    };
    let mut buf = scores.to_vec();
    let (_, kth, _) = buf.select_nth_unstable_by(k - 1, f64::total_cmp);
    Ok(*kth)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub alpha: f64,
    pub score_kind: ScoreKind,
    pub eps_cal: Epsilon,
    pub q_hat: f64,
    /// Ascending.
    pub cal_scores: Vec<f64>,
}

impl CalibrationResult {
    pub fn from_scores(mut scores: Vec<f64>, alpha: f64, kind: ScoreKind, eps_cal: Epsilon) -> Result<Self> {
        let q_hat = conformal_quantile(&scores, alpha)?;
        scores.sort_by(f64::total_cmp);
        Ok(Self {
            alpha,
            score_kind: kind,
            eps_cal,
            q_hat,
            cal_scores: scores,
        })
    }

    pub fn to_text(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(format!("calibration record: {e}")))
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let rec: Self =
            toml::from_str(text).map_err(|e| Error::Format(format!("calibration record: {e}")))?;
        check_alpha(rec.alpha)?;
        if rec.cal_scores.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Format("calibration scores are not sorted".into()));
        }
        Ok(rec)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

/// Attack the calibration rows, score them, and take the conformal quantile.
/// APS draws one uniform per calibration sample, in index order.
pub fn calibrate(
    model: &Classifier,
    ds: &LabeledDataset,
    cal_idx: &[usize],
    alpha: f64,
    kind: ScoreKind,
    attack: &AttackSpec,
    seed: u64,
) -> Result<CalibrationResult> {
    check_alpha(alpha)?;
    if cal_idx.is_empty() {
        return Err(Error::arg("calibration index list is empty"));
    }
    let attacked = attack_dataset(model, ds, cal_idx, attack)?;
    let mut rng = seed::derived_rng(seed, &[seed::tag::CALIBRATE]);
    let us: Vec<f64> = cal_idx.iter().map(|_| rng.random::<f64>()).collect();
    let scores = cal_idx
        .par_iter()
        .zip(&us)
        .map(|(&i, &u)| score(model, attacked.row(i), attacked.label(i), kind, u))
        .collect::<Result<Vec<_>>>()?;
    CalibrationResult::from_scores(scores, alpha, kind, attack.epsilon)
}

/// Labels whose score is at most `q_hat`, ascending. `u_vec` holds one
/// uniform per class and is only read for APS.
pub fn prediction_set_from_probs(probs: &[f64], result: &CalibrationResult, u_vec: &[f64]) -> Result<Vec<usize>> {
    if result.score_kind == ScoreKind::Aps && u_vec.len() < probs.len() {
        return Err(Error::arg(format!(
            "APS needs {} uniforms, got {}",
            probs.len(),
            u_vec.len()
        )));
    }
    Ok((0..probs.len())
        .filter(|&y| {
            let u = u_vec.get(y).copied().unwrap_or(0.0);
            score_from_probs(probs, y, result.score_kind, u) <= result.q_hat
        })
        .collect())
}

pub fn prediction_set(
    model: &Classifier,
    x: &[f64],
    result: &CalibrationResult,
    u_vec: &[f64],
) -> Result<Vec<usize>> {
    prediction_set_from_probs(&model.forward(x)?, result, u_vec)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub coverage: f64,
    pub mean_set_size: f64,
}

/// Coverage and mean cardinality of `sets` against `labels`.
pub fn summarize_sets(sets: &[Vec<usize>], labels: &[usize]) -> Result<Evaluation> {
    if sets.is_empty() || sets.len() != labels.len() {
        return Err(Error::arg(format!(
            "{} prediction sets for {} labels",
            sets.len(),
            labels.len()
        )));
    }
    let covered = sets.iter().zip(labels).filter(|(s, y)| s.contains(y)).count();
    let total_size: usize = sets.iter().map(Vec::len).sum();
    let n = sets.len() as f64;
    Ok(Evaluation {
        coverage: covered as f64 / n,
        mean_set_size: total_size as f64 / n,
    })
}

/// Prediction sets for the attacked test rows, in `test_idx` order. APS
/// uniforms are drawn sample-major, class-minor.
pub fn test_sets(
    model: &Classifier,
    ds: &LabeledDataset,
    test_idx: &[usize],
    result: &CalibrationResult,
    attack: &AttackSpec,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    if test_idx.is_empty() {
        return Err(Error::arg("test index list is empty"));
    }
    ds.check_indices(test_idx)?;
    let k = model.num_classes();
    let mut rng = seed::derived_rng(seed, &[seed::tag::TEST]);
    let us: Vec<f64> = (0..test_idx.len() * k).map(|_| rng.random::<f64>()).collect();
    test_idx
        .par_iter()
        .zip(us.par_chunks(k))
        .map(|(&i, u)| {
            let x = perturb(model, ds.row(i), ds.label(i), attack)?;
            prediction_set(model, &x, result, u)
        })
        .collect()
}

pub fn evaluate(
    model: &Classifier,
    ds: &LabeledDataset,
    test_idx: &[usize],
    result: &CalibrationResult,
    attack: &AttackSpec,
    seed: u64,
) -> Result<Evaluation> {
    let sets = test_sets(model, ds, test_idx, result, attack, seed)?;
    let labels: Vec<usize> = test_idx.iter().map(|&i| ds.label(i)).collect();
    summarize_sets(&sets, &labels)
}
