//! Single-step (FGSM-style) attacks bounded in the l-infinity or l2 norm.
//!
//! The attack always uses the true label and moves along the input gradient
//! of the cross-entropy loss. The perturbation never leaves the norm ball:
//! after the step, any coordinate that rounding pushed past the radius is
//! pulled back by single ulps.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::dataio::LabeledDataset;
use crate::error::{Error, Result};
use crate::model::Classifier;

/// Attack strength. Parses and prints as `k/255` when the value is exactly
/// `k as f64 / 255.0`, as a decimal otherwise.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Default)]
pub struct Epsilon(f64);

impl Epsilon {
    pub const ZERO: Epsilon = Epsilon(0.0);

    pub fn new(value: f64) -> Result<Self> {
        if !(value >= 0.0 && value.is_finite()) {
            return Err(Error::arg(format!("epsilon must be finite and >= 0, got {value}")));
        }
        Ok(Self(value))
    }

    /// `k / 255`, rounded once.
    pub fn per_255(k: u32) -> Self {
        Self(f64::from(k) / 255.0)
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn is_zero(self) -> bool {
        self.0 == 0.0
    }

    /// Numerator `k` when the value is exactly `k/255`.
    pub fn as_per_255(self) -> Option<u32> {
        let k = (self.0 * 255.0).round();
        (k >= 0.0 && k <= f64::from(u32::MAX) && k / 255.0 == self.0).then_some(k as u32)
    }

    /// Key for seed derivation and grouping.
    pub fn bits(self) -> u64 {
        self.0.to_bits()
    }
}

impl fmt::Display for Epsilon {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.as_per_255() {
            Some(k) => write!(f, "{k}/255"),
            None => write!(f, "{}", self.0),
        }
    }
}

impl FromStr for Epsilon {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::arg(format!("cannot parse epsilon {s:?}"));
        let value = match s.split_once('/') {
            Some((num, den)) => {
                let num: f64 = num.trim().parse().map_err(|_| bad())?;
                let den: f64 = den.trim().parse().map_err(|_| bad())?;
                if den <= 0.0 {
                    return Err(bad());
                }
                num / den
            }
            None => s.parse().map_err(|_| bad())?,
        };
        Self::new(value)
    }
}

impl TryFrom<f64> for Epsilon {
    type Error = Error;

    fn try_from(value: f64) -> Result<Self> {
        Self::new(value)
    }
}

impl Serialize for Epsilon {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Epsilon {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Text(String),
            Number(f64),
        }
        match Raw::deserialize(d)? {
            Raw::Text(s) => s.parse().map_err(serde::de::Error::custom),
            Raw::Number(v) => Epsilon::new(v).map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    #[default]
    Linf,
    L2,
}

impl fmt::Display for Norm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Norm::Linf => "linf",
            Norm::L2 => "l2",
        })
    }
}

impl FromStr for Norm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "linf" => Ok(Norm::Linf),
            "l2" => Ok(Norm::L2),
            other => Err(Error::arg(format!("unknown norm {other:?}, expected linf or l2"))),
        }
    }
}

/// Norm, radius, and whether to clip attacked features into `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AttackSpec {
    pub norm: Norm,
    pub epsilon: Epsilon,
    #[serde(default)]
    pub clip: bool,
}

impl AttackSpec {
    pub fn new(norm: Norm, epsilon: Epsilon) -> Self {
        Self {
            norm,
            epsilon,
            clip: false,
        }
    }

    pub fn linf(epsilon: f64) -> Result<Self> {
        Ok(Self::new(Norm::Linf, Epsilon::new(epsilon)?))
    }

    pub fn l2(epsilon: f64) -> Result<Self> {
        Ok(Self::new(Norm::L2, Epsilon::new(epsilon)?))
    }

    pub fn none() -> Self {
        Self::default()
    }

    pub fn with_epsilon(self, epsilon: Epsilon) -> Self {
        Self { epsilon, ..self }
    }

    pub fn is_identity(&self) -> bool {
        self.epsilon.is_zero()
    }
}

pub const L2_GRAD_FLOOR: f64 = 1e-12;

fn step_toward(value: f64, target: f64) -> f64 {
    if value > target {
        value.next_down()
    } else {
        value.next_up()
    }
}

pub fn linf_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn l2_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Move `x` by a step of radius `eps` along the loss gradient `grad`.
pub fn perturb_with_gradient(x: &[f64], grad: &[f64], spec: &AttackSpec) -> Vec<f64> {
    let eps = spec.epsilon.value();
    if eps == 0.0 {
        return x.to_vec();
    }
    let mut out: Vec<f64> = match spec.norm {
        Norm::Linf => x
            .iter()
            .zip(grad)
            .map(|(&xi, &g)| if g == 0.0 { xi } else { xi + eps * g.signum() })
            .collect(),
        Norm::L2 => {
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm < L2_GRAD_FLOOR {
                return x.to_vec();
            }
            let scale = eps / norm;
            x.iter().zip(grad).map(|(&xi, &g)| xi + scale * g).collect()
        }
    };
    if spec.clip {
        for v in &mut out {
            *v = v.clamp(0.0, 1.0);
        }
    }
    match spec.norm {
        Norm::Linf => {
            for (o, &xi) in out.iter_mut().zip(x) {
                while (*o - xi).abs() > eps {
                    *o = step_toward(*o, xi);
                }
            }
        }
        Norm::L2 => {
            while l2_distance(&out, x) > eps {
                for (o, &xi) in out.iter_mut().zip(x) {
                    if *o != xi {
                        *o = step_toward(*o, xi);
                    }
                }
            }
        }
    }
    out
}

/// Attack one sample with its true label.
pub fn perturb(model: &Classifier, x: &[f64], y: usize, spec: &AttackSpec) -> Result<Vec<f64>> {
    if spec.is_identity() {
        if x.len() != model.input_dim() {
            return Err(Error::arg(format!(
                "input has {} features, model expects {}",
                x.len(),
                model.input_dim()
            )));
        }
        return Ok(x.to_vec());
    }
    let grad = model.grad_input(x, y)?;
    Ok(perturb_with_gradient(x, &grad, spec))
}

/// Attack the rows listed in `indices`, leaving all other rows and every
/// label untouched. Rows are attacked in parallel; output order is fixed.
pub fn attack_dataset(
    model: &Classifier,
    ds: &LabeledDataset,
    indices: &[usize],
    spec: &AttackSpec,
) -> Result<LabeledDataset> {
    ds.check_indices(indices)?;
    if ds.dim() != model.input_dim() {
        return Err(Error::arg(format!(
            "dataset has {} features, model expects {}",
            ds.dim(),
            model.input_dim()
        )));
    }
    if spec.is_identity() {
        return Ok(ds.clone());
    }
    let rows = indices
        .par_iter()
        .map(|&i| perturb(model, ds.row(i), ds.label(i), spec))
        .collect::<Result<Vec<_>>>()?;
    Ok(ds.with_replaced_rows(indices, &rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::generate_gaussian_mixture;
    use crate::model::Dense;
    use proptest::prelude::*;

    #[test]
    fn sign_rule_and_unit_scaling() {
        let x = [1.0, 1.0];
        let linf = perturb_with_gradient(&x, &[2.0, -3.0], &AttackSpec::linf(0.1).unwrap());
        assert!((linf[0] - 1.1).abs() < 1e-15 && (linf[1] - 0.9).abs() < 1e-15);

        let l2 = perturb_with_gradient(&[0.0, 0.0], &[3.0, 4.0], &AttackSpec::l2(1.0).unwrap());
        assert!((l2[0] - 0.6).abs() < 1e-15 && (l2[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn zero_epsilon_is_identity() {
        let m = Classifier::init(3, 4, 3, 0).unwrap();
        let x = [0.3, -0.7, 1e-3];
        for norm in [Norm::Linf, Norm::L2] {
            let spec = AttackSpec::new(norm, Epsilon::ZERO);
            assert_eq!(perturb(&m, &x, 1, &spec).unwrap(), x.to_vec());
        }
        let ds = generate_gaussian_mixture(3, 3, 30, 2.0, 0).unwrap();
        let out = attack_dataset(&m, &ds, &[0, 5, 7], &AttackSpec::none()).unwrap();
        assert_eq!(out, ds);
    }

    #[test]
    fn tiny_l2_gradient_leaves_input_unchanged() {
        let x = [0.5, 0.5];
        let out = perturb_with_gradient(&x, &[1e-14, 0.0], &AttackSpec::l2(0.3).unwrap());
        assert_eq!(out, x.to_vec());
    }

    #[test]
    fn clipping_is_opt_in() {
        let x = [0.99, 0.01];
        let mut spec = AttackSpec::linf(0.05).unwrap();
        let free = perturb_with_gradient(&x, &[1.0, -1.0], &spec);
        assert!(free[0] > 1.0 && free[1] < 0.0);
        spec.clip = true;
        assert_eq!(perturb_with_gradient(&x, &[1.0, -1.0], &spec), vec![1.0, 0.0]);
    }

    #[test]
    fn attack_dataset_touches_only_selected_rows() {
        let m = Classifier::init(4, 0, 3, 1).unwrap();
        let ds = generate_gaussian_mixture(3, 4, 20, 2.0, 1).unwrap();
        let spec = AttackSpec::linf(0.1).unwrap();
        let idx = [3, 1, 10];
        let out = attack_dataset(&m, &ds, &idx, &spec).unwrap();
        assert_eq!(out.labels(), ds.labels());
        for i in 0..ds.len() {
            let d = linf_distance(out.row(i), ds.row(i));
            if idx.contains(&i) {
                assert!(d > 0.0 && d <= 0.1);
                assert_eq!(out.row(i), perturb(&m, ds.row(i), ds.label(i), &spec).unwrap());
            } else {
                assert_eq!(d, 0.0);
            }
        }
        assert!(attack_dataset(&m, &ds, &[20], &spec).is_err());
    }

    #[test]
    fn epsilon_text_forms() {
        let e: Epsilon = "8/255".parse().unwrap();
        assert_eq!(e.value(), 8.0 / 255.0);
        assert_eq!(e.to_string(), "8/255");
        assert_eq!(Epsilon::per_255(0).to_string(), "0/255");
        assert_eq!("0.25".parse::<Epsilon>().unwrap().to_string(), "0.25");
        assert_eq!("0.1".parse::<Epsilon>().unwrap().value(), 0.1);
        assert!("-1/255".parse::<Epsilon>().is_err());
        assert!("abc".parse::<Epsilon>().is_err());
        assert!("1/0".parse::<Epsilon>().is_err());
        for k in 0..=255 {
            let e = Epsilon::per_255(k);
            assert_eq!(e.to_string().parse::<Epsilon>().unwrap(), e);
            assert_eq!(e.as_per_255(), Some(k));
        }
    }

    #[test]
    fn one_d_attack_moves_against_true_class() {
        // one-feature logistic model, logits (x, -x)
        let m = Classifier::from_layers(vec![Dense {
            inputs: 1,
            outputs: 2,
            weights: vec![1.0, -1.0],
            bias: vec![0.0, 0.0],
        }])
        .unwrap();
        let spec = AttackSpec::linf(0.5).unwrap();
        // true class 0 prefers large x; the attack moves x down
        assert_eq!(perturb(&m, &[2.0], 0, &spec).unwrap(), vec![1.5]);
        assert_eq!(perturb(&m, &[2.0], 1, &spec).unwrap(), vec![2.5]);
    }

    proptest! {
        #[test]
        fn norm_ball_is_never_exceeded(
            x in prop::collection::vec(-1e3f64..1e3, 1..12),
            seed in 0u64..1000,
            eps in 0.0f64..2.0,
        ) {
            let g: Vec<f64> = x.iter().enumerate()
                .map(|(i, v)| ((i as f64 + 1.0) * (v + seed as f64)).sin())
                .collect();
            let linf = perturb_with_gradient(&x, &g, &AttackSpec::linf(eps).unwrap());
            prop_assert!(linf_distance(&linf, &x) <= eps);
            let l2 = perturb_with_gradient(&x, &g, &AttackSpec::l2(eps).unwrap());
            prop_assert!(l2_distance(&l2, &x) <= eps);
        }
    }
}
