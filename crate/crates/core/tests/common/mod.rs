//! Independent oracles shared by the integration tests and the acceptance
//! suite. Nothing here calls into the code paths it is used to check.

#![allow(dead_code)]

use advconform::model::Dense;
use advconform::Classifier;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const FD_STEP: f64 = 1e-6;

/// Central finite differences of `f` at `x`.
pub fn central_diff(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `||a - b|| / max(||a||, ||b||, floor)`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(1e-8)
}

pub fn normal_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect()
}

/// A classifier with random shape (0 to 8 hidden units) and weights.
pub fn random_classifier(rng: &mut ChaCha8Rng) -> Classifier {
    let inputs = rng.random_range(1..=6);
    let hidden = rng.random_range(0..=8);
    let k = rng.random_range(2..=5);
    let mut dense = |i: usize, o: usize| Dense {
        inputs: i,
        outputs: o,
        weights: normal_vec(rng, i * o, 0.8),
        bias: normal_vec(rng, o, 0.3),
    };
    let layers = if hidden == 0 {
        vec![dense(inputs, k)]
    } else {
        vec![dense(inputs, hidden), dense(hidden, k)]
    };
    Classifier::from_layers(layers).expect("valid shapes")
}

/// Whether any hidden pre-activation sits within `margin` of the rectifier
/// kink, where finite differences are not meaningful.
pub fn near_kink(model: &Classifier, x: &[f64], margin: f64) -> bool {
    let layers = model.layers();
    if layers.len() < 2 {
        return false;
    }
    let l = &layers[0];
    (0..l.outputs).any(|o| {
        let z: f64 = l.bias[o] + (0..l.inputs).map(|i| l.weights[o * l.inputs + i] * x[i]).sum::<f64>();
        z.abs() < margin
    })
}

/// Plain softmax cross-entropy evaluated from raw layer weights, without the
/// library's stabilised forward pass.
pub fn reference_loss(layers: &[Dense], x: &[f64], y: usize) -> f64 {
    let mut a = x.to_vec();
    for (li, l) in layers.iter().enumerate() {
        let mut z: Vec<f64> = (0..l.outputs)
            .map(|o| l.bias[o] + (0..l.inputs).map(|i| l.weights[o * l.inputs + i] * a[i]).sum::<f64>())
            .collect();
        if li + 1 < layers.len() {
            z.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        a = z;
    }
    let sum: f64 = a.iter().map(|z| z.exp()).sum();
    sum.ln() - a[y]
}

pub fn reference_prob(layers: &[Dense], x: &[f64], y: usize) -> f64 {
    (-reference_loss(layers, x, y)).exp()
}

/// Conformal threshold by exhaustive search: the smallest score `s` with
/// `#{scores <= s} * 1000 >= (1000 - alpha_milli) * (n + 1)`, in integer
/// arithmetic, or `+inf` when no score qualifies.
pub fn brute_force_quantile(scores: &[f64], alpha_milli: u64) -> f64 {
    let n = scores.len() as u64;
    let need = (1000 - alpha_milli) * (n + 1);
    let mut best = f64::INFINITY;
    for &s in scores {
        let count = scores.iter().filter(|&&t| t <= s).count() as u64;
        if count * 1000 >= need && s < best {
            best = s;
        }
    }
    best
}

/// Worst relative errors of the parameter, loss-input and probability-input
/// gradients against central differences over `n` random instances.
#[derive(Debug, Default, Clone, Copy)]
pub struct GradientCheck {
    pub params: f64,
    pub input: f64,
    pub prob_input: f64,
}

pub fn gradient_check(n: usize, seed: u64) -> GradientCheck {
    let mut rng = advconform::seed::rng(seed);
    let mut worst = GradientCheck::default();
    let mut done = 0;
    while done < n {
        let model = random_classifier(&mut rng);
        let x = normal_vec(&mut rng, model.input_dim(), 1.0);
        let y = rng.random_range(0..model.num_classes());
        if near_kink(&model, &x, 1e-3) {
            continue;
        }
        done += 1;

        let flat = model.params_flat();
        let analytic = advconform::model::flatten(&model.grad_params(&x, y).unwrap());
        let numeric = central_diff(
            |p| {
                let mut m = model.clone();
                m.set_params_flat(p).unwrap();
                reference_loss(m.layers(), &x, y)
            },
            &flat,
            FD_STEP,
        );
        worst.params = worst.params.max(rel_err(&analytic, &numeric));

        let numeric = central_diff(|v| reference_loss(model.layers(), v, y), &x, FD_STEP);
        worst.input = worst.input.max(rel_err(&model.grad_input(&x, y).unwrap(), &numeric));

        let numeric = central_diff(|v| reference_prob(model.layers(), v, y), &x, FD_STEP);
        worst.prob_input = worst.prob_input.max(rel_err(&model.grad_prob_input(&x, y).unwrap(), &numeric));
    }
    worst
}

/// Random score lists of length 1..=12 with distinct values and random
/// `alpha` in thousandths; returns the number of disagreements with the
/// exhaustive search.
pub fn quantile_mismatches(cases: usize, seed: u64) -> usize {
    let mut rng = advconform::seed::rng(seed);
    let mut mismatches = 0;
    for _ in 0..cases {
        let n = rng.random_range(1..=12);
        let mut scores: Vec<f64> = Vec::with_capacity(n);
        while scores.len() < n {
            let s: f64 = rng.random();
            if !scores.contains(&s) {
                scores.push(s);
            }
        }
        let alpha_milli = rng.random_range(1..1000u64);
        let got = advconform::conformal::conformal_quantile(&scores, alpha_milli as f64 / 1000.0).unwrap();
        if got != brute_force_quantile(&scores, alpha_milli) {
            mismatches += 1;
        }
    }
    mismatches
}

#[derive(Debug, Default, Clone, Copy)]
pub struct AttackCheck {
    /// Instances whose perturbation norm exceeds epsilon.
    pub over_budget: usize,
    /// Instances with a fully nonzero gradient whose perturbation norm is not
    /// epsilon to 1e-12 relative.
    pub not_on_sphere: usize,
    /// Linear-model instances where the attacked loss is below the clean one.
    pub loss_decreased: usize,
}

/// Norm bounds on random `(x, grad, eps, norm)` and loss monotonicity on
/// random linear models, `n` instances each.
pub fn attack_check(n: usize, seed: u64) -> AttackCheck {
    use advconform::attack::{l2_distance, linf_distance, perturb, perturb_with_gradient};
    use advconform::{AttackSpec, Epsilon, Norm};

    let mut rng = advconform::seed::rng(seed);
    let mut out = AttackCheck::default();
    for i in 0..n {
        let dim = rng.random_range(1..=20);
        let x = normal_vec(&mut rng, dim, 3.0);
        let scale = 10f64.powi(rng.random_range(-6..6));
        let grad = normal_vec(&mut rng, dim, scale);
        let eps = Epsilon::new(rng.random::<f64>() * 0.5).unwrap();
        let norm = if i % 2 == 0 { Norm::Linf } else { Norm::L2 };
        let spec = AttackSpec::new(norm, eps);
        let adv = perturb_with_gradient(&x, &grad, &spec);
        let dist = match norm {
            Norm::Linf => linf_distance(&adv, &x),
            Norm::L2 => l2_distance(&adv, &x),
        };
        if dist > eps.value() {
            out.over_budget += 1;
        }
        // rounding in x + delta - x is a few ulps of the largest coordinate
        let slack = 1e-12 * eps.value() + 8.0 * f64::EPSILON * linf_distance(&x, &vec![0.0; dim]);
        if grad.iter().all(|g| *g != 0.0) && (dist - eps.value()).abs() > slack {
            out.not_on_sphere += 1;
        }
    }
    for i in 0..n {
        let inputs = rng.random_range(1..=8);
        let k = rng.random_range(2..=6);
        let model = Classifier::from_layers(vec![Dense {
            inputs,
            outputs: k,
            weights: normal_vec(&mut rng, inputs * k, 1.0),
            bias: normal_vec(&mut rng, k, 0.5),
        }])
        .unwrap();
        let x = normal_vec(&mut rng, inputs, 1.0);
        let y = rng.random_range(0..k);
        let norm = if i % 2 == 0 { Norm::Linf } else { Norm::L2 };
        let spec = AttackSpec::new(norm, Epsilon::new(rng.random::<f64>() * 0.5).unwrap());
        let adv = perturb(&model, &x, y, &spec).unwrap();
        if model.loss(&adv, y).unwrap() < model.loss(&x, y).unwrap() {
            out.loss_decreased += 1;
        }
    }
    out
}
