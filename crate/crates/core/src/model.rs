//! Dense softmax classifier with at most one hidden rectifier layer.
//!
//! Gradients are exact: with respect to the parameters (for training), the
//! input of the cross-entropy loss (for attacks), and the input of the
//! true-class probability `f_y(x)` (for the local geometry in `theory`).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::seed;

pub const CHECKPOINT_HEADER: &str = "advconform-model-v1";

/// One affine layer, `out = W x + b` with `W` stored row-major (`outputs x inputs`).
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.inputs)
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
            .collect()
    }

    /// `W^T delta`
    fn back(&self, delta: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.inputs];
        for (row, d) in self.weights.chunks_exact(self.inputs).zip(delta) {
            for (o, w) in out.iter_mut().zip(row) {
                *o += w * d;
            }
        }
        out
    }

    fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

/// Feed-forward softmax classifier. Hidden layers use the rectifier.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    layers: Vec<Dense>,
}

/// Parameter-shaped gradient: one [`Dense`] per layer.
pub type ParamGrad = Vec<Dense>;

/// Intermediate values of a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// Layer inputs; `activations[0]` is `x`.
    pub activations: Vec<Vec<f64>>,
    /// Pre-activations of every layer; the last entry holds the logits.
    pub pre_activations: Vec<Vec<f64>>,
    pub probs: Vec<f64>,
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0
}

impl Classifier {
    /// Validate layer chaining and finiteness.
    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() || layers.len() > 2 {
            return Err(Error::arg(format!(
                "expected 1 or 2 layers (at most one hidden layer), got {}",
                layers.len()
            )));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.inputs == 0 || l.outputs == 0 {
                return Err(Error::arg(format!("layer {i} has a zero dimension")));
            }
            if l.weights.len() != l.inputs * l.outputs || l.bias.len() != l.outputs {
                return Err(Error::arg(format!("layer {i} parameter arrays do not match its shape")));
            }
            if l.weights.iter().chain(&l.bias).any(|v| !v.is_finite()) {
                return Err(Error::arg(format!("layer {i} has non-finite parameters")));
            }
        }
        if let Some(w) = layers.windows(2).find(|w| w[0].outputs != w[1].inputs) {
            return Err(Error::arg(format!(
                "layer widths do not chain: {} outputs feed {} inputs",
                w[0].outputs, w[1].inputs
            )));
        }
        if layers.last().map_or(0, |l| l.outputs) < 2 {
            return Err(Error::arg("classifier needs at least 2 output classes"));
        }
        Ok(Self { layers })
    }

    /// All-zero parameters; `hidden = 0` gives a linear model.
    pub fn zeros(inputs: usize, hidden: usize, num_classes: usize) -> Result<Self> {
        let layers = if hidden == 0 {
            vec![Dense::zeros(inputs, num_classes)]
        } else {
            vec![Dense::zeros(inputs, hidden), Dense::zeros(hidden, num_classes)]
        };
        Self::from_layers(layers)
    }

    /// He-normal weights, zero biases.
    pub fn init(inputs: usize, hidden: usize, num_classes: usize, seed: u64) -> Result<Self> {
        let mut model = Self::zeros(inputs, hidden, num_classes)?;
        let mut rng = seed::derived_rng(seed, &[seed::tag::INIT]);
        let last = model.layers.len() - 1;
        for (i, layer) in model.layers.iter_mut().enumerate() {
            let gain = if i == last { 1.0 } else { 2.0 };
            let normal = Normal::new(0.0, (gain / layer.inputs as f64).sqrt())
                .expect("positive standard deviation");
            for w in &mut layer.weights {
                *w = normal.sample(&mut rng);
            }
        }
        Ok(model)
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn num_classes(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs
    }

    pub fn hidden_width(&self) -> usize {
        if self.layers.len() == 2 {
            self.layers[0].outputs
        } else {
            0
        }
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::arg(format!(
                "input has {} features, model expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    fn check_label(&self, y: usize) -> Result<()> {
        if y >= self.num_classes() {
            return Err(Error::arg(format!(
                "label {y} out of range for {} classes",
                self.num_classes()
            )));
        }
        Ok(())
    }

    pub fn trace(&self, x: &[f64]) -> Result<ForwardTrace> {
        self.check_input(x)?;
        let mut activations = vec![x.to_vec()];
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.apply(&activations[i]);
            if i < last {
                activations.push(z.iter().map(|&v| v.max(0.0)).collect());
            }
            pre_activations.push(z);
        }
        let probs = softmax(&pre_activations[last]);
        Ok(ForwardTrace {
            activations,
            pre_activations,
            probs,
        })
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.trace(x)?.pre_activations.pop().expect("at least one layer"))
    }

    /// Class probabilities `f(x)`.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.trace(x)?.probs)
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(&self.forward(x)?))
    }

    /// Cross-entropy `-log f_y(x)`, computed as `logsumexp(z) - z_y`.
    pub fn loss(&self, x: &[f64], y: usize) -> Result<f64> {
        self.check_label(y)?;
        let z = self.logits(x)?;
        Ok((log_sum_exp(&z) - z[y]).max(0.0))
    }

    /// Backpropagate `d(objective)/d(logits)` to the parameters and the input.
    fn backprop(&self, trace: &ForwardTrace, dlogits: Vec<f64>, want_params: bool) -> (ParamGrad, Vec<f64>) {
        let mut grads = Vec::new();
        let mut delta = dlogits;
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            if want_params {
                let input = &trace.activations[i];
                let mut g = Dense::zeros(layer.inputs, layer.outputs);
                for (row, d) in g.weights.chunks_exact_mut(layer.inputs).zip(&delta) {
                    for (w, a) in row.iter_mut().zip(input) {
                        *w = d * a;
                    }
                }
                g.bias.copy_from_slice(&delta);
                grads.push(g);
            }
            let mut upstream = layer.back(&delta);
            if i > 0 {
                // rectifier derivative, 0 at the kink
                for (u, z) in upstream.iter_mut().zip(&trace.pre_activations[i - 1]) {
                    if *z <= 0.0 {
                        *u = 0.0;
                    }
                }
            }
            delta = upstream;
        }
        grads.reverse();
        (grads, delta)
    }

    fn loss_dlogits(trace: &ForwardTrace, y: usize) -> Vec<f64> {
        let mut d = trace.probs.clone();
        d[y] -= 1.0;
        d
    }

    /// Gradient of the loss w.r.t. every weight and bias.
    pub fn grad_params(&self, x: &[f64], y: usize) -> Result<ParamGrad> {
        self.check_label(y)?;
        let trace = self.trace(x)?;
        let d = Self::loss_dlogits(&trace, y);
        Ok(self.backprop(&trace, d, true).0)
    }

    /// Loss and parameter gradient from a single forward pass.
    pub fn loss_and_grad(&self, x: &[f64], y: usize) -> Result<(f64, ParamGrad)> {
        self.check_label(y)?;
        let trace = self.trace(x)?;
        let z = trace.pre_activations.last().expect("at least one layer");
        let loss = (log_sum_exp(z) - z[y]).max(0.0);
        let d = Self::loss_dlogits(&trace, y);
        Ok((loss, self.backprop(&trace, d, true).0))
    }

    /// Gradient of the loss w.r.t. the input `x`.
    pub fn grad_input(&self, x: &[f64], y: usize) -> Result<Vec<f64>> {
        self.check_label(y)?;
        let trace = self.trace(x)?;
        let d = Self::loss_dlogits(&trace, y);
        Ok(self.backprop(&trace, d, false).1)
    }

    /// Gradient of the probability `f_y(x)` (not the loss) w.r.t. `x`.
    pub fn grad_prob_input(&self, x: &[f64], y: usize) -> Result<Vec<f64>> {
        self.check_label(y)?;
        let trace = self.trace(x)?;
        let p = &trace.probs;
        // d p_y / d z_k = p_y (1{k = y} - p_k)
        let d: Vec<f64> = p
            .iter()
            .enumerate()
            .map(|(k, &pk)| p[y] * (f64::from(u8::from(k == y)) - pk))
            .collect();
        Ok(self.backprop(&trace, d, false).1)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Dense::param_count).sum()
    }

    /// Parameters flattened layer by layer, weights before biases.
    pub fn params_flat(&self) -> Vec<f64> {
        flatten(&self.layers)
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::arg(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                flat.len()
            )));
        }
        let mut it = flat.iter().copied();
        for layer in &mut self.layers {
            for v in layer.weights.iter_mut().chain(layer.bias.iter_mut()) {
                *v = it.next().expect("length checked");
            }
        }
        Ok(())
    }

    /// `theta <- theta - step * grad`
    pub fn apply_gradient(&mut self, grad: &[Dense], step: f64) {
        for (layer, g) in self.layers.iter_mut().zip(grad) {
            for (w, gw) in layer.weights.iter_mut().zip(&g.weights) {
                *w -= step * gw;
            }
            for (b, gb) in layer.bias.iter_mut().zip(&g.bias) {
                *b -= step * gb;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    /// Text checkpoint: header line, layer count, then per layer the shape
    /// line followed by one line of row-major weights and one of biases.
    pub fn to_checkpoint(&self) -> String {
        let mut out = format!("{CHECKPOINT_HEADER}\nlayers {}\n", self.layers.len());
        for l in &self.layers {
            let _ = writeln!(out, "dense {} {}", l.inputs, l.outputs);
            for values in [&l.weights, &l.bias] {
                let line: Vec<String> = values.iter().map(f64::to_string).collect();
                let _ = writeln!(out, "{}", line.join(" "));
            }
        }
        out
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let bad = |msg: &str| Error::Format(format!("model checkpoint: {msg}"));
        if lines.next() != Some(CHECKPOINT_HEADER) {
            return Err(bad(&format!("missing header {CHECKPOINT_HEADER:?}")));
        }
        let count: usize = lines
            .next()
            .and_then(|l| l.strip_prefix("layers "))
            .and_then(|n| n.trim().parse().ok())
            .ok_or_else(|| bad("missing layer count"))?;
        let mut layers = Vec::with_capacity(count);
        for i in 0..count {
            let shape: Vec<usize> = lines
                .next()
                .and_then(|l| l.strip_prefix("dense "))
                .map(|s| s.split_whitespace().filter_map(|t| t.parse().ok()).collect())
                .ok_or_else(|| bad(&format!("missing shape for layer {i}")))?;
            let [inputs, outputs] = shape[..] else {
                return Err(bad(&format!("bad shape for layer {i}")));
            };
            let mut read = |len: usize, what: &str| -> Result<Vec<f64>> {
                let values = lines
                    .next()
                    .ok_or_else(|| bad(&format!("missing {what} for layer {i}")))?
                    .split_whitespace()
                    .map(|t| t.parse::<f64>().map_err(|_| bad(&format!("bad number {t:?}"))))
                    .collect::<Result<Vec<_>>>()?;
                if values.len() != len {
                    return Err(bad(&format!("layer {i} {what}: {} values, expected {len}", values.len())));
                }
                Ok(values)
            };
            let weights = read(inputs * outputs, "weights")?;
            let bias = read(outputs, "bias")?;
            layers.push(Dense {
                inputs,
                outputs,
                weights,
                bias,
            });
        }
        Self::from_layers(layers)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_checkpoint()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint(&text)
    }
}

pub fn flatten(layers: &[Dense]) -> Vec<f64> {
    layers
        .iter()
        .flat_map(|l| l.weights.iter().chain(&l.bias).copied())
        .collect()
}
