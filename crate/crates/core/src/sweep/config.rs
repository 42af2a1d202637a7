//! Sweep configuration, read from a TOML file with sections `data`, `model`,
//! `train`, `conformal`, `sweep`, `theory` and `output`. Every key has a
//! default; an empty file describes the desk-scale benchmark.
//!
//! ```toml
//! [data]
//! source = "mixture"        # or "idx" (images, labels) or "csv" (path)
//! num_classes = 5
//! dim = 16
//! n = 5000
//! class_separation = 3.0
//! seed = 0
//!
//! [model]
//! hidden = 0                # 0 = linear softmax model
//!
//! [train]
//! epochs = 30
//! learning_rate = 0.1
//! batch_size = 64
//!
//! [conformal]
//! alpha = 0.1
//! beta = 0.02
//! score = "hps"
//!
//! [sweep]
//! norm = "linf"
//! master_seed = 0
//! seeds = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9]
//! eps_train = ["0/255", "4/255", "8/255", "12/255", "16/255"]
//! eps_cal = ["8/255", "16/255"]
//! # either one shared test grid ...
//! # eps_test = ["2/255", "4/255"]
//! # ... or one grid per calibration strength
//! [[sweep.eps_test_by_cal]]
//! eps_cal = "8/255"
//! eps_test = ["2/255", "3/255", "4/255"]
//!
//! [output]
//! dir = "results"
//! ```
//!
//! Strengths are written `"k/255"` or as decimals. Seeds default to ten runs
//! and summaries use normal-approximation standard errors.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attack::{AttackSpec, Epsilon, Norm};
use crate::conformal::ScoreKind;
use crate::dataio::{generate_gaussian_mixture, load_csv, load_idx, LabeledDataset};
use crate::error::{Error, Result};
use crate::theory::{ErrorBudget, DEFAULT_C_WINDOW};
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataSpec {
    Mixture {
        #[serde(default = "defaults::num_classes")]
        num_classes: usize,
        #[serde(default = "defaults::dim")]
        dim: usize,
        #[serde(default = "defaults::n")]
        n: usize,
        #[serde(default = "defaults::separation")]
        class_separation: f64,
        #[serde(default)]
        seed: u64,
        #[serde(default = "defaults::fractions")]
        fractions: [f64; 3],
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
        #[serde(default = "defaults::fractions")]
        fractions: [f64; 3],
    },
    Csv {
        path: PathBuf,
        #[serde(default)]
        num_classes: Option<usize>,
        #[serde(default = "defaults::fractions")]
        fractions: [f64; 3],
    },
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec::Mixture {
            num_classes: defaults::num_classes(),
            dim: defaults::dim(),
            n: defaults::n(),
            class_separation: defaults::separation(),
            seed: 0,
            fractions: defaults::fractions(),
        }
    }
}

impl DataSpec {
    pub fn load(&self) -> Result<LabeledDataset> {
        match self {
            DataSpec::Mixture {
                num_classes,
                dim,
                n,
                class_separation,
                seed,
                ..
            } => generate_gaussian_mixture(*num_classes, *dim, *n, *class_separation, *seed),
            DataSpec::Idx { images, labels, .. } => load_idx(images, labels),
            DataSpec::Csv { path, num_classes, .. } => load_csv(path, *num_classes),
        }
    }

    pub fn fractions(&self) -> (f64, f64, f64) {
        let f = match self {
            DataSpec::Mixture { fractions, .. }
            | DataSpec::Idx { fractions, .. }
            | DataSpec::Csv { fractions, .. } => fractions,
        };
        (f[0], f[1], f[2])
    }

    /// Short identifier written into every record.
    pub fn id(&self) -> String {
        let stem = |p: &Path| p.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
        match self {
            DataSpec::Mixture {
                num_classes,
                dim,
                n,
                class_separation,
                seed,
                ..
            } => format!("mixture-k{num_classes}-d{dim}-n{n}-sep{class_separation}-s{seed}"),
            DataSpec::Idx { images, .. } => format!("idx-{}", stem(images)),
            DataSpec::Csv { path, .. } => format!("csv-{}", stem(path)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    #[serde(default)]
    pub hidden: usize,
}

/// Training hyperparameters shared by every grid point; the attack strength
/// and seed come from the grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSpec {
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
    #[serde(default = "defaults::learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
}

impl Default for TrainSpec {
    fn default() -> Self {
        Self {
            epochs: defaults::epochs(),
            learning_rate: defaults::learning_rate(),
            batch_size: defaults::batch_size(),
        }
    }
}

impl TrainSpec {
    pub fn config(&self, attack: AttackSpec, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            attack,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConformalSpec {
    #[serde(default = "defaults::alpha")]
    pub alpha: f64,
    #[serde(default = "defaults::beta")]
    pub beta: f64,
    #[serde(default)]
    pub score: ScoreKind,
}

impl Default for ConformalSpec {
    fn default() -> Self {
        Self {
            alpha: defaults::alpha(),
            beta: defaults::beta(),
            score: ScoreKind::Hps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestGrid {
    pub eps_cal: Epsilon,
    pub eps_test: Vec<Epsilon>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    #[serde(default)]
    pub norm: Norm,
    /// Clip attacked features to `[0, 1]` (image data); off by default.
    #[serde(default)]
    pub clip: bool,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default = "defaults::seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "defaults::eps_train")]
    pub eps_train: Vec<Epsilon>,
    #[serde(default = "defaults::eps_cal")]
    pub eps_cal: Vec<Epsilon>,
    /// Shared test grid; takes precedence over `eps_test_by_cal`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps_test: Option<Vec<Epsilon>>,
    #[serde(default = "defaults::eps_test_by_cal")]
    pub eps_test_by_cal: Vec<TestGrid>,
    /// Concurrent grid jobs; 0 uses every available core.
    #[serde(default)]
    pub workers: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            norm: Norm::Linf,
            clip: false,
            master_seed: 0,
            seeds: defaults::seeds(),
            eps_train: defaults::eps_train(),
            eps_cal: defaults::eps_cal(),
            eps_test: None,
            eps_test_by_cal: defaults::eps_test_by_cal(),
            workers: 0,
        }
    }
}

impl GridSpec {
    pub fn attack(&self, epsilon: Epsilon) -> AttackSpec {
        AttackSpec {
            norm: self.norm,
            epsilon,
            clip: self.clip,
        }
    }

    /// Test strengths paired with a calibration strength.
    pub fn test_grid(&self, eps_cal: Epsilon) -> Result<&[Epsilon]> {
        if let Some(shared) = &self.eps_test {
            return Ok(shared);
        }
        self.eps_test_by_cal
            .iter()
            .find(|g| g.eps_cal == eps_cal)
            .map(|g| g.eps_test.as_slice())
            .ok_or_else(|| Error::Config(format!("no eps_test grid for eps_cal = {eps_cal}")))
    }
}

/// Strengths and constants for the `check-theory` report. Uses l2 attacks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TheorySpec {
    #[serde(default)]
    pub budget: ErrorBudget,
    #[serde(default = "defaults::theory_eps_cal")]
    pub eps_cal: Epsilon,
    #[serde(default = "defaults::theory_eps_test")]
    pub eps_test: Vec<Epsilon>,
    /// Hidden width of the model trained for the check; 0 keeps it smooth.
    #[serde(default)]
    pub hidden: usize,
    /// KDE bandwidth; Silverman's rule when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bandwidth: Option<f64>,
    #[serde(default = "defaults::c_window")]
    pub c_window: f64,
    #[serde(default = "defaults::lemma_n_mc")]
    pub lemma_n_mc: usize,
}

impl Default for TheorySpec {
    fn default() -> Self {
        Self {
            budget: ErrorBudget::default(),
            eps_cal: defaults::theory_eps_cal(),
            eps_test: defaults::theory_eps_test(),
            hidden: 0,
            bandwidth: None,
            c_window: defaults::c_window(),
            lemma_n_mc: defaults::lemma_n_mc(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    #[serde(default = "defaults::out_dir")]
    pub dir: PathBuf,
}

impl Default for OutputSpec {
    fn default() -> Self {
        Self {
            dir: defaults::out_dir(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default)]
    pub data: DataSpec,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub train: TrainSpec,
    #[serde(default)]
    pub conformal: ConformalSpec,
    #[serde(default)]
    pub sweep: GridSpec,
    #[serde(default)]
    pub theory: TheorySpec,
    #[serde(default)]
    pub output: OutputSpec,
}

impl SweepConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        let c = &self.conformal;
        if !(c.alpha > 0.0 && c.alpha < 1.0) {
            return bad(format!("alpha must lie in (0, 1), got {}", c.alpha));
        }
        if !(c.beta > 0.0 && c.beta.is_finite()) {
            return bad(format!("beta must be > 0, got {}", c.beta));
        }
        let g = &self.sweep;
        if g.seeds.is_empty() || g.eps_train.is_empty() || g.eps_cal.is_empty() {
            return bad("seeds, eps_train and eps_cal grids must be non-empty".into());
        }
        for &eps_cal in &g.eps_cal {
            if g.test_grid(eps_cal)?.is_empty() {
                return bad(format!("eps_test grid for eps_cal = {eps_cal} is empty"));
            }
        }
        let (a, b, f) = self.data.fractions();
        crate::dataio::split_sizes(100, (a, b, f)).map_err(|e| Error::Config(e.to_string()))?;
        self.train
            .config(AttackSpec::none(), 0)
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        self.theory.budget.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.theory.eps_test.is_empty() || !(self.theory.c_window > 0.0) {
            return bad("theory eps_test grid must be non-empty and c_window > 0".into());
        }
        Ok(())
    }
}

pub(crate) mod defaults {
    use std::path::PathBuf;

    use super::TestGrid;
    use crate::attack::Epsilon;

    pub fn num_classes() -> usize {
        5
    }
    pub fn dim() -> usize {
        16
    }
    pub fn n() -> usize {
        5000
    }
    pub fn separation() -> f64 {
        3.0
    }
    pub fn fractions() -> [f64; 3] {
        [0.6, 0.2, 0.2]
    }
    pub fn epochs() -> usize {
        30
    }
    pub fn learning_rate() -> f64 {
        0.1
    }
    pub fn batch_size() -> usize {
        64
    }
    pub fn alpha() -> f64 {
        0.1
    }
    pub fn beta() -> f64 {
        0.02
    }
    pub fn seeds() -> Vec<u64> {
        (0..10).collect()
    }
    fn per_255(ks: impl IntoIterator<Item = u32>) -> Vec<Epsilon> {
        ks.into_iter().map(Epsilon::per_255).collect()
    }
    pub fn eps_train() -> Vec<Epsilon> {
        per_255([0, 4, 8, 12, 16])
    }
    pub fn eps_cal() -> Vec<Epsilon> {
        per_255([8, 16])
    }
    pub fn eps_test_by_cal() -> Vec<TestGrid> {
        vec![
            TestGrid {
                eps_cal: Epsilon::per_255(8),
                eps_test: per_255(2..=14),
            },
            TestGrid {
                eps_cal: Epsilon::per_255(16),
                eps_test: per_255(10..=22),
            },
        ]
    }
    pub fn theory_eps_cal() -> Epsilon {
        Epsilon::new(0.1).expect("valid")
    }
    pub fn theory_eps_test() -> Vec<Epsilon> {
        [0.0, 0.05, 0.1, 0.15, 0.2, 0.3]
            .into_iter()
            .map(|v| Epsilon::new(v).expect("valid"))
            .collect()
    }
    pub fn c_window() -> f64 {
        super::DEFAULT_C_WINDOW
    }
    pub fn lemma_n_mc() -> usize {
        1_000_000
    }
    pub fn out_dir() -> PathBuf {
        PathBuf::from("results")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_default_benchmark() {
        let cfg = SweepConfig::from_toml_str("").unwrap();
        assert_eq!(cfg, SweepConfig::default());
        assert_eq!(cfg.conformal.alpha, 0.1);
        assert_eq!(cfg.conformal.beta, 0.02);
        let g = &cfg.sweep;
        let show = |v: &[Epsilon]| v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",");
        assert_eq!(show(&g.eps_cal), "8/255,16/255");
        assert_eq!(show(&g.eps_train), "0/255,4/255,8/255,12/255,16/255");
        assert_eq!(show(g.test_grid(Epsilon::per_255(8)).unwrap()), (2..=14).map(|k| format!("{k}/255")).collect::<Vec<_>>().join(","));
        assert_eq!(show(g.test_grid(Epsilon::per_255(16)).unwrap()), (10..=22).map(|k| format!("{k}/255")).collect::<Vec<_>>().join(","));
        assert_eq!(g.seeds.len(), 10);
    }

    #[test]
    fn roundtrips_through_toml() {
        let cfg = SweepConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(SweepConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn parses_sections_and_overrides() {
        let text = r#"
            [data]
            source = "mixture"
            num_classes = 3
            dim = 4
            n = 300
            [model]
            hidden = 8
            [conformal]
            alpha = 0.2
            score = "aps"
            [sweep]
            norm = "l2"
            seeds = [1, 2]
            eps_train = [0.0]
            eps_cal = ["0/255", "0.05"]
            eps_test = ["1/255"]
        "#;
        let cfg = SweepConfig::from_toml_str(text).unwrap();
        assert_eq!(cfg.model.hidden, 8);
        assert_eq!(cfg.conformal.score, ScoreKind::Aps);
        assert_eq!(cfg.sweep.norm, Norm::L2);
        assert_eq!(cfg.sweep.eps_cal[1].value(), 0.05);
        assert_eq!(cfg.sweep.test_grid(Epsilon::ZERO).unwrap(), &[Epsilon::per_255(1)]);
        assert_eq!(cfg.data.load().unwrap().len(), 300);
    }

    #[test]
    fn invalid_configs_are_config_errors() {
        for text in [
            "[conformal]\nalpha = 1.5",
            "[conformal]\nbeta = 0",
            "[sweep]\nseeds = []",
            "[sweep]\neps_cal = [\"-1/255\"]",
            "[sweep]\neps_cal = [\"5/255\"]",
            "[train]\nepochs = 0",
            "[data]\nsource = \"mixture\"\nfractions = [0.5, 0.2, 0.2]",
            "[bogus]\nx = 1",
        ] {
            assert!(matches!(SweepConfig::from_toml_str(text), Err(Error::Config(_))), "{text}");
        }
    }
}
