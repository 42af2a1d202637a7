//! Split conformal prediction under adversarial attacks.
//!
//! The pipeline has three stages, each with its own attack strength:
//!
//! 1. **Training** on `I1`, clean or adversarial (`eps_train`), see [`train`].
//! 2. **Calibration** on `I2`, where every calibration input is attacked with
//!    `eps_cal` before scoring, see [`conformal::calibrate`].
//! 3. **Testing** on `I3`, where inputs are attacked with an unknown
//!    `eps_test` and prediction sets are formed, see [`conformal::evaluate`].
//!
//! [`theory`] evaluates the first-order coverage and set-size bounds that
//! relate the three strengths, and [`sweep`] runs seeded grids over them.

pub mod attack;
pub mod conformal;
pub mod dataio;
mod error;
pub mod model;
pub mod seed;
pub mod sweep;
pub mod theory;
pub mod train;

pub use attack::{AttackSpec, Epsilon, Norm};
pub use conformal::{CalibrationResult, ScoreKind};
pub use dataio::{LabeledDataset, SplitIndices};
pub use error::{Error, Result};
pub use model::{Classifier, ForwardTrace};
pub use sweep::{ExperimentRecord, SweepConfig};
pub use theory::{ErrorBudget, LocalGeometry, ToleranceBand};
pub use train::TrainConfig;
