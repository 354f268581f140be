//! Hierarchical classification with learned label-hierarchy transition
//! matrices: a base classifier at one end of a taxonomy and input-conditioned
//! column-stochastic matrices carrying its prediction to the other levels.

pub mod data;
pub mod diff;
pub mod error;
pub mod eval;
pub mod hierarchy;
pub mod losses;
pub mod model;
pub mod training;
pub mod verify;

pub use data::{Dataset, Sample, Split, SyntheticConfig};
pub use diff::{Tape, Tensor, Var};
pub use error::{Error, Result};
pub use eval::MetricsReport;
pub use hierarchy::LabelHierarchy;
pub use model::{LhtModel, Mode, ModelConfig};
pub use training::TrainConfig;
