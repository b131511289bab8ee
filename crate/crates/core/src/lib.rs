//! Sparse nonlinear regression with interactions through a factorized
//! model-selection kernel, with variable selection read off the kernel's
//! importance weights and functional ANOVA reporting under either the product
//! of the covariate marginals or their joint distribution.

pub mod anova;
pub mod basis;
pub mod error;
pub mod kernel;
pub mod ridge;
pub mod rng;
pub mod stats;
pub mod subset;
pub mod synthbench;
pub mod trainer;

pub use anova::{AnovaDecomposition, Measure};
pub use basis::{BasisKind, BasisSpec, FeatureLibrary};
pub use error::{Error, Result};
pub use kernel::{eval_skim, eval_skim_bruteforce, gram_matrix, SkimHyperParams};
pub use ridge::FittedModel;
pub use subset::Subset;
pub use trainer::{TrainConfig, TruncSchedule};
