//! Heteroscedastic count regression with the Double Poisson distribution.
//!
//! The crate covers the distribution math ([`distributions`], [`moments`]),
//! the training objectives and their gradients ([`losses`]), small MLP
//! regressors ([`network`]), deep ensembles ([`ensemble`]), evaluation
//! ([`metrics`], [`ood`]) and the synthetic processes used to exercise all of
//! it ([`datagen`]).
//!
//! Data-parallel loops (ensemble members, grid cells, per-example metrics,
//! OOD repeats) go through [`exec`], which uses rayon when the default
//! `parallel` feature is on and runs sequentially otherwise. Results are
//! identical either way.

pub mod datagen;
pub mod distributions;
pub mod ensemble;
pub mod error;
pub mod exec;
pub mod losses;
pub mod metrics;
pub mod moments;
pub mod network;
pub mod ood;

pub use datagen::{Dataset, Process, SyntheticDataset};
pub use distributions::{MomentMode, PredictiveDistribution, SupportTruncation};
pub use ensemble::{Ensemble, UncertaintyDecomposition};
pub use error::{Error, Result};
pub use losses::{Family, HeadOutput, LossSpec};
pub use network::{MlpConfig, MlpModel, TrainConfig, TrainReport};
