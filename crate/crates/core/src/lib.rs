//! SPDNet: seasonal-trend plus periodical decomposition for short-term
//! load forecasting, built on a small `f64` tensor library with
//! reverse-mode autodiff.
//!
//! Module map:
//!
//! * [`tensor`], [`autodiff`], [`nn`], [`optim`], [`checkpoint`]: numeric core
//! * [`spectral`]: dominant-period detection and 1-D/2-D folding
//! * [`stdm`]: seasonal-trend decomposition branch
//! * [`pdm`]: short-term, periodic and long-term branches and their fusion
//! * [`model`]: the full model plus persistence and linear baselines
//! * [`data`]: CSV, splits, scaling, windows, synthetic data
//! * [`harness`]: training, evaluation and timing

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
mod error;
pub mod harness;
pub mod model;
pub mod nn;
pub mod optim;
pub mod pdm;
pub mod spectral;
pub mod stdm;
pub mod tensor;

pub use autodiff::{backward, Parameter, Var};
pub use checkpoint::Checkpoint;
pub use config::{Activation, ModelConfig, ModelKind, SyntheticProfile};
pub use data::{SeriesTable, WindowBatch};
pub use error::{Error, Result};
pub use model::{Forecaster, LinearBaseline, Persistence, Spdnet};
pub use spectral::{PeriodEntry, PeriodSet, Spectrum};
pub use tensor::{Padding, Tensor, TensorError};
