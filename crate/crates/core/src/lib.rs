//! Effective dimensionality and adversarial robustness at desk scale.
//!
//! The crate trains small model families, estimates the Hessian
//! eigenspectrum of their test loss with Lanczos iteration, turns it into an
//! effective dimensionality `N_eff = Σ λ/(λ+z)`, and measures robustness
//! under FGSM, PGD and Gaussian perturbations. The [`harness`] module ties
//! these together into reproducible sweeps with CSV/JSON outputs.

// `!(x >= 0.0)` rejects NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attacks;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod harness;
pub mod loss;
pub mod model;
pub mod seed;
pub mod spectral;
pub mod stats;
pub mod tensor;
pub mod training;

pub use attacks::{AttackConfig, AttackKind, RobustnessRecord};
pub use data::{Dataset, Sample, Split};
pub use error::{Error, Result};
pub use loss::{Batch, LossFunction};
pub use model::{build_model, param_count, Family, ModelSpec, Network, ParamVector};
pub use spectral::{effective_dimensionality, EffDimConfig, Spectrum};
pub use stats::TrendStats;
pub use tensor::{argmax_class, Tensor};
pub use training::{Method, TrainConfig, TrainHistory};
