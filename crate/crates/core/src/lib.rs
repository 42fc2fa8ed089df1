pub mod diff;
pub mod dmm;
pub mod enumerable;
pub mod error;
pub mod estimators;
pub mod exp_family;
pub mod gmm;
pub mod hmc;
pub mod scalar;
pub mod smc;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor = diff::Tensor<f64>;
pub type Tape = diff::Tape<f64>;
pub type ParamStore = diff::ParamStore<f64>;
pub type GradBuffer = diff::GradBuffer<f64>;
pub type ExpFamParams = exp_family::ExpFamParams<f64>;
pub type NormalGammaParams = exp_family::NormalGammaParams<f64>;
