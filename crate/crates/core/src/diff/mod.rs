//! Reverse-mode differentiation, small MLPs and optimizers.

mod mlp;
mod params;
mod tape;
mod tensor;

pub use mlp::{parse_arch, Init, Layer, Mlp};
pub use params::{adam_step, GradBuffer, Manifest, ManifestEntry, Optimizer, ParamStore, CHECKPOINT_FORMAT};
pub use tape::{Tape, Unary, Var};
pub use tensor::Tensor;
