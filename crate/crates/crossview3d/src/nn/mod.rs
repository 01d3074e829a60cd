//! Minimal f64 reverse-mode autodiff engine.
//!
//! Kept deliberately small: a flat tape ([`tape::Tape`]), dense tensors
//! ([`tensor::Tensor`]), named parameters ([`params::ParamStore`]) and AdamW
//! ([`optim::AdamW`]). f64 end to end so finite-difference gradient audits
//! hold at 1e-4 relative tolerance.

pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use optim::AdamW;
pub use params::{Binding, ParamStore};
pub use tape::{NodeId, Tape};
pub use tensor::Tensor;
