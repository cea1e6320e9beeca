//! Deterministic simulator for communication-efficient federated learning.
//!
//! The numeric layers ([`params`], [`codec`], [`learner`], [`datagen`]) are
//! generic over [`Scalar`]; the simulator runs them at 32-bit precision, and
//! the aliases below name those concrete types.

pub mod codec;
pub mod datagen;
pub mod error;
pub mod learner;
pub mod params;
pub mod policy;
pub mod rng;
pub mod scalar;
pub mod sim;

pub use error::{Error, Result};
pub use params::Params;
pub use rng::SeededRng;
pub use scalar::Scalar;

/// Model or gradient at wire precision.
pub type ParamVector = Params<f32>;
pub type CompressedModel = codec::CompressedModel<f32>;
pub type SparseGradient = codec::SparseGradient<f32>;
