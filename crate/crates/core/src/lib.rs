//! Deep latent-variable classifiers, adversarial attacks against them, and
//! density- and divergence-based attack detection.

pub mod attacks;
pub mod data;
pub mod detection;
pub mod error;
pub mod harness;
pub mod lvm;
pub mod store;

pub use error::{Error, Result};
