//! Numerical substrate for the deep Bayes classifier lab: dense `f64`
//! tensors, a reverse-mode gradient tape, seeded random streams and Adam.

mod adam;
mod broadcast;
mod error;
pub mod gradcheck;
mod rng;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamState};
pub use error::{Result, TensorError};
pub use rng::RngStream;
pub use tape::{
    gaussian_log_density, log_variance_floor, reparameterize, reparameterize_with_noise,
    Gradients, Tape, Var, VARIANCE_FLOOR,
};
pub use tensor::{argmax, log_sum_exp, softmax, Tensor};
