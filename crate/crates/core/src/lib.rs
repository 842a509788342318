//! Universal planning networks at desk scale.
//!
//! A goal-conditioned policy that plans by gradient descent in a learned
//! latent space, trained end to end by imitating an expert, with the learned
//! latent metric reused as a dense reward for model-free reinforcement
//! learning.

pub mod autodiff;
mod container;
pub mod error;
pub mod expert;
pub mod gdp;
pub mod imitation;
pub mod nets;
pub mod rl;
pub mod tensor;
pub mod worlds;

pub use autodiff::{Graph, Var};
pub use error::{Error, Result};
pub use tensor::{Precision, Real, Tensor};
