//! Diffusion policies pre-trained by behavior cloning and fine-tuned with
//! PPO over the two-layer denoising/environment MDP, plus the Gaussian-PPO,
//! DRWR and DAWR comparison methods, on a built-in 2D avoidance task.

pub mod baselines;
pub mod cli;
pub mod diffusion;
pub mod dppo;
pub mod envlab;
pub mod error;
pub mod ndcore;

pub use error::{Error, Result};
