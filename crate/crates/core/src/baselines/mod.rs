//! Comparison methods on the same runner, logging and checkpoint format:
//! a unimodal Gaussian policy fine-tuned with PPO, and the diffusion
//! weighted-regression methods DRWR and DAWR.

pub mod gaussian;
pub mod gaussian_ppo;
pub mod weighted;

pub use gaussian::{
    mse_loss_and_grad, pretrain_gaussian, GaussianPolicy, GaussianSampler, SAMPLE_CLIP, SIGMA_MAX,
    SIGMA_MIN,
};
pub use gaussian_ppo::{GaussianBatch, GaussianPpoTrainer};
pub use weighted::{
    reward_to_go, rollout_reward_to_go, wr_weight, DawrTrainer, DrwrTrainer, ReplayBuffer,
    WrConfig, WrSample,
};
