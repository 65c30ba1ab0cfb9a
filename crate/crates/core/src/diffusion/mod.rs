//! DDPM/DDIM machinery over flattened action chunks: the cosine schedule,
//! the conditional noise predictor, chain sampling with per-step
//! likelihoods, and the behavior-cloning objective.

pub mod bc;
pub mod net;
pub mod policy;
pub mod pretrain;
pub mod schedule;

pub use bc::{
    bc_loss, bc_loss_and_grad, bc_loss_from_prediction, bc_loss_graph, bc_targets, BcBatch,
};
pub use net::{EpsNet, EpsNetSpec, StateFeatures};
pub use policy::{
    logprob_graph, ChainStep, DenoiseTrace, DiffusionConfig, DiffusionPolicy, SampleMode,
    SamplerKind, TraceStep,
};
pub use pretrain::{minibatches, pretrain_bc, PretrainConfig};
pub use schedule::{
    cosine_schedule, ddim_step, ddpm_mean, gaussian_logprob, NoiseSchedule, StepCoefficients,
};
