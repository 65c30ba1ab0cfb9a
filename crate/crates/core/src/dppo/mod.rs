//! PPO over the two-layer MDP whose inner layer is the denoising chain:
//! index bookkeeping, GAE, the clipped surrogate with a per-step clip
//! schedule, the state-only critic, and the fine-tuning loop.

pub mod buffer;
pub mod gae;
pub mod index;
pub mod log;
pub mod loss;
pub mod trainer;
pub mod value;

pub use buffer::{rollout_gae, AdvantageParams, DenoiseRolloutBuffer};
pub use gae::{gae, gae_simple};
pub use index::DiffusionMdpIndex;
pub use log::{parse_eval_csv, parse_train_csv, EvalRow, LogLine, LogRow, TrainLog};
pub use loss::{
    clip_schedule, denoise_discount, normalize_advantages, ppo_loss, ppo_loss_graph, value_loss,
    value_loss_graph, PpoStats,
};
pub use trainer::{run_finetune, DppoConfig, DppoTrainer, Finetuner, LoopSettings, UpdateStats};
pub use value::ValueNet;
