//! The 2D avoidance task: environment, scripted multi-modal demonstrators,
//! normalization, demonstration files, and a vectorized chunked runner.

pub mod demo;
pub mod env;
pub mod normalize;
pub mod runner;

pub use demo::{
    carrot, carrot_chunk, generate_demos, DemoDataset, DemoEpisode, DemoHeader, Demonstrator,
    Family, ModeSet,
};
pub use env::{AvoidConfig, AvoidEnv, Circle, Event, StepOutcome, ACT_DIM, OBS_DIM};
pub use normalize::Normalizer;
pub use runner::{
    evaluate, trajectories_from_jsonl, trajectories_to_jsonl, ChunkPolicy, ChunkStep,
    DiffusionSampler, EpisodeRecord, EvalSummary, NoiseInjection, PolicyOutput, Rollout,
    RunnerConfig, ScriptedPolicy, VecRunner,
};

#[cfg(test)]
mod tests;
