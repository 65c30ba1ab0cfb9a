use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::buffer::{AdvantageParams, DenoiseRolloutBuffer};
use super::log::{EvalRow, LogLine, LogRow, TrainLog};
use super::loss::{
    clip_schedule, normalize_advantages, ppo_loss_graph, value_loss_graph, PpoStats,
};
use super::value::ValueNet;
use crate::diffusion::{logprob_graph, minibatches, DiffusionPolicy, SampleMode};
use crate::envlab::{
    evaluate, AvoidConfig, DiffusionSampler, EvalSummary, NoiseInjection, Normalizer, Rollout,
    RunnerConfig, VecRunner, OBS_DIM,
};
use crate::error::{Error, Result};
use crate::ndcore::{AdamConfig, AdamState, Checkpoint, CosineLr, Graph, Parameterized, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DppoConfig {
    pub gamma_env: f64,
    pub gamma_denoise: f64,
    pub gae_lambda: f64,
    /// Clip ratio at `k = 0`.
    pub clip_eps: f64,
    /// Decay the clip ratio over denoising steps; constant otherwise.
    pub clip_schedule: bool,
    pub actor_lr_start: f64,
    pub actor_lr_end: f64,
    pub critic_lr: f64,
    /// Gradient epochs per collected batch, shared by actor and critic.
    pub update_epochs: usize,
    /// Flattened denoising samples per actor minibatch.
    pub batch_size: usize,
    /// Environment samples per critic minibatch.
    pub value_batch_size: usize,
    pub iterations: usize,
    pub n_envs: usize,
    pub chunks_per_iter: usize,
    pub k_prime: usize,
    pub sigma_exp_min: f64,
    pub sigma_prob_min: f64,
    pub kl_stop: Option<f64>,
    pub normalize_advantages: bool,
    pub value_hidden: Vec<usize>,
    pub eval_every: usize,
    pub eval_episodes: usize,
    /// Stop once a periodic evaluation reaches this success rate.
    pub target_success: Option<f64>,
    pub noise: Option<NoiseInjection>,
}

impl Default for DppoConfig {
    fn default() -> Self {
        Self {
            gamma_env: 0.99,
            gamma_denoise: 0.99,
            gae_lambda: 0.95,
            clip_eps: 0.01,
            clip_schedule: true,
            actor_lr_start: 1e-4,
            actor_lr_end: 1e-5,
            critic_lr: 1e-3,
            update_epochs: 10,
            batch_size: 1000,
            value_batch_size: 100,
            iterations: 200,
            n_envs: 50,
            chunks_per_iter: 10,
            k_prime: 10,
            sigma_exp_min: 0.1,
            sigma_prob_min: 0.1,
            kl_stop: Some(1.0),
            normalize_advantages: true,
            value_hidden: vec![64, 64],
            eval_every: 10,
            eval_episodes: 100,
            target_success: None,
            noise: None,
        }
    }
}

impl DppoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(0.0..=1.0).contains(&self.gamma_env) || !(0.0..=1.0).contains(&self.gamma_denoise) {
            return bad("discounts must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad("gae_lambda must lie in [0, 1]");
        }
        if !(self.clip_eps > 0.0) {
            return bad("clip_eps must be positive");
        }
        if self.update_epochs == 0 || self.batch_size == 0 || self.value_batch_size == 0 {
            return bad("epochs and batch sizes must be positive");
        }
        if self.n_envs == 0 || self.chunks_per_iter == 0 {
            return bad("n_envs and chunks_per_iter must be positive");
        }
        if !(self.sigma_exp_min >= 0.0) || !(self.sigma_prob_min > 0.0) {
            return bad("sigma floors: need sigma_exp_min >= 0 and sigma_prob_min > 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct UpdateStats {
    pub actor: PpoStats,
    pub value_loss: f64,
    pub epochs_run: usize,
}

/// PPO fine-tuning of the last `K'` denoising steps.
pub struct DppoTrainer {
    pub cfg: DppoConfig,
    pub policy: DiffusionPolicy,
    pub value: ValueNet,
    pub runner: VecRunner,
    pub env_config: AvoidConfig,
    pub seed: u64,
    pub iteration: usize,
    pub env_steps: usize,
    actor_opt: AdamState,
    critic_opt: AdamState,
    clip_eps: Vec<f64>,
    rng: ChaCha8Rng,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

impl DppoTrainer {
    /// Takes a pre-trained policy, applies the `K'` and σ-floor settings of
    /// `cfg`, and creates the fine-tuned weight copy if not present.
    pub fn new(
        mut policy: DiffusionPolicy,
        normalizer: Normalizer,
        env_config: AvoidConfig,
        cfg: DppoConfig,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        policy.config.k_prime = cfg.k_prime;
        policy.config.sigma_exp_min = cfg.sigma_exp_min;
        policy.config.sigma_prob_min = cfg.sigma_prob_min;
        policy.config.validate()?;
        policy.schedule = policy
            .schedule
            .clone()
            .with_floors(Some(cfg.sigma_exp_min), Some(cfg.sigma_prob_min));
        if policy.eps_net_ft.is_none() {
            policy.split_finetune_weights()?;
        }
        let mut rng = stream(seed, u64::MAX);
        let value = ValueNet::new(OBS_DIM, &cfg.value_hidden, &mut rng)?;
        let mut runner = VecRunner::new(
            RunnerConfig {
                n_envs: cfg.n_envs,
                t_a: policy.config.t_a,
                t_p: policy.config.t_p,
                reset_at_iteration: true,
            },
            env_config.clone(),
            normalizer,
            seed,
        )?;
        runner.noise = cfg.noise;

        let rows = cfg.n_envs * cfg.chunks_per_iter * cfg.k_prime;
        let per_epoch = rows.div_ceil(cfg.batch_size) as u64;
        let actor_opt = AdamState::new(
            AdamConfig::new(CosineLr {
                lr_start: cfg.actor_lr_start,
                lr_end: cfg.actor_lr_end,
                total_steps: cfg.iterations as u64 * cfg.update_epochs as u64 * per_epoch,
            }),
            &policy.trainable().params(),
        );
        let critic_opt = AdamState::new(
            AdamConfig::new(CosineLr::constant(cfg.critic_lr)),
            &value.params(),
        );
        let clip_eps = if cfg.clip_schedule {
            clip_schedule(cfg.clip_eps, cfg.k_prime)?
        } else {
            vec![cfg.clip_eps; cfg.k_prime]
        };
        Ok(Self {
            cfg,
            policy,
            value,
            runner,
            env_config,
            seed,
            iteration: 0,
            env_steps: 0,
            actor_opt,
            critic_opt,
            clip_eps,
            rng,
        })
    }

    pub fn actor_lr(&self) -> f64 {
        self.actor_opt.lr()
    }

    pub fn collect(&mut self) -> Result<Rollout> {
        let sampler = DiffusionSampler {
            policy: &self.policy,
            mode: SampleMode::Explore,
        };
        self.runner
            .collect(&sampler, self.cfg.chunks_per_iter, self.iteration)
    }

    pub fn build_buffer(&self, rollout: &Rollout) -> Result<DenoiseRolloutBuffer> {
        DenoiseRolloutBuffer::build(
            rollout,
            &self.value,
            self.cfg.k_prime,
            &AdvantageParams {
                gamma_env: self.cfg.gamma_env,
                gae_lambda: self.cfg.gae_lambda,
                gamma_denoise: self.cfg.gamma_denoise,
            },
        )
    }

    /// Clipped-surrogate loss and its gradient w.r.t. the fine-tuned weights
    /// on the buffer rows `idx`.
    pub fn actor_loss_and_grad(
        &self,
        buf: &DenoiseRolloutBuffer,
        idx: &[usize],
    ) -> Result<(PpoStats, Vec<Tensor>)> {
        let pick = |v: &[f64]| idx.iter().map(|&i| v[i]).collect::<Vec<f64>>();
        let steps: Vec<usize> = idx.iter().map(|&i| buf.net_step[i]).collect();
        let coeffs: Vec<_> = idx.iter().map(|&i| buf.coeffs[i]).collect();
        let mut g = Graph::new();
        let (lp, bound) = logprob_graph(
            self.policy.trainable(),
            &mut g,
            &buf.obs.select_rows(idx),
            &buf.input.select_rows(idx),
            &buf.output.select_rows(idx),
            &steps,
            &coeffs,
            &pick(&buf.sigma_prob),
            self.policy.config.x0_clip,
        )?;
        let mut adv = pick(&buf.advantage);
        if self.cfg.normalize_advantages {
            adv = normalize_advantages(&adv);
        }
        let eps: Vec<f64> = idx.iter().map(|&i| self.clip_eps[buf.k[i]]).collect();
        let (loss, stats) = ppo_loss_graph(&mut g, lp, &pick(&buf.old_logprob), &adv, &eps)?;
        if !stats.loss.is_finite() {
            return Err(Error::Diverged(format!(
                "actor loss at iteration {}",
                self.iteration
            )));
        }
        let mut grads = g.backward(loss)?;
        Ok((stats, bound.grads(&g, &mut grads)?))
    }

    fn value_step(&mut self, buf: &DenoiseRolloutBuffer, idx: &[usize]) -> Result<f64> {
        let mut g = Graph::new();
        let x = g.constant(buf.env_obs.select_rows(idx))?;
        let (pred, bound) = self.value.forward(&mut g, x)?;
        let ret: Vec<f64> = idx.iter().map(|&i| buf.env_returns[i]).collect();
        let loss = value_loss_graph(&mut g, pred, &ret)?;
        let l = g.value(loss)?.item();
        if !l.is_finite() {
            return Err(Error::Diverged(format!(
                "value loss at iteration {}",
                self.iteration
            )));
        }
        let mut grads = g.backward(loss)?;
        let gr = bound.grads(&g, &mut grads)?;
        self.critic_opt.step(&mut self.value.params_mut(), &gr)?;
        Ok(l)
    }

    /// Runs the PPO and value epochs on one buffer.
    pub fn update(&mut self, buf: &DenoiseRolloutBuffer) -> Result<UpdateStats> {
        let mut out = UpdateStats::default();
        for _ in 0..self.cfg.update_epochs {
            let mut acc = PpoStats::default();
            let batches = minibatches(buf.len(), self.cfg.batch_size, &mut self.rng);
            for idx in &batches {
                let (stats, grads) = self.actor_loss_and_grad(buf, idx)?;
                self.actor_opt
                    .step(&mut self.policy.trainable_mut().params_mut(), &grads)?;
                acc.loss += stats.loss;
                acc.clip_fraction += stats.clip_fraction;
                acc.approx_kl += stats.approx_kl;
            }
            let nb = batches.len() as f64;
            out.actor = PpoStats {
                loss: acc.loss / nb,
                clip_fraction: acc.clip_fraction / nb,
                approx_kl: acc.approx_kl / nb,
            };

            let vb = minibatches(buf.env_obs.rows(), self.cfg.value_batch_size, &mut self.rng);
            let mut vl = 0.0;
            for idx in &vb {
                vl += self.value_step(buf, idx)?;
            }
            out.value_loss = vl / vb.len() as f64;
            out.epochs_run += 1;
            if self.cfg.kl_stop.is_some_and(|t| out.actor.approx_kl >= t) {
                break;
            }
        }
        Ok(out)
    }

    /// Collect, build the buffer, update.
    pub fn iterate(&mut self) -> Result<(LogRow, Rollout)> {
        let lr = self.actor_lr();
        let rollout = self.collect()?;
        let buf = self.build_buffer(&rollout)?;
        let stats = self.update(&buf)?;
        self.env_steps += rollout.env_ticks;
        let row = LogRow {
            iteration: self.iteration,
            env_steps: self.env_steps,
            success_rate: rollout.success_rate().unwrap_or(f64::NAN),
            mean_return: rollout.mean_return().unwrap_or(f64::NAN),
            actor_loss: stats.actor.loss,
            value_loss: stats.value_loss,
            clip_fraction: stats.actor.clip_fraction,
            approx_kl: stats.actor.approx_kl,
            lr,
        };
        self.iteration += 1;
        Ok((row, rollout))
    }

    /// Deterministic-floor evaluation on a fixed seed.
    pub fn evaluate(&self, n_episodes: usize) -> Result<EvalSummary> {
        let sampler = DiffusionSampler {
            policy: &self.policy,
            mode: SampleMode::Eval,
        };
        let c = &self.policy.config;
        let (s, _) = evaluate(
            &sampler,
            &self.env_config,
            &self.runner.normalizer,
            c.t_a,
            c.t_p,
            n_episodes,
            self.seed ^ 0xE7A1,
        )?;
        Ok(s)
    }

    /// Full fine-tuning run; see [`run_finetune`].
    pub fn run(
        &mut self,
        after_iter: impl FnMut(&Self, &LogRow) -> Result<()>,
    ) -> Result<TrainLog> {
        run_finetune(self, after_iter)
    }

    /// Policy, fine-tuned copy, critic and normalizer.
    pub fn checkpoint(&self) -> Checkpoint {
        let config = serde_json::json!({
            "diffusion": self.policy.config,
            "dppo": self.cfg,
            "iteration": self.iteration,
        });
        let mut ck = Checkpoint::new(self.seed, config);
        self.policy.to_checkpoint(&mut ck);
        ck.push_all("value", self.value.param_names(), self.value.params());
        self.runner.normalizer.to_checkpoint(&mut ck);
        ck
    }
}

/// Loop settings shared by every fine-tuning method.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoopSettings {
    pub iterations: usize,
    pub eval_every: usize,
    pub eval_episodes: usize,
    pub target_success: Option<f64>,
}

/// An on-line fine-tuning method driven by [`run_finetune`].
pub trait Finetuner {
    fn settings(&self) -> LoopSettings;
    fn iteration(&self) -> usize;
    fn step(&mut self) -> Result<(LogRow, Rollout)>;
    fn evaluate_policy(&self, n_episodes: usize) -> Result<EvalSummary>;
}

impl Finetuner for DppoTrainer {
    fn settings(&self) -> LoopSettings {
        LoopSettings {
            iterations: self.cfg.iterations,
            eval_every: self.cfg.eval_every,
            eval_episodes: self.cfg.eval_episodes,
            target_success: self.cfg.target_success,
        }
    }

    fn iteration(&self) -> usize {
        self.iteration
    }

    fn step(&mut self) -> Result<(LogRow, Rollout)> {
        self.iterate()
    }

    fn evaluate_policy(&self, n_episodes: usize) -> Result<EvalSummary> {
        self.evaluate(n_episodes)
    }
}

/// Iterates a method, logging noise-band changes as events. Evaluations run
/// before the first iteration, every `eval_every` iterations, and at the end;
/// a periodic evaluation at or above `target_success` ends the run early.
/// `after_iter` runs after every iteration (checkpointing hook).
pub fn run_finetune<T: Finetuner>(
    t: &mut T,
    mut after_iter: impl FnMut(&T, &LogRow) -> Result<()>,
) -> Result<TrainLog> {
    let s = t.settings();
    let mut log = TrainLog::default();
    let mut band = (0.0, 0.0);
    let eval_row = |t: &T| -> Result<EvalRow> {
        let e = t.evaluate_policy(s.eval_episodes)?;
        Ok(EvalRow {
            iteration: t.iteration(),
            success_rate: e.success_rate,
            goal_rate: e.goal_rate,
            mean_length: e.mean_length,
        })
    };
    if s.eval_episodes > 0 {
        log.evals.push(eval_row(t)?);
    }
    for it in 0..s.iterations {
        let (row, rollout) = t.step()?;
        if rollout.band != band {
            band = rollout.band;
            log.lines.push(LogLine::Event(format!(
                "noise_band iteration={it} lo={} hi={}",
                band.0, band.1
            )));
        }
        log.lines.push(LogLine::Row(row));
        after_iter(t, &row)?;
        let last = it + 1 == s.iterations;
        let due = s.eval_every > 0 && (it + 1) % s.eval_every == 0;
        if s.eval_episodes > 0 && (due || last) {
            let e = eval_row(t)?;
            log.evals.push(e);
            if !last && s.target_success.is_some_and(|x| e.success_rate >= x) {
                log.lines.push(LogLine::Event(format!(
                    "target_reached iteration={it} success_rate={}",
                    e.success_rate
                )));
                break;
            }
        }
    }
    Ok(log)
}
