use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::gaussian::{GaussianPolicy, GaussianSampler};
use crate::diffusion::minibatches;
use crate::dppo::{
    normalize_advantages, ppo_loss_graph, rollout_gae, value_loss_graph, DppoConfig, Finetuner,
    LogRow, LoopSettings, PpoStats, ValueNet,
};
use crate::envlab::{
    evaluate, AvoidConfig, EvalSummary, Normalizer, Rollout, RunnerConfig, VecRunner, OBS_DIM,
};
use crate::error::{Error, Result};
use crate::ndcore::{AdamConfig, AdamState, Checkpoint, CosineLr, Graph, Parameterized, Tensor};

/// Environment-level samples of one collection phase, ordered by `(t, env)`.
#[derive(Debug, Clone)]
pub struct GaussianBatch {
    pub obs: Tensor,
    pub actions: Tensor,
    pub old_logprob: Vec<f64>,
    pub advantage: Vec<f64>,
    pub returns: Vec<f64>,
}

impl GaussianBatch {
    pub fn build(rollout: &Rollout, value: &ValueNet, gamma: f64, lambda: f64) -> Result<Self> {
        let n = rollout.steps.first().map_or(0, |s| s.rewards.len());
        if n == 0 {
            return Err(Error::invalid("empty rollout"));
        }
        let obs = Tensor::vstack(&rollout.steps.iter().map(|s| &s.obs).collect::<Vec<_>>())?;
        let next = Tensor::vstack(
            &rollout
                .steps
                .iter()
                .map(|s| &s.next_obs)
                .collect::<Vec<_>>(),
        )?;
        let actions = Tensor::vstack(
            &rollout
                .steps
                .iter()
                .map(|s| &s.output.chunks)
                .collect::<Vec<_>>(),
        )?;
        let mut old_logprob = Vec::with_capacity(obs.rows());
        for s in &rollout.steps {
            let lp = s
                .output
                .logprob
                .as_ref()
                .ok_or_else(|| Error::invalid("rollout lacks chunk likelihoods"))?;
            old_logprob.extend_from_slice(lp);
        }
        let split = |v: Vec<f64>| -> Vec<Vec<f64>> { v.chunks(n).map(|c| c.to_vec()).collect() };
        let values = split(value.eval(&obs)?);
        let next_values = split(value.eval(&next)?);
        let (adv, ret) = rollout_gae(rollout, &values, &next_values, gamma, lambda)?;
        Ok(Self {
            obs,
            actions,
            old_logprob,
            advantage: adv.concat(),
            returns: ret.concat(),
        })
    }

    pub fn len(&self) -> usize {
        self.old_logprob.len()
    }

    pub fn is_empty(&self) -> bool {
        self.old_logprob.is_empty()
    }
}

/// Clipped PPO on the single-level chunked MDP. Shares [`DppoConfig`];
/// `k_prime` only scales the minibatch (`batch_size / k_prime`) and the
/// denoising fields are unused.
pub struct GaussianPpoTrainer {
    pub cfg: DppoConfig,
    pub policy: GaussianPolicy,
    pub value: ValueNet,
    pub runner: VecRunner,
    pub env_config: AvoidConfig,
    pub t_p: usize,
    pub seed: u64,
    pub iteration: usize,
    pub env_steps: usize,
    actor_opt: AdamState,
    critic_opt: AdamState,
    rng: ChaCha8Rng,
}

impl GaussianPpoTrainer {
    pub fn new(
        policy: GaussianPolicy,
        normalizer: Normalizer,
        env_config: AvoidConfig,
        t_p: usize,
        cfg: DppoConfig,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(u64::MAX);
        let value = ValueNet::new(OBS_DIM, &cfg.value_hidden, &mut rng)?;
        let mut runner = VecRunner::new(
            RunnerConfig {
                n_envs: cfg.n_envs,
                t_a: t_p,
                t_p,
                reset_at_iteration: true,
            },
            env_config.clone(),
            normalizer,
            seed,
        )?;
        runner.noise = cfg.noise;
        let rows = cfg.n_envs * cfg.chunks_per_iter;
        let total = cfg.iterations * cfg.update_epochs * rows.div_ceil(Self::minibatch(&cfg));
        let actor_opt = AdamState::new(
            AdamConfig::new(CosineLr {
                lr_start: cfg.actor_lr_start,
                lr_end: cfg.actor_lr_end,
                total_steps: total as u64,
            }),
            &policy.params(),
        );
        let critic_opt = AdamState::new(
            AdamConfig::new(CosineLr::constant(cfg.critic_lr)),
            &value.params(),
        );
        Ok(Self {
            cfg,
            policy,
            value,
            runner,
            env_config,
            t_p,
            seed,
            iteration: 0,
            env_steps: 0,
            actor_opt,
            critic_opt,
            rng,
        })
    }

    fn minibatch(cfg: &DppoConfig) -> usize {
        (cfg.batch_size / cfg.k_prime.max(1)).max(1)
    }

    pub fn collect(&mut self) -> Result<Rollout> {
        let s = GaussianSampler {
            policy: &self.policy,
            deterministic: false,
        };
        self.runner
            .collect(&s, self.cfg.chunks_per_iter, self.iteration)
    }

    pub fn actor_loss_and_grad(
        &self,
        b: &GaussianBatch,
        idx: &[usize],
    ) -> Result<(PpoStats, Vec<Tensor>)> {
        let pick = |v: &[f64]| idx.iter().map(|&i| v[i]).collect::<Vec<f64>>();
        let mut g = Graph::new();
        let (lp, bound) = self.policy.logprob_graph(
            &mut g,
            &b.obs.select_rows(idx),
            &b.actions.select_rows(idx),
        )?;
        let mut adv = pick(&b.advantage);
        if self.cfg.normalize_advantages {
            adv = normalize_advantages(&adv);
        }
        let eps = vec![self.cfg.clip_eps; idx.len()];
        let (loss, stats) = ppo_loss_graph(&mut g, lp, &pick(&b.old_logprob), &adv, &eps)?;
        if !stats.loss.is_finite() {
            return Err(Error::Diverged(format!(
                "Gaussian actor loss at iteration {}",
                self.iteration
            )));
        }
        let mut grads = g.backward(loss)?;
        Ok((stats, bound.grads(&g, &mut grads)?))
    }

    pub fn update(&mut self, b: &GaussianBatch) -> Result<(PpoStats, f64)> {
        let mut actor = PpoStats::default();
        let mut vloss = 0.0;
        for _ in 0..self.cfg.update_epochs {
            let batches = minibatches(b.len(), Self::minibatch(&self.cfg), &mut self.rng);
            let mut acc = PpoStats::default();
            for idx in &batches {
                let (st, grads) = self.actor_loss_and_grad(b, idx)?;
                self.actor_opt.step(&mut self.policy.params_mut(), &grads)?;
                self.policy.project();
                acc.loss += st.loss;
                acc.clip_fraction += st.clip_fraction;
                acc.approx_kl += st.approx_kl;
            }
            let nb = batches.len() as f64;
            actor = PpoStats {
                loss: acc.loss / nb,
                clip_fraction: acc.clip_fraction / nb,
                approx_kl: acc.approx_kl / nb,
            };
            let vb = minibatches(b.len(), self.cfg.value_batch_size, &mut self.rng);
            vloss = 0.0;
            for idx in &vb {
                let mut g = Graph::new();
                let x = g.constant(b.obs.select_rows(idx))?;
                let (pred, bound) = self.value.forward(&mut g, x)?;
                let ret: Vec<f64> = idx.iter().map(|&i| b.returns[i]).collect();
                let loss = value_loss_graph(&mut g, pred, &ret)?;
                vloss += g.value(loss)?.item();
                let mut gr = g.backward(loss)?;
                let gr = bound.grads(&g, &mut gr)?;
                self.critic_opt.step(&mut self.value.params_mut(), &gr)?;
            }
            vloss /= vb.len() as f64;
            if self.cfg.kl_stop.is_some_and(|t| actor.approx_kl >= t) {
                break;
            }
        }
        Ok((actor, vloss))
    }

    pub fn iterate(&mut self) -> Result<(LogRow, Rollout)> {
        let lr = self.actor_opt.lr();
        let rollout = self.collect()?;
        let b = GaussianBatch::build(
            &rollout,
            &self.value,
            self.cfg.gamma_env,
            self.cfg.gae_lambda,
        )?;
        let (actor, value_loss) = self.update(&b)?;
        self.env_steps += rollout.env_ticks;
        let row = LogRow {
            iteration: self.iteration,
            env_steps: self.env_steps,
            success_rate: rollout.success_rate().unwrap_or(f64::NAN),
            mean_return: rollout.mean_return().unwrap_or(f64::NAN),
            actor_loss: actor.loss,
            value_loss,
            clip_fraction: actor.clip_fraction,
            approx_kl: actor.approx_kl,
            lr,
        };
        self.iteration += 1;
        Ok((row, rollout))
    }

    pub fn evaluate(&self, n: usize) -> Result<EvalSummary> {
        let s = GaussianSampler {
            policy: &self.policy,
            deterministic: true,
        };
        let (e, _) = evaluate(
            &s,
            &self.env_config,
            &self.runner.normalizer,
            self.t_p,
            self.t_p,
            n,
            self.seed ^ 0xE7A1,
        )?;
        Ok(e)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(
            self.seed,
            serde_json::json!({"method": "gaussian_ppo", "t_p": self.t_p, "dppo": self.cfg, "iteration": self.iteration}),
        );
        self.policy.to_checkpoint(&mut ck);
        ck.push_all("value", self.value.param_names(), self.value.params());
        self.runner.normalizer.to_checkpoint(&mut ck);
        ck
    }
}

impl Finetuner for GaussianPpoTrainer {
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

    fn evaluate_policy(&self, n: usize) -> Result<EvalSummary> {
        self.evaluate(n)
    }
}
