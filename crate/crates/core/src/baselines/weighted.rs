use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{bc_loss_and_grad, bc_targets, minibatches, DiffusionPolicy, SampleMode};
use crate::dppo::{rollout_gae, value_loss_graph, Finetuner, LogRow, LoopSettings, ValueNet};
use crate::envlab::{
    evaluate, AvoidConfig, DiffusionSampler, EvalSummary, NoiseInjection, Normalizer, Rollout,
    RunnerConfig, VecRunner, OBS_DIM,
};
use crate::error::{Error, Result};
use crate::ndcore::{AdamConfig, AdamState, Checkpoint, CosineLr, Graph, Parameterized, Tensor};

/// Settings for the diffusion weighted-regression baselines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WrConfig {
    /// Temperature on reward-to-go (DRWR) or advantage (DAWR).
    pub beta: f64,
    pub w_max: f64,
    /// Actor replay ratio.
    pub actor_epochs: usize,
    /// Critic replay ratio (DAWR).
    pub critic_epochs: usize,
    pub lambda: f64,
    pub gamma_env: f64,
    pub buffer_capacity: usize,
    pub batch_size: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub critic_lr: f64,
    pub value_hidden: Vec<usize>,
    pub iterations: usize,
    pub n_envs: usize,
    pub chunks_per_iter: usize,
    pub eval_every: usize,
    pub eval_episodes: usize,
    pub target_success: Option<f64>,
    pub noise: Option<NoiseInjection>,
}

impl Default for WrConfig {
    fn default() -> Self {
        Self {
            beta: 10.0,
            w_max: 100.0,
            actor_epochs: 10,
            critic_epochs: 10,
            lambda: 0.95,
            gamma_env: 0.99,
            buffer_capacity: 100_000,
            batch_size: 256,
            lr_start: 1e-4,
            lr_end: 1e-5,
            critic_lr: 1e-3,
            value_hidden: vec![64, 64],
            iterations: 200,
            n_envs: 50,
            chunks_per_iter: 10,
            eval_every: 10,
            eval_episodes: 100,
            target_success: None,
            noise: None,
        }
    }
}

impl WrConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) || !(self.w_max >= 1.0) {
            return Err(Error::Config(
                "weighted regression needs beta > 0 and w_max >= 1".into(),
            ));
        }
        if self.actor_epochs == 0
            || self.batch_size == 0
            || self.n_envs == 0
            || self.chunks_per_iter == 0
        {
            return Err(Error::Config(
                "epochs, batch size and rollout sizes must be positive".into(),
            ));
        }
        if self.buffer_capacity == 0 || !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(
                "need buffer_capacity >= 1 and lambda in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// `min(exp(beta * x), w_max)`.
pub fn wr_weight(x: f64, beta: f64, w_max: f64) -> f64 {
    (beta * x).exp().min(w_max)
}

/// Discounted reward-to-go over chunk steps, reset at episode ends and not
/// bootstrapped past the last step.
pub fn reward_to_go(rewards: &[f64], episode_end: &[bool], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        if episode_end[t] {
            acc = 0.0;
        }
        acc = rewards[t] + gamma * acc;
        out[t] = acc;
    }
    out
}

/// Fixed-capacity FIFO store with uniform sampling.
#[derive(Debug, Clone)]
pub struct ReplayBuffer<T> {
    capacity: usize,
    items: Vec<T>,
    head: usize,
}

impl<T: Clone> ReplayBuffer<T> {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            items: Vec::new(),
            head: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, item: T) {
        if self.items.len() < self.capacity {
            self.items.push(item);
        } else {
            self.items[self.head] = item;
            self.head = (self.head + 1) % self.capacity;
        }
    }

    /// Items from oldest to newest.
    pub fn iter(&self) -> impl Iterator<Item = &T> {
        let (a, b) = self.items.split_at(self.head);
        b.iter().chain(a)
    }

    /// `n` uniform draws with replacement.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<&T> {
        (0..n)
            .map(|_| &self.items[rng.random_range(0..self.items.len())])
            .collect()
    }
}

/// One stored transition: observation, executed chunk and regression target.
#[derive(Debug, Clone, PartialEq)]
pub struct WrSample {
    pub obs: Vec<f64>,
    pub chunk: Vec<f64>,
    pub target: f64,
}

fn flat_pairs(rollout: &Rollout) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut obs = Vec::new();
    let mut chunks = Vec::new();
    for s in &rollout.steps {
        for i in 0..s.rewards.len() {
            obs.push(s.obs.row(i).to_vec());
            chunks.push(s.output.chunks.row(i).to_vec());
        }
    }
    (obs, chunks)
}

/// Per-env reward-to-go of a rollout flattened in `(t, env)` order.
pub fn rollout_reward_to_go(rollout: &Rollout, gamma: f64) -> Vec<f64> {
    let t_len = rollout.steps.len();
    let n = rollout.steps.first().map_or(0, |s| s.rewards.len());
    let mut out = vec![0.0; t_len * n];
    for i in 0..n {
        let r: Vec<f64> = rollout.steps.iter().map(|s| s.rewards[i]).collect();
        let end: Vec<bool> = rollout
            .steps
            .iter()
            .map(|s| s.terminated[i] || s.truncated[i])
            .collect();
        for (t, v) in reward_to_go(&r, &end, gamma).into_iter().enumerate() {
            out[t * n + i] = v;
        }
    }
    out
}

fn rows(v: &[&Vec<f64>]) -> Result<Tensor> {
    Tensor::from_rows(&v.iter().map(|r| (*r).clone()).collect::<Vec<_>>())
}

struct WrCore {
    cfg: WrConfig,
    policy: DiffusionPolicy,
    runner: VecRunner,
    env_config: AvoidConfig,
    seed: u64,
    iteration: usize,
    env_steps: usize,
    actor_opt: AdamState,
    rng: ChaCha8Rng,
}

impl WrCore {
    fn new(
        policy: DiffusionPolicy,
        normalizer: Normalizer,
        env_config: AvoidConfig,
        cfg: WrConfig,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
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
        let per_iter =
            cfg.actor_epochs * (cfg.n_envs * cfg.chunks_per_iter).div_ceil(cfg.batch_size);
        let actor_opt = AdamState::new(
            AdamConfig::new(CosineLr {
                lr_start: cfg.lr_start,
                lr_end: cfg.lr_end,
                total_steps: (cfg.iterations * per_iter) as u64,
            }),
            &policy.eps_net.params(),
        );
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(u64::MAX);
        Ok(Self {
            cfg,
            policy,
            runner,
            env_config,
            seed,
            iteration: 0,
            env_steps: 0,
            actor_opt,
            rng,
        })
    }

    fn collect(&mut self) -> Result<Rollout> {
        let s = DiffusionSampler {
            policy: &self.policy,
            mode: SampleMode::Explore,
        };
        self.runner
            .collect(&s, self.cfg.chunks_per_iter, self.iteration)
    }

    /// One weighted noise-regression step on the whole diffusion chain.
    fn actor_step(&mut self, obs: &Tensor, chunks: &Tensor, weights: &[f64]) -> Result<f64> {
        let batch = bc_targets(chunks, &self.policy.schedule, &mut self.rng)?;
        let (l, grads) = bc_loss_and_grad(&self.policy.eps_net, obs, &batch, Some(weights))?;
        if !l.is_finite() {
            return Err(Error::Diverged(format!(
                "weighted regression loss at iteration {}",
                self.iteration
            )));
        }
        self.actor_opt
            .step(&mut self.policy.eps_net.params_mut(), &grads)?;
        Ok(l)
    }

    fn evaluate(&self, n: usize) -> Result<EvalSummary> {
        let s = DiffusionSampler {
            policy: &self.policy,
            mode: SampleMode::Eval,
        };
        let c = &self.policy.config;
        let (e, _) = evaluate(
            &s,
            &self.env_config,
            &self.runner.normalizer,
            c.t_a,
            c.t_p,
            n,
            self.seed ^ 0xE7A1,
        )?;
        Ok(e)
    }

    fn settings(&self) -> LoopSettings {
        LoopSettings {
            iterations: self.cfg.iterations,
            eval_every: self.cfg.eval_every,
            eval_episodes: self.cfg.eval_episodes,
            target_success: self.cfg.target_success,
        }
    }

    fn row(&mut self, rollout: &Rollout, lr: f64, actor_loss: f64, value_loss: f64) -> LogRow {
        self.env_steps += rollout.env_ticks;
        let r = LogRow {
            iteration: self.iteration,
            env_steps: self.env_steps,
            success_rate: rollout.success_rate().unwrap_or(f64::NAN),
            mean_return: rollout.mean_return().unwrap_or(f64::NAN),
            actor_loss,
            value_loss,
            clip_fraction: 0.0,
            approx_kl: 0.0,
            lr,
        };
        self.iteration += 1;
        r
    }

    fn checkpoint(&self, method: &str) -> Checkpoint {
        let mut ck = Checkpoint::new(
            self.seed,
            serde_json::json!({"method": method, "diffusion": self.policy.config, "wr": self.cfg, "iteration": self.iteration}),
        );
        self.policy.to_checkpoint(&mut ck);
        self.runner.normalizer.to_checkpoint(&mut ck);
        ck
    }
}

/// Reward-weighted regression on fresh on-policy data only.
pub struct DrwrTrainer {
    core: WrCore,
}

impl DrwrTrainer {
    pub fn new(
        policy: DiffusionPolicy,
        normalizer: Normalizer,
        env_config: AvoidConfig,
        cfg: WrConfig,
        seed: u64,
    ) -> Result<Self> {
        Ok(Self {
            core: WrCore::new(policy, normalizer, env_config, cfg, seed)?,
        })
    }

    pub fn policy(&self) -> &DiffusionPolicy {
        &self.core.policy
    }

    /// Applies `actor_epochs` passes of weighted regression to one rollout.
    pub fn update(&mut self, rollout: &Rollout) -> Result<f64> {
        let c = &self.core.cfg;
        let (beta, w_max) = (c.beta, c.w_max);
        let weights: Vec<f64> = rollout_reward_to_go(rollout, c.gamma_env)
            .into_iter()
            .map(|r| wr_weight(r, beta, w_max))
            .collect();
        let (obs, chunks) = flat_pairs(rollout);
        let mut last = 0.0;
        for _ in 0..c.actor_epochs {
            let mut total = 0.0;
            let batches = minibatches(obs.len(), self.core.cfg.batch_size, &mut self.core.rng);
            for idx in &batches {
                let o = rows(&idx.iter().map(|&i| &obs[i]).collect::<Vec<_>>())?;
                let a = rows(&idx.iter().map(|&i| &chunks[i]).collect::<Vec<_>>())?;
                let w: Vec<f64> = idx.iter().map(|&i| weights[i]).collect();
                total += self.core.actor_step(&o, &a, &w)?;
            }
            last = total / batches.len() as f64;
        }
        Ok(last)
    }

    pub fn iterate(&mut self) -> Result<(LogRow, Rollout)> {
        let lr = self.core.actor_opt.lr();
        let rollout = self.core.collect()?;
        let loss = self.update(&rollout)?;
        let row = self.core.row(&rollout, lr, loss, f64::NAN);
        Ok((row, rollout))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        self.core.checkpoint("drwr")
    }
}

impl Finetuner for DrwrTrainer {
    fn settings(&self) -> LoopSettings {
        self.core.settings()
    }

    fn iteration(&self) -> usize {
        self.core.iteration
    }

    fn step(&mut self) -> Result<(LogRow, Rollout)> {
        self.iterate()
    }

    fn evaluate_policy(&self, n: usize) -> Result<EvalSummary> {
        self.core.evaluate(n)
    }
}

/// Advantage-weighted regression with a TD(lambda) critic and a replay
/// buffer of past transitions.
pub struct DawrTrainer {
    core: WrCore,
    pub critic: ValueNet,
    pub buffer: ReplayBuffer<WrSample>,
    critic_opt: AdamState,
}

impl DawrTrainer {
    pub fn new(
        policy: DiffusionPolicy,
        normalizer: Normalizer,
        env_config: AvoidConfig,
        cfg: WrConfig,
        seed: u64,
    ) -> Result<Self> {
        let mut core = WrCore::new(policy, normalizer, env_config, cfg, seed)?;
        let critic = ValueNet::new(OBS_DIM, &core.cfg.value_hidden, &mut core.rng)?;
        let critic_opt = AdamState::new(
            AdamConfig::new(CosineLr::constant(core.cfg.critic_lr)),
            &critic.params(),
        );
        Ok(Self {
            buffer: ReplayBuffer::new(core.cfg.buffer_capacity),
            core,
            critic,
            critic_opt,
        })
    }

    pub fn policy(&self) -> &DiffusionPolicy {
        &self.core.policy
    }

    /// TD(lambda) advantages and lambda-returns of a rollout under the
    /// current critic, flattened in `(t, env)` order.
    pub fn td_lambda(&self, rollout: &Rollout) -> Result<(Vec<f64>, Vec<f64>)> {
        let n = rollout.steps.first().map_or(0, |s| s.rewards.len());
        let split =
            |v: Vec<f64>| -> Vec<Vec<f64>> { v.chunks(n.max(1)).map(|c| c.to_vec()).collect() };
        let obs = Tensor::vstack(&rollout.steps.iter().map(|s| &s.obs).collect::<Vec<_>>())?;
        let next = Tensor::vstack(
            &rollout
                .steps
                .iter()
                .map(|s| &s.next_obs)
                .collect::<Vec<_>>(),
        )?;
        let v = split(self.critic.eval(&obs)?);
        let nv = split(self.critic.eval(&next)?);
        let (a, r) = rollout_gae(
            rollout,
            &v,
            &nv,
            self.core.cfg.gamma_env,
            self.core.cfg.lambda,
        )?;
        Ok((a.concat(), r.concat()))
    }

    fn sample_batch(&mut self) -> Result<(Tensor, Tensor, Vec<f64>)> {
        let picks = self
            .buffer
            .sample(self.core.cfg.batch_size, &mut self.core.rng);
        let obs = rows(&picks.iter().map(|s| &s.obs).collect::<Vec<_>>())?;
        let chunks = rows(&picks.iter().map(|s| &s.chunk).collect::<Vec<_>>())?;
        let targets = picks.iter().map(|s| s.target).collect();
        Ok((obs, chunks, targets))
    }

    /// Stores the rollout with its lambda-return targets, then runs the
    /// critic and actor updates. Returns `(actor_loss, critic_loss)`.
    pub fn update(&mut self, rollout: &Rollout) -> Result<(f64, f64)> {
        let (_, returns) = self.td_lambda(rollout)?;
        let (obs, chunks) = flat_pairs(rollout);
        for ((o, c), t) in obs.into_iter().zip(chunks).zip(returns) {
            self.buffer.push(WrSample {
                obs: o,
                chunk: c,
                target: t,
            });
        }
        let fresh = self.core.cfg.n_envs * rollout.steps.len();
        let per_epoch = fresh.div_ceil(self.core.cfg.batch_size);

        let mut critic_loss = 0.0;
        for _ in 0..self.core.cfg.critic_epochs * per_epoch {
            let (o, _, t) = self.sample_batch()?;
            let mut g = Graph::new();
            let x = g.constant(o)?;
            let (pred, bound) = self.critic.forward(&mut g, x)?;
            let loss = value_loss_graph(&mut g, pred, &t)?;
            critic_loss = g.value(loss)?.item();
            let mut gr = g.backward(loss)?;
            let gr = bound.grads(&g, &mut gr)?;
            self.critic_opt.step(&mut self.critic.params_mut(), &gr)?;
        }

        let (beta, w_max) = (self.core.cfg.beta, self.core.cfg.w_max);
        let mut actor_loss = 0.0;
        for _ in 0..self.core.cfg.actor_epochs * per_epoch {
            let (o, a, t) = self.sample_batch()?;
            let v = self.critic.eval(&o)?;
            let w: Vec<f64> = t
                .iter()
                .zip(&v)
                .map(|(t, v)| wr_weight(t - v, beta, w_max))
                .collect();
            actor_loss = self.core.actor_step(&o, &a, &w)?;
        }
        Ok((actor_loss, critic_loss))
    }

    pub fn iterate(&mut self) -> Result<(LogRow, Rollout)> {
        let lr = self.core.actor_opt.lr();
        let rollout = self.core.collect()?;
        let (a, c) = self.update(&rollout)?;
        let row = self.core.row(&rollout, lr, a, c);
        Ok((row, rollout))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = self.core.checkpoint("dawr");
        ck.push_all("value", self.critic.param_names(), self.critic.params());
        ck
    }
}

impl Finetuner for DawrTrainer {
    fn settings(&self) -> LoopSettings {
        self.core.settings()
    }

    fn iteration(&self) -> usize {
        self.core.iteration
    }

    fn step(&mut self) -> Result<(LogRow, Rollout)> {
        self.iterate()
    }

    fn evaluate_policy(&self, n: usize) -> Result<EvalSummary> {
        self.core.evaluate(n)
    }
}
