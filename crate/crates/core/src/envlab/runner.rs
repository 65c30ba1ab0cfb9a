use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::demo::{carrot_chunk, Family};
use super::env::{AvoidConfig, AvoidEnv, Event, ACT_DIM, OBS_DIM};
use super::normalize::Normalizer;
use crate::diffusion::{DenoiseTrace, DiffusionPolicy, SampleMode};
use crate::error::{Error, Result};
use crate::ndcore::Tensor;

/// Output of a chunk policy for a batch of normalized observations.
#[derive(Debug, Clone)]
pub struct PolicyOutput {
    /// Normalized chunks `[N, T_p * ACT_DIM]`.
    pub chunks: Tensor,
    pub trace: Option<DenoiseTrace>,
    pub logprob: Option<Vec<f64>>,
}

pub trait ChunkPolicy {
    fn act(&self, obs: &Tensor, rng: &mut ChaCha8Rng) -> Result<PolicyOutput>;
}

/// Adapts a diffusion policy to the runner.
pub struct DiffusionSampler<'a> {
    pub policy: &'a DiffusionPolicy,
    pub mode: SampleMode,
}

impl ChunkPolicy for DiffusionSampler<'_> {
    fn act(&self, obs: &Tensor, rng: &mut ChaCha8Rng) -> Result<PolicyOutput> {
        let trace = self.policy.sample_chunk(obs, rng, self.mode)?;
        Ok(PolicyOutput {
            chunks: trace.action.clone(),
            trace: Some(trace),
            logprob: None,
        })
    }
}

/// Carrot-following along an unjittered family route; ignores the rng.
#[derive(Debug, Clone)]
pub struct ScriptedPolicy {
    pub family: Family,
    pub normalizer: Normalizer,
    pub t_p: usize,
    pub lookahead: f64,
    pub max_step: f64,
}

impl ChunkPolicy for ScriptedPolicy {
    fn act(&self, obs: &Tensor, _rng: &mut ChaCha8Rng) -> Result<PolicyOutput> {
        let path = self.family.waypoints();
        let mut chunks = Tensor::zeros(obs.rows(), self.t_p * ACT_DIM);
        for r in 0..obs.rows() {
            let o = self.normalizer.denormalize_obs(obs.row(r));
            let targets =
                carrot_chunk(&path, [o[0], o[1]], self.lookahead, self.max_step, self.t_p);
            for (j, t) in targets.iter().enumerate() {
                let n = self.normalizer.normalize_act(t);
                chunks.row_mut(r)[j * ACT_DIM..(j + 1) * ACT_DIM].copy_from_slice(&n);
            }
        }
        Ok(PolicyOutput {
            chunks,
            trace: None,
            logprob: None,
        })
    }
}

/// Action-noise robustness protocol: a band `(lo, hi)` of per-tick noise
/// magnitudes that is zero before `start_iter` and ramps linearly to
/// `(lo_max, hi_max)` at `full_iter`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseInjection {
    pub start_iter: f64,
    pub full_iter: f64,
    pub lo_max: f64,
    pub hi_max: f64,
}

impl Default for NoiseInjection {
    fn default() -> Self {
        Self {
            start_iter: 5.0,
            full_iter: 10.0,
            lo_max: 0.1,
            hi_max: 0.2,
        }
    }
}

impl NoiseInjection {
    pub fn band(&self, iteration: f64) -> (f64, f64) {
        if iteration < self.start_iter {
            return (0.0, 0.0);
        }
        let f =
            ((iteration - self.start_iter) / (self.full_iter - self.start_iter)).clamp(0.0, 1.0);
        (f * self.lo_max, f * self.hi_max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub env: usize,
    pub event: Event,
    pub reward: f64,
    pub length: usize,
    /// Positions visited, starting with the reset position.
    pub states: Vec<[f64; 2]>,
    /// Commanded world-frame targets, one per tick.
    pub actions: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, Default)]
struct LiveEpisode {
    states: Vec<[f64; 2]>,
    actions: Vec<[f64; 2]>,
    reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunnerConfig {
    pub n_envs: usize,
    pub t_a: usize,
    pub t_p: usize,
    /// Reset every environment at the start of each collection call.
    pub reset_at_iteration: bool,
}

/// One chunk-level transition for every environment.
#[derive(Debug, Clone)]
pub struct ChunkStep {
    /// Normalized observations the chunks were sampled from.
    pub obs: Tensor,
    pub output: PolicyOutput,
    /// Sum of per-tick rewards over the executed ticks.
    pub rewards: Vec<f64>,
    /// Goal or collision.
    pub terminated: Vec<bool>,
    /// Horizon reached.
    pub truncated: Vec<bool>,
    /// Normalized observation after the chunk, before any auto-reset.
    pub next_obs: Tensor,
}

#[derive(Debug, Clone)]
pub struct Rollout {
    pub steps: Vec<ChunkStep>,
    pub episodes: Vec<EpisodeRecord>,
    pub env_ticks: usize,
    pub band: (f64, f64),
}

impl Rollout {
    pub fn success_rate(&self) -> Option<f64> {
        rate(&self.episodes, |e| e == Event::GoalTop)
    }

    pub fn mean_return(&self) -> Option<f64> {
        if self.episodes.is_empty() {
            return None;
        }
        Some(self.episodes.iter().map(|e| e.reward).sum::<f64>() / self.episodes.len() as f64)
    }
}

fn rate(eps: &[EpisodeRecord], pred: impl Fn(Event) -> bool) -> Option<f64> {
    if eps.is_empty() {
        return None;
    }
    Some(eps.iter().filter(|e| pred(e.event)).count() as f64 / eps.len() as f64)
}

/// `N` environments stepped in lockstep with chunked actions and
/// auto-reset. Each environment owns independent reset and noise streams.
pub struct VecRunner {
    pub config: RunnerConfig,
    pub env_config: AvoidConfig,
    pub normalizer: Normalizer,
    pub noise: Option<NoiseInjection>,
    envs: Vec<AvoidEnv>,
    env_rngs: Vec<ChaCha8Rng>,
    noise_rngs: Vec<ChaCha8Rng>,
    policy_rng: ChaCha8Rng,
    live: Vec<LiveEpisode>,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

impl VecRunner {
    pub fn new(
        config: RunnerConfig,
        env_config: AvoidConfig,
        normalizer: Normalizer,
        seed: u64,
    ) -> Result<Self> {
        if config.n_envs == 0 || config.t_a == 0 || config.t_a > config.t_p {
            return Err(Error::invalid(
                "runner needs n_envs >= 1 and 1 <= T_a <= T_p",
            ));
        }
        let n = config.n_envs;
        let mut r = Self {
            envs: (0..n).map(|_| AvoidEnv::new(env_config.clone())).collect(),
            env_rngs: (0..n as u64).map(|i| stream(seed, 2 * i + 1)).collect(),
            noise_rngs: (0..n as u64).map(|i| stream(seed, 2 * i + 2)).collect(),
            policy_rng: stream(seed, 0),
            live: vec![LiveEpisode::default(); n],
            config,
            env_config,
            normalizer,
            noise: None,
        };
        r.reset_all();
        Ok(r)
    }

    fn reset_env(&mut self, i: usize) {
        let o = self.envs[i].reset(&mut self.env_rngs[i]);
        self.live[i] = LiveEpisode {
            states: vec![[o[0], o[1]]],
            ..Default::default()
        };
    }

    pub fn reset_all(&mut self) {
        for i in 0..self.envs.len() {
            self.reset_env(i);
        }
    }

    fn obs_tensor(&self, idx: &[usize]) -> Tensor {
        let mut t = Tensor::zeros(idx.len(), OBS_DIM);
        for (r, &i) in idx.iter().enumerate() {
            t.row_mut(r)
                .copy_from_slice(&self.normalizer.normalize_obs(&self.envs[i].obs()));
        }
        t
    }

    /// Executes the first `T_a` targets of env `i`'s chunk. Returns the summed
    /// reward and the terminating event, if any.
    fn run_chunk(
        &mut self,
        i: usize,
        chunk: &[f64],
        band: (f64, f64),
    ) -> Result<(f64, Option<Event>)> {
        let mut reward = 0.0;
        for j in 0..self.config.t_a {
            let mut a = [chunk[j * ACT_DIM], chunk[j * ACT_DIM + 1]];
            if self.noise.is_some() {
                for v in a.iter_mut() {
                    let rng = &mut self.noise_rngs[i];
                    let mag = band.0 + (band.1 - band.0) * rng.random::<f64>();
                    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                    *v += sign * mag;
                }
            }
            let w = self.normalizer.denormalize_act(&a);
            let out = self.envs[i].step([w[0], w[1]])?;
            reward += out.reward;
            let ep = &mut self.live[i];
            ep.actions.push([w[0], w[1]]);
            ep.states.push([out.obs[0], out.obs[1]]);
            ep.reward += out.reward;
            if out.done {
                return Ok((reward, out.event));
            }
        }
        Ok((reward, None))
    }

    fn finish(&mut self, i: usize, event: Event) -> EpisodeRecord {
        let ep = std::mem::take(&mut self.live[i]);
        EpisodeRecord {
            env: i,
            event,
            reward: ep.reward,
            length: ep.actions.len(),
            states: ep.states,
            actions: ep.actions,
        }
    }

    /// Collects `n_chunks` chunk-level steps from every environment.
    pub fn collect(
        &mut self,
        policy: &dyn ChunkPolicy,
        n_chunks: usize,
        iteration: usize,
    ) -> Result<Rollout> {
        if self.config.reset_at_iteration {
            self.reset_all();
        }
        let band = self.noise.map_or((0.0, 0.0), |n| n.band(iteration as f64));
        let n = self.envs.len();
        let all: Vec<usize> = (0..n).collect();
        let mut steps = Vec::with_capacity(n_chunks);
        let mut episodes = Vec::new();
        let mut ticks = 0;
        for _ in 0..n_chunks {
            let obs = self.obs_tensor(&all);
            let output = policy.act(&obs, &mut self.policy_rng)?;
            let mut rewards = vec![0.0; n];
            let mut terminated = vec![false; n];
            let mut truncated = vec![false; n];
            let mut next_obs = Tensor::zeros(n, OBS_DIM);
            for i in 0..n {
                let before = self.envs[i].elapsed();
                let (r, ev) = self.run_chunk(i, output.chunks.row(i), band)?;
                ticks += self.envs[i].elapsed() - before;
                rewards[i] = r;
                next_obs
                    .row_mut(i)
                    .copy_from_slice(&self.normalizer.normalize_obs(&self.envs[i].obs()));
                if let Some(e) = ev {
                    terminated[i] = e.is_terminal();
                    truncated[i] = !e.is_terminal();
                    episodes.push(self.finish(i, e));
                    self.reset_env(i);
                }
            }
            steps.push(ChunkStep {
                obs,
                output,
                rewards,
                terminated,
                truncated,
                next_obs,
            });
        }
        Ok(Rollout {
            steps,
            episodes,
            env_ticks: ticks,
            band,
        })
    }

    /// Runs exactly one episode in each environment (no auto-reset) and
    /// returns the records in environment order.
    pub fn run_episodes(&mut self, policy: &dyn ChunkPolicy) -> Result<Vec<EpisodeRecord>> {
        self.reset_all();
        let n = self.envs.len();
        let mut records: Vec<Option<EpisodeRecord>> = vec![None; n];
        loop {
            let active: Vec<usize> = (0..n).filter(|&i| records[i].is_none()).collect();
            if active.is_empty() {
                break;
            }
            let obs = self.obs_tensor(&active);
            let out = policy.act(&obs, &mut self.policy_rng)?;
            for (r, &i) in active.iter().enumerate() {
                if let (_, Some(e)) = self.run_chunk(i, out.chunks.row(r), (0.0, 0.0))? {
                    records[i] = Some(self.finish(i, e));
                }
            }
        }
        Ok(records.into_iter().flatten().collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub n_episodes: usize,
    /// Fraction of episodes crossing in the rewarded top mode.
    pub success_rate: f64,
    /// Fraction reaching the goal line in any mode.
    pub goal_rate: f64,
    pub events: BTreeMap<String, usize>,
    pub mean_length: f64,
}

impl EvalSummary {
    pub fn from_episodes(eps: &[EpisodeRecord]) -> Self {
        let mut events = BTreeMap::new();
        for e in [
            Event::Collision,
            Event::GoalTop,
            Event::GoalOther,
            Event::Timeout,
        ] {
            events.insert(e.name().to_string(), 0);
        }
        for e in eps {
            *events.entry(e.event.name().to_string()).or_insert(0) += 1;
        }
        let n = eps.len().max(1) as f64;
        Self {
            n_episodes: eps.len(),
            success_rate: rate(eps, |e| e == Event::GoalTop).unwrap_or(0.0),
            goal_rate: rate(eps, |e| matches!(e, Event::GoalTop | Event::GoalOther)).unwrap_or(0.0),
            events,
            mean_length: eps.iter().map(|e| e.length as f64).sum::<f64>() / n,
        }
    }
}

/// Runs `n_episodes` episodes in parallel environments seeded by `seed`.
pub fn evaluate(
    policy: &dyn ChunkPolicy,
    env_config: &AvoidConfig,
    normalizer: &Normalizer,
    t_a: usize,
    t_p: usize,
    n_episodes: usize,
    seed: u64,
) -> Result<(EvalSummary, Vec<EpisodeRecord>)> {
    let mut runner = VecRunner::new(
        RunnerConfig {
            n_envs: n_episodes,
            t_a,
            t_p,
            reset_at_iteration: true,
        },
        env_config.clone(),
        normalizer.clone(),
        seed,
    )?;
    let eps = runner.run_episodes(policy)?;
    Ok((EvalSummary::from_episodes(&eps), eps))
}

/// One JSON object per line.
pub fn trajectories_to_jsonl(eps: &[EpisodeRecord]) -> Result<String> {
    let mut s = String::new();
    for e in eps {
        s.push_str(&serde_json::to_string(e)?);
        s.push('\n');
    }
    Ok(s)
}

pub fn trajectories_from_jsonl(text: &str) -> Result<Vec<EpisodeRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::Malformed(format!("trajectory line {}: {e}", i + 1)))
        })
        .collect()
}
