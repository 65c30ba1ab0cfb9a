use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::net::{EpsNet, EpsNetSpec};
use super::schedule::{cosine_schedule, gaussian_logprob, NoiseSchedule, StepCoefficients};
use crate::error::{Error, Result};
use crate::ndcore::{Bound, Checkpoint, Graph, NodeId, Parameterized, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum SamplerKind {
    Ddpm,
    Ddim { steps: usize, eta: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionConfig {
    pub k: usize,
    pub k_prime: usize,
    pub t_p: usize,
    pub t_a: usize,
    pub action_dim: usize,
    pub sampler: SamplerKind,
    pub cosine_s: f64,
    pub sigma_exp_min: f64,
    pub sigma_prob_min: f64,
    pub sigma_eval_floor: f64,
    /// Clip applied to the predicted clean chunk inside each step.
    pub x0_clip: Option<f64>,
    pub net: EpsNetSpec,
}

impl DiffusionConfig {
    pub fn new(obs_dim: usize, action_dim: usize, t_p: usize) -> Self {
        Self {
            k: 20,
            k_prime: 10,
            t_p,
            t_a: t_p,
            action_dim,
            sampler: SamplerKind::Ddpm,
            cosine_s: 0.008,
            sigma_exp_min: 0.1,
            sigma_prob_min: 0.1,
            sigma_eval_floor: 0.001,
            x0_clip: Some(1.0),
            net: EpsNetSpec::small(obs_dim, t_p * action_dim),
        }
    }

    pub fn chunk_dim(&self) -> usize {
        self.t_p * self.action_dim
    }

    /// Number of steps in the sampling chain.
    pub fn chain_len(&self) -> usize {
        match self.sampler {
            SamplerKind::Ddpm => self.k,
            SamplerKind::Ddim { steps, .. } => steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.k == 0 {
            return bad("K must be at least 1".into());
        }
        if self.t_a == 0 || self.t_a > self.t_p {
            return bad(format!(
                "need 1 <= T_a ({}) <= T_p ({})",
                self.t_a, self.t_p
            ));
        }
        if self.k_prime == 0 || self.k_prime > self.chain_len() {
            return bad(format!(
                "K' = {} outside [1, {}]",
                self.k_prime,
                self.chain_len()
            ));
        }
        if let SamplerKind::Ddim { steps, eta } = self.sampler {
            if steps == 0 || steps > self.k || !(0.0..=1.0).contains(&eta) {
                return bad(format!("invalid DDIM setting steps={steps} eta={eta}"));
            }
        }
        if self.net.chunk_dim != self.chunk_dim() {
            return bad("network chunk width does not match T_p * action_dim".into());
        }
        if !(self.sigma_prob_min > 0.0) || self.sigma_exp_min < 0.0 || self.sigma_eval_floor < 0.0 {
            return bad("sigma floors must be non-negative, likelihood floor positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    /// Training rollouts: noise floored at `sigma_exp_min`.
    Explore,
    /// Evaluation: noise floored at `sigma_eval_floor`; DDIM runs with eta = 0.
    Eval,
}

/// One step of the sampling chain, from level `level` to `level - 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChainStep {
    /// Denoising index of the produced sample: the step outputs `a^k`.
    pub k: usize,
    pub net_step: usize,
    pub coeffs: StepCoefficients,
    pub sigma_sample: f64,
    pub sigma_prob: f64,
}

/// Recorded data of one denoising step for a batch of chains.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceStep {
    pub step: ChainStep,
    /// `a^{k+1}`
    pub input: Tensor,
    /// `a^k` (clamped to [-1, 1] when `k = 0`)
    pub output: Tensor,
    pub mean: Tensor,
    /// Per-row log-likelihood of `output`; present on the fine-tuned tail.
    pub logprob: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiseTrace {
    pub steps: Vec<TraceStep>,
    pub action: Tensor,
}

impl DenoiseTrace {
    /// Steps with recorded likelihoods, ordered from `k = K' - 1` down to 0.
    pub fn tail(&self) -> impl Iterator<Item = &TraceStep> {
        self.steps.iter().filter(|s| s.logprob.is_some())
    }
}

/// Conditional diffusion policy over flattened action chunks.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionPolicy {
    pub config: DiffusionConfig,
    pub schedule: NoiseSchedule,
    pub eps_net: EpsNet,
    pub eps_net_ft: Option<EpsNet>,
}

impl DiffusionPolicy {
    pub fn new<R: Rng + ?Sized>(config: DiffusionConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let schedule = cosine_schedule(config.k, config.cosine_s)?
            .with_floors(Some(config.sigma_exp_min), Some(config.sigma_prob_min));
        let eps_net = EpsNet::new(config.net.clone(), rng)?;
        Ok(Self {
            config,
            schedule,
            eps_net,
            eps_net_ft: None,
        })
    }

    /// Creates the fine-tuned copy used for the last `K'` steps.
    pub fn split_finetune_weights(&mut self) -> Result<()> {
        if self.eps_net_ft.is_some() {
            return Err(Error::AlreadySplit);
        }
        self.eps_net_ft = Some(self.eps_net.clone());
        Ok(())
    }

    /// Network applied at denoising index `k`.
    pub fn net_for(&self, k: usize) -> &EpsNet {
        match &self.eps_net_ft {
            Some(ft) if k < self.config.k_prime => ft,
            _ => &self.eps_net,
        }
    }

    /// The network that receives fine-tuning gradients.
    pub fn trainable(&self) -> &EpsNet {
        self.eps_net_ft.as_ref().unwrap_or(&self.eps_net)
    }

    pub fn trainable_mut(&mut self) -> &mut EpsNet {
        self.eps_net_ft.as_mut().unwrap_or(&mut self.eps_net)
    }

    /// The chain for the given mode, noisiest step first.
    pub fn chain(&self, mode: SampleMode) -> Result<Vec<ChainStep>> {
        let cfg = &self.config;
        let (sched, eta) = match cfg.sampler {
            SamplerKind::Ddpm => (self.schedule.clone(), None),
            SamplerKind::Ddim { steps, eta } => (self.schedule.ddim_subsequence(steps)?, Some(eta)),
        };
        let mut out = Vec::with_capacity(sched.len());
        for level in (1..=sched.len()).rev() {
            let step = |eta_used: Option<f64>| -> Result<StepCoefficients> {
                match eta_used {
                    None => sched.ddpm_coefficients(level),
                    Some(e) => sched.ddim_coefficients(level, e),
                }
            };
            let train = step(eta)?;
            let (coeffs, sigma_sample) = match (mode, eta) {
                (SampleMode::Explore, _) => (train, train.sigma.max(cfg.sigma_exp_min)),
                (SampleMode::Eval, None) => (train, train.sigma.max(cfg.sigma_eval_floor)),
                (SampleMode::Eval, Some(_)) => (step(Some(0.0))?, 0.0),
            };
            out.push(ChainStep {
                k: level - 1,
                net_step: sched.net_step[level - 1],
                coeffs,
                sigma_sample,
                sigma_prob: train.sigma.max(cfg.sigma_prob_min),
            });
        }
        Ok(out)
    }

    /// Samples one chunk per row of `obs` (normalized), starting from fresh
    /// standard normal noise.
    pub fn sample_chunk<R: Rng + ?Sized>(
        &self,
        obs: &Tensor,
        rng: &mut R,
        mode: SampleMode,
    ) -> Result<DenoiseTrace> {
        let init = Tensor::randn(obs.rows(), self.config.chunk_dim(), rng);
        self.sample_chunk_from(obs, init, rng, mode)
    }

    /// Like [`sample_chunk`](Self::sample_chunk) with a given `a^K`.
    pub fn sample_chunk_from<R: Rng + ?Sized>(
        &self,
        obs: &Tensor,
        init: Tensor,
        rng: &mut R,
        mode: SampleMode,
    ) -> Result<DenoiseTrace> {
        let d = self.config.chunk_dim();
        if init.rows() != obs.rows() || init.cols() != d {
            return Err(Error::ShapeMismatch {
                op: "sample_chunk",
                left: vec![obs.rows(), d],
                right: init.shape().to_vec(),
            });
        }
        let chain = self.chain(mode)?;
        let base_feat = self.eps_net.encode_state(obs)?;
        let ft_feat = match &self.eps_net_ft {
            Some(ft) => Some(ft.encode_state(obs)?),
            None => None,
        };
        let mut x = init;
        let mut steps = Vec::new();
        for st in chain {
            let tail = st.k < self.config.k_prime;
            let (net, feat) = match (&self.eps_net_ft, &ft_feat) {
                (Some(ft), Some(f)) if tail => (ft, f),
                _ => (&self.eps_net, &base_feat),
            };
            let eps = net.eval_at(&x, feat, &net.step_features(st.net_step)?)?;
            let mean = self.step_mean(&st, &x, &eps);
            let mut next = mean.clone();
            if st.sigma_sample > 0.0 {
                for v in next.data_mut() {
                    let z: f64 = rng.sample(StandardNormal);
                    *v += st.sigma_sample * z;
                }
            }
            if st.k == 0 {
                for v in next.data_mut() {
                    *v = v.clamp(-1.0, 1.0);
                }
            }
            if !next.is_finite() {
                return Err(Error::NonFinite(format!(
                    "denoising step k={} (net step {})",
                    st.k, st.net_step
                )));
            }
            let logprob = if tail {
                Some(
                    (0..next.rows())
                        .map(|r| gaussian_logprob(next.row(r), mean.row(r), st.sigma_prob))
                        .collect::<Result<Vec<f64>>>()?,
                )
            } else {
                None
            };
            steps.push(TraceStep {
                step: st,
                input: std::mem::replace(&mut x, next.clone()),
                output: next,
                mean,
                logprob,
            });
        }
        Ok(DenoiseTrace { steps, action: x })
    }

    /// Recomputes the log-likelihood of `output` given `input` and `obs` at
    /// chain step `st`, under the current weights.
    pub fn step_logprob(
        &self,
        st: &ChainStep,
        obs: &Tensor,
        input: &Tensor,
        output: &Tensor,
    ) -> Result<Vec<f64>> {
        let net = self.net_for(st.k);
        let feat = net.encode_state(obs)?;
        let eps = net.eval_at(input, &feat, &net.step_features(st.net_step)?)?;
        let mean = self.step_mean(st, input, &eps);
        (0..output.rows())
            .map(|r| gaussian_logprob(output.row(r), mean.row(r), st.sigma_prob))
            .collect()
    }

    fn step_mean(&self, st: &ChainStep, x: &Tensor, eps: &Tensor) -> Tensor {
        let mut mean = x.clone();
        for (m, e) in mean.data_mut().iter_mut().zip(eps.data()) {
            *m = st.coeffs.mean(*m, *e, self.config.x0_clip);
        }
        mean
    }

    pub fn to_checkpoint(&self, ck: &mut Checkpoint) {
        ck.push_all("eps_net", self.eps_net.param_names(), self.eps_net.params());
        if let Some(ft) = &self.eps_net_ft {
            ck.push_all("eps_net_ft", ft.param_names(), ft.params());
        }
    }

    /// Rebuilds a policy from `config` and the weights stored in `ck`.
    pub fn from_checkpoint(config: DiffusionConfig, ck: &Checkpoint) -> Result<Self> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut p = Self::new(config, &mut rng)?;
        let names = p.eps_net.param_names();
        ck.load_into("eps_net", names.clone(), p.eps_net.params_mut())?;
        if ck.has_prefix("eps_net_ft") {
            let mut ft = p.eps_net.clone();
            ck.load_into("eps_net_ft", names, ft.params_mut())?;
            p.eps_net_ft = Some(ft);
        }
        Ok(p)
    }
}

/// Taped per-row log-likelihood `[B, 1]` of `output` given `input`, with
/// per-row chain coefficients. Gradients flow only into `net`.
#[allow(clippy::too_many_arguments)]
pub fn logprob_graph(
    net: &EpsNet,
    g: &mut Graph,
    obs: &Tensor,
    input: &Tensor,
    output: &Tensor,
    steps: &[usize],
    coeffs: &[StepCoefficients],
    sigma: &[f64],
    x0_clip: Option<f64>,
) -> Result<(NodeId, Bound)> {
    let b = input.rows();
    let d = input.cols();
    if obs.rows() != b
        || output.rows() != b
        || steps.len() != b
        || coeffs.len() != b
        || sigma.len() != b
    {
        return Err(Error::invalid(
            "logprob_graph inputs must have one row per sample",
        ));
    }
    if sigma.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::invalid("likelihood sigma must be positive"));
    }
    let x = g.constant(input.clone())?;
    let s = g.constant(obs.clone())?;
    let (eps, bound) = net.forward(g, x, s, steps)?;

    let mut col = |f: &dyn Fn(&StepCoefficients, f64) -> f64| -> Result<NodeId> {
        g.constant(Tensor::column(
            (0..b).map(|r| f(&coeffs[r], sigma[r])).collect(),
        ))
    };
    let xa = col(&|c, _| c.x0_from_a)?;
    let xe = col(&|c, _| c.x0_from_eps)?;
    let mx = col(&|c, _| c.mean_x0)?;
    let ma = col(&|c, _| c.mean_a)?;
    let me = col(&|c, _| c.mean_eps)?;
    let inv_sigma = col(&|_, s| 1.0 / s)?;
    let norm = col(&|_, s| d as f64 * (-0.5 * (2.0 * std::f64::consts::PI).ln() - s.ln()))?;

    let out = g.constant(output.clone())?;
    let t1 = g.mul(x, xa)?;
    let t2 = g.mul(eps, xe)?;
    let mut x0 = g.sub(t1, t2)?;
    if let Some(c) = x0_clip {
        x0 = g.clamp(x0, -c, c)?;
    }
    let m1 = g.mul(x0, mx)?;
    let m2 = g.mul(x, ma)?;
    let m3 = g.mul(eps, me)?;
    let m12 = g.add(m1, m2)?;
    let mean = g.add(m12, m3)?;
    let diff = g.sub(out, mean)?;
    let z = g.mul(diff, inv_sigma)?;
    let z2 = g.square(z)?;
    let q = g.sum_cols(z2)?;
    let q = g.scale(q, -0.5)?;
    let lp = g.add(q, norm)?;
    Ok((lp, bound))
}
