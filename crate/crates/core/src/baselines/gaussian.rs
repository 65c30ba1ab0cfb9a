use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::diffusion::{minibatches, PretrainConfig};
use crate::envlab::{ChunkPolicy, PolicyOutput};
use crate::error::{Error, Result};
use crate::ndcore::{
    Activation, AdamConfig, AdamState, Bound, Checkpoint, CosineLr, Graph, MlpNet, MlpSpec, NodeId,
    Parameterized, Tensor,
};

pub const SIGMA_MIN: f64 = 0.01;
pub const SIGMA_MAX: f64 = 0.2;
/// Samples are clamped to `mean ± SAMPLE_CLIP * sigma`.
pub const SAMPLE_CLIP: f64 = 3.0;

/// Unimodal Gaussian chunk policy with a state-independent learned log-std.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPolicy {
    pub mean: MlpNet,
    /// `[1, chunk_dim]`, kept inside `[ln SIGMA_MIN, ln SIGMA_MAX]`.
    pub log_std: Tensor,
}

fn log_gauss_const() -> f64 {
    -0.5 * (2.0 * std::f64::consts::PI).ln()
}

impl GaussianPolicy {
    pub fn new<R: Rng + ?Sized>(
        obs_dim: usize,
        chunk_dim: usize,
        hidden: &[usize],
        sigma_init: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if !(SIGMA_MIN..=SIGMA_MAX).contains(&sigma_init) {
            return Err(Error::invalid(format!(
                "initial sigma {sigma_init} outside [{SIGMA_MIN}, {SIGMA_MAX}]"
            )));
        }
        let mean = MlpNet::new(
            MlpSpec {
                input: obs_dim,
                hidden: hidden.to_vec(),
                output: chunk_dim,
                activation: Activation::Mish,
                residual: false,
            },
            rng,
        )?;
        Ok(Self {
            mean,
            log_std: Tensor::full(1, chunk_dim, sigma_init.ln()),
        })
    }

    pub fn chunk_dim(&self) -> usize {
        self.log_std.cols()
    }

    pub fn std(&self) -> Vec<f64> {
        self.log_std
            .data()
            .iter()
            .map(|l| l.clamp(SIGMA_MIN.ln(), SIGMA_MAX.ln()).exp())
            .collect()
    }

    /// Keeps the log-std parameter inside the clamp range.
    pub fn project(&mut self) {
        for l in self.log_std.data_mut() {
            *l = l.clamp(SIGMA_MIN.ln(), SIGMA_MAX.ln());
        }
    }

    /// Sampled chunks (or the mean when `deterministic`), clipped to
    /// `mean ± 3 sigma` and then to `[-1, 1]`.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        obs: &Tensor,
        rng: &mut R,
        deterministic: bool,
    ) -> Result<Tensor> {
        let mut a = self.mean.eval(obs)?;
        if !deterministic {
            let std = self.std();
            let d = a.cols();
            for (j, v) in a.data_mut().iter_mut().enumerate() {
                let z: f64 = rng.sample(StandardNormal);
                *v += std[j % d] * z.clamp(-SAMPLE_CLIP, SAMPLE_CLIP);
            }
        }
        Ok(a.map(|v| v.clamp(-1.0, 1.0)))
    }

    pub fn logprob(&self, obs: &Tensor, actions: &Tensor) -> Result<Vec<f64>> {
        let mu = self.mean.eval(obs)?;
        if !mu.same_shape(actions) {
            return Err(Error::ShapeMismatch {
                op: "gaussian_logprob",
                left: mu.shape().to_vec(),
                right: actions.shape().to_vec(),
            });
        }
        let std = self.std();
        Ok((0..mu.rows())
            .map(|r| {
                mu.row(r)
                    .iter()
                    .zip(actions.row(r))
                    .zip(&std)
                    .map(|((m, a), s)| {
                        let z = (a - m) / s;
                        -0.5 * z * z - s.ln() + log_gauss_const()
                    })
                    .sum()
            })
            .collect())
    }

    /// Taped `[B, 1]` log-likelihood; bound parameters follow
    /// [`Parameterized::params`] order.
    pub fn logprob_graph(
        &self,
        g: &mut Graph,
        obs: &Tensor,
        actions: &Tensor,
    ) -> Result<(NodeId, Bound)> {
        let x = g.constant(obs.clone())?;
        let (mu, mut bound) = self.mean.forward(g, x)?;
        let ls = g.param(self.log_std.clone())?;
        bound.ids.push(ls);
        let lsc = g.clamp(ls, SIGMA_MIN.ln(), SIGMA_MAX.ln())?;
        let sigma = g.exp(lsc)?;
        let a = g.constant(actions.clone())?;
        let diff = g.sub(a, mu)?;
        let z = g.div(diff, sigma)?;
        let z2 = g.square(z)?;
        let q = g.sum_cols(z2)?;
        let q = g.scale(q, -0.5)?;
        let ls_sum = g.sum_cols(lsc)?;
        let norm = g.neg(ls_sum)?;
        let norm = g.add_scalar(norm, self.chunk_dim() as f64 * log_gauss_const())?;
        let lp = g.add(q, norm)?;
        Ok((lp, bound))
    }

    pub fn to_checkpoint(&self, ck: &mut Checkpoint) {
        ck.push_all("gaussian", self.param_names(), self.params());
    }

    pub fn load_checkpoint(&mut self, ck: &Checkpoint) -> Result<()> {
        let names = self.param_names();
        ck.load_into("gaussian", names, self.params_mut())
    }
}

impl Parameterized for GaussianPolicy {
    fn param_names(&self) -> Vec<String> {
        let mut n: Vec<String> = self
            .mean
            .param_names()
            .into_iter()
            .map(|s| format!("mean.{s}"))
            .collect();
        n.push("log_std".into());
        n
    }

    fn params(&self) -> Vec<&Tensor> {
        let mut p = self.mean.params();
        p.push(&self.log_std);
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.mean.params_mut();
        p.push(&mut self.log_std);
        p
    }
}

/// Mean-squared error between predicted means and target chunks, with
/// `sum over dims, mean over batch`.
pub fn mse_loss_and_grad(
    policy: &GaussianPolicy,
    obs: &Tensor,
    chunks: &Tensor,
) -> Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::new();
    let x = g.constant(obs.clone())?;
    let (mu, bound) = policy.mean.forward(&mut g, x)?;
    let t = g.constant(chunks.clone())?;
    let d = g.sub(mu, t)?;
    let sq = g.square(d)?;
    let per = g.sum_cols(sq)?;
    let loss = g.mean(per)?;
    let v = g.value(loss)?.item();
    let mut grads = g.backward(loss)?;
    Ok((v, bound.grads(&g, &mut grads)?))
}

/// Behavior cloning of the mean with sigma held fixed.
pub fn pretrain_gaussian<R: Rng + ?Sized>(
    policy: &mut GaussianPolicy,
    obs: &Tensor,
    chunks: &Tensor,
    cfg: &PretrainConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if obs.rows() == 0 || obs.rows() != chunks.rows() {
        return Err(Error::invalid(
            "pretraining needs a non-empty, aligned dataset",
        ));
    }
    let per_epoch = obs.rows().div_ceil(cfg.batch_size.max(1));
    let mut ac = AdamConfig::new(CosineLr {
        lr_start: cfg.lr_start,
        lr_end: cfg.lr_end,
        total_steps: (cfg.epochs * per_epoch) as u64,
    });
    ac.weight_decay = cfg.weight_decay;
    ac.ema_decay = cfg.ema_decay;
    let mut adam = AdamState::new(ac, &policy.mean.params());
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        for idx in minibatches(obs.rows(), cfg.batch_size, rng) {
            let (l, grads) =
                mse_loss_and_grad(policy, &obs.select_rows(&idx), &chunks.select_rows(&idx))?;
            if !l.is_finite() {
                return Err(Error::Diverged(format!(
                    "Gaussian BC loss at epoch {epoch}"
                )));
            }
            adam.step(&mut policy.mean.params_mut(), &grads)?;
            total += l * idx.len() as f64;
        }
        losses.push(total / obs.rows() as f64);
    }
    if let Some(ema) = adam.ema() {
        for (d, s) in policy.mean.params_mut().into_iter().zip(ema) {
            *d = s.clone();
        }
    }
    Ok(losses)
}

/// Runner adapter; records the likelihood of the executed chunk.
pub struct GaussianSampler<'a> {
    pub policy: &'a GaussianPolicy,
    pub deterministic: bool,
}

impl ChunkPolicy for GaussianSampler<'_> {
    fn act(&self, obs: &Tensor, rng: &mut ChaCha8Rng) -> Result<PolicyOutput> {
        let chunks = self.policy.sample(obs, rng, self.deterministic)?;
        let logprob = if self.deterministic {
            None
        } else {
            Some(self.policy.logprob(obs, &chunks)?)
        };
        Ok(PolicyOutput {
            chunks,
            trace: None,
            logprob,
        })
    }
}
