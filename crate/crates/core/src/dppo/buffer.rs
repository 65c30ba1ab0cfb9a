use super::gae::gae;
use super::loss::denoise_discount;
use super::value::ValueNet;
use crate::diffusion::StepCoefficients;
use crate::envlab::Rollout;
use crate::error::{Error, Result};
use crate::ndcore::Tensor;

/// Flattened two-layer-MDP samples from one collection phase.
///
/// Denoising rows are ordered by `(t, env)` and then by the flat index
/// within the fine-tuned tail (`k = K'-1` first). Environment rows are
/// ordered by `(t, env)`.
#[derive(Debug, Clone)]
pub struct DenoiseRolloutBuffer {
    pub k_prime: usize,
    pub n_steps: usize,
    pub n_envs: usize,
    pub obs: Tensor,
    pub input: Tensor,
    pub output: Tensor,
    pub t: Vec<usize>,
    pub env: Vec<usize>,
    pub k: Vec<usize>,
    pub net_step: Vec<usize>,
    pub coeffs: Vec<StepCoefficients>,
    pub sigma_prob: Vec<f64>,
    pub old_logprob: Vec<f64>,
    /// Chunk reward, placed only on `k = 0` rows.
    pub reward: Vec<f64>,
    pub advantage: Vec<f64>,
    pub env_obs: Tensor,
    pub env_values: Vec<f64>,
    pub env_advantage: Vec<f64>,
    pub env_returns: Vec<f64>,
}

pub struct AdvantageParams {
    pub gamma_env: f64,
    pub gae_lambda: f64,
    pub gamma_denoise: f64,
}

/// Per-env GAE over a rollout's chunk steps given `values[t][i]` and
/// `next_values[t][i]`; returns `(advantages, returns)` indexed `[t][i]`.
pub fn rollout_gae(
    rollout: &Rollout,
    values: &[Vec<f64>],
    next_values: &[Vec<f64>],
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let t_len = rollout.steps.len();
    let n = rollout.steps.first().map_or(0, |s| s.rewards.len());
    let mut adv = vec![vec![0.0; n]; t_len];
    let mut ret = vec![vec![0.0; n]; t_len];
    for i in 0..n {
        let col = |f: &dyn Fn(usize) -> f64| (0..t_len).map(f).collect::<Vec<f64>>();
        let r = col(&|t| rollout.steps[t].rewards[i]);
        let v = col(&|t| values[t][i]);
        let nv = col(&|t| next_values[t][i]);
        let term: Vec<bool> = (0..t_len).map(|t| rollout.steps[t].terminated[i]).collect();
        let end: Vec<bool> = (0..t_len)
            .map(|t| rollout.steps[t].terminated[i] || rollout.steps[t].truncated[i])
            .collect();
        let (a, rt) = gae(&r, &v, &nv, &term, &end, gamma, lambda)?;
        for t in 0..t_len {
            adv[t][i] = a[t];
            ret[t][i] = rt[t];
        }
    }
    Ok((adv, ret))
}

impl DenoiseRolloutBuffer {
    pub fn build(
        rollout: &Rollout,
        value: &ValueNet,
        k_prime: usize,
        p: &AdvantageParams,
    ) -> Result<Self> {
        let t_len = rollout.steps.len();
        if t_len == 0 {
            return Err(Error::invalid("empty rollout"));
        }
        let n = rollout.steps[0].rewards.len();
        let obs_refs: Vec<&Tensor> = rollout.steps.iter().map(|s| &s.obs).collect();
        let next_refs: Vec<&Tensor> = rollout.steps.iter().map(|s| &s.next_obs).collect();
        let env_obs = Tensor::vstack(&obs_refs)?;
        let flat_v = value.eval(&env_obs)?;
        let flat_nv = value.eval(&Tensor::vstack(&next_refs)?)?;
        let split = |f: &[f64]| -> Vec<Vec<f64>> { f.chunks(n).map(|c| c.to_vec()).collect() };
        let (values, next_values) = (split(&flat_v), split(&flat_nv));
        let (adv, ret) = rollout_gae(rollout, &values, &next_values, p.gamma_env, p.gae_lambda)?;

        let d = rollout.steps[0].output.chunks.cols();
        let obs_dim = env_obs.cols();
        let rows = t_len * n * k_prime;
        let mut b = Self {
            k_prime,
            n_steps: t_len,
            n_envs: n,
            obs: Tensor::zeros(rows, obs_dim),
            input: Tensor::zeros(rows, d),
            output: Tensor::zeros(rows, d),
            t: Vec::with_capacity(rows),
            env: Vec::with_capacity(rows),
            k: Vec::with_capacity(rows),
            net_step: Vec::with_capacity(rows),
            coeffs: Vec::with_capacity(rows),
            sigma_prob: Vec::with_capacity(rows),
            old_logprob: Vec::with_capacity(rows),
            reward: Vec::with_capacity(rows),
            advantage: Vec::with_capacity(rows),
            env_obs,
            env_values: flat_v,
            env_advantage: adv.concat(),
            env_returns: ret.concat(),
        };
        let mut row = 0;
        for (t, step) in rollout.steps.iter().enumerate() {
            let trace =
                step.output.trace.as_ref().ok_or_else(|| {
                    Error::invalid("rollout was not produced by a diffusion sampler")
                })?;
            let tail: Vec<_> = trace.tail().collect();
            if tail.len() != k_prime {
                return Err(Error::invalid(format!(
                    "trace records {} likelihood steps, expected K' = {k_prime}",
                    tail.len()
                )));
            }
            for i in 0..n {
                for ts in &tail {
                    let k = ts.step.k;
                    b.obs.row_mut(row).copy_from_slice(step.obs.row(i));
                    b.input.row_mut(row).copy_from_slice(ts.input.row(i));
                    b.output.row_mut(row).copy_from_slice(ts.output.row(i));
                    b.t.push(t);
                    b.env.push(i);
                    b.k.push(k);
                    b.net_step.push(ts.step.net_step);
                    b.coeffs.push(ts.step.coeffs);
                    b.sigma_prob.push(ts.step.sigma_prob);
                    b.old_logprob
                        .push(ts.logprob.as_ref().expect("tail step has likelihood")[i]);
                    b.reward.push(if k == 0 { step.rewards[i] } else { 0.0 });
                    b.advantage
                        .push(denoise_discount(adv[t][i], k, p.gamma_denoise));
                    row += 1;
                }
            }
        }
        Ok(b)
    }

    pub fn len(&self) -> usize {
        self.old_logprob.len()
    }

    pub fn is_empty(&self) -> bool {
        self.old_logprob.is_empty()
    }
}
