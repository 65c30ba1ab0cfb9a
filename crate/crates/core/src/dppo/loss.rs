use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndcore::{Graph, NodeId, Tensor};

/// `eps_k = eps_0 * 0.1^(k / (K' - 1))`, constant when `K' = 1`.
pub fn clip_schedule(eps0: f64, k_prime: usize) -> Result<Vec<f64>> {
    if !(eps0 > 0.0) || k_prime == 0 {
        return Err(Error::invalid("clip schedule needs eps_0 > 0 and K' >= 1"));
    }
    if k_prime == 1 {
        return Ok(vec![eps0]);
    }
    Ok((0..k_prime)
        .map(|k| eps0 * 0.1f64.powf(k as f64 / (k_prime - 1) as f64))
        .collect())
}

/// Advantage at denoising index `k` from the environment-step advantage.
pub fn denoise_discount(advantage: f64, k: usize, gamma_denoise: f64) -> f64 {
    advantage * gamma_denoise.powi(k as i32)
}

/// Shift and scale to zero mean and unit (population) std; a constant
/// batch maps to zeros.
pub fn normalize_advantages(adv: &[f64]) -> Vec<f64> {
    let n = adv.len().max(1) as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    adv.iter().map(|a| (a - mean) / (std + 1e-8)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PpoStats {
    pub loss: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
}

fn check(new: &[f64], old: &[f64], adv: &[f64], eps: &[f64]) -> Result<()> {
    let n = new.len();
    if old.len() != n || adv.len() != n || eps.len() != n || n == 0 {
        return Err(Error::invalid(
            "ppo_loss inputs must be non-empty and aligned",
        ));
    }
    Ok(())
}

fn diagnostics(new: &[f64], old: &[f64], eps: &[f64]) -> Result<(f64, f64)> {
    let n = new.len() as f64;
    let mut clipped = 0usize;
    let mut kl = 0.0;
    for i in 0..new.len() {
        let ratio = (new[i] - old[i]).exp();
        if !ratio.is_finite() {
            return Err(Error::NonFinite("PPO likelihood ratio".into()));
        }
        if (ratio - 1.0).abs() > eps[i] {
            clipped += 1;
        }
        // (r - 1) - ln r, non-negative for every sample
        kl += (ratio - 1.0) - (new[i] - old[i]);
    }
    Ok((clipped as f64 / n, kl / n))
}

/// `-mean min(A r, A clip(r, 1 - eps, 1 + eps))` with `r = exp(new - old)`
/// and a per-sample clip range. Advantages are used as given.
pub fn ppo_loss(new: &[f64], old: &[f64], adv: &[f64], eps: &[f64]) -> Result<PpoStats> {
    check(new, old, adv, eps)?;
    let (clip_fraction, approx_kl) = diagnostics(new, old, eps)?;
    let mut obj = 0.0;
    for i in 0..new.len() {
        let r = (new[i] - old[i]).exp();
        let rc = r.clamp(1.0 - eps[i], 1.0 + eps[i]);
        obj += (adv[i] * r).min(adv[i] * rc);
    }
    Ok(PpoStats {
        loss: -obj / new.len() as f64,
        clip_fraction,
        approx_kl,
    })
}

/// Taped version on a `[B, 1]` node of new log-likelihoods.
pub fn ppo_loss_graph(
    g: &mut Graph,
    new: NodeId,
    old: &[f64],
    adv: &[f64],
    eps: &[f64],
) -> Result<(NodeId, PpoStats)> {
    let new_vals = g.value(new)?.data().to_vec();
    check(&new_vals, old, adv, eps)?;
    let (clip_fraction, approx_kl) = diagnostics(&new_vals, old, eps)?;
    let old_n = g.constant(Tensor::column(old.to_vec()))?;
    let a = g.constant(Tensor::column(adv.to_vec()))?;
    let neg_lo = g.constant(Tensor::column(eps.iter().map(|e| e - 1.0).collect()))?;
    let hi = g.constant(Tensor::column(eps.iter().map(|e| 1.0 + e).collect()))?;

    let diff = g.sub(new, old_n)?;
    let ratio = g.exp(diff)?;
    let neg = g.neg(ratio)?;
    let neg_floor = g.minimum(neg, neg_lo)?;
    let floored = g.neg(neg_floor)?;
    let clipped = g.minimum(floored, hi)?;
    let s1 = g.mul(ratio, a)?;
    let s2 = g.mul(clipped, a)?;
    let obj = g.minimum(s1, s2)?;
    let m = g.mean(obj)?;
    let loss = g.neg(m)?;
    let value = g.value(loss)?.item();
    Ok((
        loss,
        PpoStats {
            loss: value,
            clip_fraction,
            approx_kl,
        },
    ))
}

/// Mean squared error.
pub fn value_loss(pred: &[f64], returns: &[f64]) -> Result<f64> {
    if pred.len() != returns.len() || pred.is_empty() {
        return Err(Error::invalid(
            "value_loss inputs must be non-empty and aligned",
        ));
    }
    Ok(pred
        .iter()
        .zip(returns)
        .map(|(p, r)| (p - r) * (p - r))
        .sum::<f64>()
        / pred.len() as f64)
}

/// Taped mean squared error on a `[B, 1]` prediction node.
pub fn value_loss_graph(g: &mut Graph, pred: NodeId, returns: &[f64]) -> Result<NodeId> {
    let r = g.constant(Tensor::column(returns.to_vec()))?;
    let d = g.sub(pred, r)?;
    let sq = g.square(d)?;
    g.mean(sq)
}
