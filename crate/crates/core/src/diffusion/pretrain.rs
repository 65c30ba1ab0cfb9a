use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::bc::{bc_loss_and_grad, bc_targets};
use super::policy::DiffusionPolicy;
use crate::error::{Error, Result};
use crate::ndcore::{AdamConfig, AdamState, CosineLr, Parameterized, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub weight_decay: f64,
    pub ema_decay: Option<f64>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10_000,
            batch_size: 16,
            lr_start: 1e-4,
            lr_end: 1e-5,
            weight_decay: 1e-6,
            ema_decay: Some(0.995),
        }
    }
}

/// Shuffled minibatch index lists covering `0..n` once.
pub fn minibatches<R: Rng + ?Sized>(n: usize, batch: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch.max(1)).map(|c| c.to_vec()).collect()
}

/// Behavior cloning of the noise network on `(obs, chunks)` pairs.
///
/// `on_epoch(epoch, mean_loss, ema_policy)` runs after every epoch with the
/// EMA weights swapped in; returning `false` stops training. On return the
/// policy holds the EMA weights when EMA is enabled.
pub fn pretrain_bc<R: Rng + ?Sized>(
    policy: &mut DiffusionPolicy,
    obs: &Tensor,
    chunks: &Tensor,
    cfg: &PretrainConfig,
    rng: &mut R,
    mut on_epoch: impl FnMut(usize, f64, &DiffusionPolicy) -> Result<bool>,
) -> Result<Vec<f64>> {
    if obs.rows() == 0 || obs.rows() != chunks.rows() {
        return Err(Error::invalid(
            "pretraining needs a non-empty, aligned dataset",
        ));
    }
    let batches_per_epoch = obs.rows().div_ceil(cfg.batch_size.max(1));
    let mut adam_cfg = AdamConfig::new(CosineLr {
        lr_start: cfg.lr_start,
        lr_end: cfg.lr_end,
        total_steps: (cfg.epochs * batches_per_epoch) as u64,
    });
    adam_cfg.weight_decay = cfg.weight_decay;
    adam_cfg.ema_decay = cfg.ema_decay;
    let mut adam = AdamState::new(adam_cfg, &policy.eps_net.params());
    let mut losses = Vec::with_capacity(cfg.epochs);
    let mut view = policy.clone();
    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        let mut count = 0;
        for idx in minibatches(obs.rows(), cfg.batch_size, rng) {
            let o = obs.select_rows(&idx);
            let batch = bc_targets(&chunks.select_rows(&idx), &policy.schedule, rng)?;
            let (loss, grads) = bc_loss_and_grad(&policy.eps_net, &o, &batch, None)?;
            if !loss.is_finite() {
                return Err(Error::Diverged(format!(
                    "behavior-cloning loss at epoch {epoch}"
                )));
            }
            adam.step(&mut policy.eps_net.params_mut(), &grads)?;
            total += loss * idx.len() as f64;
            count += idx.len();
        }
        let mean = total / count as f64;
        losses.push(mean);
        copy_weights(&mut view, policy, adam.ema());
        if !on_epoch(epoch, mean, &view)? {
            break;
        }
    }
    if let Some(ema) = adam.ema() {
        for (d, s) in policy.eps_net.params_mut().into_iter().zip(ema) {
            *d = s.clone();
        }
    }
    Ok(losses)
}

fn copy_weights(view: &mut DiffusionPolicy, src: &DiffusionPolicy, ema: Option<&[Tensor]>) {
    match ema {
        Some(ema) => {
            for (d, s) in view.eps_net.params_mut().into_iter().zip(ema) {
                d.data_mut().copy_from_slice(s.data());
            }
        }
        None => {
            for (d, s) in view
                .eps_net
                .params_mut()
                .into_iter()
                .zip(src.eps_net.params())
            {
                d.data_mut().copy_from_slice(s.data());
            }
        }
    }
}
