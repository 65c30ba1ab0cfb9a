use rand::Rng;

use super::net::EpsNet;
use super::schedule::NoiseSchedule;
use crate::error::{Error, Result};
use crate::ndcore::{Bound, Graph, NodeId, Tensor};

/// Noised inputs and regression targets for one behavior-cloning batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BcBatch {
    pub noisy: Tensor,
    pub eps: Tensor,
    /// Network step index per row (level minus one).
    pub steps: Vec<usize>,
}

/// Draws a level uniformly in `[1, K]` and Gaussian noise per row and forms
/// `a^k = sqrt(alpha_bar_k) a^0 + sqrt(1 - alpha_bar_k) eps`.
pub fn bc_targets<R: Rng + ?Sized>(
    actions: &Tensor,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<BcBatch> {
    if actions.rows() == 0 {
        return Err(Error::invalid("behavior-cloning batch is empty"));
    }
    let eps = Tensor::randn(actions.rows(), actions.cols(), rng);
    let mut noisy = actions.clone();
    let mut steps = Vec::with_capacity(actions.rows());
    for r in 0..actions.rows() {
        let i = rng.random_range(0..sched.len());
        let ab = sched.alpha_bar[i];
        let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
        for (v, e) in noisy.row_mut(r).iter_mut().zip(eps.row(r)) {
            *v = sa * *v + sn * e;
        }
        steps.push(sched.net_step[i]);
    }
    Ok(BcBatch { noisy, eps, steps })
}

/// `mean_b w_b ||eps_b - pred_b||^2`, with unit weights when `weights` is `None`.
pub fn bc_loss_from_prediction(
    pred: &Tensor,
    eps: &Tensor,
    weights: Option<&[f64]>,
) -> Result<f64> {
    if !pred.same_shape(eps) {
        return Err(Error::ShapeMismatch {
            op: "bc_loss",
            left: pred.shape().to_vec(),
            right: eps.shape().to_vec(),
        });
    }
    if pred.rows() == 0 {
        return Err(Error::invalid("behavior-cloning batch is empty"));
    }
    let mut total = 0.0;
    for r in 0..pred.rows() {
        let sq: f64 = pred
            .row(r)
            .iter()
            .zip(eps.row(r))
            .map(|(p, e)| (e - p) * (e - p))
            .sum();
        total += weights.map_or(1.0, |w| w[r]) * sq;
    }
    Ok(total / pred.rows() as f64)
}

/// Untaped loss on a prepared batch.
pub fn bc_loss(
    net: &EpsNet,
    obs: &Tensor,
    batch: &BcBatch,
    weights: Option<&[f64]>,
) -> Result<f64> {
    let pred = net.eval(&batch.noisy, obs, &batch.steps)?;
    bc_loss_from_prediction(&pred, &batch.eps, weights)
}

/// Taped loss on a prepared batch.
pub fn bc_loss_graph(
    net: &EpsNet,
    g: &mut Graph,
    obs: &Tensor,
    batch: &BcBatch,
    weights: Option<&[f64]>,
) -> Result<(NodeId, Bound)> {
    if let Some(w) = weights {
        if w.len() != obs.rows() {
            return Err(Error::invalid("one weight per sample is required"));
        }
    }
    let x = g.constant(batch.noisy.clone())?;
    let s = g.constant(obs.clone())?;
    let (pred, bound) = net.forward(g, x, s, &batch.steps)?;
    let target = g.constant(batch.eps.clone())?;
    let diff = g.sub(target, pred)?;
    let sq = g.square(diff)?;
    let mut per = g.sum_cols(sq)?;
    if let Some(w) = weights {
        let wn = g.constant(Tensor::column(w.to_vec()))?;
        per = g.mul(per, wn)?;
    }
    let loss = g.mean(per)?;
    Ok((loss, bound))
}

/// Loss value and one gradient per parameter of `net`.
pub fn bc_loss_and_grad(
    net: &EpsNet,
    obs: &Tensor,
    batch: &BcBatch,
    weights: Option<&[f64]>,
) -> Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::new();
    let (loss, bound) = bc_loss_graph(net, &mut g, obs, batch, weights)?;
    let v = g.value(loss)?.item();
    let mut grads = g.backward(loss)?;
    Ok((v, bound.grads(&g, &mut grads)?))
}
