use crate::error::{Error, Result};

/// Generalized advantage estimation over one environment's sequence.
///
/// `next_values[t]` is the value of the state reached after step `t`;
/// `terminated[t]` zeroes it (true termination), `episode_end[t]` stops the
/// recursion (termination or truncation). Returns `(advantages, returns)`
/// with `returns = advantages + values`.
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    next_values: &[f64],
    terminated: &[bool],
    episode_end: &[bool],
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = rewards.len();
    if [
        values.len(),
        next_values.len(),
        terminated.len(),
        episode_end.len(),
    ]
    .iter()
    .any(|&l| l != n)
    {
        return Err(Error::invalid("gae inputs must have equal lengths"));
    }
    let mut adv = vec![0.0; n];
    let mut acc = 0.0;
    for t in (0..n).rev() {
        let nv = if terminated[t] { 0.0 } else { next_values[t] };
        let delta = rewards[t] + gamma * nv - values[t];
        let carry = if episode_end[t] { 0.0 } else { acc };
        acc = delta + gamma * lambda * carry;
        adv[t] = acc;
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, ret))
}

/// Textbook form: `dones[t]` marks termination after step `t`, values of
/// successor states are `values[t + 1]`, and `bootstrap` is the value of the
/// state after the last step.
pub fn gae_simple(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap: f64,
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = rewards.len();
    if values.len() != n || dones.len() != n {
        return Err(Error::invalid("gae inputs must have equal lengths"));
    }
    let next: Vec<f64> = (0..n)
        .map(|t| if t + 1 < n { values[t + 1] } else { bootstrap })
        .collect();
    gae(rewards, values, &next, dones, dones, gamma, lambda)
}
