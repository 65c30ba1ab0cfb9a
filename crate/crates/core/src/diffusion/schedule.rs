use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const BETA_MAX: f64 = 0.999;

/// Per-level noise schedule. Arrays are indexed by `level - 1`, so entry 0
/// belongs to the least noisy level `k = 1` and entry `K - 1` to `k = K`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub alpha_bar: Vec<f64>,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    /// Posterior standard deviation of `q(a^{k-1} | a^k, a^0)`.
    pub sigma: Vec<f64>,
    pub sigma_exp_min: Option<f64>,
    pub sigma_prob_min: Option<f64>,
    /// Step index fed to the noise network at each level. The identity for a
    /// full schedule; the original index for a DDIM sub-schedule.
    pub net_step: Vec<usize>,
}

/// One reverse step written through the predicted clean sample:
/// `x0 = x0_from_a * a^k - x0_from_eps * eps_hat` (optionally clipped), then
/// `mean = mean_x0 * x0 + mean_a * a^k + mean_eps * eps_hat`. `sigma` is the
/// raw (unfloored) noise std of the step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepCoefficients {
    pub x0_from_a: f64,
    pub x0_from_eps: f64,
    pub mean_x0: f64,
    pub mean_a: f64,
    pub mean_eps: f64,
    pub sigma: f64,
}

impl StepCoefficients {
    pub fn mean(&self, a: f64, eps: f64, x0_clip: Option<f64>) -> f64 {
        let mut x0 = self.x0_from_a * a - self.x0_from_eps * eps;
        if let Some(c) = x0_clip {
            x0 = x0.clamp(-c, c);
        }
        self.mean_x0 * x0 + self.mean_a * a + self.mean_eps * eps
    }
}

fn cosine_f(u: f64, k: f64, s: f64) -> f64 {
    (((u / k) + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2)
        .cos()
        .powi(2)
}

/// Cosine schedule with `beta` clipped to at most 0.999 and `alpha_bar`
/// recomputed as the running product of the clipped `1 - beta`.
pub fn cosine_schedule(k: usize, s: f64) -> Result<NoiseSchedule> {
    if k == 0 {
        return Err(Error::invalid("schedule needs at least one denoising step"));
    }
    if !(s > 0.0) {
        return Err(Error::invalid("cosine offset s must be positive"));
    }
    let kf = k as f64;
    let f0 = cosine_f(0.0, kf, s);
    let raw: Vec<f64> = (0..=k).map(|u| cosine_f(u as f64, kf, s) / f0).collect();
    let beta: Vec<f64> = (1..=k)
        .map(|i| (1.0 - raw[i] / raw[i - 1]).clamp(0.0, BETA_MAX))
        .collect();
    Ok(NoiseSchedule::from_betas(beta, (0..k).collect()))
}

impl NoiseSchedule {
    fn from_betas(beta: Vec<f64>, net_step: Vec<usize>) -> Self {
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(alpha.len());
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        let sigma = (0..beta.len())
            .map(|i| {
                let prev = if i == 0 { 1.0 } else { alpha_bar[i - 1] };
                (beta[i] * (1.0 - prev) / (1.0 - alpha_bar[i]))
                    .max(0.0)
                    .sqrt()
            })
            .collect();
        Self {
            alpha_bar,
            alpha,
            beta,
            sigma,
            sigma_exp_min: None,
            sigma_prob_min: None,
            net_step,
        }
    }

    pub fn with_floors(mut self, sigma_exp_min: Option<f64>, sigma_prob_min: Option<f64>) -> Self {
        self.sigma_exp_min = sigma_exp_min;
        self.sigma_prob_min = sigma_prob_min;
        self
    }

    /// Number of levels.
    pub fn len(&self) -> usize {
        self.alpha_bar.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha_bar.is_empty()
    }

    fn check_level(&self, k: usize) -> Result<()> {
        if k == 0 || k > self.len() {
            return Err(Error::invalid(format!(
                "denoising level {k} outside [1, {}]",
                self.len()
            )));
        }
        Ok(())
    }

    /// `alpha_bar` at level `k`, with `alpha_bar_0 = 1`.
    pub fn alpha_bar_at(&self, k: usize) -> f64 {
        if k == 0 {
            1.0
        } else {
            self.alpha_bar[k - 1]
        }
    }

    pub fn sigma_at(&self, k: usize) -> Result<f64> {
        self.check_level(k)?;
        Ok(self.sigma[k - 1])
    }

    /// Noise std used when sampling for exploration.
    pub fn sampling_sigma(&self, k: usize) -> Result<f64> {
        let s = self.sigma_at(k)?;
        Ok(self.sigma_exp_min.map_or(s, |m| s.max(m)))
    }

    /// Noise std used to evaluate step likelihoods.
    pub fn likelihood_sigma(&self, k: usize) -> Result<f64> {
        let s = self.sigma_at(k)?;
        Ok(self.sigma_prob_min.map_or(s, |m| s.max(m)))
    }

    pub fn ddpm_coefficients(&self, k: usize) -> Result<StepCoefficients> {
        self.check_level(k)?;
        let a = self.alpha[k - 1];
        let b = self.beta[k - 1];
        let ab = self.alpha_bar[k - 1];
        let ab_prev = self.alpha_bar_at(k - 1);
        Ok(StepCoefficients {
            x0_from_a: 1.0 / ab.sqrt(),
            x0_from_eps: (1.0 / ab - 1.0).sqrt(),
            mean_x0: ab_prev.sqrt() * b / (1.0 - ab),
            mean_a: a.sqrt() * (1.0 - ab_prev) / (1.0 - ab),
            mean_eps: 0.0,
            sigma: self.sigma[k - 1],
        })
    }

    pub fn ddim_coefficients(&self, k: usize, eta: f64) -> Result<StepCoefficients> {
        self.check_level(k)?;
        if !(0.0..=1.0).contains(&eta) {
            return Err(Error::invalid(format!("eta {eta} outside [0, 1]")));
        }
        let ab = self.alpha_bar[k - 1];
        let ab_prev = self.alpha_bar_at(k - 1);
        let sigma = eta * self.sigma[k - 1];
        let rem = 1.0 - ab_prev - sigma * sigma;
        if rem < -1e-12 {
            return Err(Error::invalid(format!(
                "DDIM direction term negative ({rem}) at level {k}; schedule is inconsistent"
            )));
        }
        Ok(StepCoefficients {
            x0_from_a: 1.0 / ab.sqrt(),
            x0_from_eps: (1.0 / ab - 1.0).sqrt(),
            mean_x0: ab_prev.sqrt(),
            mean_a: 0.0,
            mean_eps: rem.max(0.0).sqrt(),
            sigma,
        })
    }

    /// Sub-schedule over every `K / steps`-th level of this schedule, used by
    /// the DDIM sampler. Level `j` of the result uses the original level
    /// `j * (K / steps) + 1`.
    pub fn ddim_subsequence(&self, steps: usize) -> Result<NoiseSchedule> {
        if steps == 0 || steps > self.len() {
            return Err(Error::invalid(format!(
                "DDIM steps {steps} must be in [1, {}]",
                self.len()
            )));
        }
        let stride = self.len() / steps;
        let idx: Vec<usize> = (0..steps).map(|j| j * stride).collect();
        let mut beta = Vec::with_capacity(steps);
        let mut prev = 1.0;
        for &i in &idx {
            beta.push(1.0 - self.alpha_bar[i] / prev);
            prev = self.alpha_bar[i];
        }
        let net_step = idx.iter().map(|&i| self.net_step[i]).collect();
        let mut sub = NoiseSchedule::from_betas(beta, net_step);
        // Keep the exact alpha_bar values rather than the re-multiplied ones.
        for (j, &i) in idx.iter().enumerate() {
            sub.alpha_bar[j] = self.alpha_bar[i];
        }
        sub.sigma_exp_min = self.sigma_exp_min;
        sub.sigma_prob_min = self.sigma_prob_min;
        Ok(sub)
    }
}

/// DDPM posterior mean `(1/sqrt(alpha_k)) (a^k - (1-alpha_k)/sqrt(1-alpha_bar_k) eps_hat)`.
pub fn ddpm_mean(
    a_k: &[f64],
    eps_hat: &[f64],
    k: usize,
    sched: &NoiseSchedule,
) -> Result<Vec<f64>> {
    if a_k.len() != eps_hat.len() {
        return Err(Error::ShapeMismatch {
            op: "ddpm_mean",
            left: vec![a_k.len()],
            right: vec![eps_hat.len()],
        });
    }
    sched.check_level(k)?;
    let al = sched.alpha[k - 1];
    let c = (1.0 - al) / (1.0 - sched.alpha_bar[k - 1]).sqrt();
    Ok(a_k
        .iter()
        .zip(eps_hat)
        .map(|(a, e)| (a - c * e) / al.sqrt())
        .collect())
}

/// One DDIM step; returns the mean and the effective noise std `eta * sigma_k`.
pub fn ddim_step(
    a_k: &[f64],
    eps_hat: &[f64],
    k: usize,
    sched: &NoiseSchedule,
    eta: f64,
) -> Result<(Vec<f64>, f64)> {
    if a_k.len() != eps_hat.len() {
        return Err(Error::ShapeMismatch {
            op: "ddim_step",
            left: vec![a_k.len()],
            right: vec![eps_hat.len()],
        });
    }
    let c = sched.ddim_coefficients(k, eta)?;
    let mean = a_k
        .iter()
        .zip(eps_hat)
        .map(|(&a, &e)| c.mean(a, e, None))
        .collect();
    Ok((mean, c.sigma))
}

/// Diagonal Gaussian log density summed over dimensions.
pub fn gaussian_logprob(x: &[f64], mean: &[f64], sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::invalid(format!(
            "sigma must be positive, got {sigma}"
        )));
    }
    if x.len() != mean.len() {
        return Err(Error::ShapeMismatch {
            op: "gaussian_logprob",
            left: vec![x.len()],
            right: vec![mean.len()],
        });
    }
    let c = -0.5 * (2.0 * std::f64::consts::PI).ln() - sigma.ln();
    Ok(x.iter()
        .zip(mean)
        .map(|(xi, mi)| {
            let z = (xi - mi) / sigma;
            c - 0.5 * z * z
        })
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;

    // Frozen from an independent numpy evaluation of the cosine formula
    // (clip beta at 0.999, cumulative product, posterior std).
    const ALPHA_BAR_K20: [f64; 20] = [
        0.9920072786842186,
        0.972092737113969,
        0.9407390004521584,
        0.8987059205995089,
        0.8470121613269047,
        0.7869105111508292,
        0.7198575222397023,
        0.6474782111465038,
        0.5715266768387777,
        0.49384359044063775,
        0.4163115869148728,
        0.3408096397593241,
        0.2691675244381787,
        0.2031214741183376,
        0.1442721023857358,
        0.09404561267665379,
        0.053659234506147804,
        0.024091724140085858,
        0.00605964462145117,
        6.059644621451176e-06,
    ];
    const SIGMA_K20: [f64; 20] = [
        0.0,
        0.07582570221014648,
        0.12324375999076252,
        0.16167895266560905,
        0.19515237136576494,
        0.22570740934515068,
        0.2545879995467015,
        0.2826704752640514,
        0.310661035414383,
        0.3392067659537856,
        0.36897558247756285,
        0.40073284431689943,
        0.4354364395327246,
        0.47437845067134216,
        0.5194230428224657,
        0.5734425464071117,
        0.6411764693639781,
        0.7309781850935009,
        0.8572614699620075,
        0.9964699854797604,
    ];

    #[test]
    fn k20_table_matches_frozen_oracle() {
        let s = cosine_schedule(20, 0.008).unwrap();
        for i in 0..20 {
            assert!(
                (s.alpha_bar[i] - ALPHA_BAR_K20[i]).abs() < 1e-12,
                "alpha_bar[{i}]"
            );
            assert!((s.sigma[i] - SIGMA_K20[i]).abs() < 1e-12, "sigma[{i}]");
        }
        assert!(s.alpha_bar[0] > 0.99 && s.alpha_bar[0] <= 1.0);
    }

    #[test]
    fn strictly_decreasing() {
        for k in [1, 5, 20, 100] {
            let s = cosine_schedule(k, 0.008).unwrap();
            assert!(s.alpha_bar.windows(2).all(|w| w[1] < w[0]), "K={k}");
            assert!(s.sigma.iter().all(|v| v.is_finite() && *v >= 0.0));
        }
    }

    #[test]
    fn rejects_zero_steps() {
        assert!(cosine_schedule(0, 0.008).is_err());
    }

    #[test]
    fn ddpm_mean_scalar_formula() {
        let mut s = cosine_schedule(1, 0.008).unwrap();
        s.alpha = vec![0.9];
        s.alpha_bar = vec![0.5];
        let mu = ddpm_mean(&[1.0], &[0.2], 1, &s).unwrap()[0];
        let oracle = (1.0 / 0.9f64.sqrt()) * (1.0 - (0.1 / 0.5f64.sqrt()) * 0.2);
        assert!((mu - oracle).abs() < 1e-14, "{mu} vs {oracle}");
        assert!(ddpm_mean(&[1.0], &[0.2], 0, &s).is_err());
    }

    #[test]
    fn posterior_form_equals_direct_ddpm_mean() {
        let s = cosine_schedule(20, 0.008).unwrap();
        for k in 1..=20 {
            let c = s.ddpm_coefficients(k).unwrap();
            let direct = ddpm_mean(&[0.3, -0.8], &[0.5, 1.2], k, &s).unwrap();
            for (d, (a, e)) in [(0.3, 0.5), (-0.8, 1.2)].iter().enumerate() {
                let m = c.mean(*a, *e, None);
                assert!(
                    (m - direct[d]).abs() < 1e-9 * direct[d].abs().max(1.0),
                    "k={k}"
                );
            }
        }
    }

    #[test]
    fn ddpm_mean_identity_without_noise() {
        let mut s = cosine_schedule(3, 0.008).unwrap();
        s.alpha[1] = 1.0;
        let mu = ddpm_mean(&[0.3, -0.7], &[0.0, 0.0], 2, &s).unwrap();
        assert_eq!(mu, vec![0.3, -0.7]);
    }

    #[test]
    fn ddim_matches_formula_and_zero_eta_is_noiseless() {
        let s = cosine_schedule(20, 0.008).unwrap();
        let a = [0.4, -0.2, 0.9];
        let e = [0.1, 0.5, -0.3];
        for k in [1, 7, 20] {
            for eta in [0.0, 0.5, 1.0] {
                let (m, sig) = ddim_step(&a, &e, k, &s, eta).unwrap();
                let ab = s.alpha_bar[k - 1];
                let abp = if k == 1 { 1.0 } else { s.alpha_bar[k - 2] };
                let sk = s.sigma[k - 1];
                for d in 0..3 {
                    let x0 = (a[d] - (1.0 - ab).sqrt() * e[d]) / ab.sqrt();
                    let o =
                        abp.sqrt() * x0 + (1.0 - abp - eta * eta * sk * sk).max(0.0).sqrt() * e[d];
                    assert!((m[d] - o).abs() < 1e-12);
                }
                assert_eq!(sig, eta * sk);
            }
        }
        let (m, sig) = ddim_step(&a, &[0.0; 3], 5, &s, 0.0).unwrap();
        assert_eq!(sig, 0.0);
        let f = (s.alpha_bar[3] / s.alpha_bar[4]).sqrt();
        for d in 0..3 {
            assert!((m[d] - f * a[d]).abs() < 1e-14);
        }
    }

    #[test]
    fn subsequence_keeps_selected_alpha_bar() {
        let s = cosine_schedule(20, 0.008).unwrap();
        let sub = s.ddim_subsequence(5).unwrap();
        assert_eq!(sub.net_step, vec![0, 4, 8, 12, 16]);
        for (j, &i) in [0, 4, 8, 12, 16].iter().enumerate() {
            assert_eq!(sub.alpha_bar[j], s.alpha_bar[i]);
        }
        assert!(s.ddim_subsequence(0).is_err());
        assert!(s.ddim_subsequence(21).is_err());
    }

    #[test]
    fn floors_apply() {
        let s = cosine_schedule(20, 0.008)
            .unwrap()
            .with_floors(Some(0.1), Some(0.2));
        for k in 1..=20 {
            assert!(s.sampling_sigma(k).unwrap() >= 0.1);
            assert!(s.likelihood_sigma(k).unwrap() >= 0.2);
        }
        assert_eq!(s.sampling_sigma(20).unwrap(), s.sigma[19]);
    }

    #[test]
    fn logprob_closed_forms() {
        assert!(
            (gaussian_logprob(&[0.0], &[0.0], 1.0).unwrap() + 0.9189385332046727).abs() < 1e-12
        );
        assert!(
            (gaussian_logprob(&[1.0, 2.0], &[1.0, 2.0], 1.0).unwrap() + 1.8378770664093453).abs()
                < 1e-12
        );
        assert!(
            (gaussian_logprob(&[0.7], &[0.2], 0.5).unwrap() + 1.4189385332046727
                - 0.5f64.ln().abs())
            .abs()
                < 1e-12
        );
        assert!(gaussian_logprob(&[0.0], &[0.0], 0.0).is_err());
    }
}
