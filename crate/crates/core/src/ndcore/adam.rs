use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Cosine decay from `lr_start` to `lr_end` over `total_steps`, flat after.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosineLr {
    pub lr_start: f64,
    pub lr_end: f64,
    pub total_steps: u64,
}

impl CosineLr {
    pub fn constant(lr: f64) -> Self {
        Self {
            lr_start: lr,
            lr_end: lr,
            total_steps: 1,
        }
    }

    pub fn at(&self, step: u64) -> f64 {
        if self.total_steps == 0 {
            return self.lr_end;
        }
        let frac = (step.min(self.total_steps)) as f64 / self.total_steps as f64;
        self.lr_end
            + 0.5 * (self.lr_start - self.lr_end) * (1.0 + (std::f64::consts::PI * frac).cos())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: CosineLr,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub ema_decay: Option<f64>,
}

impl AdamConfig {
    pub fn new(lr: CosineLr) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            ema_decay: None,
        }
    }
}

/// Adam with decoupled weight decay, a cosine learning-rate schedule and an
/// optional exponential-moving-average shadow of the parameters.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    step_count: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    ema: Option<Vec<Tensor>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &[&Tensor]) -> Self {
        let zeros = |t: &&Tensor| Tensor::zeros(t.rows(), t.cols());
        Self {
            config,
            step_count: 0,
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
            ema: config
                .ema_decay
                .map(|_| params.iter().map(|t| (*t).clone()).collect()),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Learning rate the next step will use.
    pub fn lr(&self) -> f64 {
        self.config.lr.at(self.step_count)
    }

    pub fn ema(&self) -> Option<&[Tensor]> {
        self.ema.as_deref()
    }

    /// One update. A non-finite gradient aborts the step before anything is
    /// modified.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::invalid(format!(
                "adam expects {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            if !g.same_shape(&self.m[i]) || !params[i].same_shape(g) {
                return Err(Error::ShapeMismatch {
                    op: "adam_step",
                    left: self.m[i].shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of parameter {i}")));
            }
        }

        let c = self.config;
        let lr = self.lr();
        self.step_count += 1;
        let t = self.step_count as f64;
        let bc1 = 1.0 - c.beta1.powf(t);
        let bc2 = 1.0 - c.beta2.powf(t);

        for (i, p) in params.iter_mut().enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, (w, &g)) in p.data_mut().iter_mut().zip(grads[i].data()).enumerate() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *w -= lr * (m_hat / (v_hat.sqrt() + c.eps) + c.weight_decay * *w);
            }
        }

        if let (Some(decay), Some(ema)) = (c.ema_decay, self.ema.as_mut()) {
            for (s, p) in ema.iter_mut().zip(params.iter()) {
                for (sv, &pv) in s.data_mut().iter_mut().zip(p.data()) {
                    *sv = decay * *sv + (1.0 - decay) * pv;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(lr: f64) -> AdamConfig {
        AdamConfig::new(CosineLr::constant(lr))
    }

    #[test]
    fn first_step_closed_form() {
        let mut p = Tensor::scalar(0.0);
        let mut st = AdamState::new(cfg(0.1), &[&p]);
        st.step(&mut [&mut p], &[Tensor::scalar(1.0)]).unwrap();
        // m_hat = v_hat = 1 after bias correction
        let expect = -0.1 * (1.0 / (1.0 + 1e-8));
        assert!((p.item() - expect).abs() < 1e-15);
        assert!((p.item() + 0.1).abs() < 1.1e-9);
    }

    #[test]
    fn zero_gradient_is_identity() {
        let mut p = Tensor::row_vector(vec![0.3, -1.2, 4.0]);
        let before = p.clone();
        let mut st = AdamState::new(cfg(0.5), &[&p]);
        for _ in 0..10 {
            st.step(&mut [&mut p], &[Tensor::zeros(1, 3)]).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn non_finite_gradient_aborts_without_change() {
        let mut p = Tensor::scalar(1.0);
        let mut st = AdamState::new(cfg(0.1), &[&p]);
        let err = st.step(&mut [&mut p], &[Tensor::scalar(f64::NAN)]);
        assert!(matches!(err, Err(Error::NonFinite(_))));
        assert_eq!(p.item(), 1.0);
        assert_eq!(st.step_count(), 0);
    }

    #[test]
    fn cosine_endpoints_and_monotone() {
        let s = CosineLr {
            lr_start: 1e-3,
            lr_end: 1e-4,
            total_steps: 50,
        };
        assert_eq!(s.at(0), 1e-3);
        assert!((s.at(50) - 1e-4).abs() < 1e-18);
        assert!((s.at(500) - 1e-4).abs() < 1e-18);
        for k in 0..60 {
            assert!(s.at(k + 1) <= s.at(k));
        }
    }

    #[test]
    fn ema_decay_zero_tracks_and_one_freezes() {
        for (decay, tracks) in [(0.0, true), (1.0, false)] {
            let mut c = cfg(0.1);
            c.ema_decay = Some(decay);
            let mut p = Tensor::row_vector(vec![1.0, 2.0]);
            let init = p.clone();
            let mut st = AdamState::new(c, &[&p]);
            for _ in 0..3 {
                st.step(&mut [&mut p], &[Tensor::row_vector(vec![0.5, -0.2])])
                    .unwrap();
            }
            let shadow = &st.ema().unwrap()[0];
            if tracks {
                assert_eq!(shadow, &p);
            } else {
                assert_eq!(shadow, &init);
            }
        }
    }

    #[test]
    fn decoupled_weight_decay_shrinks() {
        let mut c = cfg(0.1);
        c.weight_decay = 0.5;
        let mut p = Tensor::scalar(2.0);
        let mut st = AdamState::new(c, &[&p]);
        st.step(&mut [&mut p], &[Tensor::scalar(0.0)]).unwrap();
        assert!((p.item() - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-15);
    }
}
