use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Position `(t, k)` in the two-layer MDP over the fine-tuned tail.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DiffusionMdpIndex {
    pub t: usize,
    pub k: usize,
}

impl DiffusionMdpIndex {
    /// `t * K' + (K' - k - 1)`.
    pub fn flat(&self, k_prime: usize) -> Result<usize> {
        if self.k >= k_prime {
            return Err(Error::invalid(format!(
                "denoising index {} outside [0, {k_prime})",
                self.k
            )));
        }
        Ok(self.t * k_prime + (k_prime - self.k - 1))
    }

    pub fn from_flat(flat: usize, k_prime: usize) -> Result<Self> {
        if k_prime == 0 {
            return Err(Error::invalid("K' must be positive"));
        }
        Ok(Self {
            t: flat / k_prime,
            k: k_prime - 1 - flat % k_prime,
        })
    }
}
