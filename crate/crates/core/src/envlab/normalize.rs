use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndcore::{Checkpoint, Tensor};

const MIN_WIDTH: f64 = 1e-6;

/// Per-dimension min/max maps to `[-1, 1]` for observations and actions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub obs_min: Vec<f64>,
    pub obs_max: Vec<f64>,
    pub act_min: Vec<f64>,
    pub act_max: Vec<f64>,
}

fn bounds<'a>(rows: impl Iterator<Item = &'a [f64]>, dim: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut lo = vec![f64::INFINITY; dim];
    let mut hi = vec![f64::NEG_INFINITY; dim];
    let mut any = false;
    for r in rows {
        if r.len() != dim {
            return Err(Error::invalid(format!(
                "row of width {} where {dim} expected",
                r.len()
            )));
        }
        any = true;
        for d in 0..dim {
            lo[d] = lo[d].min(r[d]);
            hi[d] = hi[d].max(r[d]);
        }
    }
    if !any {
        return Err(Error::invalid("cannot fit a normalizer to no data"));
    }
    for d in 0..dim {
        if hi[d] - lo[d] < MIN_WIDTH {
            let c = 0.5 * (hi[d] + lo[d]);
            lo[d] = c - 0.5;
            hi[d] = c + 0.5;
        }
    }
    Ok((lo, hi))
}

fn to_unit(x: &[f64], lo: &[f64], hi: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(lo.iter().zip(hi))
        .map(|(v, (l, h))| 2.0 * (v - l) / (h - l) - 1.0)
        .collect()
}

fn from_unit(x: &[f64], lo: &[f64], hi: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(lo.iter().zip(hi))
        .map(|(v, (l, h))| l + 0.5 * (v + 1.0) * (h - l))
        .collect()
}

fn map_rows(t: &Tensor, width: usize, f: impl Fn(&[f64]) -> Vec<f64>) -> Result<Tensor> {
    if t.cols() % width != 0 {
        return Err(Error::invalid(format!(
            "tensor width {} is not a multiple of {width}",
            t.cols()
        )));
    }
    let mut out = t.clone();
    for r in 0..t.rows() {
        for (src, dst) in t.row(r).chunks(width).zip(out.row_mut(r).chunks_mut(width)) {
            dst.copy_from_slice(&f(src));
        }
    }
    Ok(out)
}

impl Normalizer {
    /// Fits bounds; dimensions narrower than 1e-6 are widened to unit width
    /// around their center.
    pub fn fit<'a>(
        obs: impl Iterator<Item = &'a [f64]>,
        obs_dim: usize,
        act: impl Iterator<Item = &'a [f64]>,
        act_dim: usize,
    ) -> Result<Self> {
        let (obs_min, obs_max) = bounds(obs, obs_dim)?;
        let (act_min, act_max) = bounds(act, act_dim)?;
        Ok(Self {
            obs_min,
            obs_max,
            act_min,
            act_max,
        })
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_min.len()
    }

    pub fn act_dim(&self) -> usize {
        self.act_min.len()
    }

    pub fn normalize_obs(&self, x: &[f64]) -> Vec<f64> {
        to_unit(x, &self.obs_min, &self.obs_max)
    }

    pub fn denormalize_obs(&self, x: &[f64]) -> Vec<f64> {
        from_unit(x, &self.obs_min, &self.obs_max)
    }

    pub fn normalize_act(&self, x: &[f64]) -> Vec<f64> {
        to_unit(x, &self.act_min, &self.act_max)
    }

    pub fn denormalize_act(&self, x: &[f64]) -> Vec<f64> {
        from_unit(x, &self.act_min, &self.act_max)
    }

    /// Normalizes every row of observations.
    pub fn obs_tensor(&self, t: &Tensor) -> Result<Tensor> {
        map_rows(t, self.obs_dim(), |r| self.normalize_obs(r))
    }

    /// Normalizes flattened action chunks (any multiple of the action width).
    pub fn chunk_tensor(&self, t: &Tensor) -> Result<Tensor> {
        map_rows(t, self.act_dim(), |r| self.normalize_act(r))
    }

    pub fn to_checkpoint(&self, ck: &mut Checkpoint) {
        ck.push(
            "normalizer/obs_min",
            Tensor::row_vector(self.obs_min.clone()),
        );
        ck.push(
            "normalizer/obs_max",
            Tensor::row_vector(self.obs_max.clone()),
        );
        ck.push(
            "normalizer/act_min",
            Tensor::row_vector(self.act_min.clone()),
        );
        ck.push(
            "normalizer/act_max",
            Tensor::row_vector(self.act_max.clone()),
        );
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let get = |n: &str| -> Result<Vec<f64>> {
            ck.get(&format!("normalizer/{n}"))
                .map(|t| t.data().to_vec())
                .ok_or_else(|| Error::Checkpoint(format!("missing normalizer/{n}")))
        };
        Ok(Self {
            obs_min: get("obs_min")?,
            obs_max: get("obs_max")?,
            act_min: get("act_min")?,
            act_max: get("act_max")?,
        })
    }
}
