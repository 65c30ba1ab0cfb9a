use super::tensor::Tensor;

/// Sinusoidal encoding of an integer step index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimeEmbedding {
    dim: usize,
}

impl TimeEmbedding {
    /// `dim` must be even and at least 4.
    pub fn new(dim: usize) -> Self {
        assert!(
            dim >= 4 && dim % 2 == 0,
            "time embedding width must be even and >= 4"
        );
        Self { dim }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn embed_into(&self, k: f64, out: &mut [f64]) {
        let half = self.dim / 2;
        let scale = (10_000f64).ln() / (half - 1) as f64;
        for i in 0..half {
            let arg = k * (-(i as f64) * scale).exp();
            out[i] = arg.sin();
            out[half + i] = arg.cos();
        }
    }

    pub fn embed(&self, k: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        self.embed_into(k as f64, &mut v);
        v
    }

    /// One row per entry of `steps`.
    pub fn embed_batch(&self, steps: &[usize]) -> Tensor {
        let mut t = Tensor::zeros(steps.len(), self.dim);
        for (r, &k) in steps.iter().enumerate() {
            self.embed_into(k as f64, t.row_mut(r));
        }
        t
    }
}
