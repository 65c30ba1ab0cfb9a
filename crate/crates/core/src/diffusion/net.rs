use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndcore::{
    Activation, Bound, Graph, MlpNet, MlpSpec, NodeId, Parameterized, Tensor, TimeEmbedding,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpsNetSpec {
    pub obs_dim: usize,
    /// Flattened chunk width `T_p * action_dim`.
    pub chunk_dim: usize,
    pub time_dim: usize,
    pub cond_dim: usize,
    pub state_hidden: Vec<usize>,
    pub head_hidden: Vec<usize>,
    pub residual: bool,
    pub activation: Activation,
}

impl EpsNetSpec {
    pub fn small(obs_dim: usize, chunk_dim: usize) -> Self {
        Self {
            obs_dim,
            chunk_dim,
            time_dim: 16,
            cond_dim: 16,
            state_hidden: vec![32],
            head_hidden: vec![64, 64, 64],
            residual: true,
            activation: Activation::Mish,
        }
    }
}

/// Noise predictor `eps(a^k, s, k)`: a state encoder and a step-embedding MLP
/// whose outputs are concatenated with the noisy chunk and fed to a
/// (residual) MLP head.
#[derive(Debug, Clone, PartialEq)]
pub struct EpsNet {
    spec: EpsNetSpec,
    embedding: TimeEmbedding,
    state_enc: MlpNet,
    time_mlp: MlpNet,
    head: MlpNet,
}

/// Per-row conditioning shared by every step of one denoising chain.
#[derive(Debug, Clone)]
pub struct StateFeatures(pub Tensor);

impl EpsNet {
    pub fn new<R: Rng + ?Sized>(spec: EpsNetSpec, rng: &mut R) -> Result<Self> {
        let embedding = TimeEmbedding::new(spec.time_dim);
        let state_enc = MlpNet::new(
            MlpSpec {
                input: spec.obs_dim,
                hidden: spec.state_hidden.clone(),
                output: spec.cond_dim,
                activation: spec.activation,
                residual: false,
            },
            rng,
        )?;
        let time_mlp = MlpNet::new(
            MlpSpec {
                input: spec.time_dim,
                hidden: vec![2 * spec.time_dim],
                output: spec.time_dim,
                activation: spec.activation,
                residual: false,
            },
            rng,
        )?;
        let head = MlpNet::new(
            MlpSpec {
                input: spec.chunk_dim + spec.time_dim + spec.cond_dim,
                hidden: spec.head_hidden.clone(),
                output: spec.chunk_dim,
                activation: spec.activation,
                residual: spec.residual,
            },
            rng,
        )?;
        Ok(Self {
            spec,
            embedding,
            state_enc,
            time_mlp,
            head,
        })
    }

    pub fn spec(&self) -> &EpsNetSpec {
        &self.spec
    }

    pub fn encode_state(&self, obs: &Tensor) -> Result<StateFeatures> {
        Ok(StateFeatures(self.state_enc.eval(obs)?))
    }

    /// Time features for a single step index, one row.
    pub fn step_features(&self, step: usize) -> Result<Tensor> {
        self.time_mlp.eval(&self.embedding.embed_batch(&[step]))
    }

    /// Untaped prediction for a batch sharing one step index.
    pub fn eval_at(
        &self,
        noisy: &Tensor,
        state: &StateFeatures,
        step_feat: &Tensor,
    ) -> Result<Tensor> {
        let b = noisy.rows();
        if state.0.rows() != b || noisy.cols() != self.spec.chunk_dim {
            return Err(Error::ShapeMismatch {
                op: "EpsNet::eval_at",
                left: vec![b, self.spec.chunk_dim],
                right: vec![state.0.rows(), noisy.cols()],
            });
        }
        let w = self.head.input_dim();
        let mut x = Tensor::zeros(b, w);
        let (cd, td) = (self.spec.chunk_dim, self.spec.time_dim);
        for r in 0..b {
            let row = x.row_mut(r);
            row[..cd].copy_from_slice(noisy.row(r));
            row[cd..cd + td].copy_from_slice(step_feat.row(0));
            row[cd + td..].copy_from_slice(state.0.row(r));
        }
        self.head.eval(&x)
    }

    /// Untaped prediction with per-row step indices.
    pub fn eval(&self, noisy: &Tensor, obs: &Tensor, steps: &[usize]) -> Result<Tensor> {
        let state = self.state_enc.eval(obs)?;
        let t = self.time_mlp.eval(&self.embedding.embed_batch(steps))?;
        let b = noisy.rows();
        if obs.rows() != b || steps.len() != b {
            return Err(Error::ShapeMismatch {
                op: "EpsNet::eval",
                left: vec![b],
                right: vec![obs.rows(), steps.len()],
            });
        }
        let mut x = Tensor::zeros(b, self.head.input_dim());
        let (cd, td) = (self.spec.chunk_dim, self.spec.time_dim);
        for r in 0..b {
            let row = x.row_mut(r);
            row[..cd].copy_from_slice(noisy.row(r));
            row[cd..cd + td].copy_from_slice(t.row(r));
            row[cd + td..].copy_from_slice(state.row(r));
        }
        self.head.eval(&x)
    }

    /// Taped prediction; `noisy` and `obs` are graph nodes.
    pub fn forward(
        &self,
        g: &mut Graph,
        noisy: NodeId,
        obs: NodeId,
        steps: &[usize],
    ) -> Result<(NodeId, Bound)> {
        let (s, mut bound) = self.state_enc.forward(g, obs)?;
        let emb = g.constant(self.embedding.embed_batch(steps))?;
        let (t, bt) = self.time_mlp.forward(g, emb)?;
        let x = g.concat_cols(&[noisy, t, s])?;
        let (out, bh) = self.head.forward(g, x)?;
        bound.extend(bt);
        bound.extend(bh);
        Ok((out, bound))
    }

    pub fn zero_(&mut self) {
        self.state_enc.zero_();
        self.time_mlp.zero_();
        self.head.zero_();
    }
}

impl Parameterized for EpsNet {
    fn param_names(&self) -> Vec<String> {
        let mut v = Vec::new();
        for (p, net) in [
            ("state", &self.state_enc),
            ("time", &self.time_mlp),
            ("head", &self.head),
        ] {
            v.extend(net.param_names().into_iter().map(|n| format!("{p}.{n}")));
        }
        v
    }

    fn params(&self) -> Vec<&Tensor> {
        let mut v = self.state_enc.params();
        v.extend(self.time_mlp.params());
        v.extend(self.head.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.state_enc.params_mut();
        v.extend(self.time_mlp.params_mut());
        v.extend(self.head.params_mut());
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn taped_and_untaped_agree_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = EpsNet::new(EpsNetSpec::small(4, 8), &mut rng).unwrap();
        let a = Tensor::randn(5, 8, &mut rng);
        let s = Tensor::randn(5, 4, &mut rng);
        let steps = [0, 3, 3, 19, 7];
        let u = net.eval(&a, &s, &steps).unwrap();
        let mut g = Graph::new();
        let an = g.constant(a.clone()).unwrap();
        let sn = g.constant(s.clone()).unwrap();
        let (out, bound) = net.forward(&mut g, an, sn, &steps).unwrap();
        assert_eq!(g.value(out).unwrap(), &u);
        assert_eq!(bound.ids.len(), net.params().len());

        let feats = net.encode_state(&s).unwrap();
        let tf = net.step_features(3).unwrap();
        let shared = net.eval_at(&a, &feats, &tf).unwrap();
        assert_eq!(shared.row(1), u.row(1));
        assert_eq!(shared.row(2), u.row(2));
    }
}
