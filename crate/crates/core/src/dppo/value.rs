use rand::Rng;

use crate::error::Result;
use crate::ndcore::{Activation, Bound, Graph, MlpNet, MlpSpec, NodeId, Parameterized, Tensor};

/// State-value critic. Only ever sees environment observations.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueNet {
    pub net: MlpNet,
}

impl ValueNet {
    pub fn new<R: Rng + ?Sized>(obs_dim: usize, hidden: &[usize], rng: &mut R) -> Result<Self> {
        let net = MlpNet::new(
            MlpSpec {
                input: obs_dim,
                hidden: hidden.to_vec(),
                output: 1,
                activation: Activation::Tanh,
                residual: false,
            },
            rng,
        )?;
        Ok(Self { net })
    }

    pub fn eval(&self, obs: &Tensor) -> Result<Vec<f64>> {
        Ok(self.net.eval(obs)?.into_data())
    }

    pub fn forward(&self, g: &mut Graph, obs: NodeId) -> Result<(NodeId, Bound)> {
        self.net.forward(g, obs)
    }
}

impl Parameterized for ValueNet {
    fn param_names(&self) -> Vec<String> {
        self.net.param_names()
    }

    fn params(&self) -> Vec<&Tensor> {
        self.net.params()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.net.params_mut()
    }
}
