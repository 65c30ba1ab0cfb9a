use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{mish, Gradients, Graph, NodeId};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Tanh,
    Mish,
    Relu,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Tanh => x.tanh(),
            Activation::Mish => mish(x),
            Activation::Relu => x.max(0.0),
        }
    }

    fn apply_graph(self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        match self {
            Activation::Identity => Ok(x),
            Activation::Tanh => g.tanh(x),
            Activation::Mish => g.mish(x),
            Activation::Relu => g.relu(x),
        }
    }
}

/// Anything that owns an ordered list of trainable tensors.
pub trait Parameterized {
    fn param_names(&self) -> Vec<String>;
    fn params(&self) -> Vec<&Tensor>;
    fn params_mut(&mut self) -> Vec<&mut Tensor>;

    fn num_params(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }
}

/// Node ids of the parameters used in one taped forward pass, in the
/// same order as [`Parameterized::params`].
#[derive(Debug, Clone, Default)]
pub struct Bound {
    pub ids: Vec<NodeId>,
}

impl Bound {
    pub fn extend(&mut self, other: Bound) {
        self.ids.extend(other.ids);
    }

    /// Collects one gradient per bound parameter; parameters that did not
    /// influence the loss get zeros.
    pub fn grads(&self, graph: &Graph, grads: &mut Gradients) -> Result<Vec<Tensor>> {
        self.ids
            .iter()
            .map(|&id| {
                let shape = graph.value(id)?.shape().to_vec();
                Ok(grads
                    .take(id)
                    .unwrap_or_else(|| Tensor::zeros(shape[0], shape[1])))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub output: usize,
    pub activation: Activation,
    pub residual: bool,
}

#[derive(Debug, Clone, PartialEq)]
struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    fn init<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Self {
            weight: Tensor::uniform(fan_in, fan_out, bound, rng),
            bias: Tensor::uniform(1, fan_out, bound, rng),
        }
    }

    fn eval(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = x.matmul(&self.weight)?;
        let b = self.bias.data();
        let c = y.cols();
        for (i, v) in y.data_mut().iter_mut().enumerate() {
            *v += b[i % c];
        }
        Ok(y)
    }

    fn taped(&self, g: &mut Graph, x: NodeId, bound: &mut Bound) -> Result<NodeId> {
        let w = g.param(self.weight.clone())?;
        let b = g.param(self.bias.clone())?;
        bound.ids.push(w);
        bound.ids.push(b);
        let y = g.matmul(x, w)?;
        g.add(y, b)
    }
}

/// Dense multilayer perceptron, optionally built from two-layer
/// pre-activation residual blocks.
///
/// Plain layout: `L0 -> act -> L1 -> act -> ... -> Ln`.
/// Residual layout (all hidden widths equal): `L_in`, then `hidden.len()/2`
/// blocks of `h + L2(act(L1(act(h))))`, then `L_out(act(h))`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpNet {
    spec: MlpSpec,
    layers: Vec<Linear>,
}

impl MlpNet {
    pub fn new<R: Rng + ?Sized>(spec: MlpSpec, rng: &mut R) -> Result<Self> {
        let widths = Self::layer_widths(&spec)?;
        let layers = widths
            .windows(2)
            .map(|w| Linear::init(w[0], w[1], rng))
            .collect();
        Ok(Self { spec, layers })
    }

    /// Builds a net from explicit `(weight [in, out], bias [1, out])` pairs.
    pub fn from_layers(spec: MlpSpec, layers: Vec<(Tensor, Tensor)>) -> Result<Self> {
        let widths = Self::layer_widths(&spec)?;
        if layers.len() + 1 != widths.len() {
            return Err(Error::invalid(format!(
                "expected {} layers, got {}",
                widths.len() - 1,
                layers.len()
            )));
        }
        for (i, (w, b)) in layers.iter().enumerate() {
            if w.shape() != [widths[i], widths[i + 1]] || b.shape() != [1, widths[i + 1]] {
                return Err(Error::ShapeMismatch {
                    op: "MlpNet::from_layers",
                    left: vec![widths[i], widths[i + 1]],
                    right: w.shape().to_vec(),
                });
            }
        }
        let layers = layers
            .into_iter()
            .map(|(weight, bias)| Linear { weight, bias })
            .collect();
        Ok(Self { spec, layers })
    }

    fn layer_widths(spec: &MlpSpec) -> Result<Vec<usize>> {
        if spec.input == 0 || spec.output == 0 || spec.hidden.contains(&0) {
            return Err(Error::invalid("layer widths must be positive"));
        }
        if !spec.residual || spec.hidden.is_empty() {
            let mut w = vec![spec.input];
            w.extend(&spec.hidden);
            w.push(spec.output);
            return Ok(w);
        }
        let h = spec.hidden[0];
        if spec.hidden.iter().any(|&x| x != h) {
            return Err(Error::invalid("residual MLP needs equal hidden widths"));
        }
        let blocks = spec.hidden.len() / 2;
        let mut w = vec![spec.input, h];
        for _ in 0..blocks {
            w.push(h);
            w.push(h);
        }
        w.push(spec.output);
        Ok(w)
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.cols() != self.spec.input {
            return Err(Error::ShapeMismatch {
                op: "MlpNet::forward",
                left: vec![x.rows(), self.spec.input],
                right: x.shape().to_vec(),
            });
        }
        if !x.is_finite() {
            return Err(Error::NonFinite("MlpNet input".into()));
        }
        Ok(())
    }

    fn residual_layout(&self) -> bool {
        self.spec.residual && !self.spec.hidden.is_empty()
    }

    /// Untaped forward pass; bit-identical to [`MlpNet::forward`].
    pub fn eval(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let act = self.spec.activation;
        let n = self.layers.len();
        let out = if self.residual_layout() {
            let mut h = self.layers[0].eval(x)?;
            let mut i = 1;
            while i + 1 < n - 1 {
                let t = self.layers[i].eval(&h.map(|v| act.apply(v)))?;
                let t = self.layers[i + 1].eval(&t.map(|v| act.apply(v)))?;
                for (a, b) in h.data_mut().iter_mut().zip(t.data()) {
                    *a += b;
                }
                i += 2;
            }
            self.layers[n - 1].eval(&h.map(|v| act.apply(v)))?
        } else {
            let mut h = x.clone();
            for (i, layer) in self.layers.iter().enumerate() {
                h = layer.eval(&h)?;
                if i + 1 < n {
                    h = h.map(|v| act.apply(v));
                }
            }
            h
        };
        if !out.is_finite() {
            return Err(Error::NonFinite("MlpNet output".into()));
        }
        Ok(out)
    }

    /// Taped forward pass. Returns the output node and the parameter
    /// bindings needed to read gradients back.
    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<(NodeId, Bound)> {
        self.check_input(g.value(x)?)?;
        let act = self.spec.activation;
        let mut bound = Bound::default();
        let n = self.layers.len();
        let out = if self.residual_layout() {
            let mut h = self.layers[0].taped(g, x, &mut bound)?;
            let mut i = 1;
            while i + 1 < n - 1 {
                let t = act.apply_graph(g, h)?;
                let t = self.layers[i].taped(g, t, &mut bound)?;
                let t = act.apply_graph(g, t)?;
                let t = self.layers[i + 1].taped(g, t, &mut bound)?;
                h = g.add(h, t)?;
                i += 2;
            }
            let t = act.apply_graph(g, h)?;
            self.layers[n - 1].taped(g, t, &mut bound)?
        } else {
            let mut h = x;
            for (i, layer) in self.layers.iter().enumerate() {
                h = layer.taped(g, h, &mut bound)?;
                if i + 1 < n {
                    h = act.apply_graph(g, h)?;
                }
            }
            h
        };
        Ok((out, bound))
    }

    /// Sets every weight and bias to zero.
    pub fn zero_(&mut self) {
        for p in self.params_mut() {
            p.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

impl Parameterized for MlpNet {
    fn param_names(&self) -> Vec<String> {
        (0..self.layers.len())
            .flat_map(|i| [format!("layer{i}.weight"), format!("layer{i}.bias")])
            .collect()
    }

    fn params(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec(hidden: Vec<usize>, residual: bool, activation: Activation) -> MlpSpec {
        MlpSpec {
            input: 3,
            hidden,
            output: 2,
            activation,
            residual,
        }
    }

    #[test]
    fn identity_linear_net() {
        let s = MlpSpec {
            input: 2,
            hidden: vec![],
            output: 2,
            activation: Activation::Mish,
            residual: false,
        };
        let net = MlpNet::from_layers(s, vec![(Tensor::eye(2), Tensor::zeros(1, 2))]).unwrap();
        let y = net.eval(&Tensor::row_vector(vec![1.0, 2.0])).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0]);
    }

    #[test]
    fn zero_net_outputs_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = MlpNet::new(spec(vec![8, 8, 8], true, Activation::Mish), &mut rng).unwrap();
        net.zero_();
        let x = Tensor::randn(4, 3, &mut rng);
        assert!(net.eval(&x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn param_count_matches_architecture() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let plain = MlpNet::new(spec(vec![5, 4], false, Activation::Tanh), &mut rng).unwrap();
        assert_eq!(plain.num_params(), 3 * 5 + 5 + 5 * 4 + 4 + 4 * 2 + 2);
        let res = MlpNet::new(spec(vec![6, 6, 6], true, Activation::Mish), &mut rng).unwrap();
        // in, one block of two layers, out
        assert_eq!(
            res.num_params(),
            (3 * 6 + 6) + 2 * (6 * 6 + 6) + (6 * 2 + 2)
        );
        assert_eq!(res.param_names().len(), res.params().len());
        assert!(MlpNet::new(spec(vec![6, 5], true, Activation::Mish), &mut rng).is_err());
    }

    #[test]
    fn forward_matches_eval_and_rejects_bad_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for residual in [false, true] {
            let net =
                MlpNet::new(spec(vec![7, 7, 7, 7], residual, Activation::Mish), &mut rng).unwrap();
            let x = Tensor::randn(5, 3, &mut rng);
            let mut g = Graph::new();
            let xi = g.constant(x.clone()).unwrap();
            let (y, bound) = net.forward(&mut g, xi).unwrap();
            assert_eq!(g.value(y).unwrap(), &net.eval(&x).unwrap());
            assert_eq!(bound.ids.len(), net.params().len());
            assert_eq!(g.value(y).unwrap().shape(), &[5, 2]);
        }
        let net = MlpNet::new(spec(vec![4], false, Activation::Tanh), &mut rng).unwrap();
        assert!(matches!(
            net.eval(&Tensor::zeros(1, 4)),
            Err(Error::ShapeMismatch { .. })
        ));
        assert!(matches!(
            net.eval(&Tensor::row_vector(vec![f64::NAN, 0.0, 0.0])),
            Err(Error::NonFinite(_))
        ));
    }
}
