//! Fully-connected encoder and mirrored decoder.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Linear,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            Activation::Tanh => x.tanh(),
            Activation::Linear => x,
        }
    }
}

/// `activation(x · Wᵀ + b)` with `W` of shape `[out×in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    pub weights: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn new(weights: Tensor, bias: Tensor, activation: Activation) -> Result<Self> {
        if !weights.is_matrix() || bias.shape() != [weights.rows()] {
            return Err(Error::Shape {
                op: "dense-layer",
                lhs: weights.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        Ok(Self {
            weights,
            bias,
            activation,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.rows()
    }
}

/// Layer widths and activations, `dims.len() == activations.len() + 1`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub dims: Vec<usize>,
    pub activations: Vec<Activation>,
}

impl LayerSpec {
    /// Hidden layers share one activation; the output layer is linear.
    pub fn mlp(input: usize, hidden: &[usize], output: usize, hidden_activation: Activation) -> Self {
        let mut dims = vec![input];
        dims.extend_from_slice(hidden);
        dims.push(output);
        let mut activations = vec![hidden_activation; hidden.len()];
        activations.push(Activation::Linear);
        Self { dims, activations }
    }

    /// The same stack run backwards: reversed widths, same activation pattern.
    pub fn mirrored(&self) -> Self {
        let mut dims = self.dims.clone();
        dims.reverse();
        Self {
            dims,
            activations: self.activations.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.len() < 2 || self.activations.len() + 1 != self.dims.len() {
            return Err(Error::invalid(format!(
                "{} layer widths do not fit {} activations",
                self.dims.len(),
                self.activations.len()
            )));
        }
        if self.dims.contains(&0) {
            return Err(Error::invalid("layer widths must be positive"));
        }
        Ok(())
    }
}

/// A chain of dense layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layers: Vec<DenseLayer>,
}

impl Mlp {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("network needs at least one layer"));
        }
        for pair in layers.windows(2) {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(Error::Shape {
                    op: "layer-chain",
                    lhs: pair[0].weights.shape().to_vec(),
                    rhs: pair[1].weights.shape().to_vec(),
                });
            }
        }
        Ok(Self { layers })
    }

    /// Uniform `(−s, s)` weights with `s = sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn init(spec: &LayerSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let layers = spec
            .dims
            .windows(2)
            .zip(&spec.activations)
            .map(|(io, &activation)| {
                let (fan_in, fan_out) = (io[0], io[1]);
                let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let w = (0..fan_in * fan_out).map(|_| rng.uniform_in(-s, s)).collect();
                DenseLayer::new(
                    Tensor::matrix(fan_out, fan_in, w)?,
                    Tensor::zeros(&[fan_out]),
                    activation,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(layers)
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn spec(&self) -> LayerSpec {
        let mut dims = vec![self.input_dim()];
        dims.extend(self.layers.iter().map(DenseLayer::output_dim));
        LayerSpec {
            dims,
            activations: self.layers.iter().map(|l| l.activation).collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if !x.is_matrix() || x.cols() != self.input_dim() {
            return Err(Error::Shape {
                op: "forward",
                lhs: x.shape().to_vec(),
                rhs: vec![self.input_dim()],
            });
        }
        let mut h = x.clone();
        for layer in &self.layers {
            h = h.affine(&layer.weights, &layer.bias)?;
            if layer.activation != Activation::Linear {
                h = h.map(|v| layer.activation.apply(v));
            }
        }
        Ok(h)
    }

    /// Parameter tensors in `[w0, b0, w1, b1, ...]` order.
    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weights, &l.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weights, &mut l.bias])
            .collect()
    }

    pub fn param_names(&self, prefix: &str) -> Vec<String> {
        (0..self.layers.len())
            .flat_map(|i| [format!("{prefix}.layer{i}.weights"), format!("{prefix}.layer{i}.bias")])
            .collect()
    }

    /// Registers every parameter as a tracked leaf of `g`.
    pub fn bind(&self, g: &mut Graph) -> BoundMlp {
        let layers = self
            .layers
            .iter()
            .map(|l| BoundLayer {
                weights: g.input(l.weights.clone()),
                bias: g.input(l.bias.clone()),
                activation: l.activation,
            })
            .collect();
        BoundMlp { layers }
    }

    /// Uses existing graph nodes (in [`Mlp::params`] order) as the parameters.
    pub fn bind_to(&self, ids: &[NodeId]) -> Result<BoundMlp> {
        if ids.len() != 2 * self.layers.len() {
            return Err(Error::invalid(format!(
                "expected {} parameter nodes, got {}",
                2 * self.layers.len(),
                ids.len()
            )));
        }
        let layers = self
            .layers
            .iter()
            .zip(ids.chunks(2))
            .map(|(l, pair)| BoundLayer {
                weights: pair[0],
                bias: pair[1],
                activation: l.activation,
            })
            .collect();
        Ok(BoundMlp { layers })
    }
}

#[derive(Clone, Debug)]
struct BoundLayer {
    weights: NodeId,
    bias: NodeId,
    activation: Activation,
}

/// An [`Mlp`] whose parameters live in a graph.
#[derive(Clone, Debug)]
pub struct BoundMlp {
    layers: Vec<BoundLayer>,
}

impl BoundMlp {
    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let mut h = x;
        for layer in &self.layers {
            h = g.dense(h, layer.weights, layer.bias, layer.activation)?;
        }
        Ok(h)
    }

    /// Parameter node ids in the same order as [`Mlp::params`].
    pub fn param_ids(&self) -> Vec<NodeId> {
        self.layers.iter().flat_map(|l| [l.weights, l.bias]).collect()
    }
}

/// The encoder `u = f(x)`: final layer linear, so outputs are unconstrained.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub net: Mlp,
}

impl EncoderParams {
    pub fn new(net: Mlp) -> Result<Self> {
        if net.layers.last().map(|l| l.activation) != Some(Activation::Linear) {
            return Err(Error::invalid("encoder output layer must be linear"));
        }
        Ok(Self { net })
    }

    pub fn init(spec: &LayerSpec, rng: &mut Rng) -> Result<Self> {
        Self::new(Mlp::init(spec, rng)?)
    }

    pub fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.net.output_dim()
    }
}

/// The decoder, dimension-mirrored to an encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams {
    pub net: Mlp,
}

impl DecoderParams {
    pub fn new(net: Mlp) -> Result<Self> {
        if net.layers.last().map(|l| l.activation) != Some(Activation::Linear) {
            return Err(Error::invalid("decoder output layer must be linear"));
        }
        Ok(Self { net })
    }

    /// Checks the feature and observation widths line up with `encoder`.
    pub fn for_encoder(net: Mlp, encoder: &EncoderParams) -> Result<Self> {
        if net.input_dim() != encoder.output_dim() || net.output_dim() != encoder.input_dim() {
            return Err(Error::invalid(format!(
                "decoder {}→{} does not mirror encoder {}→{}",
                net.input_dim(),
                net.output_dim(),
                encoder.input_dim(),
                encoder.output_dim()
            )));
        }
        Self::new(net)
    }

    pub fn init_mirrored(encoder: &EncoderParams, rng: &mut Rng) -> Result<Self> {
        let spec = encoder.net.spec().mirrored();
        Self::for_encoder(Mlp::init(&spec, rng)?, encoder)
    }

    pub fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.net.output_dim()
    }
}

pub fn encode(params: &EncoderParams, x: &Tensor) -> Result<Tensor> {
    params.net.forward(x)
}

pub fn decode(params: &DecoderParams, z: &Tensor) -> Result<Tensor> {
    params.net.forward(z)
}

/// `z = u + σ·ε` with `ε ~ N(0, I)` drawn per element.
///
/// With `sigma_eps == 0` no noise is drawn and `z` is `u` bit for bit.
pub fn reparameterize(u: &Tensor, sigma_eps: f64, rng: &mut Rng) -> Result<Tensor> {
    if !(sigma_eps >= 0.0) || !sigma_eps.is_finite() {
        return Err(Error::invalid(format!("sigma_eps must be ≥ 0, got {sigma_eps}")));
    }
    if sigma_eps == 0.0 {
        return Ok(u.clone());
    }
    let noise = standard_normal(u.shape(), rng);
    u.zip_map(&noise, "reparameterize", |a, e| a + sigma_eps * e)
}

pub fn standard_normal(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| rng.normal()).collect())
}

/// Serialized form of a network: widths, activations and flat row-major arrays.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkRecord {
    pub layer_dims: Vec<usize>,
    pub activations: Vec<Activation>,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl From<&Mlp> for NetworkRecord {
    fn from(net: &Mlp) -> Self {
        let spec = net.spec();
        Self {
            layer_dims: spec.dims,
            activations: spec.activations,
            weights: net.layers.iter().map(|l| l.weights.data().to_vec()).collect(),
            biases: net.layers.iter().map(|l| l.bias.data().to_vec()).collect(),
        }
    }
}

impl TryFrom<&NetworkRecord> for Mlp {
    type Error = Error;

    fn try_from(rec: &NetworkRecord) -> Result<Self> {
        let spec = LayerSpec {
            dims: rec.layer_dims.clone(),
            activations: rec.activations.clone(),
        };
        spec.validate()
            .map_err(|e| Error::format("network record", e.to_string()))?;
        let n = rec.activations.len();
        if rec.weights.len() != n || rec.biases.len() != n {
            return Err(Error::format(
                "network record",
                format!("expected {n} weight and bias arrays"),
            ));
        }
        let layers = (0..n)
            .map(|i| {
                let (fan_in, fan_out) = (rec.layer_dims[i], rec.layer_dims[i + 1]);
                if rec.weights[i].len() != fan_in * fan_out || rec.biases[i].len() != fan_out {
                    return Err(Error::format(
                        "network record",
                        format!("layer {i} arrays do not match {fan_in}→{fan_out}"),
                    ));
                }
                DenseLayer::new(
                    Tensor::matrix(fan_out, fan_in, rec.weights[i].clone())?,
                    Tensor::vector(rec.biases[i].clone())?,
                    rec.activations[i],
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Mlp::new(layers)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;

    fn zero_net(spec: &LayerSpec) -> Mlp {
        let mut net = Mlp::init(spec, &mut Rng::seed(0)).unwrap();
        for p in net.params_mut() {
            *p = Tensor::zeros(p.shape());
        }
        net
    }

    fn random_x(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn zero_params_give_zero_output() {
        let spec = LayerSpec::mlp(5, &[7, 7], 2, Activation::Relu);
        let enc = EncoderParams::new(zero_net(&spec)).unwrap();
        let x = random_x(3, 5, &mut Rng::seed(1));
        assert!(encode(&enc, &x).unwrap().data().iter().all(|&v| v == 0.0));
        let dec = DecoderParams::for_encoder(zero_net(&spec.mirrored()), &enc).unwrap();
        let z = random_x(3, 2, &mut Rng::seed(2));
        let y = decode(&dec, &z).unwrap();
        assert_eq!(y.shape(), &[3, 5]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let layer = DenseLayer::new(Tensor::identity(3), Tensor::zeros(&[3]), Activation::Linear).unwrap();
        let enc = EncoderParams::new(Mlp::new(vec![layer.clone()]).unwrap()).unwrap();
        let dec = DecoderParams::for_encoder(Mlp::new(vec![layer]).unwrap(), &enc).unwrap();
        let x = random_x(4, 3, &mut Rng::seed(3));
        let u = encode(&enc, &x).unwrap();
        assert_eq!(u, x);
        assert_eq!(decode(&dec, &u).unwrap(), x);
    }

    #[test]
    fn batch_rows_encode_independently() {
        let mut rng = Rng::seed(4);
        let enc = EncoderParams::init(&LayerSpec::mlp(6, &[8, 8], 2, Activation::Relu), &mut rng).unwrap();
        let x = random_x(4, 6, &mut rng);
        let batch = encode(&enc, &x).unwrap();
        for i in 0..4 {
            let row = encode(&enc, &x.slice_rows(i, i + 1).unwrap()).unwrap();
            // gemm blocking may reorder sums; allow rounding-level slack
            for (a, b) in batch.row(i).iter().zip(row.data()) {
                assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let enc = EncoderParams::init(&LayerSpec::mlp(6, &[4], 2, Activation::Relu), &mut Rng::seed(0)).unwrap();
        assert!(encode(&enc, &Tensor::zeros(&[3, 5])).is_err());
        let dec = DecoderParams::init_mirrored(&enc, &mut Rng::seed(1)).unwrap();
        assert!(decode(&dec, &Tensor::zeros(&[3, 3])).is_err());
        let other = Mlp::init(&LayerSpec::mlp(3, &[4], 6, Activation::Relu), &mut Rng::seed(0)).unwrap();
        assert!(DecoderParams::for_encoder(other, &enc).is_err());
    }

    #[test]
    fn init_bounds_zero_bias_and_determinism() {
        let spec = LayerSpec::mlp(80, &[800], 2, Activation::Relu);
        let a = Mlp::init(&spec, &mut Rng::seed(12)).unwrap();
        let bound = (6.0f64 / 880.0).sqrt();
        assert!((bound - 0.0826).abs() < 1e-4);
        assert!(a.layers()[0].weights.data().iter().all(|w| w.abs() < bound));
        assert!(a.layers().iter().all(|l| l.bias.data().iter().all(|&b| b == 0.0)));
        let b = Mlp::init(&spec, &mut Rng::seed(12)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn reparameterize_contract() {
        let u = random_x(5, 2, &mut Rng::seed(1));
        let z = reparameterize(&u, 0.0, &mut Rng::seed(2)).unwrap();
        assert!(u.data().iter().zip(z.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(reparameterize(&u, -0.1, &mut Rng::seed(2)).is_err());
        let z1 = reparameterize(&u, 0.3, &mut Rng::seed(9)).unwrap();
        let z2 = reparameterize(&u, 0.3, &mut Rng::seed(9)).unwrap();
        assert_eq!(z1, z2);
        assert_ne!(z1, u);
    }

    #[test]
    fn reparameterize_moments() {
        let u = Tensor::zeros(&[1_000_000, 1]);
        let z = reparameterize(&u, 1.0, &mut Rng::seed(77)).unwrap();
        let mean = z.mean();
        let var = z.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (z.numel() - 1) as f64;
        assert!(mean.abs() < 0.01, "{mean}");
        assert!((var - 1.0).abs() < 0.02, "{var}");
    }

    #[test]
    fn graph_forward_matches_plain_forward() {
        let mut rng = Rng::seed(21);
        let net = Mlp::init(&LayerSpec::mlp(4, &[6, 5], 3, Activation::Tanh), &mut rng).unwrap();
        let x = random_x(7, 4, &mut rng);
        let mut g = Graph::new();
        let bound = net.bind(&mut g);
        let xi = g.constant(x.clone());
        let y = bound.forward(&mut g, xi).unwrap();
        let plain = net.forward(&x).unwrap();
        for (a, b) in g.value(y).data().iter().zip(plain.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn network_gradients_pass_check() {
        let mut rng = Rng::seed(31);
        let enc = Mlp::init(&LayerSpec::mlp(4, &[5, 5], 2, Activation::Tanh), &mut rng).unwrap();
        let dec = Mlp::init(&LayerSpec::mlp(2, &[5, 5], 4, Activation::Tanh), &mut rng).unwrap();
        let x = random_x(3, 4, &mut rng);
        let eps = standard_normal(&[3, 2], &mut rng);
        let n_enc = enc.params().len();
        let mut params: Vec<Tensor> = enc.params().into_iter().cloned().collect();
        params.extend(dec.params().into_iter().cloned());
        let build = |g: &mut Graph, p: &[NodeId]| {
            let xi = g.constant(x.clone());
            let u = enc.bind_to(&p[..n_enc])?.forward(g, xi)?;
            let noise = g.constant(eps.clone());
            let noise = g.scale(noise, 0.2)?;
            let z = g.add(u, noise)?;
            let y = dec.bind_to(&p[n_enc..])?.forward(g, z)?;
            let target = g.constant(x.clone());
            let r = g.sub(y, target)?;
            let r = g.square(r)?;
            g.mean(r)
        };
        let report = grad_check(build, &params, 1e-5, 1e-5).unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn record_round_trip_and_validation() {
        let net = Mlp::init(&LayerSpec::mlp(3, &[4], 2, Activation::Relu), &mut Rng::seed(8)).unwrap();
        let rec = NetworkRecord::from(&net);
        let json = serde_json::to_string(&rec).unwrap();
        let back: NetworkRecord = serde_json::from_str(&json).unwrap();
        assert_eq!(Mlp::try_from(&back).unwrap(), net);
        let mut bad = rec.clone();
        bad.layer_dims[1] = 5;
        assert!(Mlp::try_from(&bad).is_err());
    }
}
