//! Sequential networks built from a declarative spec.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{
    loss_forward_grad_hess, sequence_backward, sequence_forward, Activation, ActivationKind, BiasAdd, Conv2d, IndexSelect, Layer,
    LayerCache, Linear, LossKind, LossOutput, Reshape, Skip,
};
use crate::tensor::{ConvGeometry, Tensor};

/// One entry of a [`NetworkSpec`] layer list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Linear {
        out_features: usize,
    },
    /// Per-entry bias on vectors, per-channel bias on feature maps.
    Bias,
    Sigmoid,
    Tanh,
    Relu,
    Conv2d {
        out_channels: usize,
        kernel: [usize; 2],
        #[serde(default = "unit_pair")]
        stride: [usize; 2],
        #[serde(default)]
        pad: [usize; 2],
    },
    MaxPool {
        kernel: [usize; 2],
        #[serde(default)]
        stride: Option<[usize; 2]>,
    },
    IndexSelect {
        indices: Vec<usize>,
    },
    Flatten,
    Skip {
        branch: Vec<LayerSpec>,
    },
}

fn unit_pair() -> [usize; 2] {
    [1, 1]
}

/// Architecture: input extents (`[n]` for vectors, `[C, H, W]` for images),
/// a layer list and the terminal loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub input: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub loss: LossKind,
}

/// Shape of the value flowing between layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FlowShape {
    Vector(usize),
    Map { c: usize, h: usize, w: usize },
}

impl FlowShape {
    pub fn len(self) -> usize {
        match self {
            FlowShape::Vector(n) => n,
            FlowShape::Map { c, h, w } => c * h * w,
        }
    }

    pub fn is_empty(self) -> bool {
        self.len() == 0
    }

    /// Extents of tensors carrying this shape; maps are `[C, H*W]`.
    pub fn extents(self) -> Vec<usize> {
        match self {
            FlowShape::Vector(n) => vec![n],
            FlowShape::Map { c, h, w } => vec![c, h * w],
        }
    }
}

fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize, fan_out: usize) -> Result<Tensor> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::new(&[rows, cols], (0..rows * cols).map(|_| rng.random_range(-a..a)).collect())
}

fn build_layers(specs: &[LayerSpec], mut shape: FlowShape, rng: &mut ChaCha8Rng) -> Result<(Vec<Layer>, FlowShape)> {
    let mut layers = Vec::with_capacity(specs.len());
    for (i, spec) in specs.iter().enumerate() {
        let (layer, next) = match spec {
            LayerSpec::Linear { out_features } => {
                let FlowShape::Vector(n) = shape else {
                    return Err(Error::InvalidArgument(format!("layer {i}: linear needs a vector input, flatten first")));
                };
                if *out_features == 0 {
                    return Err(Error::InvalidArgument(format!("layer {i}: zero output features")));
                }
                let w = glorot(rng, *out_features, n, n, *out_features)?;
                (Layer::Linear(Linear::new(w)?), FlowShape::Vector(*out_features))
            }
            LayerSpec::Bias => {
                let b = match shape {
                    FlowShape::Vector(n) => BiasAdd::new(Tensor::zeros(&[n])),
                    FlowShape::Map { c, h, w } => BiasAdd::per_channel(Tensor::zeros(&[c]), h * w),
                };
                (Layer::Bias(b), shape)
            }
            LayerSpec::Sigmoid => (Layer::Activation(Activation::new(ActivationKind::Sigmoid)), shape),
            LayerSpec::Tanh => (Layer::Activation(Activation::new(ActivationKind::Tanh)), shape),
            LayerSpec::Relu => (Layer::Activation(Activation::new(ActivationKind::Relu)), shape),
            LayerSpec::Conv2d { out_channels, kernel, stride, pad } => {
                let FlowShape::Map { c, h, w } = shape else {
                    return Err(Error::InvalidArgument(format!("layer {i}: conv2d needs a feature-map input")));
                };
                let geom = ConvGeometry {
                    channels: c,
                    height: h,
                    width: w,
                    kernel: (kernel[0], kernel[1]),
                    stride: (stride[0], stride[1]),
                    pad: (pad[0], pad[1]),
                };
                geom.validate()?;
                let k = geom.patch_len();
                let weight = glorot(rng, *out_channels, k, k, out_channels * kernel[0] * kernel[1])?;
                let next = FlowShape::Map { c: *out_channels, h: geom.out_height(), w: geom.out_width() };
                (Layer::Conv2d(Conv2d::new(weight, geom)?), next)
            }
            LayerSpec::MaxPool { kernel, stride } => {
                let FlowShape::Map { c, h, w } = shape else {
                    return Err(Error::InvalidArgument(format!("layer {i}: max_pool needs a feature-map input")));
                };
                let s = stride.unwrap_or(*kernel);
                let geom = ConvGeometry {
                    channels: c,
                    height: h,
                    width: w,
                    kernel: (kernel[0], kernel[1]),
                    stride: (s[0], s[1]),
                    pad: (0, 0),
                };
                let pool = IndexSelect::max_pool(geom)?;
                let next = FlowShape::Map { c, h: geom.out_height(), w: geom.out_width() };
                (Layer::IndexSelect(pool), next)
            }
            LayerSpec::IndexSelect { indices } => {
                let sel = IndexSelect::fixed(indices.clone(), shape.len())?;
                (Layer::IndexSelect(sel), FlowShape::Vector(indices.len()))
            }
            LayerSpec::Flatten => (Layer::Reshape(Reshape { extents: vec![shape.len()] }), FlowShape::Vector(shape.len())),
            LayerSpec::Skip { branch } => {
                let (inner, out) = build_layers(branch, shape, rng)?;
                if out != shape {
                    return Err(Error::InvalidArgument(format!("layer {i}: skip branch maps {shape:?} to {out:?}")));
                }
                (Layer::Skip(Skip::new(inner)), shape)
            }
        };
        layers.push(layer);
        shape = next;
    }
    Ok((layers, shape))
}

/// Address of one parameter: layer index and parameter slot within it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId {
    pub layer: usize,
    pub slot: usize,
}

/// One labelled example. Targets are vectors (one-hot for cross-entropy).
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub x: Tensor,
    pub y: Tensor,
}

#[derive(Clone, Debug)]
pub struct Network {
    pub layers: Vec<Layer>,
    pub loss: LossKind,
    input: FlowShape,
    output: FlowShape,
}

impl Network {
    /// Builds the layers of `spec` with Glorot-uniform weights and zero
    /// biases drawn from `seed`.
    pub fn from_spec(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        let input = match spec.input.as_slice() {
            [n] if *n > 0 => FlowShape::Vector(*n),
            [c, h, w] if c * h * w > 0 => FlowShape::Map { c: *c, h: *h, w: *w },
            other => return Err(Error::InvalidArgument(format!("input extents {other:?} must be [n] or [C, H, W]"))),
        };
        if spec.layers.is_empty() {
            return Err(Error::InvalidArgument("network has no layers".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (layers, output) = build_layers(&spec.layers, input, &mut rng)?;
        Ok(Network { layers, loss: spec.loss, input, output })
    }

    /// Wraps explicitly constructed layers.
    pub fn from_layers(layers: Vec<Layer>, loss: LossKind, input: FlowShape, output: FlowShape) -> Self {
        Network { layers, loss, input, output }
    }

    pub fn input_shape(&self) -> FlowShape {
        self.input
    }

    pub fn output_shape(&self) -> FlowShape {
        self.output
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(layer, l)| (0..l.num_params()).map(move |slot| ParamId { layer, slot }))
            .collect()
    }

    pub fn param(&self, id: ParamId) -> &Tensor {
        self.layers[id.layer].params()[id.slot]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Tensor {
        self.layers[id.layer].params_mut().swap_remove(id.slot)
    }

    pub fn param_name(&self, id: ParamId) -> String {
        format!("{}.{}", id.layer, self.layers[id.layer].param_names()[id.slot])
    }

    /// Number of rows of a parameter, the unit of sub-blocking.
    pub fn param_rows(&self, id: ParamId) -> usize {
        self.layers[id.layer].param_rows(id.slot)
    }

    pub fn num_weights(&self) -> usize {
        self.param_ids().iter().map(|&id| self.param(id).len()).sum()
    }

    pub fn set_param(&mut self, id: ParamId, values: &[f64]) -> Result<()> {
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("parameter {id:?} value {bad}")));
        }
        let p = self.param_mut(id);
        if p.len() != values.len() {
            return Err(Error::ShapeMismatch { context: "parameter update", expected: vec![p.len()], found: vec![values.len()] });
        }
        p.data_mut().copy_from_slice(values);
        Ok(())
    }

    /// Network output for one input.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        Ok(sequence_forward(&self.layers, x)?.0)
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.len() != self.input.len() {
            return Err(Error::ShapeMismatch {
                context: "network input",
                expected: self.input.extents(),
                found: x.extents().to_vec(),
            });
        }
        Ok(())
    }

    /// Loss of one sample.
    pub fn sample_loss(&self, s: &Sample) -> Result<f64> {
        let out = self.predict(&s.x)?;
        Ok(loss_forward_grad_hess(self.loss, &out, &s.y)?.value)
    }

    /// Mean loss over `batch` without keeping caches.
    pub fn mean_loss(&self, batch: &[Sample]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let mut total = 0.0;
        for s in batch {
            total += self.sample_loss(s)?;
        }
        Ok(total / batch.len() as f64)
    }
}

/// Per-sample forward records of a batch.
#[derive(Clone, Debug)]
pub struct Trace {
    pub caches: Vec<Vec<LayerCache>>,
    pub losses: Vec<LossOutput>,
    /// Mean loss over the batch.
    pub loss: f64,
    pub(crate) has_gradients: bool,
}

impl Trace {
    pub fn batch_size(&self) -> usize {
        self.losses.len()
    }
}

/// Forward pass over a batch; the loss is the batch mean.
pub fn forward_pass(net: &Network, batch: &[Sample]) -> Result<Trace> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let mut caches = Vec::with_capacity(batch.len());
    let mut losses = Vec::with_capacity(batch.len());
    for s in batch {
        net.check_input(&s.x)?;
        let (out, c) = sequence_forward(&net.layers, &s.x)?;
        losses.push(loss_forward_grad_hess(net.loss, &out, &s.y)?);
        caches.push(c);
    }
    let loss = losses.iter().map(|l| l.value).sum::<f64>() / batch.len() as f64;
    Ok(Trace { caches, losses, loss, has_gradients: false })
}

/// Gradient backpropagation of the mean loss. Each cache records the
/// per-sample output gradient for the curvature passes.
pub fn gradient_pass(net: &Network, trace: &mut Trace) -> Result<Vec<Tensor>> {
    let ids = net.param_ids();
    let mut grads: Vec<Tensor> = ids.iter().map(|&id| Tensor::zeros(net.param(id).extents())).collect();
    let scale = 1.0 / trace.batch_size() as f64;
    for (caches, l) in trace.caches.iter_mut().zip(&trace.losses) {
        let (_, per_layer) = sequence_backward(&net.layers, caches, &l.grad)?;
        for (g, id) in grads.iter_mut().zip(&ids) {
            g.add_assign_scaled(&per_layer[id.layer][id.slot], scale);
        }
    }
    trace.has_gradients = true;
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(d: &[f64]) -> Tensor {
        Tensor::vector(d.to_vec()).unwrap()
    }

    fn spec(input: usize, layers: Vec<LayerSpec>, loss: LossKind) -> NetworkSpec {
        NetworkSpec { input: vec![input], layers, loss }
    }

    #[test]
    fn identity_net_at_target_has_zero_loss() {
        let mut net = Network::from_spec(&spec(2, vec![LayerSpec::Linear { out_features: 2 }], LossKind::Square), 0).unwrap();
        net.set_param(ParamId { layer: 0, slot: 0 }, &[1.0, 0.0, 0.0, 1.0]).unwrap();
        let s = Sample { x: v(&[0.3, 0.4]), y: v(&[0.3, 0.4]) };
        let mut t = forward_pass(&net, &[s]).unwrap();
        assert_eq!(t.loss, 0.0);
        let g = gradient_pass(&net, &mut t).unwrap();
        assert!(g[0].max_abs() < 1e-12);
    }

    #[test]
    fn loss_is_batch_mean() {
        let mut net = Network::from_spec(&spec(1, vec![LayerSpec::Linear { out_features: 1 }], LossKind::Square), 0).unwrap();
        net.set_param(ParamId { layer: 0, slot: 0 }, &[1.0]).unwrap();
        let a = Sample { x: v(&[1.0]), y: v(&[0.0]) };
        let b = Sample { x: v(&[3f64.sqrt()]), y: v(&[0.0]) };
        assert!((forward_pass(&net, &[a.clone(), b]).unwrap().loss - 2.0).abs() < 1e-15);
        let one = forward_pass(&net, std::slice::from_ref(&a)).unwrap().loss;
        assert_eq!(forward_pass(&net, &[a.clone(), a]).unwrap().loss, one);
    }

    #[test]
    fn scalar_linear_gradient() {
        let mut net = Network::from_spec(&spec(1, vec![LayerSpec::Linear { out_features: 1 }], LossKind::Square), 0).unwrap();
        net.set_param(ParamId { layer: 0, slot: 0 }, &[1.5]).unwrap();
        let (x, y) = (2.0, 1.0);
        let mut t = forward_pass(&net, &[Sample { x: v(&[x]), y: v(&[y]) }]).unwrap();
        let g = gradient_pass(&net, &mut t).unwrap();
        assert!((g[0].data()[0] - 2.0 * (1.5 * x - y) * x).abs() < 1e-15);
        let mut t2 = forward_pass(&net, &[Sample { x: v(&[x]), y: v(&[1.5 * x - 2.0 * (1.5 * x - y)]) }]).unwrap();
        let g2 = gradient_pass(&net, &mut t2).unwrap();
        assert!((g2[0].data()[0] - 2.0 * g[0].data()[0]).abs() < 1e-12);
    }

    #[test]
    fn spec_shape_errors() {
        let bad =
            spec(4, vec![LayerSpec::Conv2d { out_channels: 1, kernel: [2, 2], stride: [1, 1], pad: [0, 0] }], LossKind::Square);
        assert!(Network::from_spec(&bad, 0).is_err());
        let skip = spec(3, vec![LayerSpec::Skip { branch: vec![LayerSpec::Linear { out_features: 2 }] }], LossKind::Square);
        assert!(Network::from_spec(&skip, 0).is_err());
        let net = Network::from_spec(&spec(3, vec![LayerSpec::Linear { out_features: 2 }], LossKind::Square), 0).unwrap();
        assert!(forward_pass(&net, &[Sample { x: v(&[1.0]), y: v(&[0.0, 0.0]) }]).is_err());
        assert!(forward_pass(&net, &[]).is_err());
    }

    #[test]
    fn conv_spec_shapes() {
        let s = NetworkSpec {
            input: vec![2, 5, 5],
            layers: vec![
                LayerSpec::Conv2d { out_channels: 3, kernel: [3, 3], stride: [1, 1], pad: [1, 1] },
                LayerSpec::Bias,
                LayerSpec::Relu,
                LayerSpec::MaxPool { kernel: [2, 2], stride: None },
                LayerSpec::Flatten,
                LayerSpec::Linear { out_features: 2 },
            ],
            loss: LossKind::SoftmaxCrossEntropy,
        };
        let net = Network::from_spec(&s, 1).unwrap();
        assert_eq!(net.output_shape(), FlowShape::Vector(2));
        assert_eq!(net.param_ids().len(), 3);
        assert_eq!(net.param(ParamId { layer: 0, slot: 0 }).extents(), &[3, 18]);
        assert_eq!(net.param(ParamId { layer: 5, slot: 0 }).extents(), &[2, 12]);
    }

    #[test]
    fn spec_json_round_trip_and_unknown_keys() {
        let json =
            r#"{"input":[4],"layers":[{"type":"linear","out_features":3},{"type":"bias"},{"type":"sigmoid"}],"loss":"square"}"#;
        let s: NetworkSpec = serde_json::from_str(json).unwrap();
        assert_eq!(serde_json::from_str::<NetworkSpec>(&serde_json::to_string(&s).unwrap()).unwrap(), s);
        assert!(serde_json::from_str::<NetworkSpec>(r#"{"input":[4],"layers":[],"loss":"square","x":1}"#).is_err());
        assert!(
            serde_json::from_str::<NetworkSpec>(r#"{"input":[4],"layers":[{"type":"linear","out":3}],"loss":"square"}"#).is_err()
        );
    }

    #[test]
    fn init_is_seeded() {
        let s = spec(4, vec![LayerSpec::Linear { out_features: 3 }], LossKind::Square);
        let a = Network::from_spec(&s, 3).unwrap();
        let b = Network::from_spec(&s, 3).unwrap();
        let c = Network::from_spec(&s, 4).unwrap();
        let id = ParamId { layer: 0, slot: 0 };
        assert_eq!(a.param(id), b.param(id));
        assert_ne!(a.param(id), c.param(id));
        assert!(a.param(id).max_abs() <= (6.0f64 / 7.0).sqrt());
    }
}
