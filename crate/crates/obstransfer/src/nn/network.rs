use rand::Rng;

use super::tape::Activation;
use super::{NnError, NodeId, Tape, Tensor};

#[derive(Clone, Debug)]
pub enum Layer {
    Dense { in_dim: usize, out_dim: usize, activation: Activation },
    Conv2d { in_channels: usize, out_channels: usize, kernel: usize, stride: usize, activation: Activation },
    Flatten,
    UnitNormalize,
}

/// Architecture description: an input shape (without the batch dimension)
/// and an ordered list of layers. Built incrementally so dense dimensions
/// after a flatten are inferred rather than hand-counted.
#[derive(Clone, Debug)]
pub struct NetworkSpec {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    cur_shape: Vec<usize>,
}

impl NetworkSpec {
    pub fn new(input_shape: Vec<usize>) -> Result<Self, NnError> {
        if input_shape.is_empty() || input_shape.iter().any(|d| *d == 0) {
            return Err(NnError::InvalidSpec(format!(
                "bad input shape {:?}",
                input_shape
            )));
        }
        Ok(Self { cur_shape: input_shape.clone(), input_shape, layers: Vec::new() })
    }

    fn check_open(&self) -> Result<(), NnError> {
        if matches!(self.layers.last(), Some(Layer::UnitNormalize)) {
            return Err(NnError::InvalidSpec(
                "unit_normalize must be the final layer".into(),
            ));
        }
        Ok(())
    }

    pub fn dense(mut self, out_dim: usize, activation: Activation) -> Result<Self, NnError> {
        self.check_open()?;
        if self.cur_shape.len() != 1 {
            return Err(NnError::InvalidSpec(format!(
                "dense layer on non-flat shape {:?}",
                self.cur_shape
            )));
        }
        if out_dim == 0 {
            return Err(NnError::InvalidSpec("dense out_dim = 0".into()));
        }
        let in_dim = self.cur_shape[0];
        self.layers.push(Layer::Dense { in_dim, out_dim, activation });
        self.cur_shape = vec![out_dim];
        Ok(self)
    }

    pub fn conv2d(
        mut self,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        activation: Activation,
    ) -> Result<Self, NnError> {
        self.check_open()?;
        if self.cur_shape.len() != 3 {
            return Err(NnError::InvalidSpec(format!(
                "conv layer on non-image shape {:?}",
                self.cur_shape
            )));
        }
        let (c, h, w) = (self.cur_shape[0], self.cur_shape[1], self.cur_shape[2]);
        if out_channels == 0 || kernel == 0 || stride == 0 || kernel > h || kernel > w {
            return Err(NnError::InvalidSpec(format!(
                "conv {out_channels}x{kernel} stride {stride} on {c}x{h}x{w}"
            )));
        }
        let oh = (h - kernel) / stride + 1;
        let ow = (w - kernel) / stride + 1;
        self.layers.push(Layer::Conv2d {
            in_channels: c,
            out_channels,
            kernel,
            stride,
            activation,
        });
        self.cur_shape = vec![out_channels, oh, ow];
        Ok(self)
    }

    pub fn flatten(mut self) -> Result<Self, NnError> {
        self.check_open()?;
        let n: usize = self.cur_shape.iter().product();
        self.layers.push(Layer::Flatten);
        self.cur_shape = vec![n];
        Ok(self)
    }

    pub fn unit_normalize(mut self) -> Result<Self, NnError> {
        self.check_open()?;
        if self.cur_shape.len() != 1 {
            return Err(NnError::InvalidSpec(format!(
                "unit_normalize on non-flat shape {:?}",
                self.cur_shape
            )));
        }
        self.layers.push(Layer::UnitNormalize);
        Ok(self)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.cur_shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }
}

/// Access to a flat list of parameter tensors, so one optimizer can step
/// several modules jointly.
pub trait Parameterized {
    fn parameters(&self) -> Vec<&Tensor>;
    fn parameters_mut(&mut self) -> Vec<&mut Tensor>;
}

/// A concrete network: spec plus parameter tensors, ordered weight-then-bias
/// per parameterized layer.
#[derive(Clone, Debug)]
pub struct Network {
    spec: NetworkSpec,
    params: Vec<Tensor>,
}

/// Parameter nodes of one network registered on one tape. Multiple forward
/// passes through the same binding share the same leaves, so their
/// gradients accumulate.
pub struct NetworkBinding {
    nodes: Vec<NodeId>,
    trainable: bool,
}

fn uniform(rng: &mut impl Rng, bound: f64, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
}

impl Network {
    /// Initializes weights Kaiming-uniform for relu layers and
    /// Xavier-uniform otherwise; biases start at zero.
    pub fn new(spec: NetworkSpec, rng: &mut impl Rng) -> Result<Self, NnError> {
        let mut params = Vec::new();
        for layer in &spec.layers {
            match layer {
                Layer::Dense { in_dim, out_dim, activation } => {
                    let bound = match activation {
                        Activation::Relu => (6.0 / *in_dim as f64).sqrt(),
                        _ => (6.0 / (*in_dim + *out_dim) as f64).sqrt(),
                    };
                    params.push(Tensor::new(
                        vec![*in_dim, *out_dim],
                        uniform(rng, bound, in_dim * out_dim),
                    )?);
                    params.push(Tensor::new(vec![*out_dim], vec![0.0; *out_dim])?);
                }
                Layer::Conv2d { in_channels, out_channels, kernel, activation, .. } => {
                    let fan_in = in_channels * kernel * kernel;
                    let fan_out = out_channels * kernel * kernel;
                    let bound = match activation {
                        Activation::Relu => (6.0 / fan_in as f64).sqrt(),
                        _ => (6.0 / (fan_in + fan_out) as f64).sqrt(),
                    };
                    let n = out_channels * in_channels * kernel * kernel;
                    params.push(Tensor::new(
                        vec![*out_channels, *in_channels, *kernel, *kernel],
                        uniform(rng, bound, n),
                    )?);
                    params.push(Tensor::new(vec![*out_channels], vec![0.0; *out_channels])?);
                }
                Layer::Flatten | Layer::UnitNormalize => {}
            }
        }
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    /// Registers parameters as differentiable leaves.
    pub fn bind(&self, tape: &mut Tape) -> Result<NetworkBinding, NnError> {
        let mut nodes = Vec::with_capacity(self.params.len());
        for p in &self.params {
            nodes.push(tape.leaf(p.clone())?);
        }
        Ok(NetworkBinding { nodes, trainable: true })
    }

    /// Registers parameters as constants: the network contributes values
    /// but receives no gradient.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Result<NetworkBinding, NnError> {
        let mut nodes = Vec::with_capacity(self.params.len());
        for p in &self.params {
            nodes.push(tape.constant(p.clone())?);
        }
        Ok(NetworkBinding { nodes, trainable: false })
    }

    /// Applies the network to `input` (shape `[batch, input_shape..]`)
    /// using the bound parameter nodes.
    pub fn forward_with(
        &self,
        tape: &mut Tape,
        binding: &NetworkBinding,
        input: NodeId,
    ) -> Result<NodeId, NnError> {
        if binding.nodes.len() != self.params.len() {
            return Err(NnError::ShapeMismatch(
                "binding does not match network".into(),
            ));
        }
        let got = tape.value(input).shape().to_vec();
        if got.len() != self.spec.input_shape.len() + 1 || got[1..] != *self.spec.input_shape {
            return Err(NnError::ShapeMismatch(format!(
                "network input {:?}, want [batch, {:?}]",
                got, self.spec.input_shape
            )));
        }
        let mut x = input;
        let mut pi = 0;
        for layer in &self.spec.layers {
            match layer {
                Layer::Dense { activation, .. } => {
                    let w = binding.nodes[pi];
                    let b = binding.nodes[pi + 1];
                    pi += 2;
                    x = tape.matmul(x, w)?;
                    x = tape.add_bias(x, b)?;
                    x = tape.activation(x, *activation)?;
                }
                Layer::Conv2d { stride, activation, .. } => {
                    let w = binding.nodes[pi];
                    let b = binding.nodes[pi + 1];
                    pi += 2;
                    x = tape.conv2d(x, w, b, *stride)?;
                    x = tape.activation(x, *activation)?;
                }
                Layer::Flatten => x = tape.flatten(x)?,
                Layer::UnitNormalize => x = tape.unit_normalize(x)?,
            }
        }
        Ok(x)
    }

    /// Evaluation pass with no gradient bookkeeping.
    pub fn forward_no_grad(&self, input: &Tensor) -> Result<Tensor, NnError> {
        let mut tape = Tape::new();
        let binding = self.bind_frozen(&mut tape)?;
        let x = tape.constant(input.clone())?;
        let y = self.forward_with(&mut tape, &binding, x)?;
        Ok(tape.value(y).clone())
    }
}

impl Parameterized for Network {
    fn parameters(&self) -> Vec<&Tensor> {
        self.params.iter().collect()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.params.iter_mut().collect()
    }
}

impl NetworkBinding {
    /// Wraps externally created leaf nodes (used by gradient checking).
    pub fn from_nodes(nodes: Vec<NodeId>) -> Self {
        Self { nodes, trainable: true }
    }

    pub fn nodes(&self) -> &[NodeId] {
        &self.nodes
    }

    /// Gradients accumulated on this binding's leaves, in parameter order.
    pub fn grads(&self, tape: &Tape) -> Result<Vec<Vec<f64>>, NnError> {
        if !self.trainable {
            return Err(NnError::MissingGrads);
        }
        Ok(self.nodes.iter().map(|n| tape.grad(*n).to_vec()).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::derive_rng;

    #[test]
    fn dense_identity_passes_input_through() {
        let spec = NetworkSpec::new(vec![2]).unwrap().dense(2, Activation::Linear).unwrap();
        let mut rng = derive_rng(0, "test");
        let mut net = Network::new(spec, &mut rng).unwrap();
        {
            let mut ps = net.parameters_mut();
            *ps[0] = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        }
        let x = Tensor::new(vec![3, 2], vec![1.0, 2.0, -3.0, 4.0, 0.5, 0.0]).unwrap();
        let y = net.forward_no_grad(&x).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn unit_normalize_must_be_last() {
        let spec = NetworkSpec::new(vec![4]).unwrap().unit_normalize().unwrap();
        assert!(matches!(
            spec.dense(2, Activation::Linear),
            Err(NnError::InvalidSpec(_))
        ));
    }

    #[test]
    fn dense_rejects_image_input() {
        let spec = NetworkSpec::new(vec![3, 8, 8]).unwrap();
        assert!(matches!(
            spec.dense(4, Activation::Relu),
            Err(NnError::InvalidSpec(_))
        ));
    }

    #[test]
    fn conv_shape_inference_matches_valid_padding() {
        let spec = NetworkSpec::new(vec![3, 8, 8]).unwrap()
            .conv2d(16, 3, 1, Activation::Relu).unwrap()
            .conv2d(32, 3, 1, Activation::Relu).unwrap()
            .conv2d(32, 3, 1, Activation::Relu).unwrap();
        assert_eq!(spec.output_shape(), &[32, 2, 2]);
        let spec = spec.flatten().unwrap();
        assert_eq!(spec.output_shape(), &[128]);
    }

    #[test]
    fn init_biases_zero_weights_bounded_and_seeded() {
        let build = || {
            let spec = NetworkSpec::new(vec![10]).unwrap()
                .dense(8, Activation::Relu).unwrap()
                .dense(4, Activation::Linear).unwrap();
            Network::new(spec, &mut derive_rng(7, "init")).unwrap()
        };
        let a = build();
        let b = build();
        let pa = a.parameters();
        let pb = b.parameters();
        assert_eq!(pa.len(), 4);
        for (x, y) in pa.iter().zip(&pb) {
            assert_eq!(x.data(), y.data());
        }
        assert!(pa[1].data().iter().all(|v| *v == 0.0));
        assert!(pa[3].data().iter().all(|v| *v == 0.0));
        let relu_bound = (6.0f64 / 10.0).sqrt();
        assert!(pa[0].data().iter().all(|v| v.abs() < relu_bound));
        let lin_bound = (6.0f64 / 12.0).sqrt();
        assert!(pa[2].data().iter().all(|v| v.abs() < lin_bound));
    }

    #[test]
    fn frozen_binding_contributes_no_grads() {
        let spec = NetworkSpec::new(vec![3]).unwrap().dense(2, Activation::Linear).unwrap();
        let net = Network::new(spec, &mut derive_rng(1, "f")).unwrap();
        let mut tape = Tape::new();
        let binding = net.bind_frozen(&mut tape).unwrap();
        let x = tape.constant(Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
        let y = net.forward_with(&mut tape, &binding, x).unwrap();
        let t = tape.constant(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap()).unwrap();
        let l = tape.mse(y, t).unwrap();
        tape.backward(l).unwrap();
        assert!(binding.grads(&tape).is_err());
    }

    #[test]
    fn shared_binding_accumulates_over_two_forwards() {
        // f(x) = w.x with two batches through the same leaves: the weight
        // gradient must be the sum of the per-batch gradients.
        let spec = NetworkSpec::new(vec![1]).unwrap().dense(1, Activation::Linear).unwrap();
        let mut net = Network::new(spec, &mut derive_rng(2, "s")).unwrap();
        *net.parameters_mut()[0] = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let mut tape = Tape::new();
        let binding = net.bind(&mut tape).unwrap();
        let x1 = tape.constant(Tensor::new(vec![1, 1], vec![2.0]).unwrap()).unwrap();
        let x2 = tape.constant(Tensor::new(vec![1, 1], vec![3.0]).unwrap()).unwrap();
        let zero = tape.constant(Tensor::new(vec![1, 1], vec![0.0]).unwrap()).unwrap();
        let y1 = net.forward_with(&mut tape, &binding, x1).unwrap();
        let y2 = net.forward_with(&mut tape, &binding, x2).unwrap();
        let l1 = tape.mse(y1, zero).unwrap(); // d/dw = 2*2w*2 = 8
        let l2 = tape.mse(y2, zero).unwrap(); // d/dw = 2*3w*3 = 18
        let l = tape.add_scaled(l1, l2, 1.0).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(binding.grads(&tape).unwrap()[0], vec![26.0]);
    }
}
