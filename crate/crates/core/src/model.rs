//! The tip-regression network.
//!
//! Layer order: conv(3x3, stride 2, pad 1) → ReLU → maxpool → conv(3x3,
//! stride 1, pad 1) → ReLU → maxpool → flatten → fc → ReLU → dropout → fc.
//! The head is linear; predictions live in normalized coordinates.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{
    self, conv2d, dropout, linear, maxpool2d, relu, Conv2dCtx, DropoutCtx, LinearCtx,
    MaxPoolCtx, Mode, ReluCtx,
};
use crate::seeding;
use crate::tensor::{Element, Tensor};

pub const CONV1_WEIGHT: &str = "conv1.weight";
pub const CONV1_BIAS: &str = "conv1.bias";
pub const CONV2_WEIGHT: &str = "conv2.weight";
pub const CONV2_BIAS: &str = "conv2.bias";
pub const FC1_WEIGHT: &str = "fc1.weight";
pub const FC1_BIAS: &str = "fc1.bias";
pub const FC2_WEIGHT: &str = "fc2.weight";
pub const FC2_BIAS: &str = "fc2.bias";

const KERNEL: usize = 3;
const CONV1_STRIDE: usize = 2;
const CONV2_STRIDE: usize = 1;
const PADDING: usize = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub input_channels: usize,
    pub input_side: usize,
    pub conv1_out: usize,
    pub conv2_out: usize,
    pub hidden: usize,
    pub output_dim: usize,
    pub dropout_rate: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            input_channels: 3,
            input_side: 400,
            conv1_out: 16,
            conv2_out: 32,
            hidden: 512,
            output_dim: 3,
            dropout_rate: 0.5,
        }
    }
}

impl NetworkConfig {
    /// Same architecture on 64x64 inputs.
    pub fn desk_scale() -> Self {
        Self {
            input_side: 64,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("network.input_channels", self.input_channels),
            ("network.input_side", self.input_side),
            ("network.conv1_out", self.conv1_out),
            ("network.conv2_out", self.conv2_out),
            ("network.hidden", self.hidden),
            ("network.output_dim", self.output_dim),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if self.input_side % 8 != 0 {
            return Err(Error::config(
                "network.input_side",
                format!("must be divisible by 8, got {}", self.input_side),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config(
                "network.dropout_rate",
                format!("must lie in [0, 1), got {}", self.dropout_rate),
            ));
        }
        Ok(())
    }

    pub fn pooled_side(&self) -> usize {
        self.input_side / 8
    }

    pub fn flatten_len(&self) -> usize {
        self.conv2_out * self.pooled_side() * self.pooled_side()
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.input_channels, self.input_side, self.input_side]
    }

    pub fn parameter_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        vec![
            (CONV1_WEIGHT, vec![self.conv1_out, self.input_channels, KERNEL, KERNEL]),
            (CONV1_BIAS, vec![self.conv1_out]),
            (CONV2_WEIGHT, vec![self.conv2_out, self.conv1_out, KERNEL, KERNEL]),
            (CONV2_BIAS, vec![self.conv2_out]),
            (FC1_WEIGHT, vec![self.hidden, self.flatten_len()]),
            (FC1_BIAS, vec![self.hidden]),
            (FC2_WEIGHT, vec![self.output_dim, self.hidden]),
            (FC2_BIAS, vec![self.output_dim]),
        ]
    }
}

/// Named parameter tensors, iterated in ascending name order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParameterSet<T: Element = f32> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Element> ParameterSet<T> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Option<Tensor<T>> {
        self.tensors.insert(name.into(), tensor)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<T>> {
        self.tensors.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape().to_vec())))
                .collect(),
        }
    }

    pub fn fill(&mut self, value: T) {
        self.tensors.values_mut().for_each(|t| t.fill(value));
    }

    pub fn param_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Parameter count of one layer, e.g. `"conv1"` → weight + bias.
    pub fn layer_param_count(&self, layer: &str) -> usize {
        self.tensors
            .iter()
            .filter(|(k, _)| k.split('.').next() == Some(layer))
            .map(|(_, v)| v.len())
            .sum()
    }

    pub fn cast<U: Element>(&self) -> ParameterSet<U> {
        ParameterSet {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Errors unless `other` has exactly the same names and shapes.
    pub fn check_aligned<U: Element>(&self, other: &ParameterSet<U>) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::ParameterMismatch(format!(
                "{} tensors vs {}",
                self.len(),
                other.len()
            )));
        }
        for ((a, ta), (b, tb)) in self.iter().zip(other.iter()) {
            if a != b {
                return Err(Error::ParameterMismatch(format!("`{a}` vs `{b}`")));
            }
            if ta.shape() != tb.shape() {
                return Err(Error::ParameterMismatch(format!(
                    "`{a}` has shape {:?} vs {:?}",
                    ta.shape(),
                    tb.shape()
                )));
            }
        }
        Ok(())
    }

    fn expect(&self, name: &str) -> &Tensor<T> {
        self.get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` missing from validated set"))
    }
}

impl<T: Element> FromIterator<(String, Tensor<T>)> for ParameterSet<T> {
    fn from_iter<I: IntoIterator<Item = (String, Tensor<T>)>>(iter: I) -> Self {
        Self {
            tensors: iter.into_iter().collect(),
        }
    }
}

/// He-initialized parameters: weights `N(0, 2 / fan_in)`, biases zero.
pub fn build_network<T: Element>(config: &NetworkConfig, seed: u64) -> Result<ParameterSet<T>> {
    config.validate()?;
    let mut params = ParameterSet::new();
    for (name, shape) in config.parameter_shapes() {
        let tensor = if name.ends_with(".bias") {
            Tensor::zeros(shape)
        } else {
            let fan_in: usize = shape[1..].iter().product();
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt())
                .expect("finite positive std");
            let mut rng = seeding::stream(seed, name, 0);
            Tensor::from_fn(shape, |_| T::from_f64(normal.sample(&mut rng)))
        };
        params.insert(name, tensor);
    }
    Ok(params)
}

/// Everything the backward pass needs from one forward pass.
///
/// Borrows the network's weights, so parameters cannot be updated while a
/// trace is alive, and is consumed by [`Network::backward`]:
///
/// ```compile_fail
/// use needle_core::model::{Network, NetworkConfig};
/// use needle_core::layers::Mode;
/// use needle_core::tensor::Tensor;
/// use rand::SeedableRng;
///
/// let cfg = NetworkConfig { input_side: 16, ..NetworkConfig::default() };
/// let net = Network::<f64>::build(cfg.clone(), 0).unwrap();
/// let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
/// let (out, trace) = net.forward(&Tensor::zeros(cfg.input_shape().to_vec()), Mode::Train, &mut rng).unwrap();
/// net.backward(trace, &out).unwrap();
/// net.backward(trace, &out).unwrap(); // trace already consumed
/// ```
#[derive(Debug)]
pub struct ForwardTrace<'p, T: Element> {
    mode: Mode,
    shapes: Vec<(&'static str, Vec<usize>)>,
    conv1: Conv2dCtx<'p, T>,
    relu1: ReluCtx,
    pool1: MaxPoolCtx,
    conv2: Conv2dCtx<'p, T>,
    relu2: ReluCtx,
    pool2: MaxPoolCtx,
    pooled_shape: Vec<usize>,
    fc1: LinearCtx<'p, T>,
    relu3: ReluCtx,
    dropout: DropoutCtx<T>,
    fc2: LinearCtx<'p, T>,
}

impl<T: Element> ForwardTrace<'_, T> {
    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Output shape of each layer in network order, starting with the input.
    pub fn layer_shapes(&self) -> &[(&'static str, Vec<usize>)] {
        &self.shapes
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network<T: Element = f32> {
    config: NetworkConfig,
    params: ParameterSet<T>,
}

impl<T: Element> Network<T> {
    pub fn build(config: NetworkConfig, seed: u64) -> Result<Self> {
        let params = build_network(&config, seed)?;
        Ok(Self { config, params })
    }

    /// All-zero weights and biases.
    pub fn zeros(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let params = config
            .parameter_shapes()
            .into_iter()
            .map(|(n, s)| (n.to_string(), Tensor::zeros(s)))
            .collect();
        Ok(Self { config, params })
    }

    pub fn from_parts(config: NetworkConfig, params: ParameterSet<T>) -> Result<Self> {
        config.validate()?;
        let expected: ParameterSet<T> = config
            .parameter_shapes()
            .into_iter()
            .map(|(n, s)| (n.to_string(), Tensor::zeros(s)))
            .collect();
        expected.check_aligned(&params)?;
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &ParameterSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ParameterSet<T> {
        self.params
    }

    pub fn forward<R: Rng + ?Sized>(
        &self,
        image: &Tensor<T>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<(Tensor<T>, ForwardTrace<'_, T>)> {
        image.expect_shape("forward", &self.config.input_shape())?;
        let p = &self.params;
        let mut shapes = vec![("input", image.shape().to_vec())];

        let (x, conv1) = conv2d(
            image,
            p.expect(CONV1_WEIGHT),
            p.expect(CONV1_BIAS),
            CONV1_STRIDE,
            PADDING,
        )?;
        shapes.push(("conv1", x.shape().to_vec()));
        let (x, relu1) = relu(&x);
        shapes.push(("relu1", x.shape().to_vec()));
        let (x, pool1) = maxpool2d(&x)?;
        shapes.push(("pool1", x.shape().to_vec()));

        let (x, conv2) = conv2d(
            &x,
            p.expect(CONV2_WEIGHT),
            p.expect(CONV2_BIAS),
            CONV2_STRIDE,
            PADDING,
        )?;
        shapes.push(("conv2", x.shape().to_vec()));
        let (x, relu2) = relu(&x);
        shapes.push(("relu2", x.shape().to_vec()));
        let (x, pool2) = maxpool2d(&x)?;
        shapes.push(("pool2", x.shape().to_vec()));

        let pooled_shape = x.shape().to_vec();
        let n = x.len();
        let x = x.reshape(vec![n])?;
        shapes.push(("flatten", x.shape().to_vec()));

        let (x, fc1) = linear(&x, p.expect(FC1_WEIGHT), p.expect(FC1_BIAS))?;
        shapes.push(("fc1", x.shape().to_vec()));
        let (x, relu3) = relu(&x);
        shapes.push(("relu3", x.shape().to_vec()));
        let (x, dropout) = dropout(&x, self.config.dropout_rate, mode, rng)?;
        shapes.push(("dropout", x.shape().to_vec()));
        let (out, fc2) = linear(&x, p.expect(FC2_WEIGHT), p.expect(FC2_BIAS))?;
        shapes.push(("fc2", out.shape().to_vec()));

        let trace = ForwardTrace {
            mode,
            shapes,
            conv1,
            relu1,
            pool1,
            conv2,
            relu2,
            pool2,
            pooled_shape,
            fc1,
            relu3,
            dropout,
            fc2,
        };
        Ok((out, trace))
    }

    /// Eval-mode forward pass.
    pub fn predict(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        // eval-mode dropout never draws from the generator
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        Ok(self.forward(image, Mode::Eval, &mut rng)?.0)
    }

    pub fn backward(&self, trace: ForwardTrace<'_, T>, grad_out: &Tensor<T>) -> Result<ParameterSet<T>> {
        let mut grads = self.params.zeros_like();
        self.backward_accumulate(trace, grad_out, &mut grads)?;
        Ok(grads)
    }

    /// Adds this example's parameter gradients into `grads`.
    pub fn backward_accumulate(
        &self,
        trace: ForwardTrace<'_, T>,
        grad_out: &Tensor<T>,
        grads: &mut ParameterSet<T>,
    ) -> Result<()> {
        self.params.check_aligned(grads)?;
        let ForwardTrace {
            conv1,
            relu1,
            pool1,
            conv2,
            relu2,
            pool2,
            pooled_shape,
            fc1,
            relu3,
            dropout,
            fc2,
            ..
        } = trace;

        let mut take = |name: &str| {
            grads
                .tensors
                .remove(name)
                .unwrap_or_else(|| panic!("aligned gradient set lacks `{name}`"))
        };
        let (mut fc2_w, mut fc2_b) = (take(FC2_WEIGHT), take(FC2_BIAS));
        let (mut fc1_w, mut fc1_b) = (take(FC1_WEIGHT), take(FC1_BIAS));
        let (mut c2_w, mut c2_b) = (take(CONV2_WEIGHT), take(CONV2_BIAS));
        let (mut c1_w, mut c1_b) = (take(CONV1_WEIGHT), take(CONV1_BIAS));

        let result = (|| {
            let g = layers::linear_backward_into(fc2, grad_out, &mut fc2_w, &mut fc2_b)?;
            let g = layers::dropout_backward(dropout, &g)?;
            let g = layers::relu_backward(relu3, &g)?;
            let g = layers::linear_backward_into(fc1, &g, &mut fc1_w, &mut fc1_b)?;
            let g = g.reshape(pooled_shape)?;
            let g = layers::maxpool2d_backward(pool2, &g)?;
            let g = layers::relu_backward(relu2, &g)?;
            let g = layers::conv2d_backward_into(conv2, &g, &mut c2_w, &mut c2_b, true)?
                .expect("input gradient requested");
            let g = layers::maxpool2d_backward(pool1, &g)?;
            let g = layers::relu_backward(relu1, &g)?;
            layers::conv2d_backward_into(conv1, &g, &mut c1_w, &mut c1_b, false)?;
            Ok(())
        })();

        for (name, t) in [
            (FC2_WEIGHT, fc2_w),
            (FC2_BIAS, fc2_b),
            (FC1_WEIGHT, fc1_w),
            (FC1_BIAS, fc1_b),
            (CONV2_WEIGHT, c2_w),
            (CONV2_BIAS, c2_b),
            (CONV1_WEIGHT, c1_w),
            (CONV1_BIAS, c1_b),
        ] {
            grads.insert(name, t);
        }
        result
    }
}
