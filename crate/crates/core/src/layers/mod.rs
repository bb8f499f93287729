//! Layer primitives with forward and exact analytic backward passes.
//!
//! All volumetric tensors use the `[N, C, D, H, W]` layout. A [`Layer`] owns
//! its parameters, buffers and the forward cache needed by `backward`.

mod activation;
mod conv;
mod linear;
mod norm;
mod pool;
pub mod reference;

pub use activation::{gelu, sigmoid};
pub use conv::{conv3d_forward, Conv3dSpec};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Rng, Scalar, Tensor};

/// Batch-norm epsilon.
pub const BATCHNORM_EPS: f64 = 1e-5;
/// Batch-norm running statistics momentum.
pub const BATCHNORM_MOMENTUM: f64 = 0.1;
/// Channel layer-norm epsilon.
pub const LAYERNORM_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Gelu,
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    Max,
    Avg,
}

/// Kind and hyperparameters of one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv3d(Conv3dSpec),
    Batchnorm3d { channels: usize },
    LayernormCh { channels: usize },
    Relu,
    Gelu,
    Sigmoid,
    Dropout { rate: f64 },
    Linear { in_features: usize, out_features: usize },
    GlobalMaxPool,
    GlobalAvgPool,
}

impl LayerSpec {
    pub fn activation(kind: Activation) -> Self {
        match kind {
            Activation::Relu => LayerSpec::Relu,
            Activation::Gelu => LayerSpec::Gelu,
            Activation::Sigmoid => LayerSpec::Sigmoid,
        }
    }

    pub fn global_pool(kind: PoolKind) -> Self {
        match kind {
            PoolKind::Max => LayerSpec::GlobalMaxPool,
            PoolKind::Avg => LayerSpec::GlobalAvgPool,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Conv3d(_) => "conv3d",
            LayerSpec::Batchnorm3d { .. } => "batchnorm3d",
            LayerSpec::LayernormCh { .. } => "layernorm_ch",
            LayerSpec::Relu => "relu",
            LayerSpec::Gelu => "gelu",
            LayerSpec::Sigmoid => "sigmoid",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::Linear { .. } => "linear",
            LayerSpec::GlobalMaxPool => "global_max_pool",
            LayerSpec::GlobalAvgPool => "global_avg_pool",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            LayerSpec::Conv3d(c) => c.validate(),
            LayerSpec::Batchnorm3d { channels } | LayerSpec::LayernormCh { channels } => {
                if *channels == 0 {
                    return Err(Error::Config("normalization needs at least one channel".into()));
                }
                Ok(())
            }
            LayerSpec::Dropout { rate } => {
                if !(0.0..1.0).contains(rate) {
                    return Err(Error::Parameter(format!("dropout rate must be in [0, 1), got {rate}")));
                }
                Ok(())
            }
            LayerSpec::Linear { in_features, out_features } => {
                if *in_features == 0 || *out_features == 0 {
                    return Err(Error::Config("linear layer needs non-zero feature sizes".into()));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Trainable parameter names and shapes, in registry order.
    pub fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        match self {
            LayerSpec::Conv3d(c) => vec![
                (
                    "weight",
                    vec![c.out_channels, c.in_channels / c.groups, c.kernel[0], c.kernel[1], c.kernel[2]],
                ),
                ("bias", vec![c.out_channels]),
            ],
            LayerSpec::Batchnorm3d { channels } | LayerSpec::LayernormCh { channels } => {
                vec![("weight", vec![*channels]), ("bias", vec![*channels])]
            }
            LayerSpec::Linear { in_features, out_features } => vec![
                ("weight", vec![*out_features, *in_features]),
                ("bias", vec![*out_features]),
            ],
            _ => Vec::new(),
        }
    }

    /// Non-trainable state tensors.
    pub fn buffer_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        match self {
            LayerSpec::Batchnorm3d { channels } => {
                vec![("running_mean", vec![*channels]), ("running_var", vec![*channels])]
            }
            _ => Vec::new(),
        }
    }
}

/// Closed-form trainable parameter count of a layer.
pub fn count_layer_params(spec: &LayerSpec) -> usize {
    match spec {
        LayerSpec::Conv3d(c) => {
            (c.in_channels / c.groups) * c.out_channels * c.kernel.iter().product::<usize>()
                + c.out_channels
        }
        LayerSpec::Linear { in_features, out_features } => in_features * out_features + out_features,
        LayerSpec::Batchnorm3d { channels } | LayerSpec::LayernormCh { channels } => 2 * channels,
        _ => 0,
    }
}

/// A named trainable tensor with its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Param<T: Scalar> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Scalar> Param<T> {
    fn new(name: String, value: Tensor<T>) -> Result<Self> {
        let grad = Tensor::zeros(value.shape())?;
        Ok(Param { name, value, grad })
    }
}

/// A named non-trainable tensor.
#[derive(Clone, Debug)]
pub struct Buffer<T: Scalar> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Per-call forward options.
pub struct ForwardCtx<'a> {
    pub training: bool,
    /// Retain intermediates for a later `backward`.
    pub keep_cache: bool,
    /// Source of dropout masks.
    pub rng: &'a mut Rng,
}

#[derive(Clone, Debug)]
enum Cache<T: Scalar> {
    Input(Tensor<T>),
    Output(Tensor<T>),
    Norm(norm::NormCache<T>),
    Mask(Vec<T>),
    Identity,
    MaxPool { in_shape: Vec<usize>, argmax: Vec<usize> },
    AvgPool { in_shape: Vec<usize> },
}

/// One layer: spec, parameters, buffers and forward cache.
#[derive(Clone, Debug)]
pub struct Layer<T: Scalar> {
    name: String,
    spec: LayerSpec,
    params: Vec<Param<T>>,
    buffers: Vec<Buffer<T>>,
    cache: Option<Cache<T>>,
}

fn init_uniform_bound(spec: &LayerSpec) -> f64 {
    let fan_in = match spec {
        LayerSpec::Conv3d(c) => (c.in_channels / c.groups) * c.kernel.iter().product::<usize>(),
        LayerSpec::Linear { in_features, .. } => *in_features,
        _ => 1,
    };
    1.0 / (fan_in as f64).sqrt()
}

impl<T: Scalar> Layer<T> {
    /// Builds a layer with freshly initialized parameters.
    ///
    /// Conv and linear weights and biases are drawn from
    /// U(-1/sqrt(fan_in), 1/sqrt(fan_in)); norm scales start at 1, shifts at 0.
    pub fn new(name: impl Into<String>, spec: LayerSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let name = name.into();
        let bound = init_uniform_bound(&spec);
        let is_norm = matches!(spec, LayerSpec::Batchnorm3d { .. } | LayerSpec::LayernormCh { .. });
        let mut params = Vec::new();
        for (pname, shape) in spec.param_shapes() {
            let value = if is_norm {
                Tensor::new(&shape, if pname == "weight" { T::one() } else { T::zero() })?
            } else {
                Tensor::rand_uniform(&shape, -bound, bound, rng)?
            };
            params.push(Param::new(format!("{name}.{pname}"), value)?);
        }
        let mut buffers = Vec::new();
        for (bname, shape) in spec.buffer_shapes() {
            let fill = if bname == "running_var" { T::one() } else { T::zero() };
            buffers.push(Buffer { name: format!("{name}.{bname}"), value: Tensor::new(&shape, fill)? });
        }
        Ok(Layer { name, spec, params, buffers, cache: None })
    }

    /// Converts parameters, gradients and buffers to another precision.
    /// The forward cache is not carried over.
    pub fn cast<U: Scalar>(&self) -> Layer<U> {
        Layer {
            name: self.name.clone(),
            spec: self.spec.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param { name: p.name.clone(), value: p.value.cast(), grad: p.grad.cast() })
                .collect(),
            buffers: self.buffers.iter().map(|b| Buffer { name: b.name.clone(), value: b.value.cast() }).collect(),
            cache: None,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn spec(&self) -> &LayerSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[Buffer<T>] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [Buffer<T>] {
        &mut self.buffers
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(T::zero());
        }
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }

    pub fn has_cache(&self) -> bool {
        self.cache.is_some()
    }

    pub fn forward(&mut self, input: &Tensor<T>, ctx: &mut ForwardCtx<'_>) -> Result<Tensor<T>> {
        self.forward_impl(input, ctx)
            .map_err(|e| e.context(format!("layer '{}' ({})", self.name, self.spec.kind_name())))
    }

    fn forward_impl(&mut self, input: &Tensor<T>, ctx: &mut ForwardCtx<'_>) -> Result<Tensor<T>> {
        self.cache = None;
        let (out, cache) = match &self.spec {
            LayerSpec::Conv3d(c) => {
                let out = conv::conv3d_forward(input, &self.params[0].value, &self.params[1].value, c)?;
                (out, Cache::Input(input.clone()))
            }
            LayerSpec::Batchnorm3d { channels } => {
                let [gamma, beta] = [&self.params[0].value, &self.params[1].value];
                let (rm, rest) = self.buffers.split_at_mut(1);
                let (out, nc) = norm::batchnorm_forward(
                    input,
                    gamma,
                    beta,
                    &mut rm[0].value,
                    &mut rest[0].value,
                    *channels,
                    ctx.training,
                )?;
                (out, Cache::Norm(nc))
            }
            LayerSpec::LayernormCh { channels } => {
                let (out, nc) = norm::layernorm_forward(
                    input,
                    &self.params[0].value,
                    &self.params[1].value,
                    *channels,
                )?;
                (out, Cache::Norm(nc))
            }
            LayerSpec::Relu => {
                (input.map(|x| if x > T::zero() || x.is_nan() { x } else { T::zero() }), Cache::Input(input.clone()))
            }
            LayerSpec::Gelu => (input.map(gelu), Cache::Input(input.clone())),
            LayerSpec::Sigmoid => {
                let out = input.map(sigmoid);
                (out.clone(), Cache::Output(out))
            }
            LayerSpec::Dropout { rate } => {
                if ctx.training {
                    let (out, mask) = activation::dropout_forward(input, *rate, ctx.rng)?;
                    (out, Cache::Mask(mask))
                } else {
                    (input.clone(), Cache::Identity)
                }
            }
            LayerSpec::Linear { in_features, out_features } => {
                let out = linear::linear_forward(
                    input,
                    &self.params[0].value,
                    &self.params[1].value,
                    *in_features,
                    *out_features,
                )?;
                (out, Cache::Input(input.clone()))
            }
            LayerSpec::GlobalMaxPool => {
                let (out, argmax) = pool::global_max_pool(input)?;
                (out, Cache::MaxPool { in_shape: input.shape().to_vec(), argmax })
            }
            LayerSpec::GlobalAvgPool => {
                let out = pool::global_avg_pool(input)?;
                (out, Cache::AvgPool { in_shape: input.shape().to_vec() })
            }
        };
        if ctx.keep_cache {
            self.cache = Some(cache);
        }
        Ok(out)
    }

    /// Backpropagates `grad_out` through the last cached forward call.
    ///
    /// Parameter gradients are accumulated into each [`Param::grad`]; the
    /// gradient with respect to the layer input is returned.
    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        self.backward_impl(grad_out)
            .map_err(|e| e.context(format!("layer '{}' ({}) backward", self.name, self.spec.kind_name())))
    }

    fn backward_impl(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::State("backward called without a cached forward pass".into()))?;
        let grad_in = match (&self.spec, &cache) {
            (LayerSpec::Conv3d(c), Cache::Input(x)) => {
                let (w, rest) = self.params.split_at_mut(1);
                conv::conv3d_backward(x, &w[0].value, grad_out, c, &mut w[0].grad, &mut rest[0].grad)?
            }
            (LayerSpec::Batchnorm3d { .. }, Cache::Norm(nc))
            | (LayerSpec::LayernormCh { .. }, Cache::Norm(nc)) => {
                let (g, rest) = self.params.split_at_mut(1);
                norm::norm_backward(nc, &g[0].value, grad_out, &mut g[0].grad, &mut rest[0].grad)?
            }
            (LayerSpec::Relu, Cache::Input(x)) => {
                check_same(x, grad_out)?;
                let data = x
                    .data()
                    .iter()
                    .zip(grad_out.data())
                    .map(|(&xi, &g)| if xi > T::zero() { g } else { T::zero() })
                    .collect();
                Tensor::from_vec(x.shape(), data)?
            }
            (LayerSpec::Gelu, Cache::Input(x)) => {
                check_same(x, grad_out)?;
                let data = x
                    .data()
                    .iter()
                    .zip(grad_out.data())
                    .map(|(&xi, &g)| g * activation::gelu_derivative(xi))
                    .collect();
                Tensor::from_vec(x.shape(), data)?
            }
            (LayerSpec::Sigmoid, Cache::Output(y)) => {
                check_same(y, grad_out)?;
                let data = y
                    .data()
                    .iter()
                    .zip(grad_out.data())
                    .map(|(&s, &g)| g * s * (T::one() - s))
                    .collect();
                Tensor::from_vec(y.shape(), data)?
            }
            (LayerSpec::Dropout { .. }, Cache::Mask(mask)) => {
                if mask.len() != grad_out.len() {
                    return Err(Error::Shape("dropout gradient size differs from mask".into()));
                }
                let data = grad_out.data().iter().zip(mask).map(|(&g, &m)| g * m).collect();
                Tensor::from_vec(grad_out.shape(), data)?
            }
            (LayerSpec::Dropout { .. }, Cache::Identity) => grad_out.clone(),
            (LayerSpec::Linear { .. }, Cache::Input(x)) => {
                let (w, rest) = self.params.split_at_mut(1);
                linear::linear_backward(x, &w[0].value, grad_out, &mut w[0].grad, &mut rest[0].grad)?
            }
            (LayerSpec::GlobalMaxPool, Cache::MaxPool { in_shape, argmax }) => {
                pool::global_max_pool_backward(in_shape, argmax, grad_out)?
            }
            (LayerSpec::GlobalAvgPool, Cache::AvgPool { in_shape }) => {
                pool::global_avg_pool_backward(in_shape, grad_out)?
            }
            _ => return Err(Error::State("forward cache does not match layer kind".into())),
        };
        Ok(grad_in)
    }
}

fn check_same<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "gradient shape {:?} does not match forward shape {:?}",
            b.shape(),
            a.shape()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests;
