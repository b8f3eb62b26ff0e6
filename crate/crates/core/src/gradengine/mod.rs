//! Minimal differentiable-tensor substrate: NHWC tensors, 3×3 same-padding
//! convolution, leaky-ReLU, tanh, inverted dropout, reverse-mode gradients,
//! Adam and staircase learning-rate schedules.

mod checkpoint;
mod conv;
mod graph;
mod optim;
mod scalar;
mod tensor;

pub use checkpoint::{read_checkpoint, write_checkpoint, ArraySpec, Checkpoint, RngState, CHECKPOINT_MAGIC};
pub use conv::{conv2d_backward, conv2d_forward};
pub use graph::{code_correlation_matrix, weighted_sq_distance, Graph, Grads, NodeId, Param, ParamId, ParamSet};
pub use optim::{AdamConfig, AdamState, LrSchedule};
pub use scalar::Scalar;
pub use tensor::Tensor4;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GradError {
    #[error("layer expects {expected} input channels, got {got}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("backward called on a node that was never recorded")]
    NoForward,
    #[error("dropout rate must lie in [0, 1), got {0}")]
    InvalidDropout(f64),
    #[error("non-finite gradient in {param} at index {index}")]
    NonFiniteGradient { param: String, index: usize },
    #[error("learning rate must be positive, got {0}")]
    InvalidLearningRate(f64),
    #[error("invalid schedule: base {base_rate}, decay {decay_rate} every {decay_every}")]
    InvalidSchedule {
        base_rate: f64,
        decay_rate: f64,
        decay_every: u32,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    LeakyRelu,
    Tanh,
    None,
}

/// Parameters of one 3×3 convolution inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvLayer {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub activation: Activation,
}

impl ConvLayer {
    /// Registers a Glorot-uniform kernel and zero bias.
    pub fn init<T: Scalar, R: Rng + ?Sized>(
        params: &mut ParamSet<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let fan_in = 9 * c_in;
        let fan_out = 9 * c_out;
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let kernel = Tensor4::from_vec(
            [3, 3, c_in, c_out],
            (0..9 * c_in * c_out)
                .map(|_| T::from_f64_lossy(rng.gen_range(-limit..limit)))
                .collect(),
        );
        let kernel = params.add(format!("{name}.kernel"), kernel);
        let bias = params.add(format!("{name}.bias"), Tensor4::zeros([1, 1, 1, c_out]));
        Self {
            kernel,
            bias,
            activation,
        }
    }

    pub fn in_channels<T: Scalar>(&self, params: &ParamSet<T>) -> usize {
        params.get(self.kernel).shape()[2]
    }

    pub fn out_channels<T: Scalar>(&self, params: &ParamSet<T>) -> usize {
        params.get(self.kernel).shape()[3]
    }
}

/// Convolution followed by the layer's activation, without recording.
pub fn conv2d<T: Scalar>(
    input: &Tensor4<T>,
    layer: &ConvLayer,
    params: &ParamSet<T>,
    slope: T,
) -> Result<Tensor4<T>, GradError> {
    let kernel = params.get(layer.kernel);
    if kernel.shape()[2] != input.channels() {
        return Err(GradError::ChannelMismatch {
            expected: kernel.shape()[2],
            got: input.channels(),
        });
    }
    let pre = conv2d_forward(input, kernel, params.get(layer.bias).data());
    Ok(match layer.activation {
        Activation::LeakyRelu => leaky_relu(&pre, slope),
        Activation::Tanh => tanh_act(&pre),
        Activation::None => pre,
    })
}

pub fn leaky_relu<T: Scalar>(x: &Tensor4<T>, slope: T) -> Tensor4<T> {
    x.map(|v| if v >= T::zero() { v } else { slope * v })
}

pub fn tanh_act<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    x.map(T::tanh)
}

/// Inverted dropout outside a graph.
pub fn dropout<T: Scalar, R: Rng + ?Sized>(
    x: &Tensor4<T>,
    rate: f64,
    training: bool,
    rng: &mut R,
) -> Result<Tensor4<T>, GradError> {
    if !(0.0..1.0).contains(&rate) {
        return Err(GradError::InvalidDropout(rate));
    }
    if !training || rate == 0.0 {
        return Ok(x.clone());
    }
    let scale = T::from_f64_lossy(1.0 / (1.0 - rate));
    let data = x
        .data()
        .iter()
        .map(|&v| if rng.gen::<f64>() < rate { T::zero() } else { v * scale })
        .collect();
    Ok(Tensor4::from_vec(x.shape(), data))
}

#[cfg(test)]
mod gradcheck_tests;
