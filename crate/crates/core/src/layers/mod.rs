//! Trainable layers with an explicit forward/backward contract.
//!
//! A layer caches whatever its backward pass needs during a train-mode
//! forward. Eval-mode forwards clear the cache, so a backward must always
//! follow a train-mode forward.

mod activation;
mod batchnorm;
mod conv;
mod hexconv;
mod linear;
mod loss;
mod pool;
mod sgd;

pub use activation::{relu, relu_backward, Relu};
pub use batchnorm::{batchnorm_forward, BatchNorm2d, BN_EPSILON, BN_MOMENTUM};
pub use conv::Conv2d;
pub use hexconv::HexConv2d;
pub use linear::{linear_backward, linear_forward, Linear, LinearGrads};
pub use loss::softmax_cross_entropy;
pub use pool::{global_avg_pool, global_avg_pool_backward, GlobalAvgPool};
pub use sgd::{sgd_step, SgdState};

use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Distinguishes parameters for the weight-decay switch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    /// Batch-norm scale and shift.
    Norm,
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub kind: ParamKind,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Tensor<T>, kind: ParamKind) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self { value, grad, kind }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().fill(T::zero());
    }

    pub(crate) fn accumulate(&mut self, g: &Tensor<T>) -> Result<()> {
        self.grad.add_assign(g)
    }
}

pub trait Layer<T: Scalar> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>>;

    /// Returns the gradient w.r.t. the layer input and accumulates parameter
    /// gradients into each [`Param::grad`].
    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>>;

    fn params(&self) -> Vec<(&'static str, &Param<T>)> {
        Vec::new()
    }

    fn params_mut(&mut self) -> Vec<(&'static str, &mut Param<T>)> {
        Vec::new()
    }

    /// Non-trainable state saved with the model.
    fn buffers(&self) -> Vec<(&'static str, &Tensor<T>)> {
        Vec::new()
    }

    fn buffers_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        Vec::new()
    }
}
