use super::{Param, ParamKind};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Classical momentum SGD with the L2 term folded into the gradient:
///
/// ```text
/// v ← μ·v + (g + λ·w)
/// w ← w − η·v
/// ```
#[derive(Clone, Debug)]
pub struct SgdState<T> {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Apply weight decay to batch-norm scale and shift as well.
    pub decay_norm: bool,
    /// One per parameter, in visitation order. Allocated on the first step.
    pub velocities: Vec<Tensor<T>>,
}

impl<T: Scalar> SgdState<T> {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64, decay_norm: bool) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            decay_norm,
            velocities: Vec::new(),
        }
    }
}

pub fn sgd_step<T: Scalar>(params: &mut [&mut Param<T>], state: &mut SgdState<T>) -> Result<()> {
    if state.velocities.is_empty() {
        state.velocities = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
    }
    if state.velocities.len() != params.len() {
        return Err(Error::shape(
            "sgd_step",
            format!("{} velocities for {} parameters", state.velocities.len(), params.len()),
        ));
    }
    let lr = T::from_f64(state.lr);
    let mu = T::from_f64(state.momentum);
    for (p, v) in params.iter_mut().zip(state.velocities.iter_mut()) {
        if v.shape() != p.value.shape() {
            return Err(Error::shape("sgd_step", format!("velocity {:?} vs {:?}", v.shape(), p.value.shape())));
        }
        let decay = match p.kind {
            ParamKind::Norm if !state.decay_norm => T::zero(),
            _ => T::from_f64(state.weight_decay),
        };
        for ((w, &g), vel) in p.value.data_mut().iter_mut().zip(p.grad.data()).zip(v.data_mut()) {
            *vel = mu * *vel + (g + decay * *w);
            *w -= lr * *vel;
        }
    }
    Ok(())
}
