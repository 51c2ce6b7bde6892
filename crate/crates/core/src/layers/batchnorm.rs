//! Per-channel batch normalization over (N, H, W).

use super::{Layer, Mode, Param, ParamKind};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPSILON: f64 = 1e-5;

struct Cache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<f64>,
}

/// Scale `gamma`, shift `beta`, and running statistics. Running variance is
/// tracked with the unbiased batch estimate.
pub struct BatchNorm2d<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: f64,
    pub eps: f64,
    cache: Option<Cache<T>>,
}

impl<T: Scalar> Clone for BatchNorm2d<T> {
    fn clone(&self) -> Self {
        Self {
            gamma: self.gamma.clone(),
            beta: self.beta.clone(),
            running_mean: self.running_mean.clone(),
            running_var: self.running_var.clone(),
            momentum: self.momentum,
            eps: self.eps,
            cache: None,
        }
    }
}

impl<T: Scalar> std::fmt::Debug for BatchNorm2d<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BatchNorm2d")
            .field("channels", &self.channels())
            .field("momentum", &self.momentum)
            .field("eps", &self.eps)
            .finish()
    }
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        let shape = [1, channels, 1, 1];
        Self {
            gamma: Param::new(Tensor::full(shape, T::one()), ParamKind::Norm),
            beta: Param::new(Tensor::zeros(shape), ParamKind::Norm),
            running_mean: Tensor::zeros(shape),
            running_var: Tensor::full(shape, T::one()),
            momentum: BN_MOMENTUM,
            eps: BN_EPSILON,
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.value.len()
    }
}

/// Train mode normalizes with batch statistics and updates the running
/// estimates; eval mode uses the running estimates only.
pub fn batchnorm_forward<T: Scalar>(x: &Tensor<T>, bn: &mut BatchNorm2d<T>, mode: Mode) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.shape();
    if c != bn.channels() {
        return Err(Error::shape(
            "batchnorm_forward",
            format!("input has {c} channels, layer has {}", bn.channels()),
        ));
    }
    let plane = h * w;
    let count = n * plane;
    let mut mean = vec![0.0f64; c];
    let mut inv_std = vec![0.0f64; c];
    match mode {
        Mode::Train => {
            if count == 0 {
                return Err(Error::shape("batchnorm_forward", "empty batch"));
            }
            for ci in 0..c {
                let values = || (0..n).flat_map(move |ni| x.item(ni)[ci * plane..(ci + 1) * plane].iter());
                let mu = values().map(|v| v.as_f64()).sum::<f64>() / count as f64;
                let var = values().map(|v| (v.as_f64() - mu).powi(2)).sum::<f64>() / count as f64;
                mean[ci] = mu;
                inv_std[ci] = 1.0 / (var + bn.eps).sqrt();
                let unbiased = if count > 1 { var * count as f64 / (count - 1) as f64 } else { var };
                let m = bn.momentum;
                let rm = &mut bn.running_mean.data_mut()[ci];
                *rm = T::from_f64((1.0 - m) * rm.as_f64() + m * mu);
                let rv = &mut bn.running_var.data_mut()[ci];
                *rv = T::from_f64((1.0 - m) * rv.as_f64() + m * unbiased);
            }
        }
        Mode::Eval => {
            for ci in 0..c {
                mean[ci] = bn.running_mean.data()[ci].as_f64();
                inv_std[ci] = 1.0 / (bn.running_var.data()[ci].as_f64() + bn.eps).sqrt();
            }
        }
    }

    let mut xhat = Tensor::zeros(x.shape());
    let mut y = Tensor::zeros(x.shape());
    for (k, ((src, xh), dst)) in x
        .data()
        .chunks(plane.max(1))
        .zip(xhat.data_mut().chunks_mut(plane.max(1)))
        .zip(y.data_mut().chunks_mut(plane.max(1)))
        .enumerate()
    {
        let ci = k % c;
        let (mu, is) = (mean[ci], inv_std[ci]);
        let (g, b) = (bn.gamma.value.data()[ci], bn.beta.value.data()[ci]);
        for ((s, xv), d) in src.iter().zip(xh.iter_mut()).zip(dst.iter_mut()) {
            *xv = T::from_f64((s.as_f64() - mu) * is);
            *d = g * *xv + b;
        }
    }
    bn.cache = match mode {
        Mode::Train => Some(Cache { xhat, inv_std }),
        Mode::Eval => None,
    };
    Ok(y)
}

impl<T: Scalar> Layer<T> for BatchNorm2d<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        batchnorm_forward(x, self, mode)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self.cache.as_ref().ok_or(Error::NoForwardCache("batchnorm"))?;
        let xhat = &cache.xhat;
        if grad.shape() != xhat.shape() {
            return Err(Error::shape(
                "batchnorm_backward",
                format!("grad {:?} vs input {:?}", grad.shape(), xhat.shape()),
            ));
        }
        let [n, c, h, w] = grad.shape();
        let plane = h * w;
        let count = (n * plane) as f64;
        let mut sum_g = vec![0.0f64; c];
        let mut sum_gx = vec![0.0f64; c];
        for (k, (gp, xp)) in grad.data().chunks(plane).zip(xhat.data().chunks(plane)).enumerate() {
            let ci = k % c;
            for (&g, &xv) in gp.iter().zip(xp) {
                sum_g[ci] += g.as_f64();
                sum_gx[ci] += g.as_f64() * xv.as_f64();
            }
        }
        let mut dx = Tensor::zeros(grad.shape());
        for (k, ((gp, xp), dp)) in grad
            .data()
            .chunks(plane)
            .zip(xhat.data().chunks(plane))
            .zip(dx.data_mut().chunks_mut(plane))
            .enumerate()
        {
            let ci = k % c;
            let gamma = self.gamma.value.data()[ci].as_f64();
            let scale = gamma * cache.inv_std[ci] / count;
            let (sg, sgx) = (sum_g[ci], sum_gx[ci]);
            for ((&g, &xv), d) in gp.iter().zip(xp).zip(dp.iter_mut()) {
                *d = T::from_f64(scale * (count * g.as_f64() - sg - xv.as_f64() * sgx));
            }
        }
        for ci in 0..c {
            self.gamma.grad.data_mut()[ci] += T::from_f64(sum_gx[ci]);
            self.beta.grad.data_mut()[ci] += T::from_f64(sum_g[ci]);
        }
        Ok(dx)
    }

    fn params(&self) -> Vec<(&'static str, &Param<T>)> {
        vec![("gamma", &self.gamma), ("beta", &self.beta)]
    }

    fn params_mut(&mut self) -> Vec<(&'static str, &mut Param<T>)> {
        vec![("gamma", &mut self.gamma), ("beta", &mut self.beta)]
    }

    fn buffers(&self) -> Vec<(&'static str, &Tensor<T>)> {
        vec![("running_mean", &self.running_mean), ("running_var", &self.running_var)]
    }

    fn buffers_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        vec![("running_mean", &mut self.running_mean), ("running_var", &mut self.running_var)]
    }
}
