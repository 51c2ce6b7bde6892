use super::{Layer, Mode, Param, ParamKind};
use crate::error::{Error, Result};
use crate::hexconv::{
    hexconv_backward, hexconv_forward_fast, subsample2, subsample2_backward, HexKernelWeights,
};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

/// Size-1 hexagonal convolution, optionally followed by stride-2
/// subsampling. Holds 7 trainable weights per channel pair, split over the
/// side and column sub-kernels.
#[derive(Clone, Debug)]
pub struct HexConv2d<T> {
    pub side: Param<T>,
    pub column: Param<T>,
    pub bias: Option<Param<T>>,
    pub stride: usize,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> HexConv2d<T> {
    pub fn new(in_channels: usize, out_channels: usize, stride: usize, bias: bool, rng: &mut Rng) -> Result<Self> {
        let w = HexKernelWeights::<T>::kaiming(out_channels, in_channels, rng);
        Self::from_weights(w, stride, bias)
    }

    pub fn from_weights(w: HexKernelWeights<T>, stride: usize, bias: bool) -> Result<Self> {
        if !(stride == 1 || stride == 2) {
            return Err(Error::InvalidConfig(format!("hex conv stride must be 1 or 2, got {stride}")));
        }
        let out = w.out_channels();
        Ok(Self {
            side: Param::new(w.side, ParamKind::Weight),
            column: Param::new(w.column, ParamKind::Weight),
            bias: bias.then(|| Param::new(Tensor::zeros([1, out, 1, 1]), ParamKind::Bias)),
            stride,
            input: None,
        })
    }

    pub fn weights(&self) -> HexKernelWeights<T> {
        HexKernelWeights {
            side: self.side.value.clone(),
            column: self.column.value.clone(),
        }
    }

    pub fn set_weights(&mut self, w: HexKernelWeights<T>) -> Result<()> {
        if w.side.shape() != self.side.value.shape() || w.column.shape() != self.column.value.shape() {
            return Err(Error::shape("set_weights", "hex kernel shape changed"));
        }
        self.side.value = w.side;
        self.column.value = w.column;
        Ok(())
    }

    fn run(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let w = HexKernelWeights {
            side: self.side.value.clone(),
            column: self.column.value.clone(),
        };
        let y = hexconv_forward_fast(x, &w, self.bias.as_ref().map(|b| b.value.data()))?;
        Ok(if self.stride == 2 { subsample2(&y) } else { y })
    }
}

impl<T: Scalar> Layer<T> for HexConv2d<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let y = self.run(x)?;
        self.input = (mode == Mode::Train).then(|| x.clone());
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.input.as_ref().ok_or(Error::NoForwardCache("hexconv"))?;
        let [n, _, h, w] = x.shape();
        let full = if self.stride == 2 {
            subsample2_backward(grad, [n, self.side.value.shape()[0], h, w])?
        } else {
            grad.clone()
        };
        let g = hexconv_backward(&full, x, &self.weights())?;
        self.side.accumulate(&g.weights.side)?;
        self.column.accumulate(&g.weights.column)?;
        if let Some(b) = self.bias.as_mut() {
            b.accumulate(&Tensor::from_vec(b.value.shape(), g.bias)?)?;
        }
        Ok(g.input)
    }

    fn params(&self) -> Vec<(&'static str, &Param<T>)> {
        let mut p = vec![("side", &self.side), ("column", &self.column)];
        if let Some(b) = &self.bias {
            p.push(("bias", b));
        }
        p
    }

    fn params_mut(&mut self) -> Vec<(&'static str, &mut Param<T>)> {
        let mut p = vec![("side", &mut self.side), ("column", &mut self.column)];
        if let Some(b) = &mut self.bias {
            p.push(("bias", b));
        }
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_difference, relative_error};

    #[test]
    fn strided_layer_gradcheck() {
        let mut rng = Rng::new(3);
        let mut layer = HexConv2d::<f64>::new(2, 3, 2, true, &mut rng).unwrap();
        let x = Tensor::<f64>::randn([2, 2, 5, 6], 1.0, &mut rng);
        let y = layer.forward(&x, Mode::Train).unwrap();
        assert_eq!(y.shape(), [2, 3, 3, 3]);
        let probe = Tensor::<f64>::randn(y.shape(), 1.0, &mut rng);
        let gx = layer.backward(&probe).unwrap();
        let dot = |t: &Tensor<f64>| t.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum::<f64>();
        let num = central_difference(&x, 1e-6, |xp| dot(&layer.run(xp).unwrap()));
        assert!(relative_error(gx.data(), num.data()) < 1e-6);
        let mut probe_layer = layer.clone();
        let num_side = central_difference(&layer.side.value, 1e-6, |s| {
            probe_layer.side.value = s.clone();
            dot(&probe_layer.run(&x).unwrap())
        });
        assert!(relative_error(layer.side.grad.data(), num_side.data()) < 1e-6);
    }

    #[test]
    fn seven_weights_per_pair() {
        let layer = HexConv2d::<f32>::new(16, 32, 2, false, &mut Rng::new(0)).unwrap();
        let total: usize = layer.params().iter().map(|(_, p)| p.value.len()).sum();
        assert_eq!(total, 7 * 16 * 32);
    }
}
