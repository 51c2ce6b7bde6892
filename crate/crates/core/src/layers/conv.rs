use super::{Layer, Mode, Param, ParamKind};
use crate::conv::{conv2d_backward, conv2d_forward, ConvSpec};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{kaiming_init, Scalar, Tensor};

/// Square-lattice convolution layer.
#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    pub spec: ConvSpec,
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(spec: ConvSpec, rng: &mut Rng) -> Result<Self> {
        let fan_in = spec.in_channels * spec.kernel.0 * spec.kernel.1;
        let weight = Param::new(kaiming_init(rng, spec.weight_shape(), fan_in)?, ParamKind::Weight);
        let bias = spec
            .bias
            .then(|| Param::new(Tensor::zeros([1, spec.out_channels, 1, 1]), ParamKind::Bias));
        Ok(Self {
            spec,
            weight,
            bias,
            input: None,
        })
    }
}

impl<T: Scalar> Layer<T> for Conv2d<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let y = conv2d_forward(
            x,
            &self.weight.value,
            self.bias.as_ref().map(|b| b.value.data()),
            &self.spec,
        )?;
        self.input = (mode == Mode::Train).then(|| x.clone());
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.input.as_ref().ok_or(Error::NoForwardCache("conv2d"))?;
        let g = conv2d_backward(grad, x, &self.weight.value, &self.spec)?;
        self.weight.accumulate(&g.weights)?;
        if let Some(b) = self.bias.as_mut() {
            b.accumulate(&Tensor::from_vec(b.value.shape(), g.bias)?)?;
        }
        Ok(g.input)
    }

    fn params(&self) -> Vec<(&'static str, &Param<T>)> {
        let mut p = vec![("weight", &self.weight)];
        if let Some(b) = &self.bias {
            p.push(("bias", b));
        }
        p
    }

    fn params_mut(&mut self) -> Vec<(&'static str, &mut Param<T>)> {
        let mut p = vec![("weight", &mut self.weight)];
        if let Some(b) = &mut self.bias {
            p.push(("bias", b));
        }
        p
    }
}
