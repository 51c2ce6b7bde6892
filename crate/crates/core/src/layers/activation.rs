use super::{Layer, Mode};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient gated by `x > 0`; the gradient at exactly zero is zero.
pub fn relu_backward<T: Scalar>(g: &Tensor<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    if g.shape() != x.shape() {
        return Err(Error::shape("relu_backward", format!("{:?} vs {:?}", g.shape(), x.shape())));
    }
    let data = g
        .data()
        .iter()
        .zip(x.data())
        .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
        .collect();
    Tensor::from_vec(g.shape(), data)
}

#[derive(Clone, Debug, Default)]
pub struct Relu<T> {
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Relu<T> {
    pub fn new() -> Self {
        Self { input: None }
    }
}

impl<T: Scalar> Layer<T> for Relu<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        self.input = (mode == Mode::Train).then(|| x.clone());
        Ok(relu(x))
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.input.as_ref().ok_or(Error::NoForwardCache("relu"))?;
        relu_backward(grad, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_difference, relative_error};
    use crate::rng::Rng;

    #[test]
    fn clamps_negatives() {
        let x = Tensor::from_vec([1, 1, 1, 3], vec![-1.0f32, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let pos = Tensor::from_vec([1, 1, 1, 2], vec![0.5f32, 3.0]).unwrap();
        assert_eq!(relu(&pos), pos);
    }

    #[test]
    fn gradient_at_zero_is_zero() {
        let x = Tensor::from_vec([1, 1, 1, 3], vec![-1.0f32, 0.0, 2.0]).unwrap();
        let g = Tensor::full([1, 1, 1, 3], 1.0f32);
        assert_eq!(relu_backward(&g, &x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn gradcheck_away_from_kink() {
        let mut rng = Rng::new(1);
        for shape in [[1, 1, 3, 3], [2, 3, 4, 2], [3, 2, 1, 5]] {
            let x = Tensor::<f64>::randn(shape, 1.0, &mut rng).map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
            let probe = Tensor::<f64>::randn(shape, 1.0, &mut rng);
            let mut layer = Relu::new();
            layer.forward(&x, Mode::Train).unwrap();
            let g = layer.backward(&probe).unwrap();
            let num = central_difference(&x, 1e-6, |xp| {
                relu(xp).data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
            });
            assert!(relative_error(g.data(), num.data()) < 1e-5);
        }
    }

    #[test]
    fn backward_requires_train_forward() {
        let mut layer = Relu::<f32>::new();
        let x = Tensor::zeros([1, 1, 1, 1]);
        assert!(layer.backward(&x).is_err());
        layer.forward(&x, Mode::Eval).unwrap();
        assert!(layer.backward(&x).is_err());
    }
}
