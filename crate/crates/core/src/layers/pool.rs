use super::{Layer, Mode};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Mean over the spatial axes: `(N, C, H, W) → (N, C, 1, 1)`.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let inv = T::from_f64(1.0 / (h * w) as f64);
    let plane = h * w;
    let data = x
        .data()
        .chunks(plane.max(1))
        .take(n * c)
        .map(|p| p.iter().copied().sum::<T>() * inv)
        .collect();
    Tensor::from_vec([n, c, 1, 1], data).expect("pooled shape")
}

pub fn global_avg_pool_backward<T: Scalar>(g: &Tensor<T>, input_shape: [usize; 4]) -> Result<Tensor<T>> {
    let [n, c, h, w] = input_shape;
    if g.shape() != [n, c, 1, 1] {
        return Err(Error::shape(
            "global_avg_pool_backward",
            format!("grad {:?} for input {input_shape:?}", g.shape()),
        ));
    }
    let inv = T::from_f64(1.0 / (h * w) as f64);
    Ok(Tensor::from_fn(input_shape, |ni, ci, _, _| g.at(ni, ci, 0, 0) * inv))
}

#[derive(Clone, Debug, Default)]
pub struct GlobalAvgPool {
    input_shape: Option<[usize; 4]>,
}

impl<T: Scalar> Layer<T> for GlobalAvgPool {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        self.input_shape = (mode == Mode::Train).then(|| x.shape());
        Ok(global_avg_pool(x))
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let shape = self.input_shape.ok_or(Error::NoForwardCache("global_avg_pool"))?;
        global_avg_pool_backward(grad, shape)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_difference, relative_error};
    use crate::rng::Rng;

    #[test]
    fn mean_of_ones() {
        let y = global_avg_pool(&Tensor::full([2, 3, 4, 4], 1.0f32));
        assert_eq!(y.shape(), [2, 3, 1, 1]);
        assert!(y.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn single_pixel_is_identity() {
        let x = Tensor::from_vec([1, 2, 1, 1], vec![3.0f32, -1.0]).unwrap();
        assert_eq!(global_avg_pool(&x), x);
    }

    #[test]
    fn gradcheck() {
        let mut rng = Rng::new(2);
        for shape in [[1, 1, 3, 3], [2, 3, 4, 2], [2, 2, 8, 8]] {
            let x = Tensor::<f64>::randn(shape, 1.0, &mut rng);
            let probe = Tensor::<f64>::randn([shape[0], shape[1], 1, 1], 1.0, &mut rng);
            let g = global_avg_pool_backward(&probe, shape).unwrap();
            let num = central_difference(&x, 1e-6, |xp| {
                global_avg_pool(xp).data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
            });
            assert!(relative_error(g.data(), num.data()) < 1e-5);
        }
    }
}
