use super::{Layer, Mode, Param, ParamKind};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{kaiming_init, Scalar, Tensor};

/// Affine map on flattened features. Weights are stored `(out, in, 1, 1)`;
/// inputs of shape `(N, C, H, W)` are read as `N` rows of `C·H·W`.
pub fn linear_forward<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: &[T]) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.shape();
    let features = c * h * w;
    let [out, inp, _, _] = weight.shape();
    if inp != features || bias.len() != out {
        return Err(Error::shape(
            "linear_forward",
            format!("input {:?}, weight {:?}, bias {}", x.shape(), weight.shape(), bias.len()),
        ));
    }
    let mut y = Tensor::zeros([n, out, 1, 1]);
    T::gemm(n, out, inp, x.data(), false, weight.data(), true, y.data_mut(), false);
    for row in y.data_mut().chunks_mut(out.max(1)) {
        for (v, &b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
    Ok(y)
}

#[derive(Clone, Debug)]
pub struct LinearGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Vec<T>,
}

pub fn linear_backward<T: Scalar>(g: &Tensor<T>, x: &Tensor<T>, weight: &Tensor<T>) -> Result<LinearGrads<T>> {
    let n = x.shape()[0];
    let [out, inp, _, _] = weight.shape();
    if g.shape() != [n, out, 1, 1] {
        return Err(Error::shape("linear_backward", format!("grad {:?}", g.shape())));
    }
    let mut dx = Tensor::zeros(x.shape());
    T::gemm(n, inp, out, g.data(), false, weight.data(), false, dx.data_mut(), false);
    let mut dw = Tensor::zeros(weight.shape());
    T::gemm(out, inp, n, g.data(), true, x.data(), false, dw.data_mut(), false);
    let mut db = vec![T::zero(); out];
    for row in g.data().chunks(out.max(1)) {
        for (acc, &v) in db.iter_mut().zip(row) {
            *acc += v;
        }
    }
    Ok(LinearGrads {
        input: dx,
        weight: dw,
        bias: db,
    })
}

#[derive(Clone, Debug)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(in_features: usize, out_features: usize, rng: &mut Rng) -> Result<Self> {
        let w = kaiming_init(rng, [out_features, in_features, 1, 1], in_features)?;
        Ok(Self {
            weight: Param::new(w, ParamKind::Weight),
            bias: Param::new(Tensor::zeros([1, out_features, 1, 1]), ParamKind::Bias),
            input: None,
        })
    }
}

impl<T: Scalar> Layer<T> for Linear<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let y = linear_forward(x, &self.weight.value, self.bias.value.data())?;
        self.input = (mode == Mode::Train).then(|| x.clone());
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.input.as_ref().ok_or(Error::NoForwardCache("linear"))?;
        let g = linear_backward(grad, x, &self.weight.value)?;
        self.weight.accumulate(&g.weight)?;
        self.bias.accumulate(&Tensor::from_vec(self.bias.value.shape(), g.bias)?)?;
        Ok(g.input)
    }

    fn params(&self) -> Vec<(&'static str, &Param<T>)> {
        vec![("weight", &self.weight), ("bias", &self.bias)]
    }

    fn params_mut(&mut self) -> Vec<(&'static str, &mut Param<T>)> {
        vec![("weight", &mut self.weight), ("bias", &mut self.bias)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_difference, relative_error};

    #[test]
    fn identity_passthrough() {
        let x = Tensor::from_vec([2, 3, 1, 1], vec![1.0f32, 2.0, 3.0, -1.0, 0.5, 4.0]).unwrap();
        let eye = Tensor::from_fn([3, 3, 1, 1], |o, i, _, _| if o == i { 1.0 } else { 0.0 });
        assert_eq!(linear_forward(&x, &eye, &[0.0; 3]).unwrap(), x);
    }

    #[test]
    fn zero_weights_broadcast_bias() {
        let x = Tensor::<f32>::full([3, 4, 1, 1], 2.0);
        let y = linear_forward(&x, &Tensor::zeros([2, 4, 1, 1]), &[0.5, -1.0]).unwrap();
        assert_eq!(y.data(), &[0.5, -1.0, 0.5, -1.0, 0.5, -1.0]);
    }

    #[test]
    fn gradcheck() {
        let mut rng = Rng::new(4);
        for (n, inp, out) in [(1, 3, 2), (4, 8, 5), (3, 16, 10)] {
            let x = Tensor::<f64>::randn([n, inp, 1, 1], 1.0, &mut rng);
            let w = Tensor::<f64>::randn([out, inp, 1, 1], 1.0, &mut rng);
            let b: Vec<f64> = (0..out).map(|_| rng.normal()).collect();
            let probe = Tensor::<f64>::randn([n, out, 1, 1], 1.0, &mut rng);
            let dot = |t: &Tensor<f64>| t.data().iter().zip(probe.data()).map(|(a, p)| a * p).sum::<f64>();
            let g = linear_backward(&probe, &x, &w).unwrap();
            let nx = central_difference(&x, 1e-6, |xp| dot(&linear_forward(xp, &w, &b).unwrap()));
            let nw = central_difference(&w, 1e-6, |wp| dot(&linear_forward(&x, wp, &b).unwrap()));
            let bt = Tensor::from_vec([1, 1, 1, out], b.clone()).unwrap();
            let nb = central_difference(&bt, 1e-6, |bp| dot(&linear_forward(&x, &w, bp.data()).unwrap()));
            assert!(relative_error(g.input.data(), nx.data()) < 1e-5);
            assert!(relative_error(g.weight.data(), nw.data()) < 1e-5);
            assert!(relative_error(&g.bias, nb.data()) < 1e-5);
        }
    }
}
