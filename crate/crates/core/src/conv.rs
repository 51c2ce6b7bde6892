//! Strided, dilated 2-D cross-correlation with zero padding.
//!
//! Forward and backward are lowered to GEMM through an im2col buffer per
//! batch item. Batch items are processed in parallel; weight gradients are
//! reduced in batch order so results do not depend on the thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::hex::Padding;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: Padding,
    pub dilation: (usize, usize),
    pub in_channels: usize,
    pub out_channels: usize,
    pub bias: bool,
}

impl ConvSpec {
    /// Square `k × k` kernel, stride `s`, symmetric padding `p`, no bias.
    pub fn square(in_channels: usize, out_channels: usize, k: usize, s: usize, p: usize) -> Self {
        Self {
            kernel: (k, k),
            stride: (s, s),
            padding: Padding::uniform(p),
            dilation: (1, 1),
            in_channels,
            out_channels,
            bias: false,
        }
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel.0, self.kernel.1]
    }

    /// Output `(rows, cols)`; zero along an axis where the padded input is
    /// smaller than the dilated kernel.
    pub fn output_extent(&self, h: usize, w: usize) -> (usize, usize) {
        let axis = |x: usize, lo: usize, hi: usize, k: usize, d: usize, s: usize| {
            let span = d * (k - 1) + 1;
            let padded = x + lo + hi;
            if padded < span {
                0
            } else {
                (padded - span) / s + 1
            }
        };
        let p = self.padding;
        (
            axis(h, p.top, p.bottom, self.kernel.0, self.dilation.0, self.stride.0),
            axis(w, p.left, p.right, self.kernel.1, self.dilation.1, self.stride.1),
        )
    }

    fn validate(&self) -> Result<()> {
        let (kh, kw) = self.kernel;
        if kh == 0 || kw == 0 || self.stride.0 == 0 || self.stride.1 == 0 {
            return Err(Error::InvalidConfig(format!("degenerate conv spec {self:?}")));
        }
        if self.dilation.0 == 0 || self.dilation.1 == 0 {
            return Err(Error::InvalidConfig(format!("zero dilation in {self:?}")));
        }
        Ok(())
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == (1, 1) && self.stride == (1, 1) && self.padding == Padding::ZERO
    }
}

#[derive(Clone, Debug)]
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Vec<T>,
}

fn check_operands<T: Scalar>(
    op: &'static str,
    input: &Tensor<T>,
    weights: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<()> {
    spec.validate()?;
    if input.shape()[1] != spec.in_channels {
        return Err(Error::shape(
            op,
            format!("input has {} channels, spec expects {}", input.shape()[1], spec.in_channels),
        ));
    }
    if weights.shape() != spec.weight_shape() {
        return Err(Error::shape(
            op,
            format!("weights {:?}, spec expects {:?}", weights.shape(), spec.weight_shape()),
        ));
    }
    Ok(())
}

pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: Option<&[T]>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    check_operands("conv2d_forward", input, weights, spec)?;
    let [_, _, h, w] = input.shape();
    let (oh, ow) = spec.output_extent(h, w);
    if oh == 0 || ow == 0 {
        return Err(Error::shape(
            "conv2d_forward",
            format!("{h}x{w} input too small for {spec:?}"),
        ));
    }
    forward_unchecked(input, weights, bias, spec)
}

/// Like [`conv2d_forward`] but allows empty outputs. Used by the hexagonal
/// decomposition, where the odd-column branch is empty for width-1 inputs.
pub(crate) fn forward_unchecked<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: Option<&[T]>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    check_operands("conv2d_forward", input, weights, spec)?;
    if let Some(b) = bias {
        if b.len() != spec.out_channels {
            return Err(Error::shape(
                "conv2d_forward",
                format!("bias length {} for {} outputs", b.len(), spec.out_channels),
            ));
        }
    }
    let [n, c, h, w] = input.shape();
    let (oh, ow) = spec.output_extent(h, w);
    let o = spec.out_channels;
    let plane = oh * ow;
    let k = c * spec.kernel.0 * spec.kernel.1;
    let mut out = Tensor::zeros([n, o, oh, ow]);
    if out.is_empty() {
        return Ok(out);
    }
    out.data_mut()
        .par_chunks_mut(o * plane)
        .enumerate()
        .for_each(|(ni, dst)| {
            let x = input.item(ni);
            if spec.is_pointwise() {
                T::gemm(o, plane, k, weights.data(), false, x, false, dst, false);
            } else {
                let mut cols = vec![T::zero(); k * plane];
                im2col(x, c, h, w, spec, oh, ow, &mut cols);
                T::gemm(o, plane, k, weights.data(), false, &cols, false, dst, false);
            }
            if let Some(b) = bias {
                for (oc, row) in dst.chunks_mut(plane).enumerate() {
                    row.iter_mut().for_each(|v| *v += b[oc]);
                }
            }
        });
    Ok(out)
}

pub fn conv2d_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    weights: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<ConvGrads<T>> {
    check_operands("conv2d_backward", input, weights, spec)?;
    let [n, c, h, w] = input.shape();
    let (oh, ow) = spec.output_extent(h, w);
    let o = spec.out_channels;
    if grad_out.shape() != [n, o, oh, ow] {
        return Err(Error::shape(
            "conv2d_backward",
            format!("grad_out {:?}, forward output is {:?}", grad_out.shape(), [n, o, oh, ow]),
        ));
    }
    let plane = oh * ow;
    let k = c * spec.kernel.0 * spec.kernel.1;
    let mut grad_input = Tensor::zeros(input.shape());
    let mut grad_weights = Tensor::zeros(weights.shape());
    let mut grad_bias = vec![T::zero(); o];
    if plane == 0 || n == 0 {
        return Ok(ConvGrads {
            input: grad_input,
            weights: grad_weights,
            bias: grad_bias,
        });
    }

    let per_item: Vec<Vec<T>> = grad_input
        .data_mut()
        .par_chunks_mut(c * h * w)
        .enumerate()
        .map(|(ni, dx)| {
            let g = grad_out.item(ni);
            let x = input.item(ni);
            let mut dw = vec![T::zero(); o * k];
            if spec.is_pointwise() {
                T::gemm(k, plane, o, weights.data(), true, g, false, dx, false);
                T::gemm(o, k, plane, g, false, x, true, &mut dw, false);
            } else {
                let mut cols = vec![T::zero(); k * plane];
                T::gemm(k, plane, o, weights.data(), true, g, false, &mut cols, false);
                col2im(&cols, c, h, w, spec, oh, ow, dx);
                im2col(x, c, h, w, spec, oh, ow, &mut cols);
                T::gemm(o, k, plane, g, false, &cols, true, &mut dw, false);
            }
            dw
        })
        .collect();

    let gw = grad_weights.data_mut();
    for dw in &per_item {
        for (acc, &v) in gw.iter_mut().zip(dw) {
            *acc += v;
        }
    }
    for ni in 0..n {
        for (oc, row) in grad_out.item(ni).chunks(plane).enumerate() {
            grad_bias[oc] += row.iter().copied().sum();
        }
    }
    Ok(ConvGrads {
        input: grad_input,
        weights: grad_weights,
        bias: grad_bias,
    })
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    spec: &ConvSpec,
    oh: usize,
    ow: usize,
    cols: &mut [T],
) {
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (dh, dw) = spec.dilation;
    let (pt, pl) = (spec.padding.top as isize, spec.padding.left as isize);
    let plane = oh * ow;
    for ci in 0..c {
        let src = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                let col_off = (kj * dw) as isize - pl;
                for oy in 0..oh {
                    let iy = (oy * sh + ki * dh) as isize - pt;
                    let out_row = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src_row = &src[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * sw) as isize + col_off;
                        *v = if ix >= 0 && ix < w as isize {
                            src_row[ix as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column-buffer entries back onto the image,
/// accumulating where taps overlap.
#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    spec: &ConvSpec,
    oh: usize,
    ow: usize,
    dx: &mut [T],
) {
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (dh, dw) = spec.dilation;
    let (pt, pl) = (spec.padding.top as isize, spec.padding.left as isize);
    let plane = oh * ow;
    dx.fill(T::zero());
    for ci in 0..c {
        let dst = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                let col_off = (kj * dw) as isize - pl;
                for oy in 0..oh {
                    let iy = (oy * sh + ki * dh) as isize - pt;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, &v) in src[oy * ow..(oy + 1) * ow].iter().enumerate() {
                        let ix = (ox * sw) as isize + col_off;
                        if ix >= 0 && ix < w as isize {
                            dst_row[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_difference, relative_error};
    use crate::rng::Rng;

    /// Direct six-loop summation.
    fn conv_oracle(x: &Tensor<f64>, wt: &Tensor<f64>, bias: Option<&[f64]>, s: &ConvSpec) -> Tensor<f64> {
        let [n, c, h, w] = x.shape();
        let (oh, ow) = s.output_extent(h, w);
        Tensor::from_fn([n, s.out_channels, oh, ow], |ni, o, r, col| {
            let mut acc = bias.map_or(0.0, |b| b[o]);
            for ci in 0..c {
                for ki in 0..s.kernel.0 {
                    for kj in 0..s.kernel.1 {
                        let iy = (r * s.stride.0 + ki * s.dilation.0) as isize - s.padding.top as isize;
                        let ix = (col * s.stride.1 + kj * s.dilation.1) as isize - s.padding.left as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            acc += wt.at(o, ci, ki, kj) * x.at(ni, ci, iy as usize, ix as usize);
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn pointwise_unit_kernel_is_identity() {
        let mut rng = Rng::new(1);
        let x = Tensor::<f32>::randn([2, 1, 5, 4], 1.0, &mut rng);
        let spec = ConvSpec::square(1, 1, 1, 1, 0);
        let y = conv2d_forward(&x, &Tensor::full([1, 1, 1, 1], 1.0), None, &spec).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn ones_kernel_counts_taps() {
        let x = Tensor::<f32>::full([1, 1, 3, 3], 1.0);
        let spec = ConvSpec::square(1, 1, 3, 1, 1);
        let y = conv2d_forward(&x, &Tensor::full([1, 1, 3, 3], 1.0), None, &spec).unwrap();
        assert_eq!(y.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn matches_loop_oracle() {
        let mut rng = Rng::new(2);
        let specs = [
            ConvSpec::square(3, 4, 3, 1, 1),
            ConvSpec::square(3, 4, 3, 2, 1),
            ConvSpec::square(3, 2, 1, 2, 0),
            ConvSpec {
                kernel: (2, 2),
                stride: (1, 2),
                padding: Padding::new(1, 0, 1, 1),
                dilation: (1, 2),
                in_channels: 3,
                out_channels: 5,
                bias: true,
            },
            ConvSpec {
                kernel: (3, 2),
                stride: (2, 1),
                padding: Padding::new(0, 2, 1, 0),
                dilation: (2, 1),
                in_channels: 3,
                out_channels: 2,
                bias: true,
            },
        ];
        for spec in specs {
            let x = Tensor::<f32>::randn([2, 3, 8, 8], 1.0, &mut rng);
            let wt = Tensor::<f32>::randn(spec.weight_shape(), 1.0, &mut rng);
            let bias: Vec<f32> = (0..spec.out_channels).map(|i| i as f32 * 0.1).collect();
            let b = spec.bias.then_some(bias.as_slice());
            let y = conv2d_forward(&x, &wt, b, &spec).unwrap();
            let b64: Vec<f64> = bias.iter().map(|&v| v as f64).collect();
            let want = conv_oracle(&x.cast(), &wt.cast(), spec.bias.then_some(b64.as_slice()), &spec);
            assert!(y.cast::<f64>().max_abs_diff(&want) < 1e-5, "{spec:?}");
        }
    }

    #[test]
    fn rejects_channel_mismatch() {
        let x = Tensor::<f32>::zeros([1, 2, 4, 4]);
        let spec = ConvSpec::square(3, 1, 3, 1, 1);
        assert!(conv2d_forward(&x, &Tensor::zeros(spec.weight_shape()), None, &spec).is_err());
        let spec = ConvSpec::square(2, 1, 3, 1, 1);
        assert!(conv2d_forward(&x, &Tensor::zeros([1, 2, 2, 2]), None, &spec).is_err());
    }

    fn gradcheck_case(spec: ConvSpec, shape: [usize; 4], seed: u64) {
        let mut rng = Rng::new(seed);
        let x = Tensor::<f64>::randn(shape, 1.0, &mut rng);
        let wt = Tensor::<f64>::randn(spec.weight_shape(), 1.0, &mut rng);
        let b: Vec<f64> = (0..spec.out_channels).map(|_| rng.normal()).collect();
        let y = conv2d_forward(&x, &wt, Some(&b), &spec).unwrap();
        let probe = Tensor::<f64>::randn(y.shape(), 1.0, &mut rng);
        let loss = |x: &Tensor<f64>, wt: &Tensor<f64>, b: &[f64]| {
            let y = conv2d_forward(x, wt, Some(b), &spec).unwrap();
            y.data().iter().zip(probe.data()).map(|(a, p)| a * p).sum::<f64>()
        };
        let g = conv2d_backward(&probe, &x, &wt, &spec).unwrap();

        let num_x = central_difference(&x, 1e-6, |xp| loss(xp, &wt, &b));
        let num_w = central_difference(&wt, 1e-6, |wp| loss(&x, wp, &b));
        let bt = Tensor::from_vec([1, 1, 1, b.len()], b.clone()).unwrap();
        let num_b = central_difference(&bt, 1e-6, |bp| loss(&x, &wt, bp.data()));
        assert!(relative_error(g.input.data(), num_x.data()) < 1e-6);
        assert!(relative_error(g.weights.data(), num_w.data()) < 1e-6);
        assert!(relative_error(&g.bias, num_b.data()) < 1e-6);
    }

    #[test]
    fn backward_matches_finite_differences() {
        gradcheck_case(ConvSpec::square(2, 3, 3, 1, 1), [1, 2, 5, 5], 3);
        gradcheck_case(ConvSpec::square(2, 3, 3, 2, 1), [2, 2, 5, 6], 4);
        gradcheck_case(ConvSpec::square(2, 2, 1, 2, 0), [1, 2, 5, 5], 5);
        let dilated = ConvSpec {
            kernel: (2, 2),
            stride: (1, 2),
            padding: Padding::new(0, 1, 0, 1),
            dilation: (1, 2),
            in_channels: 2,
            out_channels: 2,
            bias: true,
        };
        gradcheck_case(dilated, [1, 2, 4, 5], 6);
    }

    #[test]
    fn zero_grad_out_gives_zero_grads() {
        let mut rng = Rng::new(7);
        let spec = ConvSpec::square(2, 3, 3, 1, 1);
        let x = Tensor::<f32>::randn([2, 2, 4, 4], 1.0, &mut rng);
        let wt = Tensor::<f32>::randn(spec.weight_shape(), 1.0, &mut rng);
        let g = conv2d_backward(&Tensor::zeros([2, 3, 4, 4]), &x, &wt, &spec).unwrap();
        assert!(g.input.data().iter().all(|&v| v == 0.0));
        assert!(g.weights.data().iter().all(|&v| v == 0.0));
        assert!(g.bias.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_is_linear_in_grad_out() {
        let mut rng = Rng::new(8);
        let spec = ConvSpec::square(2, 3, 3, 2, 1);
        let x = Tensor::<f64>::randn([2, 2, 6, 6], 1.0, &mut rng);
        let wt = Tensor::<f64>::randn(spec.weight_shape(), 1.0, &mut rng);
        let g = Tensor::<f64>::randn([2, 3, 3, 3], 1.0, &mut rng);
        let a = conv2d_backward(&g, &x, &wt, &spec).unwrap();
        let b = conv2d_backward(&g.scale(2.0), &x, &wt, &spec).unwrap();
        assert!(b.input.max_abs_diff(&a.input.scale(2.0)) < 1e-12);
        assert!(b.weights.max_abs_diff(&a.weights.scale(2.0)) < 1e-12);
    }

    #[test]
    fn backward_rejects_wrong_grad_shape() {
        let spec = ConvSpec::square(1, 1, 3, 1, 1);
        let x = Tensor::<f32>::zeros([1, 1, 4, 4]);
        let wt = Tensor::<f32>::zeros(spec.weight_shape());
        assert!(conv2d_backward(&Tensor::zeros([1, 1, 3, 4]), &x, &wt, &spec).is_err());
    }
}
