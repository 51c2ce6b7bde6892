//! Size-1 hexagonal convolution.
//!
//! [`hexconv_forward_fast`] evaluates the hexagonal kernel as three
//! rectangular convolutions following [`decomposition_plan`]:
//!
//! ```text
//! P1  = conv(pad(S, 1,0,1,1), side,   stride (1,2))   even output columns
//! P2  = conv(pad(S, 0,1,0,1), side,   stride (1,2))   odd output columns
//! P3  = conv(pad(S, 1,1,0,0), column, stride (1,1))   center column
//! Q   = merge_columns(P1, P2) + P3
//! ```
//!
//! [`hexconv_forward_reference`] gathers the 7-cell neighborhood directly
//! and is the ground truth the fast path is tested against.

use crate::conv::{conv2d_backward, forward_unchecked, ConvSpec};
use crate::error::{Error, Result};
use crate::hex::{decomposition_plan, neighborhood_clipped, HexTap, PlanBranch, SubKernel};
use crate::rng::Rng;
use crate::tensor::{merge_columns, split_columns, Scalar, Tensor};

/// Seven weights per (out-channel, in-channel) pair, stored as the two
/// rectangular sub-kernels. The side kernel is kept as 2×2 and applied with
/// column dilation 2, so the middle column of its 2×3 footprint holds no
/// storage and can never become non-zero.
#[derive(Clone, Debug, PartialEq)]
pub struct HexKernelWeights<T> {
    /// `(out, in, 2, 2)`: rows (upper, lower) × columns (left, right).
    pub side: Tensor<T>,
    /// `(out, in, 3, 1)`: top, center, bottom.
    pub column: Tensor<T>,
}

fn tap_slot(tap: HexTap) -> (SubKernel, usize, usize) {
    match tap {
        HexTap::TopLeft => (SubKernel::Side, 0, 0),
        HexTap::TopRight => (SubKernel::Side, 0, 1),
        HexTap::BottomLeft => (SubKernel::Side, 1, 0),
        HexTap::BottomRight => (SubKernel::Side, 1, 1),
        HexTap::Top => (SubKernel::Column, 0, 0),
        HexTap::Center => (SubKernel::Column, 1, 0),
        HexTap::Bottom => (SubKernel::Column, 2, 0),
    }
}

impl<T: Scalar> HexKernelWeights<T> {
    pub fn zeros(out_channels: usize, in_channels: usize) -> Self {
        Self {
            side: Tensor::zeros([out_channels, in_channels, 2, 2]),
            column: Tensor::zeros([out_channels, in_channels, 3, 1]),
        }
    }

    pub fn from_fn(
        out_channels: usize,
        in_channels: usize,
        mut f: impl FnMut(usize, usize, HexTap) -> T,
    ) -> Self {
        let mut w = Self::zeros(out_channels, in_channels);
        for o in 0..out_channels {
            for i in 0..in_channels {
                for tap in HexTap::ALL {
                    w.set(o, i, tap, f(o, i, tap));
                }
            }
        }
        w
    }

    /// He-normal with fan-in `7 · in_channels`.
    pub fn kaiming(out_channels: usize, in_channels: usize, rng: &mut Rng) -> Self {
        let std = (2.0 / (7 * in_channels) as f64).sqrt();
        Self::from_fn(out_channels, in_channels, |_, _, _| T::from_f64(rng.normal() * std))
    }

    /// A hex kernel that only uses its center tap, equal to the given
    /// `(out, in, 1, 1)` pointwise kernel.
    pub fn center_only(pointwise: &Tensor<T>) -> Result<Self> {
        let [o, i, kh, kw] = pointwise.shape();
        if (kh, kw) != (1, 1) {
            return Err(Error::shape("center_only", format!("{:?} is not 1x1", pointwise.shape())));
        }
        Ok(Self::from_fn(o, i, |oc, ic, tap| {
            if tap == HexTap::Center {
                pointwise.at(oc, ic, 0, 0)
            } else {
                T::zero()
            }
        }))
    }

    pub fn out_channels(&self) -> usize {
        self.side.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.side.shape()[1]
    }

    /// Number of trainable scalars: 7 per channel pair.
    pub fn num_weights(&self) -> usize {
        self.side.len() + self.column.len()
    }

    pub fn get(&self, o: usize, i: usize, tap: HexTap) -> T {
        match tap_slot(tap) {
            (SubKernel::Side, r, c) => self.side.at(o, i, r, c),
            (SubKernel::Column, r, c) => self.column.at(o, i, r, c),
        }
    }

    pub fn set(&mut self, o: usize, i: usize, tap: HexTap, v: T) {
        match tap_slot(tap) {
            (SubKernel::Side, r, c) => *self.side.at_mut(o, i, r, c) = v,
            (SubKernel::Column, r, c) => *self.column.at_mut(o, i, r, c) = v,
        }
    }

    /// The side kernel expanded to its `(out, in, 2, 3)` footprint with the
    /// structural zeros written out.
    pub fn side_footprint(&self) -> Tensor<T> {
        let [o, i, _, _] = self.side.shape();
        Tensor::from_fn([o, i, 2, 3], |oc, ic, r, c| match c {
            0 => self.side.at(oc, ic, r, 0),
            2 => self.side.at(oc, ic, r, 1),
            _ => T::zero(),
        })
    }

    fn sub_kernel(&self, kernel: SubKernel) -> &Tensor<T> {
        match kernel {
            SubKernel::Side => &self.side,
            SubKernel::Column => &self.column,
        }
    }
}

#[derive(Clone, Debug)]
pub struct HexGrads<T> {
    pub input: Tensor<T>,
    pub weights: HexKernelWeights<T>,
    pub bias: Vec<T>,
}

fn branch_spec(branch: &PlanBranch, in_channels: usize, out_channels: usize) -> ConvSpec {
    ConvSpec {
        kernel: branch.kernel.extent(),
        stride: branch.stride,
        padding: branch.padding,
        dilation: branch.kernel.dilation(),
        in_channels,
        out_channels,
        bias: false,
    }
}

fn check_operands<T: Scalar>(
    op: &'static str,
    input: &Tensor<T>,
    weights: &HexKernelWeights<T>,
    bias: Option<&[T]>,
) -> Result<()> {
    let (o, i) = (weights.out_channels(), weights.in_channels());
    if weights.side.shape() != [o, i, 2, 2] || weights.column.shape() != [o, i, 3, 1] {
        return Err(Error::shape(
            op,
            format!("malformed hex weights {:?} / {:?}", weights.side.shape(), weights.column.shape()),
        ));
    }
    if input.shape()[1] != i {
        return Err(Error::shape(
            op,
            format!("input has {} channels, kernel expects {i}", input.shape()[1]),
        ));
    }
    if let Some(b) = bias {
        if b.len() != o {
            return Err(Error::shape(op, format!("bias length {} for {o} outputs", b.len())));
        }
    }
    Ok(())
}

/// Direct neighborhood gather. Output spatial shape equals the input's.
pub fn hexconv_forward_reference<T: Scalar>(
    input: &Tensor<T>,
    weights: &HexKernelWeights<T>,
    bias: Option<&[T]>,
) -> Result<Tensor<T>> {
    check_operands("hexconv_forward_reference", input, weights, bias)?;
    let [n, c, h, w] = input.shape();
    let o = weights.out_channels();
    Ok(Tensor::from_fn([n, o, h, w], |ni, oc, r, col| {
        let mut acc = bias.map_or(T::zero(), |b| b[oc]);
        for p in neighborhood_clipped(r, col, h, w) {
            for ic in 0..c {
                acc += weights.get(oc, ic, p.tap) * input.at(ni, ic, p.row as usize, p.col as usize);
            }
        }
        acc
    }))
}

/// Hexagonal convolution through the rectangular decomposition.
pub fn hexconv_forward_fast<T: Scalar>(
    input: &Tensor<T>,
    weights: &HexKernelWeights<T>,
    bias: Option<&[T]>,
) -> Result<Tensor<T>> {
    check_operands("hexconv_forward_fast", input, weights, bias)?;
    let (o, i) = (weights.out_channels(), weights.in_channels());
    let plan = decomposition_plan();
    let [p1, p2, p3] = plan.branches.map(|branch| {
        let spec = branch_spec(&branch, i, o);
        forward_unchecked(input, weights.sub_kernel(branch.kernel), None, &spec)
    });
    let mut q = merge_columns(&p1?, &p2?)?;
    q.add_assign(&p3?)?;
    if let Some(b) = bias {
        let plane = input.shape()[2] * input.shape()[3];
        for (k, chunk) in q.data_mut().chunks_mut(plane).enumerate() {
            let bo = b[k % o];
            chunk.iter_mut().for_each(|v| *v += bo);
        }
    }
    Ok(q)
}

/// Adjoint of [`hexconv_forward_fast`]. The weight gradient has the same
/// 7-per-pair structure as the weights.
pub fn hexconv_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    weights: &HexKernelWeights<T>,
) -> Result<HexGrads<T>> {
    check_operands("hexconv_backward", input, weights, None)?;
    let [n, _, h, w] = input.shape();
    let (o, i) = (weights.out_channels(), weights.in_channels());
    if grad_out.shape() != [n, o, h, w] {
        return Err(Error::shape(
            "hexconv_backward",
            format!("grad_out {:?}, forward output is {:?}", grad_out.shape(), [n, o, h, w]),
        ));
    }
    let plan = decomposition_plan();
    // merge is a column interleave and add is a fan-out, so their adjoints
    // are a parity split and a copy
    let (g_even, g_odd) = split_columns(grad_out);
    let branch_grads = [&g_even, &g_odd, grad_out];

    let mut grad_input = Tensor::zeros(input.shape());
    let mut grads = HexKernelWeights::zeros(o, i);
    for (branch, g) in plan.branches.iter().zip(branch_grads) {
        let spec = branch_spec(branch, i, o);
        let bg = conv2d_backward(g, input, weights.sub_kernel(branch.kernel), &spec)?;
        grad_input.add_assign(&bg.input)?;
        match branch.kernel {
            SubKernel::Side => grads.side.add_assign(&bg.weights)?,
            SubKernel::Column => grads.column.add_assign(&bg.weights)?,
        }
    }
    let plane = h * w;
    let mut grad_bias = vec![T::zero(); o];
    for (k, chunk) in grad_out.data().chunks(plane.max(1)).enumerate() {
        grad_bias[k % o] += chunk.iter().copied().sum();
    }
    Ok(HexGrads {
        input: grad_input,
        weights: grads,
        bias: grad_bias,
    })
}

/// Keeps even-indexed rows and columns.
pub fn subsample2<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = t.shape();
    Tensor::from_fn([n, c, h.div_ceil(2), w.div_ceil(2)], |ni, ci, r, col| {
        t.at(ni, ci, 2 * r, 2 * col)
    })
}

/// Adjoint of [`subsample2`]: scatters onto the even positions of a zero
/// tensor of `input_shape`.
pub fn subsample2_backward<T: Scalar>(grad: &Tensor<T>, input_shape: [usize; 4]) -> Result<Tensor<T>> {
    let [n, c, h, w] = input_shape;
    let [gn, gc, gh, gw] = grad.shape();
    if (gn, gc, gh, gw) != (n, c, h.div_ceil(2), w.div_ceil(2)) {
        return Err(Error::shape(
            "subsample2_backward",
            format!("grad {:?} for input {input_shape:?}", grad.shape()),
        ));
    }
    let mut out = Tensor::zeros(input_shape);
    for ni in 0..n {
        for ci in 0..c {
            for r in 0..gh {
                for col in 0..gw {
                    *out.at_mut(ni, ci, 2 * r, 2 * col) = grad.at(ni, ci, r, col);
                }
            }
        }
    }
    Ok(out)
}

/// Outcome of a randomized fast-vs-reference comparison.
#[derive(Clone, Debug)]
pub struct SweepReport {
    pub cases: usize,
    pub max_abs_dev: f64,
    /// Input shape of the case with the largest deviation.
    pub worst_shape: [usize; 4],
    /// Input shape of every case, in order.
    pub shapes: Vec<[usize; 4]>,
}

/// Compares the fast path against the reference gather in 32-bit over
/// `cases` random inputs. Spatial extents cycle through every `(H, W)` in
/// `1..=9 × 1..=9`; batch and channels are random, weights are drawn at
/// the scale used for layer initialization.
pub fn verify_sweep(cases: usize, seed: u64) -> Result<SweepReport> {
    let mut rng = Rng::new(seed);
    let mut report = SweepReport {
        cases,
        max_abs_dev: 0.0,
        worst_shape: [0; 4],
        shapes: Vec::with_capacity(cases),
    };
    for k in 0..cases {
        let h = 1 + k % 9;
        let w = 1 + (k / 9) % 9;
        let n = [1, 4][rng.below(2)];
        let c = [1, 3, 16][rng.below(3)];
        let o = 1 + rng.below(8);
        let x = Tensor::<f32>::randn([n, c, h, w], 1.0, &mut rng);
        let wt = HexKernelWeights::<f32>::kaiming(o, c, &mut rng);
        let bias: Vec<f32> = (0..o).map(|_| rng.normal() as f32).collect();
        let fast = hexconv_forward_fast(&x, &wt, Some(&bias))?;
        let reference = hexconv_forward_reference(&x, &wt, Some(&bias))?;
        let dev = fast.max_abs_diff(&reference);
        report.shapes.push([n, c, h, w]);
        if dev >= report.max_abs_dev {
            report.max_abs_dev = dev;
            report.worst_shape = [n, c, h, w];
        }
    }
    Ok(report)
}
