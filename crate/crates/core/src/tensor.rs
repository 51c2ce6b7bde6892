//! Dense rank-4 tensors in (batch, channel, row, column) order.
//!
//! Storage is a contiguous row-major buffer with the column index varying
//! fastest. Every operation returns a fresh tensor; only the optimizer
//! mutates parameter tensors in place.

use std::fmt::Debug;
use std::io::{Read, Write};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

use crate::error::{Error, Result};
use crate::rng::Rng;

pub type Shape = [usize; 4];

/// Floating-point element type. `f32` is the training precision, `f64` is
/// used for gradient checking.
pub trait Scalar:
    Float + Default + Debug + Send + Sync + Sum + AddAssign + SubAssign + MulAssign + 'static
{
    const NAME: &'static str;

    fn from_f64(v: f64) -> Self;

    fn as_f64(self) -> f64;

    /// Row-major `c = a · b (+ c)` where `a` is `m × k` and `b` is `k × n`.
    /// Either operand may be read transposed from its stored layout.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        n: usize,
        k: usize,
        a: &[Self],
        a_transposed: bool,
        b: &[Self],
        b_transposed: bool,
        c: &mut [Self],
        accumulate: bool,
    );
}

fn gemm_strides(rows: usize, cols: usize, transposed: bool) -> (isize, isize) {
    // logical (rows × cols); stored as cols × rows when transposed
    if transposed {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! impl_scalar {
    ($t:ty, $name:expr, $gemm:path) => {
        impl Scalar for $t {
            const NAME: &'static str = $name;

            fn from_f64(v: f64) -> Self {
                v as $t
            }

            fn as_f64(self) -> f64 {
                self as f64
            }

            fn gemm(
                m: usize,
                n: usize,
                k: usize,
                a: &[Self],
                a_transposed: bool,
                b: &[Self],
                b_transposed: bool,
                c: &mut [Self],
                accumulate: bool,
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                if k == 0 {
                    if !accumulate {
                        c[..m * n].fill(0.0);
                    }
                    return;
                }
                let (rsa, csa) = gemm_strides(m, k, a_transposed);
                let (rsb, csb) = gemm_strides(k, n, b_transposed);
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: bounds asserted above; strides describe dense
                // row-major buffers of exactly those extents.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, "f32", matrixmultiply::sgemm);
impl_scalar!(f64, "f64", matrixmultiply::dgemm);

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Self {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::shape(
                "from_vec",
                format!("{} elements for shape {shape:?} (needs {expected})", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    /// Builds a tensor by evaluating `f(n, c, h, w)` at every index.
    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.iter().product());
        for n in 0..shape[0] {
            for c in 0..shape[1] {
                for h in 0..shape[2] {
                    for w in 0..shape[3] {
                        data.push(f(n, c, h, w));
                    }
                }
            }
        }
        Self { shape, data }
    }

    /// Standard-normal entries scaled by `std`.
    pub fn randn(shape: Shape, std: f64, rng: &mut Rng) -> Self {
        let len = shape.iter().product();
        let data = (0..len).map(|_| T::from_f64(rng.normal() * std)).collect();
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        let [_, cs, hs, ws] = self.shape;
        ((n * cs + c) * hs + h) * ws + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.offset(n, c, h, w)]
    }

    #[inline]
    pub fn at_mut(&mut self, n: usize, c: usize, h: usize, w: usize) -> &mut T {
        let i = self.offset(n, c, h, w);
        &mut self.data[i]
    }

    /// Contiguous `C·H·W` slab of batch item `n`.
    pub fn item(&self, n: usize) -> &[T] {
        let stride = self.shape[1] * self.shape[2] * self.shape[3];
        &self.data[n * stride..(n + 1) * stride]
    }

    /// Same buffer reinterpreted under a new shape of equal size.
    pub fn reshape(self, shape: Shape) -> Result<Self> {
        Self::from_vec(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scale(&self, k: T) -> Self {
        self.map(|x| x * k)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&x| U::from_f64(x.as_f64())).collect(),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "add_assign",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Writes four little-endian `u64` extents followed by little-endian
    /// IEEE-754 32-bit scalars.
    pub fn write_le<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        for &d in &self.shape {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for &x in &self.data {
            buf.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
        }
        out.write_all(&buf)
    }

    pub fn read_le<R: Read>(input: &mut R) -> Result<Self> {
        let mut shape = [0usize; 4];
        let mut word = [0u8; 8];
        for d in shape.iter_mut() {
            input
                .read_exact(&mut word)
                .map_err(|e| Error::Format(format!("tensor extents: {e}")))?;
            *d = usize::try_from(u64::from_le_bytes(word))
                .map_err(|_| Error::Format("tensor extent overflows usize".into()))?;
        }
        let len = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&l| l <= (1 << 32))
            .ok_or_else(|| Error::Format(format!("implausible tensor shape {shape:?}")))?;
        let mut buf = vec![0u8; len * 4];
        input
            .read_exact(&mut buf)
            .map_err(|e| Error::Format(format!("tensor data: {e}")))?;
        let data = buf
            .chunks_exact(4)
            .map(|b| T::from_f64(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
            .collect();
        Ok(Self { shape, data })
    }
}

/// Zero padding of the two spatial axes.
pub fn pad2d<T: Scalar>(
    t: &Tensor<T>,
    top: usize,
    bottom: usize,
    left: usize,
    right: usize,
) -> Tensor<T> {
    let [n, c, h, w] = t.shape();
    let (oh, ow) = (h + top + bottom, w + left + right);
    let mut out = Tensor::zeros([n, c, oh, ow]);
    for plane in 0..n * c {
        let src = &t.data[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out.data[plane * oh * ow..(plane + 1) * oh * ow];
        for r in 0..h {
            let d = (r + top) * ow + left;
            dst[d..d + w].copy_from_slice(&src[r * w..(r + 1) * w]);
        }
    }
    out
}

/// Inverse of [`pad2d`]: removes the given margins.
pub fn crop2d<T: Scalar>(
    t: &Tensor<T>,
    top: usize,
    bottom: usize,
    left: usize,
    right: usize,
) -> Result<Tensor<T>> {
    let [n, c, h, w] = t.shape();
    if top + bottom > h || left + right > w {
        return Err(Error::shape(
            "crop2d",
            format!("margins ({top},{bottom},{left},{right}) exceed {h}x{w}"),
        ));
    }
    let (oh, ow) = (h - top - bottom, w - left - right);
    Ok(Tensor::from_fn([n, c, oh, ow], |ni, ci, r, col| {
        t.at(ni, ci, r + top, col + left)
    }))
}

/// Interleaves columns: output column `2j` is `p1[j]`, `2j+1` is `p2[j]`.
pub fn merge_columns<T: Scalar>(p1: &Tensor<T>, p2: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w1] = p1.shape();
    let [n2, c2, h2, w2] = p2.shape();
    if (n, c, h) != (n2, c2, h2) || !(w1 == w2 || w1 == w2 + 1) {
        return Err(Error::shape(
            "merge_columns",
            format!("{:?} and {:?}", p1.shape(), p2.shape()),
        ));
    }
    let w = w1 + w2;
    let mut out = Tensor::zeros([n, c, h, w]);
    for row in 0..n * c * h {
        let a = &p1.data[row * w1..(row + 1) * w1];
        let b = &p2.data[row * w2..(row + 1) * w2];
        let dst = &mut out.data[row * w..(row + 1) * w];
        for (j, &x) in a.iter().enumerate() {
            dst[2 * j] = x;
        }
        for (j, &x) in b.iter().enumerate() {
            dst[2 * j + 1] = x;
        }
    }
    Ok(out)
}

/// Splits columns by parity: `(even, odd)`. Adjoint of [`merge_columns`].
pub fn split_columns<T: Scalar>(t: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let [n, c, h, w] = t.shape();
    let (we, wo) = (w.div_ceil(2), w / 2);
    let mut even = Tensor::zeros([n, c, h, we]);
    let mut odd = Tensor::zeros([n, c, h, wo]);
    for row in 0..n * c * h {
        let src = &t.data[row * w..(row + 1) * w];
        for (j, &x) in src.iter().enumerate() {
            if j % 2 == 0 {
                even.data[row * we + j / 2] = x;
            } else {
                odd.data[row * wo + j / 2] = x;
            }
        }
    }
    (even, odd)
}

pub fn elementwise_add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let mut out = a.clone();
    out.add_assign(b).map_err(|_| {
        Error::shape("elementwise_add", format!("{:?} vs {:?}", a.shape(), b.shape()))
    })?;
    Ok(out)
}

/// He-normal initialization: i.i.d. `N(0, 2 / fan_in)`.
pub fn kaiming_init<T: Scalar>(rng: &mut Rng, shape: Shape, fan_in: usize) -> Result<Tensor<T>> {
    if fan_in == 0 {
        return Err(Error::InvalidConfig("kaiming_init: fan_in must be positive".into()));
    }
    Ok(Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use crate::rng::Rng;

    fn seq(shape: Shape) -> Tensor<f32> {
        let len = shape.iter().product::<usize>();
        Tensor::from_vec(shape, (0..len).map(|i| i as f32).collect()).unwrap()
    }

    #[test]
    fn pad_all_ones() {
        let t = Tensor::<f32>::full([1, 1, 2, 2], 1.0);
        let p = pad2d(&t, 1, 1, 1, 1);
        assert_eq!(p.shape(), [1, 1, 4, 4]);
        for r in 0..4 {
            for c in 0..4 {
                let interior = (1..3).contains(&r) && (1..3).contains(&c);
                assert_eq!(p.at(0, 0, r, c), if interior { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn pad_zero_is_identity() {
        let t = seq([2, 3, 4, 5]);
        assert_eq!(pad2d(&t, 0, 0, 0, 0), t);
    }

    #[test]
    fn pad_matches_first_plan_branch() {
        let plan = crate::hex::decomposition_plan();
        let p = plan.branches[0].padding;
        let t = seq([1, 1, 3, 3]);
        let padded = pad2d(&t, p.top, p.bottom, p.left, p.right);
        assert_eq!(padded.shape(), [1, 1, 4, 5]);
        assert_eq!(padded.at(0, 0, 1, 1), 0.0);
        assert_eq!(padded.at(0, 0, 3, 3), 8.0);
    }

    #[test]
    fn merge_interleaves() {
        let p1 = Tensor::from_vec([1, 1, 1, 2], vec![1.0f32, 3.0]).unwrap();
        let p2 = Tensor::from_vec([1, 1, 1, 2], vec![2.0f32, 4.0]).unwrap();
        assert_eq!(merge_columns(&p1, &p2).unwrap().data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn merge_odd_width() {
        let p1 = Tensor::from_vec([1, 1, 1, 2], vec![1.0f32, 3.0]).unwrap();
        let p2 = Tensor::from_vec([1, 1, 1, 1], vec![2.0f32]).unwrap();
        let m = merge_columns(&p1, &p2).unwrap();
        assert_eq!(m.shape(), [1, 1, 1, 3]);
        assert_eq!(m.data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn merge_rejects_bad_widths() {
        let p1 = Tensor::<f32>::zeros([1, 1, 2, 1]);
        let p2 = Tensor::<f32>::zeros([1, 1, 2, 3]);
        assert!(merge_columns(&p1, &p2).is_err());
        let p3 = Tensor::<f32>::zeros([1, 1, 3, 1]);
        assert!(merge_columns(&p1, &p3).is_err());
    }

    #[test]
    fn add_basics() {
        let ones = Tensor::<f32>::full([1, 2, 3, 3], 1.0);
        assert!(elementwise_add(&ones, &ones).unwrap().data().iter().all(|&x| x == 2.0));
        let x = seq([1, 2, 3, 3]);
        assert_eq!(elementwise_add(&x, &Tensor::zeros(x.shape())).unwrap(), x);
        assert!(elementwise_add(&x, &Tensor::zeros([1, 2, 3, 4])).is_err());
    }

    #[test]
    fn kaiming_std() {
        let mut rng = Rng::new(11);
        let t: Tensor<f64> = kaiming_init(&mut rng, [1, 1, 1, 100_000], 2).unwrap();
        let mean = t.sum() / t.len() as f64;
        let var = t.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / t.len() as f64;
        assert!((var.sqrt() - 1.0).abs() < 0.05, "std {}", var.sqrt());
    }

    #[test]
    fn kaiming_deterministic_and_scaled() {
        let a: Tensor<f32> = kaiming_init(&mut Rng::new(5), [16, 16, 3, 3], 144).unwrap();
        let b: Tensor<f32> = kaiming_init(&mut Rng::new(5), [16, 16, 3, 3], 144).unwrap();
        assert_eq!(a, b);
        let mut rng = Rng::new(9);
        let big: Tensor<f64> = kaiming_init(&mut rng, [1, 1, 1, 200_000], 144).unwrap();
        let var = big.data().iter().map(|x| x * x).sum::<f64>() / big.len() as f64;
        let expected = (2.0f64 / 144.0).sqrt();
        assert!((var.sqrt() - expected).abs() / expected < 0.02);
        assert!(kaiming_init::<f32>(&mut rng, [1, 1, 1, 1], 0).is_err());
    }

    #[test]
    fn serialization_layout() {
        let t = Tensor::from_vec([1, 1, 1, 2], vec![1.0f32, -2.5]).unwrap();
        let mut buf = Vec::new();
        t.write_le(&mut buf).unwrap();
        assert_eq!(buf.len(), 32 + 8);
        assert_eq!(&buf[24..32], &2u64.to_le_bytes());
        assert_eq!(&buf[36..40], &(-2.5f32).to_le_bytes());
        let back = Tensor::<f32>::read_le(&mut buf.as_slice()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0, 7.0, 8.0];
        let mut c = [0.0f64; 4];
        f64::gemm(2, 2, 2, &a, false, &b, false, &mut c, false);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        f64::gemm(2, 2, 2, &a, true, &b, false, &mut c, false);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        f64::gemm(2, 2, 2, &a, false, &b, true, &mut c, true);
        assert_eq!(c, [26.0 + 17.0, 30.0 + 23.0, 38.0 + 39.0, 44.0 + 53.0]);
    }

    proptest! {
        #[test]
        fn merge_inverts_split(w in 1usize..=16, h in 1usize..4, c in 1usize..3) {
            let x = seq([1, c, h, w]);
            let (even, odd) = split_columns(&x);
            prop_assert_eq!(merge_columns(&even, &odd).unwrap(), x);
        }

        #[test]
        fn crop_inverts_pad(t in 0usize..3, b in 0usize..3, l in 0usize..3, r in 0usize..3,
                            h in 1usize..5, w in 1usize..5) {
            let x = seq([2, 1, h, w]);
            let back = crop2d(&pad2d(&x, t, b, l, r), t, b, l, r).unwrap();
            prop_assert_eq!(back, x);
        }

        #[test]
        fn add_commutes_and_associates(vals in proptest::collection::vec(-1e3f32..1e3, 36)) {
            let a = Tensor::from_vec([1, 1, 3, 4], vals[..12].to_vec()).unwrap();
            let b = Tensor::from_vec([1, 1, 3, 4], vals[12..24].to_vec()).unwrap();
            let c = Tensor::from_vec([1, 1, 3, 4], vals[24..].to_vec()).unwrap();
            prop_assert_eq!(elementwise_add(&a, &b).unwrap(), elementwise_add(&b, &a).unwrap());
            let l = elementwise_add(&elementwise_add(&a, &b).unwrap(), &c).unwrap();
            let r = elementwise_add(&a, &elementwise_add(&b, &c).unwrap()).unwrap();
            for i in 0..12 {
                let scale = a.data()[i].abs() + b.data()[i].abs() + c.data()[i].abs();
                prop_assert!((l.data()[i] - r.data()[i]).abs() <= 1e-6 * scale.max(1e-30));
            }
        }
    }
}
