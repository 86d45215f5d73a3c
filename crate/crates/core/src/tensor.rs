//! Dense NCHW tensors and the forward/backward kernels of every layer kind
//! used by the U-Net.
//!
//! Kernels are generic over [`Scalar`] so the same code runs in `f32` for
//! training and in `f64` for finite-difference gradient checks.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Floating-point element type of a [`Tensor`].
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum + Default + Debug + Send + Sync + 'static
{
    /// `c = alpha * a * b + beta * c` for row-major general-stride matrices,
    /// `a` is `m x k`, `b` is `k x n`, `c` is `m x n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
        c_strides: (isize, isize),
    );

    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 is representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite scalar")
    }
}

fn span(rows: usize, cols: usize, strides: (isize, isize)) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    (rows - 1) * strides.0 as usize + (cols - 1) * strides.1 as usize + 1
}

macro_rules! impl_scalar {
    ($t:ty, $f:path) => {
        impl Scalar for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                a_strides: (isize, isize),
                b: &[Self],
                b_strides: (isize, isize),
                beta: Self,
                c: &mut [Self],
                c_strides: (isize, isize),
            ) {
                assert!(a.len() >= span(m, k, a_strides), "gemm: lhs too short");
                assert!(b.len() >= span(k, n, b_strides), "gemm: rhs too short");
                assert!(c.len() >= span(m, n, c_strides), "gemm: output too short");
                // SAFETY: the asserts above bound every index the kernel touches.
                unsafe {
                    $f(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        a_strides.0,
                        a_strides.1,
                        b.as_ptr(),
                        b_strides.0,
                        b_strides.1,
                        beta,
                        c.as_mut_ptr(),
                        c_strides.0,
                        c_strides.1,
                    )
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// Dense 4-D array in (batch, channel, height, width) order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: [usize; 4],
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: [usize; 4], data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("zero-sized dimension in {shape:?}")));
        }
        let len: usize = shape.iter().product();
        if data.len() != len {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {len} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: [usize; 4], value: T) -> Self {
        Self {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_fn(shape: [usize; 4], mut f: impl FnMut([usize; 4]) -> T) -> Self {
        let [n, c, h, w] = shape;
        let mut data = Vec::with_capacity(n * c * h * w);
        for a in 0..n {
            for b in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        data.push(f([a, b, y, x]));
                    }
                }
            }
        }
        Self { shape, data }
    }

    pub fn shape(&self) -> [usize; 4] {
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

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        let [_, cs, hs, ws] = self.shape;
        ((n * cs + c) * hs + y) * ws + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.offset(n, c, y, x)]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// One sample of the batch as a contiguous slice.
    pub fn sample(&self, n: usize) -> &[T] {
        let stride = self.shape[1] * self.shape[2] * self.shape[3];
        &self.data[n * stride..(n + 1) * stride]
    }

    /// Stacks single-sample tensors along the batch axis.
    pub fn stack(items: &[Tensor<T>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::Shape("cannot stack zero tensors".into()))?;
        let [_, c, h, w] = first.shape;
        let mut n = 0;
        let mut data = Vec::new();
        for t in items {
            if t.shape[1..] != [c, h, w] {
                return Err(Error::Shape(format!(
                    "cannot stack {:?} with {:?}",
                    t.shape, first.shape
                )));
            }
            n += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        Ok(Self {
            shape: [n, c, h, w],
            data,
        })
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }
}

fn check_channels<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<()> {
    let [_, ci, _, _] = input.shape;
    let [co, wci, kh, kw] = weight.shape;
    if wci != ci || kh != 3 || kw != 3 {
        return Err(Error::Shape(format!(
            "conv3x3 weight {:?} does not fit input with {ci} channels",
            weight.shape
        )));
    }
    if bias.len() != co {
        return Err(Error::Shape(format!(
            "conv3x3 bias has {} entries, expected {co}",
            bias.len()
        )));
    }
    Ok(())
}

/// Unfolds one sample (ci, h, w) into a (ci*9, h*w) patch matrix with zero padding.
fn im2col<T: Scalar>(src: &[T], ci: usize, h: usize, w: usize, cols: &mut [T]) {
    let hw = h * w;
    for i in 0..ci {
        let plane = &src[i * hw..(i + 1) * hw];
        for dy in 0..3 {
            for dx in 0..3 {
                let row = &mut cols[((i * 9) + dy * 3 + dx) * hw..((i * 9) + dy * 3 + dx + 1) * hw];
                for y in 0..h {
                    let out = &mut row[y * w..(y + 1) * w];
                    let sy = y as isize + dy as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let src_row = &plane[sy as usize * w..(sy as usize + 1) * w];
                    match dx {
                        0 => {
                            out[0] = T::zero();
                            out[1..].copy_from_slice(&src_row[..w - 1]);
                        }
                        1 => out.copy_from_slice(src_row),
                        _ => {
                            out[..w - 1].copy_from_slice(&src_row[1..]);
                            out[w - 1] = T::zero();
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates patch gradients back onto the image.
fn col2im<T: Scalar>(cols: &[T], ci: usize, h: usize, w: usize, dst: &mut [T]) {
    let hw = h * w;
    for i in 0..ci {
        let plane = &mut dst[i * hw..(i + 1) * hw];
        for dy in 0..3 {
            for dx in 0..3 {
                let row = &cols[((i * 9) + dy * 3 + dx) * hw..((i * 9) + dy * 3 + dx + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + dy as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w..(y + 1) * w];
                    let out = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    match dx {
                        0 => {
                            for (o, &g) in out[..w - 1].iter_mut().zip(&src[1..]) {
                                *o = *o + g;
                            }
                        }
                        1 => {
                            for (o, &g) in out.iter_mut().zip(src) {
                                *o = *o + g;
                            }
                        }
                        _ => {
                            for (o, &g) in out[1..].iter_mut().zip(&src[..w - 1]) {
                                *o = *o + g;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 3x3 convolution, stride 1, zero padding 1.
pub fn conv3x3<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    check_channels(input, weight, bias)?;
    let [n, ci, h, w] = input.shape;
    let co = weight.shape[0];
    let hw = h * w;
    let k = ci * 9;
    let mut out = Tensor::zeros([n, co, h, w]);
    let mut cols = vec![T::zero(); k * hw];
    for s in 0..n {
        im2col(input.sample(s), ci, h, w, &mut cols);
        let dst = &mut out.data[s * co * hw..(s + 1) * co * hw];
        for (o, plane) in dst.chunks_mut(hw).enumerate() {
            plane.fill(bias.data[o]);
        }
        T::gemm(
            co,
            k,
            hw,
            T::one(),
            &weight.data,
            (k as isize, 1),
            &cols,
            (hw as isize, 1),
            T::one(),
            dst,
            (hw as isize, 1),
        );
    }
    Ok(out)
}

/// Gradients of [`conv3x3`] with respect to input, weight and bias.
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv3x3_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    upstream: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let [n, ci, h, w] = input.shape;
    let co = weight.shape[0];
    if upstream.shape != [n, co, h, w] {
        return Err(Error::Shape(format!(
            "conv3x3 upstream {:?} does not match output [{n}, {co}, {h}, {w}]",
            upstream.shape
        )));
    }
    let hw = h * w;
    let k = ci * 9;
    let mut d_input = Tensor::zeros(input.shape);
    let mut d_weight = Tensor::zeros(weight.shape);
    let mut d_bias = Tensor::zeros([co, 1, 1, 1]);
    let mut cols = vec![T::zero(); k * hw];
    let mut d_cols = vec![T::zero(); k * hw];
    for s in 0..n {
        let dy = upstream.sample(s);
        for (o, plane) in dy.chunks(hw).enumerate() {
            d_bias.data[o] = d_bias.data[o] + plane.iter().copied().sum::<T>();
        }
        im2col(input.sample(s), ci, h, w, &mut cols);
        // dW (co x k) += dY (co x hw) * cols^T (hw x k)
        T::gemm(
            co,
            hw,
            k,
            T::one(),
            dy,
            (hw as isize, 1),
            &cols,
            (1, hw as isize),
            T::one(),
            &mut d_weight.data,
            (k as isize, 1),
        );
        // dcols (k x hw) = W^T (k x co) * dY (co x hw)
        T::gemm(
            k,
            co,
            hw,
            T::one(),
            &weight.data,
            (1, k as isize),
            dy,
            (hw as isize, 1),
            T::zero(),
            &mut d_cols,
            (hw as isize, 1),
        );
        let stride = ci * hw;
        col2im(&d_cols, ci, h, w, &mut d_input.data[s * stride..(s + 1) * stride]);
    }
    Ok(ConvGrads {
        input: d_input,
        weight: d_weight,
        bias: d_bias,
    })
}

/// 2x2 max pooling, stride 2. Returns the pooled tensor and, for every output
/// element, the flat input offset of the selected maximum (first in scan order
/// on ties).
pub fn maxpool2<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let [n, c, h, w] = input.shape;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::SpatialSize {
            height: h,
            width: w,
            multiple: 2,
        });
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for y in 0..oh {
            for x in 0..ow {
                let mut best = base + 2 * y * w + 2 * x;
                for idx in [
                    base + 2 * y * w + 2 * x + 1,
                    base + (2 * y + 1) * w + 2 * x,
                    base + (2 * y + 1) * w + 2 * x + 1,
                ] {
                    if input.data[idx] > input.data[best] {
                        best = idx;
                    }
                }
                out.push(input.data[best]);
                argmax.push(best);
            }
        }
    }
    Ok((
        Tensor {
            shape: [n, c, oh, ow],
            data: out,
        },
        argmax,
    ))
}

pub fn maxpool2_backward<T: Scalar>(upstream: &Tensor<T>, argmax: &[usize], input_shape: [usize; 4]) -> Tensor<T> {
    let mut d = Tensor::zeros(input_shape);
    for (&g, &idx) in upstream.data.iter().zip(argmax) {
        d.data[idx] = d.data[idx] + g;
    }
    d
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = input.shape;
    let (oh, ow) = (2 * h, 2 * w);
    let mut data = vec![T::zero(); n * c * oh * ow];
    for plane in 0..n * c {
        let src = &input.data[plane * h * w..(plane + 1) * h * w];
        let dst = &mut data[plane * oh * ow..(plane + 1) * oh * ow];
        for y in 0..oh {
            let row = &src[(y / 2) * w..(y / 2 + 1) * w];
            for (x, o) in dst[y * ow..(y + 1) * ow].iter_mut().enumerate() {
                *o = row[x / 2];
            }
        }
    }
    Tensor {
        shape: [n, c, oh, ow],
        data,
    }
}

pub fn upsample2_backward<T: Scalar>(upstream: &Tensor<T>) -> Tensor<T> {
    let [n, c, oh, ow] = upstream.shape;
    let (h, w) = (oh / 2, ow / 2);
    let mut d = Tensor::zeros([n, c, h, w]);
    for plane in 0..n * c {
        let src = &upstream.data[plane * oh * ow..(plane + 1) * oh * ow];
        let dst = &mut d.data[plane * h * w..(plane + 1) * h * w];
        for y in 0..oh {
            for x in 0..ow {
                let o = &mut dst[(y / 2) * w + x / 2];
                *o = *o + src[y * ow + x];
            }
        }
    }
    d
}

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_backward<T: Scalar>(input: &Tensor<T>, upstream: &Tensor<T>) -> Tensor<T> {
    Tensor {
        shape: input.shape,
        data: input
            .data
            .iter()
            .zip(&upstream.data)
            .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
            .collect(),
    }
}

/// Stacks the channels of `a` followed by those of `b`.
pub fn concat<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, ca, h, w] = a.shape;
    let [nb, cb, hb, wb] = b.shape;
    if (n, h, w) != (nb, hb, wb) {
        return Err(Error::Shape(format!(
            "concat needs equal batch and spatial size, got {:?} and {:?}",
            a.shape, b.shape
        )));
    }
    let (sa, sb) = (ca * h * w, cb * h * w);
    let mut data = Vec::with_capacity(n * (sa + sb));
    for s in 0..n {
        data.extend_from_slice(&a.data[s * sa..(s + 1) * sa]);
        data.extend_from_slice(&b.data[s * sb..(s + 1) * sb]);
    }
    Ok(Tensor {
        shape: [n, ca + cb, h, w],
        data,
    })
}

pub fn concat_backward<T: Scalar>(upstream: &Tensor<T>, channels_a: usize) -> (Tensor<T>, Tensor<T>) {
    let [n, c, h, w] = upstream.shape;
    let cb = c - channels_a;
    let (sa, sb) = (channels_a * h * w, cb * h * w);
    let mut da = Vec::with_capacity(n * sa);
    let mut db = Vec::with_capacity(n * sb);
    for s in 0..n {
        let src = upstream.sample(s);
        da.extend_from_slice(&src[..sa]);
        db.extend_from_slice(&src[sa..]);
    }
    (
        Tensor {
            shape: [n, channels_a, h, w],
            data: da,
        },
        Tensor {
            shape: [n, cb, h, w],
            data: db,
        },
    )
}

/// Per-pixel softmax across the channel axis.
pub fn softmax_channels<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = input.shape;
    let hw = h * w;
    let mut out = Tensor::zeros(input.shape);
    for s in 0..n {
        let src = input.sample(s);
        let dst = &mut out.data[s * c * hw..(s + 1) * c * hw];
        for p in 0..hw {
            let mut max = src[p];
            for k in 1..c {
                max = max.max(src[k * hw + p]);
            }
            let mut total = T::zero();
            for k in 0..c {
                let e = (src[k * hw + p] - max).exp();
                dst[k * hw + p] = e;
                total = total + e;
            }
            for k in 0..c {
                dst[k * hw + p] = dst[k * hw + p] / total;
            }
        }
    }
    out
}

/// Backward of [`softmax_channels`] given its output.
pub fn softmax_channels_backward<T: Scalar>(output: &Tensor<T>, upstream: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = output.shape;
    let hw = h * w;
    let mut d = Tensor::zeros(output.shape);
    for s in 0..n {
        let y = output.sample(s);
        let g = upstream.sample(s);
        let dst = &mut d.data[s * c * hw..(s + 1) * c * hw];
        for p in 0..hw {
            let dot: T = (0..c).map(|k| y[k * hw + p] * g[k * hw + p]).sum();
            for k in 0..c {
                dst[k * hw + p] = y[k * hw + p] * (g[k * hw + p] - dot);
            }
        }
    }
    d
}

/// Whether batch normalization uses batch statistics or running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

pub const BATCHNORM_MOMENTUM: f64 = 0.9;
pub const BATCHNORM_EPS: f64 = 1e-5;

/// Values kept from a batchnorm forward pass for its backward pass.
#[derive(Clone, Debug)]
pub struct BatchNormCache<T> {
    pub normalized: Tensor<T>,
    pub inv_std: Vec<T>,
    pub mode: Mode,
}

/// Per-channel batch normalization. In train mode the running statistics are
/// updated in place as `running = 0.9 * running + 0.1 * batch` (biased
/// variance).
pub fn batchnorm<T: Scalar>(
    input: &Tensor<T>,
    scale: &Tensor<T>,
    shift: &Tensor<T>,
    running_mean: &mut Tensor<T>,
    running_var: &mut Tensor<T>,
    mode: Mode,
) -> Result<(Tensor<T>, BatchNormCache<T>)> {
    let [n, c, h, w] = input.shape;
    for (name, t) in [
        ("scale", &*scale),
        ("shift", &*shift),
        ("running_mean", &*running_mean),
        ("running_var", &*running_var),
    ] {
        if t.len() != c {
            return Err(Error::Shape(format!(
                "batchnorm {name} has {} entries, expected {c}",
                t.len()
            )));
        }
    }
    let hw = h * w;
    let count = T::of((n * hw) as f64);
    let eps = T::of(BATCHNORM_EPS);
    let momentum = T::of(BATCHNORM_MOMENTUM);
    let mut normalized = Tensor::zeros(input.shape);
    let mut out = Tensor::zeros(input.shape);
    let mut inv_std = Vec::with_capacity(c);
    for ch in 0..c {
        let planes = || (0..n).map(move |s| (s * c + ch) * hw);
        let (mean, var) = match mode {
            Mode::Train => {
                let mut sum = 0.0f64;
                for b in planes() {
                    sum += input.data[b..b + hw].iter().map(|v| v.as_f64()).sum::<f64>();
                }
                let mean = sum / count.as_f64();
                let mut sq = 0.0f64;
                for b in planes() {
                    sq += input.data[b..b + hw]
                        .iter()
                        .map(|v| (v.as_f64() - mean).powi(2))
                        .sum::<f64>();
                }
                let var = sq / count.as_f64();
                let (mean, var) = (T::of(mean), T::of(var));
                running_mean.data[ch] = momentum * running_mean.data[ch] + (T::one() - momentum) * mean;
                running_var.data[ch] = momentum * running_var.data[ch] + (T::one() - momentum) * var;
                (mean, var)
            }
            Mode::Infer => (running_mean.data[ch], running_var.data[ch]),
        };
        let istd = T::one() / (var + eps).sqrt();
        inv_std.push(istd);
        let (g, b) = (scale.data[ch], shift.data[ch]);
        for base in planes() {
            for i in base..base + hw {
                let xh = (input.data[i] - mean) * istd;
                normalized.data[i] = xh;
                out.data[i] = g * xh + b;
            }
        }
    }
    Ok((
        out,
        BatchNormCache {
            normalized,
            inv_std,
            mode,
        },
    ))
}

pub struct BatchNormGrads<T> {
    pub input: Tensor<T>,
    pub scale: Tensor<T>,
    pub shift: Tensor<T>,
}

pub fn batchnorm_backward<T: Scalar>(
    cache: &BatchNormCache<T>,
    scale: &Tensor<T>,
    upstream: &Tensor<T>,
) -> BatchNormGrads<T> {
    let [n, c, h, w] = upstream.shape;
    let hw = h * w;
    let count = T::of((n * hw) as f64);
    let xh = &cache.normalized;
    let mut d_input = Tensor::zeros(upstream.shape);
    let mut d_scale = Tensor::zeros([c, 1, 1, 1]);
    let mut d_shift = Tensor::zeros([c, 1, 1, 1]);
    for ch in 0..c {
        let mut sum_dy = T::zero();
        let mut sum_dy_xh = T::zero();
        for s in 0..n {
            let b = (s * c + ch) * hw;
            for i in b..b + hw {
                sum_dy = sum_dy + upstream.data[i];
                sum_dy_xh = sum_dy_xh + upstream.data[i] * xh.data[i];
            }
        }
        d_scale.data[ch] = sum_dy_xh;
        d_shift.data[ch] = sum_dy;
        let g = scale.data[ch];
        let istd = cache.inv_std[ch];
        for s in 0..n {
            let b = (s * c + ch) * hw;
            for i in b..b + hw {
                d_input.data[i] = match cache.mode {
                    Mode::Infer => upstream.data[i] * g * istd,
                    Mode::Train => {
                        g * istd / count
                            * (count * upstream.data[i] - sum_dy - xh.data[i] * sum_dy_xh)
                    }
                };
            }
        }
    }
    BatchNormGrads {
        input: d_input,
        scale: d_scale,
        shift: d_shift,
    }
}
