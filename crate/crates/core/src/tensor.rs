//! Dense row-major tensors and the elementary kernels the models are built from.
//!
//! Kernels here are plain value functions. The differentiable versions in
//! [`crate::autodiff`] call into them for the forward pass.

use crate::error::{Error, Result};
use crate::scalar::{self, Scalar};

/// Epsilon used by every layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
}

/// Padding mode for the depthwise 1-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvMode {
    /// `K - 1` zeros on the left.
    Causal,
    /// `(K - 1) / 2` zeros on the left, the rest on the right.
    Same,
}

impl ConvMode {
    pub fn left_pad(self, kernel: usize) -> usize {
        match self {
            ConvMode::Causal => kernel - 1,
            ConvMode::Same => (kernel - 1) / 2,
        }
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::contract(format!(
                "shape {:?} holds {} values but {} were given",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![T::zero(); n],
            requires_grad: false,
        }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let mut t = Self::zeros(shape);
        t.data.iter_mut().for_each(|v| *v = value);
        t
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
        }
    }

    pub fn from_f64(shape: impl Into<Vec<usize>>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&x| T::lit(x)).collect())
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: (0..n).map(&mut f).collect(),
            requires_grad: false,
        }
    }

    pub fn with_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
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

    /// Size of the last axis (1 for a rank-0 tensor).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn get(&self, index: &[usize]) -> T {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: T) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        index.iter().zip(&self.shape).fold(0, |acc, (&i, &d)| {
            assert!(i < d, "index {i} out of bounds for axis of size {d}");
            acc * d + i
        })
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.len() {
            return Err(Error::shape("reshape", &self.shape, &shape));
        }
        Ok(Self {
            shape,
            data: self.data.clone(),
            requires_grad: self.requires_grad,
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
            requires_grad: false,
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(op, &self.shape, &other.shape));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
            requires_grad: false,
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|x| x * s)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::from_usize_lossy(self.len().max(1))
    }

    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |m, &x| if x.abs() > m { x.abs() } else { m })
    }

    /// Largest elementwise absolute difference; `inf` on shape mismatch.
    pub fn max_abs_diff(&self, other: &Self) -> T {
        if self.shape != other.shape {
            return T::infinity();
        }
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| {
                let d = (a - b).abs();
                if d > m || d.is_nan() {
                    d
                } else {
                    m
                }
            })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Explicit NaN/Inf check naming the offending tensor.
    pub fn check_finite(&self, name: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(name.to_string()))
        }
    }

    pub fn sigmoid(&self) -> Self {
        self.map(scalar::sigmoid)
    }

    pub fn silu(&self) -> Self {
        self.map(scalar::silu)
    }

    pub fn softplus(&self) -> Self {
        self.map(scalar::softplus)
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[T] {
        let n = self.last_dim();
        &self.data[i * n..(i + 1) * n]
    }

    /// Rows `[start, start + count)` of a rank-2 tensor.
    pub fn rows(&self, start: usize, count: usize) -> Result<Self> {
        if self.rank() != 2 || start + count > self.shape[0] {
            return Err(Error::shape("rows", &self.shape, &[start, count]));
        }
        let n = self.shape[1];
        Self::new(
            vec![count, n],
            self.data[start * n..(start + count) * n].to_vec(),
        )
    }

    /// Concatenates rank-2 tensors along the first axis.
    pub fn concat_rows(parts: &[Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat_rows of an empty list"))?;
        let n = first.last_dim();
        let mut data = Vec::new();
        let mut m = 0;
        for p in parts {
            if p.rank() != 2 || p.shape[1] != n {
                return Err(Error::shape("concat_rows", &first.shape, &p.shape));
            }
            m += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        Self::new(vec![m, n], data)
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Self> {
        if self.rank() < 2 {
            return Err(Error::shape("transpose", &self.shape, &[]));
        }
        let r = self.rank();
        let (m, n) = (self.shape[r - 2], self.shape[r - 1]);
        let batch = self.len() / (m * n).max(1);
        let mut out = vec![T::zero(); self.len()];
        for b in 0..batch {
            let base = b * m * n;
            for i in 0..m {
                for j in 0..n {
                    out[base + j * m + i] = self.data[base + i * n + j];
                }
            }
        }
        let mut shape = self.shape.clone();
        shape.swap(r - 2, r - 1);
        Self::new(shape, out)
    }
}

/// Batched matrix product `[.., m, k] x [.., k, n] -> [.., m, n]` with
/// broadcasting over leading batch axes.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() < 2 || b.rank() < 2 {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let (ra, rb) = (a.rank(), b.rank());
    let (m, k) = (a.shape[ra - 2], a.shape[ra - 1]);
    let (k2, n) = (b.shape[rb - 2], b.shape[rb - 1]);
    if k != k2 {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let batch_a = &a.shape[..ra - 2];
    let batch_b = &b.shape[..rb - 2];
    let batch = broadcast_shape(batch_a, batch_b)
        .ok_or_else(|| Error::shape("matmul", a.shape(), b.shape()))?;
    let nbatch: usize = batch.iter().product();
    let mut out = vec![T::zero(); nbatch * m * n];
    for bi in 0..nbatch {
        let oa = broadcast_offset(bi, &batch, batch_a) * m * k;
        let ob = broadcast_offset(bi, &batch, batch_b) * k * n;
        matmul_into(
            &a.data[oa..oa + m * k],
            &b.data[ob..ob + k * n],
            &mut out[bi * m * n..(bi + 1) * m * n],
            m,
            k,
            n,
        );
    }
    let mut shape = batch;
    shape.extend([m, n]);
    Tensor::new(shape, out)
}

pub(crate) fn matmul_into<T: Scalar>(
    a: &[T],
    b: &[T],
    out: &mut [T],
    m: usize,
    k: usize,
    n: usize,
) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let r = a.len().max(b.len());
    let mut out = vec![0; r];
    for i in 0..r {
        let da = if i + a.len() >= r {
            a[i + a.len() - r]
        } else {
            1
        };
        let db = if i + b.len() >= r {
            b[i + b.len() - r]
        } else {
            1
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Flat batch index in `full` mapped to the flat index of the (possibly
/// broadcast) operand batch shape `part`.
fn broadcast_offset(flat: usize, full: &[usize], part: &[usize]) -> usize {
    let mut rem = flat;
    let mut idx = vec![0; full.len()];
    for i in (0..full.len()).rev() {
        idx[i] = rem % full[i];
        rem /= full[i];
    }
    let skip = full.len() - part.len();
    part.iter().enumerate().fold(0, |acc, (i, &d)| {
        acc * d + if d == 1 { 0 } else { idx[skip + i] }
    })
}

/// Softmax along `axis`, computed with max-subtraction.
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.rank() {
        return Err(Error::contract(format!(
            "softmax axis {axis} out of range for shape {:?}",
            x.shape()
        )));
    }
    let len = x.shape[axis];
    let inner: usize = x.shape[axis + 1..].iter().product();
    let outer: usize = x.shape[..axis].iter().product();
    let mut out = x.data.clone();
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let max = (0..len)
                .map(|j| x.data[at(j)])
                .fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for j in 0..len {
                let e = (x.data[at(j)] - max).exp();
                out[at(j)] = e;
                total = total + e;
            }
            for j in 0..len {
                out[at(j)] = out[at(j)] / total;
            }
        }
    }
    Tensor::new(x.shape.clone(), out)
}

/// `log(softmax(x))` over the last axis.
pub fn log_softmax<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let n = x.last_dim();
    let mut out = x.data.clone();
    for row in out.chunks_mut(n.max(1)) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
        row.iter_mut().for_each(|v| *v = *v - lse);
    }
    Tensor {
        shape: x.shape.clone(),
        data: out,
        requires_grad: false,
    }
}

/// Layer normalization over the last axis with affine `gamma`, `beta`.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> Result<Tensor<T>> {
    let n = x.last_dim();
    if gamma.shape() != [n] || beta.shape() != [n] {
        return Err(Error::shape("layer_norm", x.shape(), gamma.shape()));
    }
    let (out, _) = layer_norm_stats(x, gamma, beta);
    Ok(out)
}

/// Layer norm plus the per-row `(mean, 1/std)` needed by the backward pass.
pub(crate) fn layer_norm_stats<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> (Tensor<T>, Vec<(T, T)>) {
    let n = x.last_dim();
    let nf = T::from_usize_lossy(n);
    let eps = T::lit(LAYER_NORM_EPS);
    let mut out = x.data.clone();
    let mut stats = Vec::with_capacity(x.len() / n.max(1));
    for row in out.chunks_mut(n) {
        let mean = row.iter().copied().sum::<T>() / nf;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
        let rstd = T::one() / (var + eps).sqrt();
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) * rstd * gamma.data[j] + beta.data[j];
        }
        stats.push((mean, rstd));
    }
    (
        Tensor {
            shape: x.shape.clone(),
            data: out,
            requires_grad: false,
        },
        stats,
    )
}

/// Depthwise convolution over the first axis: `x: [M, E]`, `kernel: [K, E]`.
pub fn conv1d<T: Scalar>(x: &Tensor<T>, kernel: &Tensor<T>, mode: ConvMode) -> Result<Tensor<T>> {
    if x.rank() != 2 || kernel.rank() != 2 || x.shape[1] != kernel.shape[1] || kernel.shape[0] == 0
    {
        return Err(Error::shape("conv1d", x.shape(), kernel.shape()));
    }
    let (m, e) = (x.shape[0], x.shape[1]);
    let k = kernel.shape[0];
    let pad = mode.left_pad(k) as isize;
    let mut out = vec![T::zero(); m * e];
    for t in 0..m {
        for j in 0..k {
            let src = t as isize + j as isize - pad;
            if src < 0 || src >= m as isize {
                continue;
            }
            let src = src as usize;
            for c in 0..e {
                out[t * e + c] = out[t * e + c] + kernel.data[j * e + c] * x.data[src * e + c];
            }
        }
    }
    Tensor::new(vec![m, e], out)
}

/// Geometry of a strided 2-D convolution over an `[H, W, C]` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dSpec {
    pub fn out_dim(&self, input: usize, kernel: usize) -> usize {
        (input + 2 * self.pad).saturating_sub(kernel) / self.stride + 1
    }
}

/// Dense 2-D convolution: `x: [H, W, C]`, `kernel: [Kh, Kw, C, O]` -> `[H', W', O]`.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, kernel: &Tensor<T>, spec: Conv2dSpec) -> Result<Tensor<T>> {
    if x.rank() != 3 || kernel.rank() != 4 || x.shape[2] != kernel.shape[2] {
        return Err(Error::shape("conv2d", x.shape(), kernel.shape()));
    }
    let (h, w, c) = (x.shape[0], x.shape[1], x.shape[2]);
    let (kh, kw, o) = (kernel.shape[0], kernel.shape[1], kernel.shape[3]);
    if h + 2 * spec.pad < kh || w + 2 * spec.pad < kw || spec.stride == 0 {
        return Err(Error::shape("conv2d", x.shape(), kernel.shape()));
    }
    let (oh, ow) = (spec.out_dim(h, kh), spec.out_dim(w, kw));
    let mut out = vec![T::zero(); oh * ow * o];
    for oy in 0..oh {
        for ox in 0..ow {
            let dst = &mut out[(oy * ow + ox) * o..(oy * ow + ox + 1) * o];
            for ky in 0..kh {
                let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let src = ((iy as usize) * w + ix as usize) * c;
                    for ci in 0..c {
                        let xv = x.data[src + ci];
                        if xv == T::zero() {
                            continue;
                        }
                        let kbase = ((ky * kw + kx) * c + ci) * o;
                        for (d, &kv) in dst.iter_mut().zip(&kernel.data[kbase..kbase + o]) {
                            *d = *d + xv * kv;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![oh, ow, o], out)
}
