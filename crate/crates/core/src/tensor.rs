//! Dense float/integer tensors, symmetric int8 quantization primitives, and
//! the nonlinearities used by the rest of the crate.
//!
//! All operations are pure functions of their inputs and deterministic:
//! matrix products accumulate row-major with ascending inner index, so
//! results are bitwise reproducible across runs and thread counts.

use std::sync::atomic::{AtomicBool, Ordering};

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Quantized values live in [-127, 127]; -128 is never produced so that
/// negation can never overflow.
pub const QUANT_MAX: i32 = 127;

static PARALLEL: AtomicBool = AtomicBool::new(true);

/// Enable or disable data-parallel kernels globally.
///
/// The benchmark harness turns parallelism off while timing so that latency
/// numbers reflect single-threaded execution; training leaves it on.
pub fn set_parallel_enabled(enabled: bool) {
    PARALLEL.store(enabled, Ordering::SeqCst);
}

pub fn parallel_enabled() -> bool {
    PARALLEL.load(Ordering::SeqCst)
}

/// Minimum number of multiply-accumulates before a matmul is split across
/// threads; below this the fork overhead dominates.
const PAR_MIN_MACS: usize = 64 * 1024;

// ---------------------------------------------------------------------------
// Element trait: lets the same kernel source run in f32 (production) and f64
// (the finite-difference replay used by gradient checks).
// ---------------------------------------------------------------------------

pub(crate) trait Real:
    Copy
    + PartialOrd
    + Send
    + Sync
    + std::fmt::Debug
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
{
    const ZERO: Self;
    const ONE: Self;
    const HALF: Self;
    fn from_f32(v: f32) -> Self;
    fn from_usize(v: usize) -> Self;
    fn sqrt(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn erf(self) -> Self;
}

impl Real for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    const HALF: Self = 0.5;
    fn from_f32(v: f32) -> Self {
        v
    }
    fn from_usize(v: usize) -> Self {
        v as f32
    }
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    fn exp(self) -> Self {
        f32::exp(self)
    }
    fn ln(self) -> Self {
        f32::ln(self)
    }
    fn erf(self) -> Self {
        libm::erff(self)
    }
}

impl Real for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    const HALF: Self = 0.5;
    fn from_f32(v: f32) -> Self {
        v as f64
    }
    fn from_usize(v: usize) -> Self {
        v as f64
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn erf(self) -> Self {
        libm::erf(self)
    }
}

// ---------------------------------------------------------------------------
// Tensor types
// ---------------------------------------------------------------------------

/// Dense row-major f32 n-dimensional array; the universal float carrier.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

/// int8 payload plus a strictly positive per-tensor scale; symmetric
/// quantization with zero-point 0.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantTensor {
    shape: Vec<usize>,
    data: Vec<i8>,
    scale: f32,
}

/// int32 accumulators produced by int8 matrix products.
#[derive(Clone, Debug, PartialEq)]
pub struct AccTensor {
    shape: Vec<usize>,
    data: Vec<i32>,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::InvalidParameter(format!(
            "tensor dimensions must be positive, got {shape:?}"
        )));
    }
    Ok(shape.iter().product())
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n = check_shape(&shape)?;
        if n != data.len() {
            return Err(Error::ShapeMismatch {
                op: "Tensor::new",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: Vec<usize>, value: f32) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> f32) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Reinterpret with a new shape of identical element count.
    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n = check_shape(&shape)?;
        if n != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, &v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl QuantTensor {
    pub fn new(shape: Vec<usize>, data: Vec<i8>, scale: f32) -> Result<Self> {
        let n = check_shape(&shape)?;
        if n != data.len() {
            return Err(Error::ShapeMismatch {
                op: "QuantTensor::new",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "quantization scale must be finite and > 0, got {scale}"
            )));
        }
        if data.iter().any(|&q| q == i8::MIN) {
            return Err(Error::InvalidParameter(
                "quantized payload contains -128; symmetric range is [-127, 127]".into(),
            ));
        }
        Ok(Self { shape, data, scale })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[i8] {
        &self.data
    }

    pub fn scale(&self) -> f32 {
        self.scale
    }
}

impl AccTensor {
    pub fn new(shape: Vec<usize>, data: Vec<i32>) -> Result<Self> {
        let n = check_shape(&shape)?;
        if n != data.len() {
            return Err(Error::ShapeMismatch {
                op: "AccTensor::new",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[i32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [i32] {
        &mut self.data
    }
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

/// `out[i][j] += sum_k a[i][k] * b[k][j]`, accumulated in ascending k per
/// output element. Splitting rows across threads does not change any
/// accumulation chain, so the result is bitwise identical either way.
pub(crate) fn matmul_kernel<T: Real>(
    a: &[T],
    b: &[T],
    m: usize,
    k: usize,
    n: usize,
    out: &mut [T],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let row = |i: usize, crow: &mut [T]| {
        let arow = &a[i * k..(i + 1) * k];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (c, &bv) in crow.iter_mut().zip(brow) {
                *c = *c + av * bv;
            }
        }
    };
    if parallel_enabled() && m > 1 && m * k * n >= PAR_MIN_MACS {
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, crow)| row(i, crow));
    } else {
        for (i, crow) in out.chunks_mut(n).enumerate() {
            row(i, crow);
        }
    }
}

fn mat_dims(op: &'static str, a: &[usize], b: &[usize]) -> Result<(usize, usize, usize)> {
    if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        });
    }
    Ok((a[0], a[1], b[1]))
}

/// Float matrix product `[M,K] x [K,N] -> [M,N]`.
pub fn matmul_f32(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k, n) = mat_dims("matmul_f32", a.shape(), b.shape())?;
    let mut out = vec![0.0f32; m * n];
    matmul_kernel(a.data(), b.data(), m, k, n, &mut out);
    Tensor::new(vec![m, n], out)
}

/// Int8 matrix product with exact int32 accumulation.
///
/// The dequantized value of each output element is
/// `a.scale * b.scale * acc`.
pub fn matmul_i8(a: &QuantTensor, b: &QuantTensor) -> Result<AccTensor> {
    let (m, k, n) = mat_dims("matmul_i8", a.shape(), b.shape())?;
    let mut out = vec![0i32; m * n];
    matmul_i8_kernel(a.data(), b.data(), m, k, n, &mut out);
    AccTensor::new(vec![m, n], out)
}

pub(crate) fn matmul_i8_kernel(
    a: &[i8],
    b: &[i8],
    m: usize,
    k: usize,
    n: usize,
    out: &mut [i32],
) {
    let row = |i: usize, crow: &mut [i32]| {
        let arow = &a[i * k..(i + 1) * k];
        for (kk, &av) in arow.iter().enumerate() {
            let av = av as i32;
            let brow = &b[kk * n..(kk + 1) * n];
            for (c, &bv) in crow.iter_mut().zip(brow) {
                *c += av * bv as i32;
            }
        }
    };
    if parallel_enabled() && m > 1 && m * k * n >= PAR_MIN_MACS {
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, crow)| row(i, crow));
    } else {
        for (i, crow) in out.chunks_mut(n).enumerate() {
            row(i, crow);
        }
    }
}

/// Batched product over the leading dimension: `[B,M,K] x [B,K,N] -> [B,M,N]`,
/// or `[B,M,K] x [B,N,K] -> [B,M,N]` with `transpose_b`.
pub(crate) fn batch_matmul_kernel<T: Real>(
    a: &[T],
    b: &[T],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    transpose_b: bool,
    out: &mut [T],
) {
    debug_assert_eq!(out.len(), batch * m * n);
    let one = |bi: usize, obatch: &mut [T]| {
        let abatch = &a[bi * m * k..(bi + 1) * m * k];
        let bbatch = &b[bi * k * n..(bi + 1) * k * n];
        if transpose_b {
            // b batch is [n, k]; c[i][j] = dot(a row i, b row j)
            for i in 0..m {
                let arow = &abatch[i * k..(i + 1) * k];
                for j in 0..n {
                    let brow = &bbatch[j * k..(j + 1) * k];
                    let mut acc = T::ZERO;
                    for (&av, &bv) in arow.iter().zip(brow) {
                        acc = acc + av * bv;
                    }
                    obatch[i * n + j] = acc;
                }
            }
        } else {
            for i in 0..m {
                let arow = &abatch[i * k..(i + 1) * k];
                let crow = &mut obatch[i * n..(i + 1) * n];
                for (kk, &av) in arow.iter().enumerate() {
                    let brow = &bbatch[kk * n..(kk + 1) * n];
                    for (c, &bv) in crow.iter_mut().zip(brow) {
                        *c = *c + av * bv;
                    }
                }
            }
        }
    };
    if parallel_enabled() && batch > 1 && batch * m * k * n >= PAR_MIN_MACS {
        out.par_chunks_mut(m * n)
            .enumerate()
            .for_each(|(bi, ob)| one(bi, ob));
    } else {
        for (bi, ob) in out.chunks_mut(m * n).enumerate() {
            one(bi, ob);
        }
    }
}

pub(crate) fn batch_matmul_i8_kernel(
    a: &[i8],
    b: &[i8],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    transpose_b: bool,
    out: &mut [i32],
) {
    let one = |bi: usize, obatch: &mut [i32]| {
        let abatch = &a[bi * m * k..(bi + 1) * m * k];
        let bbatch = &b[bi * k * n..(bi + 1) * k * n];
        if transpose_b {
            for i in 0..m {
                let arow = &abatch[i * k..(i + 1) * k];
                for j in 0..n {
                    let brow = &bbatch[j * k..(j + 1) * k];
                    let mut acc = 0i32;
                    for (&av, &bv) in arow.iter().zip(brow) {
                        acc += av as i32 * bv as i32;
                    }
                    obatch[i * n + j] = acc;
                }
            }
        } else {
            for i in 0..m {
                let arow = &abatch[i * k..(i + 1) * k];
                let crow = &mut obatch[i * n..(i + 1) * n];
                for (kk, &av) in arow.iter().enumerate() {
                    let av = av as i32;
                    let brow = &bbatch[kk * n..(kk + 1) * n];
                    for (c, &bv) in crow.iter_mut().zip(brow) {
                        *c += av * bv as i32;
                    }
                }
            }
        }
    };
    if parallel_enabled() && batch > 1 && batch * m * k * n >= PAR_MIN_MACS {
        out.par_chunks_mut(m * n)
            .enumerate()
            .for_each(|(bi, ob)| one(bi, ob));
    } else {
        for (bi, ob) in out.chunks_mut(m * n).enumerate() {
            one(bi, ob);
        }
    }
}

// ---------------------------------------------------------------------------
// Quantization
// ---------------------------------------------------------------------------

/// Round half away from zero, clamp to the symmetric int8 range.
#[inline]
pub fn quantize_value(x: f32, scale: f32) -> i8 {
    (x / scale).round().clamp(-(QUANT_MAX as f32), QUANT_MAX as f32) as i8
}

/// Quantize a float tensor with a fixed positive scale.
pub fn quantize(x: &Tensor, scale: f32) -> Result<QuantTensor> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "quantization scale must be finite and > 0, got {scale}"
        )));
    }
    let data = x.data().iter().map(|&v| quantize_value(v, scale)).collect();
    Ok(QuantTensor {
        shape: x.shape().to_vec(),
        data,
        scale,
    })
}

/// Map int8 values back to float: `value = scale * q`.
pub fn dequantize(q: &QuantTensor) -> Tensor {
    Tensor {
        shape: q.shape.clone(),
        data: q.data.iter().map(|&v| v as f32 * q.scale).collect(),
    }
}

/// Max-abs calibration: scale = max |x| / 127 over all samples, or 1.0 when
/// every sample is identically zero (keeps the pipeline total).
pub fn calibrate_scale(samples: &[Tensor]) -> Result<f32> {
    if samples.is_empty() {
        return Err(Error::InvalidParameter(
            "calibrate_scale requires at least one sample".into(),
        ));
    }
    let max_abs = samples.iter().fold(0.0f32, |m, t| m.max(t.max_abs()));
    Ok(scale_from_max_abs(max_abs))
}

pub fn scale_from_max_abs(max_abs: f32) -> f32 {
    if max_abs == 0.0 {
        1.0
    } else {
        max_abs / QUANT_MAX as f32
    }
}

// ---------------------------------------------------------------------------
// Normalization and nonlinearities
// ---------------------------------------------------------------------------

pub(crate) fn layernorm_kernel<T: Real>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    eps: T,
    channels: usize,
    out: &mut [T],
) {
    let inv_c = T::ONE / T::from_usize(channels);
    for (row, orow) in x.chunks(channels).zip(out.chunks_mut(channels)) {
        let mut mean = T::ZERO;
        for &v in row {
            mean = mean + v;
        }
        mean = mean * inv_c;
        let mut var = T::ZERO;
        for &v in row {
            let d = v - mean;
            var = var + d * d;
        }
        var = var * inv_c;
        let inv_std = T::ONE / (var + eps).sqrt();
        for ((o, &v), (&g, &b)) in orow.iter_mut().zip(row).zip(gamma.iter().zip(beta)) {
            *o = (v - mean) * inv_std * g + b;
        }
    }
}

/// Layer normalization over the last dimension with biased variance.
pub fn layernorm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f32) -> Result<Tensor> {
    if !(eps > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "layernorm eps must be > 0, got {eps}"
        )));
    }
    let c = *x.shape().last().ok_or_else(|| Error::InvalidParameter(
        "layernorm input must have at least one dimension".into(),
    ))?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::ShapeMismatch {
            op: "layernorm",
            lhs: x.shape().to_vec(),
            rhs: gamma.shape().to_vec(),
        });
    }
    let mut out = vec![0.0f32; x.len()];
    layernorm_kernel(x.data(), gamma.data(), beta.data(), eps, c, &mut out);
    Tensor::new(x.shape().to_vec(), out)
}

pub(crate) fn softmax_kernel<T: Real>(x: &[T], channels: usize, out: &mut [T]) {
    for (row, orow) in x.chunks(channels).zip(out.chunks_mut(channels)) {
        let mut max = row[0];
        for &v in &row[1..] {
            if v > max {
                max = v;
            }
        }
        let mut sum = T::ZERO;
        for (o, &v) in orow.iter_mut().zip(row) {
            let e = (v - max).exp();
            *o = e;
            sum = sum + e;
        }
        let inv = T::ONE / sum;
        for o in orow.iter_mut() {
            *o = *o * inv;
        }
    }
}

/// Numerically stabilized softmax over the last dimension.
pub fn softmax_lastdim(x: &Tensor) -> Tensor {
    let c = *x.shape().last().expect("softmax input must be non-scalar");
    let mut out = vec![0.0f32; x.len()];
    softmax_kernel(x.data(), c, &mut out);
    Tensor {
        shape: x.shape().to_vec(),
        data: out,
    }
}

#[inline]
pub(crate) fn gelu_value<T: Real>(x: T) -> T {
    // Exact erf form: 0.5 * x * (1 + erf(x / sqrt(2)))
    let inv_sqrt2 = T::ONE / (T::ONE + T::ONE).sqrt();
    x * T::HALF * (T::ONE + (x * inv_sqrt2).erf())
}

/// Elementwise GELU, exact erf form.
pub fn gelu(x: &Tensor) -> Tensor {
    Tensor {
        shape: x.shape().to_vec(),
        data: x.data().iter().map(|&v| gelu_value(v)).collect(),
    }
}

#[inline]
pub(crate) fn relu_value<T: Real>(x: T) -> T {
    if x > T::ZERO {
        x
    } else {
        T::ZERO
    }
}

/// Elementwise max(0, x).
pub fn relu(x: &Tensor) -> Tensor {
    Tensor {
        shape: x.shape().to_vec(),
        data: x.data().iter().map(|&v| relu_value(v)).collect(),
    }
}

/// ReLU on raw int32 accumulators; this is the integer-side activation that
/// fuses onto a preceding GEMM.
pub fn relu_i32(x: &AccTensor) -> AccTensor {
    AccTensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|&v| v.max(0)).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seeded(vals: &[f32]) -> Tensor {
        Tensor::new(vec![vals.len()], vals.to_vec()).unwrap()
    }

    /// Independent scalar triple-loop product used as the matmul oracle.
    fn matmul_oracle(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let n = b.shape()[1];
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0f32;
                for kk in 0..k {
                    acc += a.data()[i * k + kk] * b.data()[kk * n + j];
                }
                out[i * n + j] = acc;
            }
        }
        Tensor::new(vec![m, n], out).unwrap()
    }

    fn rng_tensor(shape: Vec<usize>, seed: u64) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn matmul_identity_passes_through() {
        let eye = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(matmul_f32(&eye, &b).unwrap(), b);
    }

    #[test]
    fn matmul_hand_arithmetic() {
        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap();
        let c = matmul_f32(&a, &b).unwrap();
        assert_eq!(c.data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle_exactly() {
        let a = rng_tensor(vec![5, 4], 11);
        let b = rng_tensor(vec![4, 3], 12);
        let got = matmul_f32(&a, &b).unwrap();
        let want = matmul_oracle(&a, &b);
        for (x, y) in got.data().iter().zip(want.data()) {
            assert_eq!(x.to_bits(), y.to_bits(), "0 ulp required");
        }
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let a = Tensor::zeros(vec![2, 3]);
        let b = Tensor::zeros(vec![2, 3]);
        let err = matmul_f32(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "got {msg}");
    }

    #[test]
    fn matmul_i8_zero_and_saturated_inputs() {
        let z = QuantTensor::new(vec![1, 4], vec![0; 4], 1.0).unwrap();
        let b = QuantTensor::new(vec![4, 2], vec![5; 8], 1.0).unwrap();
        assert!(matmul_i8(&z, &b).unwrap().data().iter().all(|&v| v == 0));

        let a = QuantTensor::new(vec![1, 1], vec![127], 1.0).unwrap();
        let b = QuantTensor::new(vec![1, 1], vec![127], 1.0).unwrap();
        assert_eq!(matmul_i8(&a, &b).unwrap().data(), &[16129]);
    }

    #[test]
    fn matmul_i8_matches_widening_oracle_exactly() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let (m, k, n) = (6, 8, 5);
        let a: Vec<i8> = (0..m * k).map(|_| rng.gen_range(-127..=127)).collect();
        let b: Vec<i8> = (0..k * n).map(|_| rng.gen_range(-127..=127)).collect();
        let qa = QuantTensor::new(vec![m, k], a.clone(), 0.5).unwrap();
        let qb = QuantTensor::new(vec![k, n], b.clone(), 0.25).unwrap();
        let acc = matmul_i8(&qa, &qb).unwrap();
        for i in 0..m {
            for j in 0..n {
                let mut want = 0i64;
                for kk in 0..k {
                    want += a[i * k + kk] as i64 * b[kk * n + j] as i64;
                }
                assert_eq!(acc.data()[i * n + j] as i64, want);
            }
        }
    }

    #[test]
    fn batch_matmul_agrees_with_per_slice_matmul() {
        let a = rng_tensor(vec![3, 4, 5], 31);
        let b = rng_tensor(vec![3, 5, 2], 32);
        let mut out = vec![0.0f32; 3 * 4 * 2];
        batch_matmul_kernel(a.data(), b.data(), 3, 4, 5, 2, false, &mut out);
        for bi in 0..3 {
            let sa = Tensor::new(vec![4, 5], a.data()[bi * 20..(bi + 1) * 20].to_vec()).unwrap();
            let sb = Tensor::new(vec![5, 2], b.data()[bi * 10..(bi + 1) * 10].to_vec()).unwrap();
            let want = matmul_f32(&sa, &sb).unwrap();
            assert_eq!(&out[bi * 8..(bi + 1) * 8], want.data());
        }
    }

    #[test]
    fn batch_matmul_transpose_b_is_a_dot_of_rows() {
        let a = rng_tensor(vec![2, 3, 4], 41);
        let b = rng_tensor(vec![2, 5, 4], 42);
        let mut got = vec![0.0f32; 2 * 3 * 5];
        batch_matmul_kernel(a.data(), b.data(), 2, 3, 4, 5, true, &mut got);
        for bi in 0..2 {
            for i in 0..3 {
                for j in 0..5 {
                    let mut want = 0.0f32;
                    for kk in 0..4 {
                        want += a.data()[bi * 12 + i * 4 + kk] * b.data()[bi * 20 + j * 4 + kk];
                    }
                    assert_eq!(got[bi * 15 + i * 5 + j], want);
                }
            }
        }
    }

    #[test]
    fn quantize_exact_multiples_and_saturation() {
        let q = quantize(&seeded(&[-1.27, 0.0, 1.27]), 0.01).unwrap();
        assert_eq!(q.data(), &[-127, 0, 127]);

        let q = quantize(&seeded(&[0.0]), 0.37).unwrap();
        assert_eq!(q.data(), &[0]);

        let q = quantize(&seeded(&[1000.0]), 0.01).unwrap();
        assert_eq!(q.data(), &[127]);
    }

    #[test]
    fn quantize_rejects_nonpositive_scale() {
        assert!(quantize(&seeded(&[1.0]), 0.0).is_err());
        assert!(quantize(&seeded(&[1.0]), -0.5).is_err());
    }

    #[test]
    fn dequantize_and_rounding_edge() {
        let q = QuantTensor::new(vec![3], vec![-127, 0, 127], 0.01).unwrap();
        let x = dequantize(&q);
        assert_eq!(x.data(), &[-1.27, 0.0, 1.27]);

        // 0.005/0.01 = 0.5 rounds away from zero to 1 -> 0.01; error is
        // exactly scale/2.
        let q = quantize(&seeded(&[0.005]), 0.01).unwrap();
        assert_eq!(q.data(), &[1]);
        let back = dequantize(&q);
        assert!((back.data()[0] - 0.01).abs() < 1e-9);
    }

    #[test]
    fn quantize_round_trip_bound_sweep() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let scale = 1.0 / 127.0;
        let mut worst = 0.0f32;
        for _ in 0..10_000 {
            let x = rng.gen_range(-1.0f32..=1.0);
            let q = quantize_value(x, scale);
            let err = (x - q as f32 * scale).abs();
            worst = worst.max(err);
        }
        assert!(worst <= scale / 2.0 + f32::EPSILON, "worst = {worst}");
    }

    #[test]
    fn calibrate_scale_basics() {
        let s = calibrate_scale(&[seeded(&[-2.54, 1.0])]).unwrap();
        assert!((s - 0.02).abs() < 1e-7);

        let s = calibrate_scale(&[seeded(&[0.0, 0.0])]).unwrap();
        assert_eq!(s, 1.0);

        assert!(calibrate_scale(&[]).is_err());
    }

    #[test]
    fn calibrate_scale_matches_linear_scan() {
        let batch: Vec<Tensor> = (0..4).map(|i| rng_tensor(vec![17, 5], 100 + i)).collect();
        let s = calibrate_scale(&batch).unwrap();
        let mut max_abs = 0.0f32;
        for t in &batch {
            for &v in t.data() {
                max_abs = max_abs.max(v.abs());
            }
        }
        assert_eq!(s * 127.0, max_abs);
    }

    #[test]
    fn layernorm_constant_row_is_near_zero() {
        let x = Tensor::filled(vec![2, 8], 3.5);
        let gamma = Tensor::filled(vec![8], 1.0);
        let beta = Tensor::zeros(vec![8]);
        let y = layernorm(&x, &gamma, &beta, 1e-5).unwrap();
        for &v in y.data() {
            assert!(v.abs() <= 1e-5f32.sqrt());
        }
    }

    #[test]
    fn layernorm_already_normalized_row() {
        let x = seeded(&[1.0, -1.0]).reshape(vec![1, 2]).unwrap();
        let gamma = Tensor::filled(vec![2], 1.0);
        let beta = Tensor::zeros(vec![2]);
        let y = layernorm(&x, &gamma, &beta, 1e-12).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-5);
        assert!((y.data()[1] + 1.0).abs() < 1e-5);
    }

    #[test]
    fn layernorm_matches_two_pass_scalar_oracle() {
        let x = rng_tensor(vec![4, 9], 9);
        let gamma = rng_tensor(vec![9], 10);
        let beta = rng_tensor(vec![9], 11);
        let eps = 1e-5f32;
        let y = layernorm(&x, &gamma, &beta, eps).unwrap();
        for r in 0..4 {
            let row = &x.data()[r * 9..(r + 1) * 9];
            let mean: f64 = row.iter().map(|&v| v as f64).sum::<f64>() / 9.0;
            let var: f64 =
                row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / 9.0;
            for c in 0..9 {
                let want = (row[c] as f64 - mean) / (var + eps as f64).sqrt()
                    * gamma.data()[c] as f64
                    + beta.data()[c] as f64;
                let got = y.data()[r * 9 + c] as f64;
                let denom = want.abs().max(1.0);
                assert!((got - want).abs() / denom < 1e-6);
            }
        }
    }

    #[test]
    fn layernorm_rejects_mismatched_params() {
        let x = Tensor::zeros(vec![2, 4]);
        let gamma = Tensor::filled(vec![3], 1.0);
        let beta = Tensor::zeros(vec![3]);
        assert!(layernorm(&x, &gamma, &beta, 1e-5).is_err());
    }

    #[test]
    fn softmax_uniform_and_analytic_rows() {
        let y = softmax_lastdim(&Tensor::zeros(vec![1, 5]));
        for &v in y.data() {
            assert!((v - 0.2).abs() < 1e-7);
        }

        let y = softmax_lastdim(&seeded(&[0.0, 3.0f32.ln()]).reshape(vec![1, 2]).unwrap());
        assert!((y.data()[0] - 0.25).abs() < 1e-6);
        assert!((y.data()[1] - 0.75).abs() < 1e-6);
    }

    #[test]
    fn softmax_is_shift_invariant() {
        // Values on a 1/1024 grid stay exact under a +1e4 offset, so the
        // comparison isolates the stabilization rather than f32 addition.
        let raw = rng_tensor(vec![3, 7], 55);
        let x = Tensor::from_fn(vec![3, 7], |i| (raw.data()[i] * 1024.0).round() / 1024.0);
        let shifted = Tensor::from_fn(vec![3, 7], |i| x.data()[i] + 1e4);
        let a = softmax_lastdim(&x);
        let b = softmax_lastdim(&shifted);
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p - q).abs() < 1e-6);
        }
        for row in a.data().chunks(7) {
            let sum: f32 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu(&seeded(&[0.0])).data()[0], 0.0);

        // Oracle: x * Phi(x) with Phi computed from the f64 error function.
        let phi1 = 0.5 * (1.0 + libm::erf(1.0 / std::f64::consts::SQRT_2));
        let got = gelu(&seeded(&[1.0])).data()[0] as f64;
        assert!((got - phi1).abs() < 1e-5);
        assert!((got - 0.841345).abs() < 1e-5);

        let got = gelu(&seeded(&[10.0])).data()[0];
        assert!((got - 10.0).abs() < 1e-6);
    }

    #[test]
    fn relu_basics_and_int_accumulators() {
        assert_eq!(relu(&seeded(&[-3.0, 0.0, 2.0])).data(), &[0.0, 0.0, 2.0]);

        let scaled = relu(&seeded(&[0.5 * -2.0, 0.5 * 4.0]));
        assert_eq!(scaled.data(), &[0.0, 2.0]);

        let acc = AccTensor::new(vec![2], vec![-16129, 16129]).unwrap();
        assert_eq!(relu_i32(&acc).data(), &[0, 16129]);
    }

    #[test]
    fn relu_commutes_with_positive_scale_bitwise() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        for _ in 0..10_000 {
            let s: f32 = rng.gen_range(1e-6f32..1e4);
            let x: f32 = rng.gen_range(-1e4f32..1e4);
            let lhs = relu_value(s * x);
            let rhs = s * relu_value(x);
            assert_eq!(lhs.to_bits(), rhs.to_bits(), "s={s} x={x}");
        }
    }

    #[test]
    fn gelu_does_not_commute_with_scale() {
        let s = 2.0f32;
        let x = -1.0f32;
        let lhs = gelu(&seeded(&[s * x])).data()[0];
        let rhs = s * gelu(&seeded(&[x])).data()[0];
        assert!((lhs - rhs).abs() >= 1e-3, "lhs={lhs} rhs={rhs}");
    }

    #[test]
    fn parallel_matmul_is_bitwise_identical_to_serial() {
        let a = rng_tensor(vec![64, 96], 71);
        let b = rng_tensor(vec![96, 128], 72);
        set_parallel_enabled(false);
        let serial = matmul_f32(&a, &b).unwrap();
        set_parallel_enabled(true);
        let parallel = matmul_f32(&a, &b).unwrap();
        for (x, y) in serial.data().iter().zip(parallel.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn quant_round_trip_error_within_half_step(
                scale in 1e-4f32..10.0,
                frac in -1.0f32..1.0,
            ) {
                // Any x within the representable range round-trips to within
                // half a quantization step.
                let x = frac * 127.0 * scale;
                let q = quantize_value(x, scale);
                let err = (x - q as f32 * scale).abs();
                prop_assert!(err <= scale / 2.0 * (1.0 + 1e-5));
            }

            #[test]
            fn softmax_rows_are_distributions(vals in proptest::collection::vec(-50.0f32..50.0, 2..24)) {
                let n = vals.len();
                let t = Tensor::new(vec![1, n], vals).unwrap();
                let y = softmax_lastdim(&t);
                let sum: f32 = y.data().iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-6);
                prop_assert!(y.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }
}
