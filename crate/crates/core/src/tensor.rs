//! Dense row-major tensors and the pure kernels the model is built from.
//!
//! Kernels here are plain functions of their inputs. The differentiable graph in
//! [`crate::autodiff`] calls into the same kernels for its forward values, so a
//! kernel and its graph op cannot drift apart.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Storage precision of a tensor, with the numeric code used by the NTC1 container.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[repr(u8)]
pub enum DType {
    F32 = 0,
    F64 = 1,
}

impl DType {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size_of(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    const DTYPE: DType;

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal fits the float type")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("float converts to f64")
    }
}

impl Real for f32 {
    const DTYPE: DType = DType::F32;
}

impl Real for f64 {
    const DTYPE: DType = DType::F64;
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::dim(format!("zero extent in shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} holds {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn eye(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { T::one() } else { T::zero() })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::dim("ragged rows"));
        }
        Self::new(vec![m, n], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Rows and columns of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [m, n] => Ok((*m, *n)),
            s => Err(Error::dim(format!("expected rank-2 tensor, got shape {s:?}"))),
        }
    }

    pub fn at2(&self, i: usize, j: usize) -> T {
        let n = self.shape[self.shape.len() - 1];
        self.data[i * n + j]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::dim(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.same_shape(other)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn same_shape(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dim(format!(
                "shape mismatch {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.same_shape(other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        self.same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs())))
    }

    /// Index and value of the first maximum in row-major order.
    pub fn argmax(&self) -> (usize, T) {
        let mut best = (0, self.data[0]);
        for (i, &v) in self.data.iter().enumerate().skip(1) {
            if v > best.1 {
                best = (i, v);
            }
        }
        best
    }

    pub fn ensure_finite(&self, ctx: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(ctx.to_string()))
        }
    }

    pub fn transpose2(&self) -> Result<Self> {
        let (m, n) = self.dims2()?;
        let mut out = vec![T::zero(); m * n];
        transpose_into(&self.data, m, n, &mut out);
        Self::new(vec![n, m], out)
    }

    /// Rows `start..start+len` of a rank-2 tensor.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Self> {
        let (m, n) = self.dims2()?;
        if start + len > m || len == 0 {
            return Err(Error::dim(format!(
                "row slice {start}..{} out of {m}",
                start + len
            )));
        }
        Self::new(vec![len, n], self.data[start * n..(start + len) * n].to_vec())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::lit(v.as_f64())).collect(),
        }
    }
}

pub(crate) fn transpose_into<T: Copy>(src: &[T], m: usize, n: usize, dst: &mut [T]) {
    for i in 0..m {
        for j in 0..n {
            dst[j * m + i] = src[i * n + j];
        }
    }
}

/// `c += a · b` for row-major `a: m×k`, `b: k×n`, `c: m×n`.
pub(crate) fn gemm_acc<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (t, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let brow = &b[t * n..(t + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c += aᵀ · b` for row-major `a: k×m`, `b: k×n`, `c: m×n`.
pub(crate) fn gemm_tn_acc<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    for t in 0..k {
        let brow = &b[t * n..(t + 1) * n];
        let acol = &a[t * m..(t + 1) * m];
        for (i, &av) in acol.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c += a · bᵀ` for row-major `a: m×k`, `b: n×k`, `c: m×n`.
pub(crate) fn gemm_nt_acc<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    let mut bt = vec![T::zero(); k * n];
    transpose_into(b, n, k, &mut bt);
    gemm_acc(m, k, n, a, &bt, c);
}

pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::dim(format!(
            "matmul inner dimensions disagree: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut c = vec![T::zero(); m * n];
    gemm_acc(m, k, n, a.data(), b.data(), &mut c);
    let out = Tensor::new(vec![m, n], c)?;
    out.ensure_finite("matmul")?;
    Ok(out)
}

fn softmax_slice<T: Real>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// In-place softmax over each contiguous row of length `n`.
pub(crate) fn softmax_rows_inplace<T: Real>(data: &mut [T], n: usize) {
    for row in data.chunks_mut(n) {
        softmax_slice(row);
    }
}

/// Softmax along `axis`, computed with max subtraction.
pub fn softmax<T: Real>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let shape = x.shape();
    if axis >= shape.len() {
        return Err(Error::dim(format!("axis {axis} invalid for shape {shape:?}")));
    }
    x.ensure_finite("softmax input")?;
    let extent = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = x.clone();
    let data = out.data_mut();
    let mut buf = vec![T::zero(); extent];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * extent * inner + i;
            for (e, b) in buf.iter_mut().enumerate() {
                *b = data[base + e * inner];
            }
            softmax_slice(&mut buf);
            for (e, b) in buf.iter().enumerate() {
                data[base + e * inner] = *b;
            }
        }
    }
    Ok(out)
}

/// Per-row normalization statistics saved for the backward pass.
pub(crate) struct NormStats<T> {
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

pub(crate) fn layer_norm_with_stats<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, NormStats<T>)> {
    if eps <= T::zero() {
        return Err(Error::Parameter(format!("layer_norm eps must be > 0, got {eps}")));
    }
    let c = *x.shape().last().expect("tensor has rank >= 1");
    if gamma.len() != c || beta.len() != c {
        return Err(Error::dim(format!(
            "layer_norm affine parameters must have {c} entries"
        )));
    }
    let cf = T::lit(c as f64);
    let mut out = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = Vec::with_capacity(x.len() / c);
    for (r, row) in x.data().chunks(c).enumerate() {
        let mean = row.iter().copied().sum::<T>() / cf;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cf;
        let rs = T::one() / (var + eps).sqrt();
        rstd.push(rs);
        for j in 0..c {
            let h = (row[j] - mean) * rs;
            xhat[r * c + j] = h;
            out[r * c + j] = h * gamma.data()[j] + beta.data()[j];
        }
    }
    let out = Tensor::new(x.shape().to_vec(), out)?;
    out.ensure_finite("layer_norm")?;
    Ok((out, NormStats { xhat, rstd }))
}

/// Normalizes the last axis to zero mean and unit variance, then applies `gamma`/`beta`.
pub fn layer_norm<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    layer_norm_with_stats(x, gamma, beta, eps).map(|(y, _)| y)
}

pub fn sigmoid_scalar<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu_scalar<T: Real>(x: T) -> T {
    let k = T::lit(GELU_K);
    let c = T::lit(GELU_C);
    let half = T::lit(0.5);
    half * x * (T::one() + (k * (x + c * x * x * x)).tanh())
}

pub(crate) fn gelu_grad_scalar<T: Real>(x: T) -> T {
    let k = T::lit(GELU_K);
    let c = T::lit(GELU_C);
    let half = T::lit(0.5);
    let u = k * (x + c * x * x * x);
    let t = u.tanh();
    let du = k * (T::one() + T::lit(3.0) * c * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

pub fn gelu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(gelu_scalar)
}

/// Projection weights of one multi-head attention layer. Matrices are stored
/// `[in × out]` so a projection is `x · w + b`.
#[derive(Debug, Clone)]
pub struct MhaWeights<T> {
    pub wq: Tensor<T>,
    pub bq: Tensor<T>,
    pub wk: Tensor<T>,
    pub bk: Tensor<T>,
    pub wv: Tensor<T>,
    pub bv: Tensor<T>,
    pub wo: Tensor<T>,
    pub bo: Tensor<T>,
}

impl<T: Real> MhaWeights<T> {
    /// Identity projections with zero biases.
    pub fn identity(c: usize) -> Self {
        let eye = Tensor::eye(c);
        let zero = Tensor::zeros(&[c]);
        Self {
            wq: eye.clone(),
            bq: zero.clone(),
            wk: eye.clone(),
            bk: zero.clone(),
            wv: eye.clone(),
            bv: zero.clone(),
            wo: eye,
            bo: zero,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MhaOutput<T> {
    /// `[Nq × C]` attention output after the output projection.
    pub out: Tensor<T>,
    /// `[heads × Nq × Nk]` softmax weights.
    pub attn: Tensor<T>,
    /// `[heads × Nq × Nk]` scaled dot products before the softmax.
    pub scores: Tensor<T>,
}

pub(crate) fn linear<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let mut y = matmul(x, w)?;
    let (_, n) = y.dims2()?;
    if b.len() != n {
        return Err(Error::dim(format!("bias has {} entries, expected {n}", b.len())));
    }
    for row in y.data_mut().chunks_mut(n) {
        for (v, &bv) in row.iter_mut().zip(b.data()) {
            *v += bv;
        }
    }
    Ok(y)
}

/// Copies columns `h*d..(h+1)*d` of an `[n × c]` buffer into a contiguous `[n × d]` one.
pub(crate) fn head_slice<T: Copy>(src: &[T], n: usize, c: usize, h: usize, d: usize, dst: &mut [T]) {
    for r in 0..n {
        dst[r * d..(r + 1) * d].copy_from_slice(&src[r * c + h * d..r * c + (h + 1) * d]);
    }
}

pub(crate) fn head_scatter<T: Real>(src: &[T], n: usize, c: usize, h: usize, d: usize, dst: &mut [T]) {
    for r in 0..n {
        for j in 0..d {
            dst[r * c + h * d + j] += src[r * d + j];
        }
    }
}

/// Scaled dot-product attention on already-projected `q`, `k`, `v`.
/// Returns the concatenated head outputs `[Nq × C]`, the softmax weights and the
/// pre-softmax scores (both `[heads × Nq × Nk]`).
pub(crate) fn attention_core<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    let (nq, c) = q.dims2()?;
    let (nk, ck) = k.dims2()?;
    let (nv, cv) = v.dims2()?;
    if ck != c || cv != c || nv != nk {
        return Err(Error::dim(format!(
            "attention shapes q{:?} k{:?} v{:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    if heads == 0 || c % heads != 0 {
        return Err(Error::Config(format!(
            "embedding dim {c} not divisible by {heads} heads"
        )));
    }
    let d = c / heads;
    let scale = T::one() / T::lit(d as f64).sqrt();
    let mut out = vec![T::zero(); nq * c];
    let mut probs = vec![T::zero(); heads * nq * nk];
    let mut scores = vec![T::zero(); heads * nq * nk];
    let mut qh = vec![T::zero(); nq * d];
    let mut kh = vec![T::zero(); nk * d];
    let mut vh = vec![T::zero(); nk * d];
    let mut oh = vec![T::zero(); nq * d];
    for h in 0..heads {
        head_slice(q.data(), nq, c, h, d, &mut qh);
        head_slice(k.data(), nk, c, h, d, &mut kh);
        head_slice(v.data(), nk, c, h, d, &mut vh);
        let s = &mut scores[h * nq * nk..(h + 1) * nq * nk];
        gemm_nt_acc(nq, d, nk, &qh, &kh, s);
        for x in s.iter_mut() {
            *x *= scale;
        }
        let p = &mut probs[h * nq * nk..(h + 1) * nq * nk];
        p.copy_from_slice(s);
        softmax_rows_inplace(p, nk);
        oh.iter_mut().for_each(|x| *x = T::zero());
        gemm_acc(nq, nk, d, p, &vh, &mut oh);
        for r in 0..nq {
            out[r * c + h * d..r * c + (h + 1) * d].copy_from_slice(&oh[r * d..(r + 1) * d]);
        }
    }
    Ok((Tensor::new(vec![nq, c], out)?, probs, scores))
}

/// Multi-head attention with input and output projections.
pub fn mha<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
    w: &MhaWeights<T>,
) -> Result<MhaOutput<T>> {
    let (nq, c) = q.dims2()?;
    if heads == 0 || c % heads != 0 {
        return Err(Error::Config(format!(
            "embedding dim {c} not divisible by {heads} heads"
        )));
    }
    let (nk, _) = k.dims2()?;
    let qp = linear(q, &w.wq, &w.bq)?;
    let kp = linear(k, &w.wk, &w.bk)?;
    let vp = linear(v, &w.wv, &w.bv)?;
    let (ctx, probs, scores) = attention_core(&qp, &kp, &vp, heads)?;
    let out = linear(&ctx, &w.wo, &w.bo)?;
    out.ensure_finite("mha")?;
    Ok(MhaOutput {
        out,
        attn: Tensor::new(vec![heads, nq, nk], probs)?,
        scores: Tensor::new(vec![heads, nq, nk], scores)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_xoshiro::SplitMix64;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = SplitMix64::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn triple_loop(a: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
        let (m, k) = a.dims2().unwrap();
        let (_, n) = b.dims2().unwrap();
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for t in 0..k {
                    c[i * n + j] += a.at2(i, t) * b.at2(t, j);
                }
            }
        }
        c
    }

    #[test]
    fn matmul_identity_and_hand_values() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(matmul(&Tensor::eye(2), &a).unwrap(), a);
        let r = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let c = Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap();
        assert_eq!(matmul(&r, &c).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &a), Err(Error::Dimension(_))));
    }

    #[test]
    fn matmul_matches_triple_loop_f32() {
        let a = random(&[5, 7], 1).cast::<f32>().cast::<f64>();
        let b = random(&[7, 3], 2).cast::<f32>().cast::<f64>();
        let expect = triple_loop(&a, &b);
        let got = matmul(&a.cast::<f32>(), &b.cast::<f32>()).unwrap();
        for (g, e) in got.data().iter().zip(&expect) {
            assert!((*g as f64 - e).abs() <= 1e-6, "{g} vs {e}");
        }
    }

    #[test]
    fn transposed_gemms_agree() {
        let a = random(&[4, 6], 3);
        let b = random(&[4, 5], 4);
        let mut c = vec![0.0; 30];
        gemm_tn_acc(6, 4, 5, a.data(), b.data(), &mut c);
        let expect = matmul(&a.transpose2().unwrap(), &b).unwrap();
        for (x, y) in c.iter().zip(expect.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        let bt = random(&[3, 6], 5);
        let mut c = vec![0.0; 12];
        gemm_nt_acc(4, 6, 3, a.data(), bt.data(), &mut c);
        let expect = matmul(&a, &bt.transpose2().unwrap()).unwrap();
        for (x, y) in c.iter().zip(expect.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_cases() {
        let s = softmax(&Tensor::new(vec![3], vec![0.0f64; 3]).unwrap(), 0).unwrap();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = softmax(&Tensor::new(vec![2], vec![1000.0f32, 0.0]).unwrap(), 0).unwrap();
        assert!((s.data()[0] - 1.0).abs() < 1e-6 && s.data()[1] < 1e-6);
        assert!(s.data().iter().all(|v| v.is_finite()));

        // extended-precision reference: e^k / (e + e^2 + e^3) evaluated via exp of differences
        let s = softmax(&Tensor::new(vec![3], vec![1.0f64, 2.0, 3.0]).unwrap(), 0).unwrap();
        let expect = [
            0.090_030_573_170_380_46,
            0.244_728_471_054_797_64,
            0.665_240_955_774_821_9,
        ];
        for (g, e) in s.data().iter().zip(expect) {
            assert!((g - e).abs() < 1e-7);
        }
    }

    #[test]
    fn softmax_along_first_axis() {
        let x = random(&[3, 4], 9);
        let s = softmax(&x, 0).unwrap();
        for j in 0..4 {
            let col: f64 = (0..3).map(|i| s.at2(i, j)).sum();
            assert!((col - 1.0).abs() < 1e-12);
        }
        assert!(softmax(&x, 2).is_err());
    }

    #[test]
    fn layer_norm_cases() {
        let ones = Tensor::full(&[4], 1.0f64);
        let zeros = Tensor::zeros(&[4]);
        let row = Tensor::full(&[1, 4], 3.5f64);
        let y = layer_norm(&row, &ones, &zeros, 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));

        let x = random(&[2, 4], 11);
        let b = Tensor::full(&[4], 0.7);
        let y = layer_norm(&x, &zeros, &b, 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.7));

        let x = random(&[1, 64], 12);
        let y = layer_norm(&x, &Tensor::full(&[64], 1.0), &Tensor::zeros(&[64]), 1e-6).unwrap();
        let mean = y.sum() / 64.0;
        let var = y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 64.0;
        assert!(mean.abs() <= 1e-6);
        assert!((var - 1.0).abs() <= 1e-4);

        assert!(matches!(
            layer_norm(&x, &ones, &zeros, 0.0),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn activations() {
        assert_eq!(sigmoid_scalar(0.0f64), 0.5);
        assert!((sigmoid_scalar(40.0f32) - 1.0).abs() < 1e-6);
        assert!(sigmoid_scalar(-40.0f32) >= 0.0 && sigmoid_scalar(-40.0f32) < 1e-6);
        assert!(sigmoid_scalar(-1000.0f64).is_finite());
        assert_eq!(gelu_scalar(0.0f64), 0.0);
        let x = 0.8f64;
        let expect = 0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh());
        assert!((gelu_scalar(x) - expect).abs() < 1e-15);
        let h = 1e-6;
        let fd = (gelu_scalar(x + h) - gelu_scalar(x - h)) / (2.0 * h);
        assert!((gelu_grad_scalar(x) - fd).abs() < 1e-8);
    }

    #[test]
    fn mha_singleton_key_has_unit_attention() {
        let q = random(&[3, 8], 20);
        let k = random(&[1, 8], 21);
        let o = mha(&q, &k, &k, 2, &MhaWeights::identity(8)).unwrap();
        assert!(o.attn.data().iter().all(|&a| a == 1.0));
    }

    #[test]
    fn mha_singleton_identity_returns_value() {
        let v = random(&[1, 4], 22);
        let o = mha(&v, &v, &v, 1, &MhaWeights::identity(4)).unwrap();
        assert!(o.out.max_abs_diff(&v).unwrap() < 1e-15);
    }

    #[test]
    fn mha_rejects_indivisible_heads() {
        let v = random(&[2, 6], 23);
        assert!(matches!(
            mha(&v, &v, &v, 4, &MhaWeights::identity(6)),
            Err(Error::Config(_))
        ));
    }
}
