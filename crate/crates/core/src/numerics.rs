// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense rank-3 `f32` tensors and the handful of kernels the toy backbone needs.
//!
//! Every reduction runs sequentially over its axis so results are bit-identical
//! from run to run. Broadcasting is limited to a batch dimension of 1.

use std::fmt;

use crate::error::{Error, Result};

/// Row-major `(batch, tokens, channels)` tensor of `f32`.
#[derive(Clone, PartialEq)]
pub struct TensorF {
    shape: [usize; 3],
    data: Vec<f32>,
}

impl fmt::Debug for TensorF {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TensorF")
            .field("shape", &self.shape)
            .field("len", &self.data.len())
            .finish()
    }
}

impl TensorF {
    pub fn new(shape: [usize; 3], data: Vec<f32>) -> Result<Self> {
        let expected = shape.iter().product::<usize>();
        if data.len() != expected {
            return Err(Error::InvalidInput {
                op: "TensorF::new",
                msg: format!("shape {shape:?} needs {expected} elements, got {}", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: [usize; 3]) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    /// Builds a `(1, rows, cols)` tensor from nested rows.
    pub fn from_rows(rows: &[&[f32]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidInput {
                op: "TensorF::from_rows",
                msg: "ragged rows".into(),
            });
        }
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::new([1, rows.len(), cols], data)
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn tokens(&self) -> usize {
        self.shape[1]
    }

    pub fn channels(&self) -> usize {
        self.shape[2]
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// One `channels`-long row.
    pub fn row(&self, b: usize, t: usize) -> &[f32] {
        let c = self.shape[2];
        let start = (b * self.shape[1] + t) * c;
        &self.data[start..start + c]
    }

    pub fn row_mut(&mut self, b: usize, t: usize) -> &mut [f32] {
        let c = self.shape[2];
        let start = (b * self.shape[1] + t) * c;
        &mut self.data[start..start + c]
    }

    /// Copies tokens `[lo, hi)` of every batch slice.
    pub fn slice_tokens(&self, lo: usize, hi: usize) -> Result<Self> {
        if lo > hi || hi > self.shape[1] {
            return Err(Error::InvalidInput {
                op: "slice_tokens",
                msg: format!("range {lo}..{hi} out of bounds for {:?}", self.shape),
            });
        }
        let [b, t, c] = self.shape;
        let mut data = Vec::with_capacity(b * (hi - lo) * c);
        for bi in 0..b {
            let base = bi * t * c;
            data.extend_from_slice(&self.data[base + lo * c..base + hi * c]);
        }
        Self::new([b, hi - lo, c], data)
    }

    /// Overwrites tokens starting at `lo` with the contents of `src`.
    pub fn write_tokens(&mut self, lo: usize, src: &TensorF) -> Result<()> {
        let [b, t, c] = self.shape;
        if src.shape[0] != b || src.shape[2] != c || lo + src.shape[1] > t {
            return Err(Error::Shape {
                op: "write_tokens",
                lhs: self.shape,
                rhs: src.shape,
            });
        }
        let n = src.shape[1] * c;
        for bi in 0..b {
            let dst = bi * t * c + lo * c;
            self.data[dst..dst + n].copy_from_slice(&src.data[bi * n..(bi + 1) * n]);
        }
        Ok(())
    }

    /// Concatenates along the token axis.
    pub fn concat_tokens(a: &TensorF, b: &TensorF) -> Result<Self> {
        if a.shape[0] != b.shape[0] || a.shape[2] != b.shape[2] {
            return Err(Error::Shape {
                op: "concat_tokens",
                lhs: a.shape,
                rhs: b.shape,
            });
        }
        let [batch, ta, c] = a.shape;
        let tb = b.shape[1];
        let mut data = Vec::with_capacity(batch * (ta + tb) * c);
        for bi in 0..batch {
            data.extend_from_slice(&a.data[bi * ta * c..(bi + 1) * ta * c]);
            data.extend_from_slice(&b.data[bi * tb * c..(bi + 1) * tb * c]);
        }
        Self::new([batch, ta + tb, c], data)
    }

    pub fn scaled(&self, factor: f32) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    pub fn add(&self, other: &TensorF) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &TensorF) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    fn zip_with(&self, other: &TensorF, op: &'static str, f: impl Fn(f32, f32) -> f32) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::Shape {
                op,
                lhs: self.shape,
                rhs: other.shape,
            });
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self {
            shape: self.shape,
            data,
        })
    }

    /// FNV-1a over the raw bit patterns; equal checksums mean bit-identical data
    /// with overwhelming probability.
    pub fn bit_checksum(&self) -> u64 {
        use std::hash::Hasher;
        let mut h = fnv::FnvHasher::default();
        for d in self.shape {
            h.write_u64(d as u64);
        }
        for v in &self.data {
            h.write_u32(v.to_bits());
        }
        h.finish()
    }
}

fn ensure_finite(t: TensorF, op: &'static str) -> Result<TensorF> {
    if t.is_finite() {
        Ok(t)
    } else {
        Err(Error::NonFinite { op })
    }
}

/// Batched matrix product `(B, n, k) x (B', k, m)` with `B' == B` or either side 1.
pub fn matmul(a: &TensorF, b: &TensorF) -> Result<TensorF> {
    let [ba, n, k] = a.shape;
    let [bb, kb, m] = b.shape;
    if k != kb || !(ba == bb || ba == 1 || bb == 1) {
        return Err(Error::Shape {
            op: "matmul",
            lhs: a.shape,
            rhs: b.shape,
        });
    }
    let batch = ba.max(bb);
    let mut out = vec![0.0f32; batch * n * m];
    for bi in 0..batch {
        let a_off = if ba == 1 { 0 } else { bi * n * k };
        let b_off = if bb == 1 { 0 } else { bi * k * m };
        let b_mat = &b.data[b_off..b_off + k * m];
        for i in 0..n {
            let a_row = &a.data[a_off + i * k..a_off + (i + 1) * k];
            let o_row = &mut out[(bi * n + i) * m..(bi * n + i + 1) * m];
            for (p, &aip) in a_row.iter().enumerate() {
                let b_row = &b_mat[p * m..(p + 1) * m];
                for (o, &bv) in o_row.iter_mut().zip(b_row) {
                    *o += aip * bv;
                }
            }
        }
    }
    ensure_finite(TensorF::new([batch, n, m], out)?, "matmul")
}

/// `e^x` for `x <= 0` via Cody-Waite reduction and a degree-6 polynomial;
/// relative error below 1e-6. Unlike `f32::exp` it vectorizes, which matters
/// because softmax dominates the attention cost.
#[inline]
fn exp_nonpos(x: f32) -> f32 {
    const LN2_HI: f32 = 0.693_359_4;
    const LN2_LO: f32 = -2.121_944_4e-4;
    // Adding 1.5 * 2^23 rounds to an integer held in the low mantissa bits.
    const SHIFT: f32 = 12_582_912.0;
    let x = x.max(-87.0);
    let t = x * std::f32::consts::LOG2_E + SHIFT;
    let n = t - SHIFT;
    let r = x - n * LN2_HI - n * LN2_LO;
    let p = 1.0 + r * (1.0 + r * (0.5 + r * (1.0 / 6.0 + r * (1.0 / 24.0 + r * (1.0 / 120.0 + r * (1.0 / 720.0))))));
    let bits = t.to_bits().wrapping_sub(SHIFT.to_bits()).wrapping_add(127) << 23;
    p * f32::from_bits(bits)
}

/// Fixed-order eight-lane fold, then a left fold over the lanes.
#[inline]
fn lane_fold(xs: &[f32], init: f32, f: impl Fn(f32, f32) -> f32) -> f32 {
    let mut acc = [init; 8];
    let mut chunks = xs.chunks_exact(8);
    for c in &mut chunks {
        for (a, &v) in acc.iter_mut().zip(c) {
            *a = f(*a, v);
        }
    }
    for (a, &v) in acc.iter_mut().zip(chunks.remainder()) {
        *a = f(*a, v);
    }
    acc.iter().fold(init, |a, &b| f(a, b))
}

fn softmax_in_place(row: &mut [f32]) {
    let max = lane_fold(row, f32::NEG_INFINITY, f32::max);
    if !max.is_finite() {
        row.fill(f32::NAN);
        return;
    }
    for v in row.iter_mut() {
        *v = exp_nonpos(*v - max);
    }
    let inv = 1.0 / lane_fold(row, 0.0, |a, b| a + b);
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Max-stabilized softmax over the channel axis.
pub fn softmax_rows(x: &TensorF) -> TensorF {
    let mut out = x.clone();
    let c = out.shape[2];
    if c > 0 {
        for row in out.data.chunks_mut(c) {
            softmax_in_place(row);
        }
    }
    out
}

/// Parameter-free layer norm over channels.
pub fn layer_norm(x: &TensorF, eps: f32) -> TensorF {
    let mut out = x.clone();
    let c = out.shape[2];
    if c == 0 {
        return out;
    }
    for row in out.data.chunks_mut(c) {
        let mean = row.iter().sum::<f32>() / c as f32;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / c as f32;
        let inv = 1.0 / (var + eps).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * inv;
        }
    }
    out
}

/// tanh-approximated GELU.
pub fn gelu(x: &TensorF) -> TensorF {
    const K: f32 = 0.797_884_6; // sqrt(2/pi)
    let mut out = x.clone();
    for v in out.data.iter_mut() {
        let u = *v;
        *v = 0.5 * u * (1.0 + tanh(K * (u + 0.044_715 * u * u * u)));
    }
    out
}

/// `tanh` through [`exp_nonpos`]; absolute error below 1e-6.
#[inline]
fn tanh(z: f32) -> f32 {
    let e = exp_nonpos(-2.0 * z.abs());
    ((1.0 - e) / (1.0 + e)).copysign(z)
}

/// Multi-head scaled-dot-product attention.
///
/// `q` is `(B, Tq, C)`, `k` and `v` are `(B, Tk, C)`; heads split `C` evenly.
pub fn sdpa(q: &TensorF, k: &TensorF, v: &TensorF, heads: usize) -> Result<TensorF> {
    let [b, tq, c] = q.shape;
    if k.shape != v.shape || k.shape[0] != b || k.shape[2] != c {
        return Err(Error::Shape {
            op: "sdpa",
            lhs: q.shape,
            rhs: k.shape,
        });
    }
    if heads == 0 || c % heads != 0 {
        return Err(Error::InvalidInput {
            op: "sdpa",
            msg: format!("channel dim {c} not divisible by {heads} heads"),
        });
    }
    let tk = k.shape[1];
    let dh = c / heads;
    let scale = 1.0 / (dh as f32).sqrt();
    let mut out = vec![0.0f32; b * tq * c];
    let mut logits = vec![0.0f32; tk];
    // Per-head K transposed to (dh, tk) and V gathered to (tk, dh), so the
    // inner loops run over contiguous memory.
    let mut kt = vec![0.0f32; dh * tk];
    let mut vh = vec![0.0f32; tk * dh];
    for bi in 0..b {
        for h in 0..heads {
            let c0 = h * dh;
            for j in 0..tk {
                let kr = &k.row(bi, j)[c0..c0 + dh];
                for (ci, &kv) in kr.iter().enumerate() {
                    kt[ci * tk + j] = kv;
                }
                vh[j * dh..(j + 1) * dh].copy_from_slice(&v.row(bi, j)[c0..c0 + dh]);
            }
            for i in 0..tq {
                let qi = &q.row(bi, i)[c0..c0 + dh];
                logits.fill(0.0);
                for (&qc, krow) in qi.iter().zip(kt.chunks_exact(tk)) {
                    for (l, &kv) in logits.iter_mut().zip(krow) {
                        *l += qc * kv;
                    }
                }
                for l in logits.iter_mut() {
                    *l *= scale;
                }
                softmax_in_place(&mut logits);
                let o = &mut out[(bi * tq + i) * c + c0..(bi * tq + i) * c + c0 + dh];
                for (&p, vrow) in logits.iter().zip(vh.chunks_exact(dh)) {
                    for (ov, &vv) in o.iter_mut().zip(vrow) {
                        *ov += p * vv;
                    }
                }
            }
        }
    }
    ensure_finite(TensorF::new([b, tq, c], out)?, "sdpa")
}

/// Cosine similarity of two equal-length vectors in `f64`.
///
/// Returns `None` when either vector has zero norm.
pub fn cosine(a: &[f32], b: &[f32]) -> Option<f64> {
    debug_assert_eq!(a.len(), b.len());
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        dot += f64::from(x) * f64::from(y);
        na += f64::from(x) * f64::from(x);
        nb += f64::from(y) * f64::from(y);
    }
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    // sqrt(n * n) == n under IEEE rounding, so identical inputs give exactly 1.
    Some((dot / (na * nb).sqrt()).clamp(-1.0, 1.0))
}
