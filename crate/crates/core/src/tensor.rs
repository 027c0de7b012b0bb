//! Dense f32 kernels shared by the model, the cache and the harness.
//!
//! Everything here is a pure function with a fixed evaluation order, so the
//! same inputs always give bit-identical outputs.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Row-major f32 tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) && !data.is_empty() {
            return Err(Error::Shape(format!("zero-sized dim in {dims:?}")));
        }
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "dims {dims:?} need {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let n = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
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

    /// Rows and columns of a rank-2 tensor.
    pub fn shape2(&self) -> Result<(usize, usize)> {
        match self.dims.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::Shape(format!("expected rank 2, got {other:?}"))),
        }
    }

    pub fn row(&self, r: usize) -> &[f32] {
        let cols = *self.dims.last().unwrap_or(&0);
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn reshape(mut self, dims: Vec<usize>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {dims:?}",
                self.dims
            )));
        }
        self.dims = dims;
        Ok(self)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Row-major boolean matrix, `true` = the query row may attend to the key column.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BoolMatrix {
    rows: usize,
    cols: usize,
    data: Vec<bool>,
}

impl BoolMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<bool>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::Shape(format!(
                "mask {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn filled(rows: usize, cols: usize, value: bool) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    /// Lower-triangular mask, row `r` sees columns `0..=r`.
    pub fn causal(n: usize) -> Self {
        Self::from_fn(n, n, |r, c| c <= r)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[bool] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn count_true(&self) -> u64 {
        self.data.iter().filter(|&&b| b).count() as u64
    }
}

/// `a[m×k] · b[k×n]`, accumulated in i-p-j order.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.shape2()?;
    let (k2, n) = b.shape2()?;
    if k != k2 {
        return Err(Error::Shape(format!(
            "matmul inner dims differ: {m}x{k} · {k2}x{n}"
        )));
    }
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let a_row = &a.data[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b.data[p * n..(p + 1) * n];
            for (o, &b_pj) in out_row.iter_mut().zip(b_row) {
                *o += a_ip * b_pj;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Row softmax over `scores`, with masked-out entries forced to exactly zero.
pub fn softmax_masked(scores: &Tensor, mask: &BoolMatrix) -> Result<Tensor> {
    let (rows, cols) = scores.shape2()?;
    if mask.rows() != rows || mask.cols() != cols {
        return Err(Error::Shape(format!(
            "mask {}x{} does not match scores {rows}x{cols}",
            mask.rows(),
            mask.cols()
        )));
    }
    let mut out = vec![0.0f32; rows * cols];
    for r in 0..rows {
        softmax_row_into(
            &scores.data[r * cols..(r + 1) * cols],
            mask.row(r),
            &mut out[r * cols..(r + 1) * cols],
        )
        .map_err(|_| Error::EmptyMaskRow { row: r })?;
    }
    Tensor::new(vec![rows, cols], out)
}

/// Masked softmax of one row into `out`. Errors when no entry is allowed.
pub(crate) fn softmax_row_into(
    scores: &[f32],
    allowed: &[bool],
    out: &mut [f32],
) -> std::result::Result<(), ()> {
    let mut max = f32::NEG_INFINITY;
    for (&s, &a) in scores.iter().zip(allowed) {
        if a && s > max {
            max = s;
        }
    }
    if max == f32::NEG_INFINITY {
        return Err(());
    }
    let mut sum = 0.0f32;
    for ((o, &s), &a) in out.iter_mut().zip(scores).zip(allowed) {
        if a {
            let e = (s - max).exp();
            *o = e;
            sum += e;
        } else {
            *o = 0.0;
        }
    }
    let inv = 1.0 / sum;
    for (o, &a) in out.iter_mut().zip(allowed) {
        if a {
            *o *= inv;
        }
    }
    Ok(())
}

/// RMS normalisation of each row of `x` (last dim), scaled by `weight`.
pub fn rms_norm(x: &Tensor, weight: &[f32], eps: f32) -> Result<Tensor> {
    let (rows, cols) = x.shape2()?;
    if weight.len() != cols {
        return Err(Error::Shape(format!(
            "rms_norm weight has {} entries for {cols} columns",
            weight.len()
        )));
    }
    let mut out = x.data.clone();
    for r in 0..rows {
        let row = &mut out[r * cols..(r + 1) * cols];
        let ms = row.iter().map(|v| v * v).sum::<f32>() / cols as f32;
        let inv = 1.0 / (ms + eps).sqrt();
        for (v, w) in row.iter_mut().zip(weight) {
            *v = *v * inv * w;
        }
    }
    Tensor::new(vec![rows, cols], out)
}

pub fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

/// `silu(gate) * up`, elementwise.
pub fn swiglu(gate: &Tensor, up: &Tensor) -> Result<Tensor> {
    if gate.dims != up.dims {
        return Err(Error::Shape(format!(
            "swiglu operands differ: {:?} vs {:?}",
            gate.dims, up.dims
        )));
    }
    let data = gate
        .data
        .iter()
        .zip(&up.data)
        .map(|(&g, &u)| silu(g) * u)
        .collect();
    Tensor::new(gate.dims.clone(), data)
}

pub fn add_inplace(acc: &mut Tensor, other: &Tensor) -> Result<()> {
    if acc.dims != other.dims {
        return Err(Error::Shape(format!(
            "add operands differ: {:?} vs {:?}",
            acc.dims, other.dims
        )));
    }
    for (a, b) in acc.data.iter_mut().zip(&other.data) {
        *a += b;
    }
    Ok(())
}

/// Seeded generator backed by ChaCha8, a counter-based stream cipher, so a
/// seed yields the same stream on every platform.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child stream, identified by `stream`.
    pub fn split(&self, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(stream.wrapping_add(1));
        Self {
            seed: self.seed,
            inner,
        }
    }

    pub fn uniform(&mut self, lo: f32, hi: f32) -> f32 {
        self.inner.gen_range(lo..hi)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.gen()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.inner);
    }

    pub fn tensor_uniform(&mut self, dims: &[usize], scale: f32) -> Tensor {
        let n: usize = dims.iter().product();
        let data = (0..n).map(|_| self.uniform(-scale, scale)).collect();
        Tensor {
            dims: dims.to_vec(),
            data,
        }
    }
}
