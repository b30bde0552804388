//! Dense row-major tensors and the elementary kernels the engine needs.
//!
//! Scalars are held as `f64` regardless of the precision tag; single-precision
//! tensors round every stored value through `f32` so that the training path
//! behaves like an fp32 implementation while verification paths keep full
//! doubles. Row-major flattening is the canonical order everywhere:
//! quantization groups, bit packing, and checksums all walk the same sequence.

use crate::error::{ActError, Result};

/// Storage precision tag. Training paths use single, theory-check paths double.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Precision {
    Single,
    Double,
}

impl Precision {
    /// Rounds `x` to this precision's representable set.
    #[inline]
    pub fn demote(self, x: f64) -> f64 {
        match self {
            Precision::Single => x as f32 as f64,
            Precision::Double => x,
        }
    }
}

/// Dense real-valued array with shape, the universal value carrier.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    precision: Precision,
}

impl Tensor {
    /// Builds a tensor, checking the shape product, demoting to the requested
    /// precision, and rejecting non-finite scalars.
    pub fn new(shape: Vec<usize>, mut data: Vec<f64>, precision: Precision) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if shape.iter().any(|&e| e == 0) {
            return Err(ActError::ShapeMismatch(format!(
                "zero extent in shape {shape:?}"
            )));
        }
        if expected != data.len() {
            return Err(ActError::DataLength {
                expected,
                got: data.len(),
            });
        }
        if precision == Precision::Single {
            for v in &mut data {
                *v = *v as f32 as f64;
            }
        }
        let t = Tensor {
            shape,
            data,
            precision,
        };
        t.check_finite("Tensor::new")?;
        Ok(t)
    }

    pub fn zeros(shape: Vec<usize>, precision: Precision) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
            precision,
        }
    }

    /// 2-D constructor.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>, precision: Precision) -> Result<Self> {
        Tensor::new(vec![rows, cols], data, precision)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn precision(&self) -> Precision {
        self.precision
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

    /// Rows of a rank-2 tensor.
    pub fn rows(&self) -> usize {
        assert_eq!(self.rank(), 2, "rows() needs a rank-2 tensor");
        self.shape[0]
    }

    /// Columns of a rank-2 tensor.
    pub fn cols(&self) -> usize {
        assert_eq!(self.rank(), 2, "cols() needs a rank-2 tensor");
        self.shape[1]
    }

    pub fn get2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(ActError::NonFinite(what.to_string()))
        }
    }

    /// Applies `f` elementwise, demoting the result to this tensor's precision.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        let data = self
            .data
            .iter()
            .map(|&x| self.precision.demote(f(x)))
            .collect();
        Tensor::new(self.shape.clone(), data, self.precision)
    }

    /// Squared Euclidean norm of the flattened data.
    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.sq_norm().sqrt()
    }

    /// FNV-1a over the little-endian bytes of the flattened data. Used in
    /// dedup footprints; stable across runs and platforms.
    pub fn checksum64(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in &self.data {
            for b in v.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }
}

/// Compensated (Kahan) accumulator; keeps long Monte Carlo sums exact to a
/// final rounding.
#[derive(Debug, Clone, Copy, Default)]
pub struct KahanSum {
    sum: f64,
    carry: f64,
}

impl KahanSum {
    pub fn add(&mut self, v: f64) {
        let y = v - self.carry;
        let t = self.sum + y;
        self.carry = (t - self.sum) - y;
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum
    }
}

/// `C = A x B` for rank-2 tensors; inner dimensions must agree.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows() {
        return Err(ActError::ShapeMismatch(format!(
            "matmul {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let prec = a.precision();
    let mut out = vec![0.0f64; m * n];
    // i-k-j order: stream through B rows.
    for i in 0..m {
        for p in 0..k {
            let aip = a.data[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    if prec == Precision::Single {
        for v in &mut out {
            *v = *v as f32 as f64;
        }
    }
    let t = Tensor {
        shape: vec![m, n],
        data: out,
        precision: prec,
    };
    t.check_finite("matmul")?;
    Ok(t)
}

/// Transpose of a rank-2 tensor.
pub fn transpose(a: &Tensor) -> Tensor {
    let (m, n) = (a.rows(), a.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data[i * n + j];
        }
    }
    Tensor {
        shape: vec![n, m],
        data: out,
        precision: a.precision,
    }
}

/// Elementwise `a + b`.
pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_map(a, b, "add", |x, y| x + y)
}

/// Elementwise `a - b`.
pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_map(a, b, "sub", |x, y| x - y)
}

/// `a + alpha * b`, elementwise.
pub fn axpy(a: &Tensor, alpha: f64, b: &Tensor) -> Result<Tensor> {
    zip_map(a, b, "axpy", |x, y| x + alpha * y)
}

fn zip_map(a: &Tensor, b: &Tensor, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(ActError::ShapeMismatch(format!(
            "{what} {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let data = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| a.precision.demote(f(x, y)))
        .collect();
    let t = Tensor {
        shape: a.shape.clone(),
        data,
        precision: a.precision,
    };
    t.check_finite(what)?;
    Ok(t)
}

/// Adds a length-`n` bias row to every row of an `m x n` matrix.
pub fn add_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    if x.rank() != 2 || bias.len() != x.cols() {
        return Err(ActError::ShapeMismatch(format!(
            "add_bias {:?} + {:?}",
            x.shape(),
            bias.shape()
        )));
    }
    let n = x.cols();
    let data = x
        .data
        .iter()
        .enumerate()
        .map(|(idx, &v)| x.precision.demote(v + bias.data[idx % n]))
        .collect();
    let t = Tensor {
        shape: x.shape.clone(),
        data,
        precision: x.precision,
    };
    t.check_finite("add_bias")?;
    Ok(t)
}

/// Sum of each column of an `m x n` matrix, as a length-`n` tensor.
pub fn col_sum(x: &Tensor) -> Tensor {
    let (m, n) = (x.rows(), x.cols());
    let mut out = vec![0.0; n];
    for i in 0..m {
        for j in 0..n {
            out[j] += x.data[i * n + j];
        }
    }
    for v in &mut out {
        *v = x.precision.demote(*v);
    }
    Tensor {
        shape: vec![n],
        data: out,
        precision: x.precision,
    }
}

/// Per-group extrema of the flattened data: consecutive groups of `group_size`
/// elements (the last group may be short). Returns `(mins, ranges)`.
///
/// Ranges are nudged upward by ulps where necessary so that
/// `min + range >= max` holds in floating point, which downstream code relies
/// on when mapping elements into `[0, 2^b - 1]`.
pub fn group_minmax(x: &Tensor, group_size: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if group_size < 2 {
        return Err(ActError::InvalidGroupSize(group_size));
    }
    if x.is_empty() {
        return Err(ActError::EmptyTensor("group_minmax".into()));
    }
    let mut mins = Vec::with_capacity(x.len().div_ceil(group_size));
    let mut ranges = Vec::with_capacity(mins.capacity());
    for chunk in x.data().chunks(group_size) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in chunk {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        let mut r = hi - lo;
        while lo + r < hi {
            r = r.next_up();
        }
        mins.push(lo);
        ranges.push(r);
    }
    Ok((mins, ranges))
}
