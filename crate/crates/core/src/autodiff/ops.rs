//! Forward kernels. Every tape operation calls one of these; code that does
//! not need gradients (evaluation, clustering) calls them directly.

use super::Tensor;
use crate::error::{CclError, Result};

/// Boolean inclusion mask over a matrix, used by the masked softmax kernels.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                bits.push(f(i, j));
            }
        }
        Mask { rows, cols, bits }
    }

    /// Everything except the diagonal of an `n × n` matrix.
    pub fn off_diagonal(n: usize) -> Self {
        Mask::from_fn(n, n, |i, j| i != j)
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.cols + j]
    }

    fn row(&self, i: usize) -> &[bool] {
        &self.bits[i * self.cols..(i + 1) * self.cols]
    }

    fn check(&self, op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
        let (r, c) = t.dims2()?;
        if (r, c) != (self.rows, self.cols) {
            return Err(CclError::dim(op, t.shape(), &[self.rows, self.cols]));
        }
        Ok((r, c))
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(CclError::dim(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn zip(op: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    same_shape(op, a, b)?;
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(CclError::dim("matmul", a.shape(), b.shape()));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in ad[i * k..(i + 1) * k].iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(&bd[p * n..(p + 1) * n]) {
                *o += aip * bv;
            }
        }
    }
    Tensor::matrix(m, n, out)
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (m, n) = a.dims2()?;
    let d = a.data();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = d[i * n + j];
        }
    }
    Tensor::matrix(n, m, out)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip("add", a, b, |x, y| x + y)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip("sub", a, b, |x, y| x - y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip("mul", a, b, |x, y| x * y)
}

/// Adds a `1 × n` row to every row of an `m × n` matrix.
pub fn add_row(a: &Tensor, row: &Tensor) -> Result<Tensor> {
    let (m, n) = a.dims2()?;
    if row.shape() != [1, n] {
        return Err(CclError::dim("add_row", a.shape(), row.shape()));
    }
    let r = row.data();
    let mut out = a.data().to_vec();
    for i in 0..m {
        for (o, &b) in out[i * n..(i + 1) * n].iter_mut().zip(r) {
            *o += b;
        }
    }
    Tensor::matrix(m, n, out)
}

pub fn scale(a: &Tensor, c: f64) -> Tensor {
    a.map(|v| v * c)
}

pub fn relu(a: &Tensor) -> Tensor {
    a.map(|v| v.max(0.0))
}

pub fn exp(a: &Tensor) -> Tensor {
    a.map(f64::exp)
}

pub fn log(a: &Tensor) -> Result<Tensor> {
    if let Some(pos) = a.data().iter().position(|&v| !(v > 0.0)) {
        return Err(CclError::domain(
            "log",
            format!("non-positive value {} at flat index {pos}", a.data()[pos]),
        ));
    }
    Ok(a.map(f64::ln))
}

/// Euclidean norm of every row.
pub fn row_norms(a: &Tensor) -> Result<Vec<f64>> {
    a.dims2()?;
    Ok(a.row_iter()
        .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect())
}

/// Divides each row by its L2 norm; returns the result and the norms.
pub fn normalize_rows(a: &Tensor) -> Result<(Tensor, Vec<f64>)> {
    let norms = row_norms(a)?;
    if let Some(i) = norms.iter().position(|&n| n == 0.0 || !n.is_finite()) {
        return Err(CclError::domain(
            "normalize_rows",
            format!("row {i} has norm {}", norms[i]),
        ));
    }
    let c = a.cols();
    let mut out = a.data().to_vec();
    for (i, n) in norms.iter().enumerate() {
        for v in &mut out[i * c..(i + 1) * c] {
            *v /= n;
        }
    }
    Ok((Tensor::matrix(a.rows(), c, out)?, norms))
}

/// `s(a_i, b_j) = a_iᵀ b_j / (‖a_i‖ ‖b_j‖)` for every row pair.
pub fn cosine_similarity(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.dims2()?.1 != b.dims2()?.1 {
        return Err(CclError::dim("cosine_similarity", a.shape(), b.shape()));
    }
    let (an, _) = normalize_rows(a)?;
    let (bn, _) = normalize_rows(b)?;
    matmul(&an, &transpose(&bn)?)
}

/// Sum over `axis` of a matrix: axis 0 gives `1 × n`, axis 1 gives `m × 1`.
pub fn sum_axis(a: &Tensor, axis: usize) -> Result<Tensor> {
    let (m, n) = a.dims2()?;
    match axis {
        0 => {
            let mut out = vec![0.0; n];
            for r in a.row_iter() {
                for (o, v) in out.iter_mut().zip(r) {
                    *o += v;
                }
            }
            Tensor::matrix(1, n, out)
        }
        1 => Tensor::matrix(m, 1, a.row_iter().map(|r| r.iter().sum()).collect()),
        _ => Err(CclError::dim("sum_axis", a.shape(), &[axis])),
    }
}

pub fn mean_axis(a: &Tensor, axis: usize) -> Result<Tensor> {
    let (m, n) = a.dims2()?;
    let count = if axis == 0 { m } else { n };
    if count == 0 {
        return Err(CclError::domain("mean_axis", "empty axis"));
    }
    Ok(scale(&sum_axis(a, axis)?, 1.0 / count as f64))
}

pub fn sum_all(a: &Tensor) -> Tensor {
    Tensor::scalar(a.data().iter().sum())
}

fn masked_row_max_lse(op: &'static str, row: &[f64], mask: &[bool], i: usize) -> Result<f64> {
    let max = row
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&v, _)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(CclError::domain(
            op,
            format!("row {i} has no included entries"),
        ));
    }
    let s: f64 = row
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&v, _)| (v - max).exp())
        .sum();
    Ok(max + s.ln())
}

/// Row-wise log-sum-exp over included entries, stabilised by the row max.
/// Output is `m × 1`.
pub fn masked_logsumexp(a: &Tensor, mask: &Mask) -> Result<Tensor> {
    let (m, _) = mask.check("masked_logsumexp", a)?;
    let out = (0..m)
        .map(|i| masked_row_max_lse("masked_logsumexp", a.row(i), mask.row(i), i))
        .collect::<Result<Vec<_>>>()?;
    Tensor::matrix(m, 1, out)
}

/// Row-wise log-softmax over included entries. Excluded entries are set to 0
/// and receive no gradient.
pub fn masked_log_softmax(a: &Tensor, mask: &Mask) -> Result<Tensor> {
    let (m, n) = mask.check("masked_log_softmax", a)?;
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = a.row(i);
        let mrow = mask.row(i);
        let lse = masked_row_max_lse("masked_log_softmax", row, mrow, i)?;
        for j in 0..n {
            if mrow[j] {
                out[i * n + j] = row[j] - lse;
            }
        }
    }
    Tensor::matrix(m, n, out)
}
