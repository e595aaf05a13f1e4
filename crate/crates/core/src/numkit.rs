//! Dense double-precision kernels.
//!
//! Every reduction runs in index order, so the same inputs always produce
//! bit-identical outputs regardless of how callers schedule work.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Norms at or below this are treated as zero.
pub const EPS: f64 = 1e-12;

/// Row-major `rows × dim` matrix of feature vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    rows: usize,
    dim: usize,
    data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * dim {
            return Err(Error::shape(format!(
                "{} values for a {rows}x{dim} matrix",
                data.len()
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("feature matrix".into()));
        }
        Ok(Self { rows, dim, data })
    }

    pub fn zeros(rows: usize, dim: usize) -> Self {
        Self {
            rows,
            dim,
            data: vec![0.0; rows * dim],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            if r.len() != dim {
                return Err(Error::DimMismatch {
                    expected: dim,
                    found: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), dim, data)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim.max(1)).take(self.rows)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn is_zero_row(&self, i: usize) -> bool {
        self.row(i).iter().all(|&x| x == 0.0)
    }

    /// Vertical concatenation; both blocks must share `dim`.
    pub fn stack(&self, other: &FeatureMatrix) -> Result<FeatureMatrix> {
        if self.dim != other.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                found: other.dim,
            });
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(FeatureMatrix {
            rows: self.rows + other.rows,
            dim: self.dim,
            data,
        })
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn sum(a: &[f64]) -> f64 {
    let mut s = 0.0;
    for &x in a {
        s += x;
    }
    s
}

pub fn hadamard(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x * y).collect()
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `softmax(lambda * x)` with max subtraction.
pub fn softmax_scaled(x: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::EmptyInput);
    }
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::Config(format!("lambda must be positive, got {lambda}")));
    }
    let max = x.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(lambda * v));
    let mut out: Vec<f64> = x.iter().map(|&v| (lambda * v - max).exp()).collect();
    let z = sum(&out);
    for o in &mut out {
        *o /= z;
    }
    Ok(out)
}

/// Softmax of `lambda * x` restricted to entries where `active` is set.
/// Inactive entries get exactly zero weight. Returns `None` if nothing is active.
pub fn softmax_masked(x: &[f64], lambda: f64, active: &[bool]) -> Option<Vec<f64>> {
    let mut max = f64::NEG_INFINITY;
    for (i, &v) in x.iter().enumerate() {
        if active[i] {
            max = max.max(lambda * v);
        }
    }
    if max == f64::NEG_INFINITY {
        return None;
    }
    let mut out = vec![0.0; x.len()];
    let mut z = 0.0;
    for (i, &v) in x.iter().enumerate() {
        if active[i] {
            let e = (lambda * v - max).exp();
            out[i] = e;
            z += e;
        }
    }
    for (i, o) in out.iter_mut().enumerate() {
        if active[i] {
            *o /= z;
        }
    }
    Some(out)
}

/// Stable `log(sum(exp(x)))`.
pub fn log_sum_exp(x: &[f64]) -> f64 {
    let max = x.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    if max == f64::NEG_INFINITY {
        return max;
    }
    let mut s = 0.0;
    for &v in x {
        s += (v - max).exp();
    }
    max + s.ln()
}

pub fn l2_normalize(x: &[f64]) -> Result<Vec<f64>> {
    let n = norm(x);
    if !(n > EPS) {
        return Err(Error::DegenerateVector);
    }
    Ok(x.iter().map(|v| v / n).collect())
}

/// Cosine similarity. A zero (or near-zero) argument yields 0 with `masked` set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cosine {
    pub value: f64,
    pub masked: bool,
}

pub fn cosine(u: &[f64], v: &[f64]) -> Cosine {
    let nu = norm(u);
    let nv = norm(v);
    if !(nu > EPS) || !(nv > EPS) {
        return Cosine {
            value: 0.0,
            masked: true,
        };
    }
    Cosine {
        value: dot(u, v) / (nu * nv),
        masked: false,
    }
}
