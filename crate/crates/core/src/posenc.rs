//! Fixed 2D sine/cosine positional encoding for region grids.
//!
//! Region `i` sits at column `x = i % width`, row `y = i / width`. The first
//! half of each encoding row encodes `x`, the second half `y`; within a half,
//! entries alternate `sin(pos * w_k)`, `cos(pos * w_k)` with
//! `w_k = 10000^(-4k/dim)` for `k = 0..dim/4`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::FeatureMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridShape {
    pub height: usize,
    pub width: usize,
}

impl GridShape {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width }
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    /// `(x, y)` of a row-major cell index.
    pub fn position(&self, index: usize) -> (usize, usize) {
        (index % self.width, index / self.width)
    }

    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }
}

/// Half-open grid rectangle: columns `x0..x1`, rows `y0..y1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl GridBox {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn is_empty(&self) -> bool {
        self.x1 <= self.x0 || self.y1 <= self.y0
    }

    pub fn area(&self) -> usize {
        if self.is_empty() {
            0
        } else {
            (self.x1 - self.x0) * (self.y1 - self.y0)
        }
    }

    pub fn within(&self, grid: GridShape) -> bool {
        !self.is_empty() && self.x1 <= grid.width && self.y1 <= grid.height
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    pub fn overlaps(&self, other: &GridBox) -> bool {
        self.x0 < other.x1 && other.x0 < self.x1 && self.y0 < other.y1 && other.y0 < self.y1
    }
}

fn encode_axis(pos: f64, out: &mut [f64]) {
    let half = out.len();
    let quarter = half / 2;
    let dim = (half * 2) as f64;
    for k in 0..quarter {
        let omega = 1.0 / 10000f64.powf(4.0 * k as f64 / dim);
        out[2 * k] = (pos * omega).sin();
        out[2 * k + 1] = (pos * omega).cos();
    }
}

pub fn pe_2d(grid: GridShape, dim: usize) -> Result<FeatureMatrix> {
    if dim == 0 || !dim.is_multiple_of(4) {
        return Err(Error::PositionalDim(dim));
    }
    let mut pe = FeatureMatrix::zeros(grid.cells(), dim);
    for i in 0..grid.cells() {
        let (x, y) = grid.position(i);
        let row = pe.row_mut(i);
        let (xs, ys) = row.split_at_mut(dim / 2);
        encode_axis(x as f64, xs);
        encode_axis(y as f64, ys);
    }
    Ok(pe)
}

/// Adds the grid encoding to `features`. With `preserve_masked`, rows that are
/// entirely zero are left untouched so an absent view stays masked.
pub fn add_pe(features: &FeatureMatrix, grid: GridShape, preserve_masked: bool) -> Result<FeatureMatrix> {
    if features.rows() != grid.cells() {
        return Err(Error::shape(format!(
            "{} feature rows for a {}x{} grid",
            features.rows(),
            grid.height,
            grid.width
        )));
    }
    let pe = pe_2d(grid, features.dim())?;
    let mut out = features.clone();
    for i in 0..out.rows() {
        if preserve_masked && features.is_zero_row(i) {
            continue;
        }
        for (o, p) in out.row_mut(i).iter_mut().zip(pe.row(i)) {
            *o += p;
        }
    }
    Ok(out)
}
