//! Row-major 2-D tensors and the dot-product kernel everything else builds on.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// Dot products longer than this accumulate in `f64`.
pub const WIDE_ACCUMULATION_THRESHOLD: usize = 4096;

/// A dense row-major matrix of `f32`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor2 {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Tensor2 {
    /// Builds a tensor, checking the length and that every value is finite.
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape_err!("{} values for a {}x{} tensor", data.len(), rows, cols));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(alloc::format!("tensor element {i}")));
        }
        Ok(Tensor2 { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor2 { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_rows(rows: &[&[f32]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(shape_err!("ragged rows: {} vs {}", r.len(), cols));
            }
            data.extend_from_slice(r);
        }
        Tensor2::new(rows.len(), cols, data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor2::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    /// Copies the given rows, in order, into a new tensor.
    pub fn select_rows(&self, idx: &[usize]) -> Tensor2 {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Tensor2 { rows: idx.len(), cols: self.cols, data }
    }

    /// Copies the top-left `rows x cols` block.
    pub fn top_left(&self, rows: usize, cols: usize) -> Tensor2 {
        WeightView::of(self).prefix(rows, cols).to_tensor()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn view(&self) -> WeightView<'_> {
        WeightView::of(self)
    }
}

/// A read-only, possibly strided, row-major matrix view.
///
/// Supernet slices and standalone layers are both evaluated through this type,
/// so a slice and its extracted copy run identical arithmetic.
#[derive(Debug, Clone, Copy)]
pub struct WeightView<'a> {
    data: &'a [f32],
    stride: usize,
    rows: usize,
    cols: usize,
}

impl<'a> WeightView<'a> {
    pub fn of(t: &'a Tensor2) -> Self {
        WeightView { data: &t.data, stride: t.cols, rows: t.rows, cols: t.cols }
    }

    /// Restricts the view to its first `rows` rows and `cols` columns.
    pub fn prefix(self, rows: usize, cols: usize) -> Self {
        assert!(rows <= self.rows && cols <= self.cols, "prefix exceeds view");
        WeightView { data: self.data, stride: self.stride, rows, cols }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn row(&self, r: usize) -> &'a [f32] {
        &self.data[r * self.stride..r * self.stride + self.cols]
    }

    pub fn to_tensor(&self) -> Tensor2 {
        let mut data = Vec::with_capacity(self.rows * self.cols);
        for r in 0..self.rows {
            data.extend_from_slice(self.row(r));
        }
        Tensor2 { rows: self.rows, cols: self.cols, data }
    }
}

/// Dot product with eight independent `f32` lanes, or `f64` accumulation for
/// long vectors. The lane order is fixed, so results are deterministic.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    if a.len() > WIDE_ACCUMULATION_THRESHOLD {
        return a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum::<f64>() as f32;
    }
    let mut acc = [0.0f32; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0f32;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f32, x: &[f32], y: &mut [f32]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
pub fn l2_norm(v: &[f32]) -> f32 {
    libm::sqrtf(dot(v, v))
}
