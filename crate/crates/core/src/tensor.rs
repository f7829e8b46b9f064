//! Dense row-major `f32` matrices.
//!
//! Everything in the workbench is token-major: row `t` of a cache matrix is
//! the vector for token `t`, with KV heads laid out contiguously along the
//! columns (`head * d_head + channel`).

use std::fmt;
use std::ops::Range;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{ensure, Result};

#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix[{}x{}]", self.rows, self.cols)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        ensure!(
            data.len() == rows * cols,
            Dimension,
            "buffer of {} elements cannot form a {rows}x{cols} matrix",
            data.len()
        );
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from nested rows. Panics on ragged input; meant for
    /// literals in tests and examples.
    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Self { rows: rows.len(), cols, data }
    }

    /// Gaussian entries drawn in row-major order from `rng`.
    pub fn randn<R: Rng + ?Sized>(rows: usize, cols: usize, std: f32, rng: &mut R) -> Self {
        let normal = Normal::new(0.0f32, std).expect("finite std");
        let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
        Self { rows, cols, data }
    }

    /// Uniform entries in `[-bound, bound)`.
    pub fn uniform<R: Rng + ?Sized>(rows: usize, cols: usize, bound: f32, rng: &mut R) -> Self {
        let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn push_row(&mut self, row: &[f32]) -> Result<()> {
        if self.rows == 0 && self.cols == 0 {
            self.cols = row.len();
        }
        ensure!(
            row.len() == self.cols,
            Dimension,
            "row of width {} pushed onto matrix of width {}",
            row.len(),
            self.cols
        );
        self.data.extend_from_slice(row);
        self.rows += 1;
        Ok(())
    }

    /// Removes the first `n` rows.
    pub fn drop_front_rows(&mut self, n: usize) {
        let n = n.min(self.rows);
        self.data.drain(..n * self.cols);
        self.rows -= n;
    }

    /// Copy of rows `range`, all columns.
    pub fn slice_rows(&self, range: Range<usize>) -> Matrix {
        assert!(range.end <= self.rows, "row range {range:?} out of {} rows", self.rows);
        Matrix {
            rows: range.len(),
            cols: self.cols,
            data: self.data[range.start * self.cols..range.end * self.cols].to_vec(),
        }
    }

    /// Copy of columns `range`, all rows.
    pub fn slice_cols(&self, range: Range<usize>) -> Matrix {
        assert!(range.end <= self.cols, "column range {range:?} out of {} cols", self.cols);
        let width = range.len();
        let mut data = Vec::with_capacity(self.rows * width);
        for r in 0..self.rows {
            data.extend_from_slice(&self.row(r)[range.clone()]);
        }
        Matrix { rows: self.rows, cols: width, data }
    }

    /// Row-wise concatenation `[self ; other]` along columns.
    pub fn hcat(&self, other: &Matrix) -> Result<Matrix> {
        ensure!(
            self.rows == other.rows,
            Dimension,
            "cannot concatenate {} rows with {} rows",
            self.rows,
            other.rows
        );
        let cols = self.cols + other.cols;
        let mut data = Vec::with_capacity(self.rows * cols);
        for r in 0..self.rows {
            data.extend_from_slice(self.row(r));
            data.extend_from_slice(other.row(r));
        }
        Ok(Matrix { rows: self.rows, cols, data })
    }

    /// Stacks `other` below `self`.
    pub fn vcat(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows == 0 {
            return Ok(other.clone());
        }
        if other.rows == 0 {
            return Ok(self.clone());
        }
        ensure!(
            self.cols == other.cols,
            Dimension,
            "cannot stack width {} on width {}",
            other.cols,
            self.cols
        );
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Ok(Matrix { rows: self.rows + other.rows, cols: self.cols, data })
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Matrix {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn scale(&mut self, s: f32) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        ensure!(self.shape() == other.shape(), Dimension, "add {:?} to {:?}", other.shape(), self.shape());
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        ensure!(self.shape() == other.shape(), Dimension, "subtract {:?} from {:?}", other.shape(), self.shape());
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Matrix { rows: self.rows, cols: self.cols, data })
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f32 {
        assert_eq!(self.shape(), other.shape());
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Writes `src` into columns starting at `col`, for every row.
    pub fn write_cols(&mut self, col: usize, src: &Matrix) -> Result<()> {
        ensure!(
            src.rows == self.rows && col + src.cols <= self.cols,
            Dimension,
            "cannot place {:?} at column {col} of {:?}",
            src.shape(),
            self.shape()
        );
        for r in 0..self.rows {
            let dst = &mut self.data[r * self.cols + col..r * self.cols + col + src.cols];
            dst.copy_from_slice(src.row(r));
        }
        Ok(())
    }

    /// SHA-256 over the little-endian bytes of the entries, hex encoded.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.rows as u64).to_le_bytes());
        h.update((self.cols as u64).to_le_bytes());
        for x in &self.data {
            h.update(x.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// `a × b`, accumulating each output row left to right over `a`'s columns.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    ensure!(
        a.cols == b.rows,
        Dimension,
        "matmul of {:?} by {:?}",
        a.shape(),
        b.shape()
    );
    let mut out = Matrix::zeros(a.rows, b.cols);
    for r in 0..a.rows {
        let arow = a.row(r);
        let orow = &mut out.data[r * b.cols..(r + 1) * b.cols];
        for (k, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[k * b.cols..(k + 1) * b.cols];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(out)
}

/// `a × bᵀ`. Used for bias-free linear maps stored as `[out × in]`.
pub fn matmul_t(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    ensure!(
        a.cols == b.cols,
        Dimension,
        "matmul_t of {:?} by transposed {:?}",
        a.shape(),
        b.shape()
    );
    let mut out = Matrix::zeros(a.rows, b.rows);
    for r in 0..a.rows {
        let arow = a.row(r);
        for c in 0..b.rows {
            out.data[r * b.rows + c] = dot(arow, b.row(c));
        }
    }
    Ok(out)
}

/// `aᵀ × b`, accumulated over rows in ascending order.
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    ensure!(
        a.rows == b.rows,
        Dimension,
        "matmul_tn of transposed {:?} by {:?}",
        a.shape(),
        b.shape()
    );
    let mut out = Matrix::zeros(a.cols, b.cols);
    for r in 0..a.rows {
        let arow = a.row(r);
        let brow = b.row(r);
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(out)
}

#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    // Four independent lanes keep the loop vectorisable while the order
    // stays fixed for a given length.
    let mut acc = [0.0f32; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = i * 4;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut tail = 0.0;
    for j in chunks * 4..a.len() {
        tail += a[j] * b[j];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
pub(crate) fn axpy(alpha: f32, x: &[f32], y: &mut [f32]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}
