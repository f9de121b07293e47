//! Dense row-major f64 matrices with deterministic kernels.
//!
//! Every product accumulates along the shared dimension in ascending order
//! for each output element, and the parallel paths only split work across
//! output rows, so results are bitwise identical at any thread count.

use std::ops::{Index, IndexMut};
use std::sync::Arc;

use rand::Rng;

use crate::parallel;

#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Mat {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Mat {
        assert_eq!(data.len(), rows * cols, "data length must match {rows}x{cols}");
        Mat { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Mat {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Mat {
            rows: rows.len(),
            cols,
            data,
        }
    }

    /// n x 3 matrix from a point list.
    pub fn from_points(points: &[[f64; 3]]) -> Mat {
        let mut data = Vec::with_capacity(points.len() * 3);
        for p in points {
            data.extend_from_slice(p);
        }
        Mat {
            rows: points.len(),
            cols: 3,
            data,
        }
    }

    pub fn to_points(&self) -> Vec<[f64; 3]> {
        assert_eq!(self.cols, 3, "point matrix must have 3 columns");
        self.data
            .chunks_exact(3)
            .map(|c| [c[0], c[1], c[2]])
            .collect()
    }

    /// Sample every entry from `U(-limit, limit)` in row-major order.
    pub fn uniform(rows: usize, cols: usize, limit: f64, rng: &mut impl Rng) -> Mat {
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-limit..limit))
            .collect();
        Mat { rows, cols, data }
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip(&self, other: &Mat, f: impl Fn(f64, f64) -> f64) -> Mat {
        assert_eq!(self.shape(), other.shape(), "elementwise shape mismatch");
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add(&self, other: &Mat) -> Mat {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Mat) -> Mat {
        self.zip(other, |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Mat) -> Mat {
        self.zip(other, |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Mat {
        self.map(|v| v * s)
    }

    pub fn add_assign(&mut self, other: &Mat) {
        assert_eq!(self.shape(), other.shape(), "elementwise shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn transpose(&self) -> Mat {
        let mut out = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// Broadcast a 1 x cols row over every row of `self`.
    pub fn add_row(&self, row: &Mat) -> Mat {
        assert_eq!(row.rows, 1, "broadcast row must be 1 x cols");
        assert_eq!(row.cols, self.cols, "broadcast width mismatch");
        let mut out = self.clone();
        for i in 0..out.rows {
            let r = out.row_mut(i);
            for (v, b) in r.iter_mut().zip(&row.data) {
                *v += b;
            }
        }
        out
    }

    /// 1 x cols sums over all rows.
    pub fn sum_rows(&self) -> Mat {
        let mut out = Mat::zeros(1, self.cols);
        for i in 0..self.rows {
            for (o, v) in out.data.iter_mut().zip(self.row(i)) {
                *o += v;
            }
        }
        out
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// `self * other`, (n,k) x (k,m) -> (n,m).
    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows, "matmul inner dimension mismatch");
        let (n, kk, m) = (self.rows, self.cols, other.cols);
        let rows = parallel::map_indices(n, |i| {
            let mut acc = vec![0.0f64; m];
            for k in 0..kk {
                let a = self.data[i * kk + k];
                let brow = other.row(k);
                for (o, b) in acc.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
            acc
        });
        flatten(n, m, rows)
    }

    /// `self^T * other`, (k,n) x (k,m) -> (n,m).
    pub fn matmul_tn(&self, other: &Mat) -> Mat {
        assert_eq!(self.rows, other.rows, "matmul_tn outer dimension mismatch");
        let (kk, n, m) = (self.rows, self.cols, other.cols);
        let rows = parallel::map_indices(n, |i| {
            let mut acc = vec![0.0f64; m];
            for k in 0..kk {
                let a = self.data[k * n + i];
                let brow = other.row(k);
                for (o, b) in acc.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
            acc
        });
        flatten(n, m, rows)
    }

    /// `self * other^T`, (n,k) x (m,k) -> (n,m).
    pub fn matmul_nt(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.cols, "matmul_nt inner dimension mismatch");
        let (n, kk, m) = (self.rows, self.cols, other.rows);
        let rows = parallel::map_indices(n, |i| {
            let arow = self.row(i);
            let mut acc = vec![0.0f64; m];
            for (o, j) in acc.iter_mut().zip(0..m) {
                let brow = other.row(j);
                let mut s = 0.0;
                for k in 0..kk {
                    s += arow[k] * brow[k];
                }
                *o = s;
            }
            acc
        });
        flatten(n, m, rows)
    }
}

fn flatten(rows: usize, cols: usize, data: Vec<Vec<f64>>) -> Mat {
    let mut flat = Vec::with_capacity(rows * cols);
    for r in data {
        flat.extend_from_slice(&r);
    }
    Mat {
        rows,
        cols,
        data: flat,
    }
}

impl Index<(usize, usize)> for Mat {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Mat {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// Shared immutable matrix, used for parameters and captured constants.
pub type SharedMat = Arc<Mat>;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parallel::force_sequential;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_matmul(a: &Mat, b: &Mat) -> Mat {
        let mut out = Mat::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a[(i, k)] * b[(k, j)];
                }
                out[(i, j)] = s;
            }
        }
        out
    }

    fn random_mat(rows: usize, cols: usize, seed: u64) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Mat::uniform(rows, cols, 1.0, &mut rng)
    }

    #[test]
    fn matmul_matches_naive_triple_loop() {
        let a = random_mat(7, 5, 1);
        let b = random_mat(5, 9, 2);
        assert_eq!(a.matmul(&b), naive_matmul(&a, &b));
    }

    #[test]
    fn matmul_tn_matches_explicit_transpose() {
        let a = random_mat(6, 4, 3);
        let b = random_mat(6, 5, 4);
        assert_eq!(a.matmul_tn(&b), naive_matmul(&a.transpose(), &b));
    }

    #[test]
    fn matmul_nt_matches_explicit_transpose() {
        let a = random_mat(6, 4, 5);
        let b = random_mat(7, 4, 6);
        assert_eq!(a.matmul_nt(&b), naive_matmul(&a, &b.transpose()));
    }

    #[test]
    fn parallel_and_sequential_products_are_bitwise_equal() {
        let a = random_mat(33, 65, 7);
        let b = random_mat(65, 17, 8);
        force_sequential(true);
        let seq = a.matmul(&b);
        let seq_tn = a.transpose().matmul_tn(&b);
        force_sequential(false);
        let par = a.matmul(&b);
        let par_tn = a.transpose().matmul_tn(&b);
        assert_eq!(seq, par);
        assert_eq!(seq_tn, par_tn);
    }

    #[test]
    fn broadcast_and_reductions() {
        let x = Mat::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let b = Mat::from_vec(1, 2, vec![10.0, 20.0]);
        assert_eq!(
            x.add_row(&b),
            Mat::from_rows(&[vec![11.0, 22.0], vec![13.0, 24.0]])
        );
        assert_eq!(x.sum_rows(), Mat::from_vec(1, 2, vec![4.0, 6.0]));
        assert_eq!(x.sum(), 10.0);
    }

    #[test]
    fn transpose_round_trips() {
        let a = random_mat(5, 8, 11);
        assert_eq!(a.transpose().transpose(), a);
    }
}
