//! Dense row-major f64 matrices. Everything in this crate is desk scale,
//! so a plain `Vec<f64>` with explicit loops is fast enough and keeps the
//! numerics bit-reproducible.

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "shape/data mismatch");
        Tensor { rows, cols, data }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { rows: 1, cols: 1, data: vec![v] }
    }

    /// Scaled-uniform init on [-limit, limit] with limit = sqrt(6 / (fan_in + fan_out)).
    pub fn glorot(rows: usize, cols: usize, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.gen_range(-limit..limit)).collect();
        Tensor { rows, cols, data }
    }

    /// Uniform init on [-scale, scale].
    pub fn uniform(rows: usize, cols: usize, scale: f64, rng: &mut impl Rng) -> Self {
        let data = (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect();
        Tensor { rows, cols, data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_assign(&mut self, s: f64) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// C += A @ B, all row-major. ikj loop order keeps the inner loop contiguous.
    pub fn matmul_acc(c: &mut Tensor, a: &Tensor, b: &Tensor) {
        assert_eq!(a.cols, b.rows);
        assert_eq!(c.rows, a.rows);
        assert_eq!(c.cols, b.cols);
        let n = b.cols;
        for i in 0..a.rows {
            let crow = &mut c.data[i * n..(i + 1) * n];
            for k in 0..a.cols {
                let av = a.data[i * a.cols + k];
                if av == 0.0 {
                    continue;
                }
                let brow = &b.data[k * n..(k + 1) * n];
                for (cv, bv) in crow.iter_mut().zip(brow) {
                    *cv += av * bv;
                }
            }
        }
    }

    pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let mut c = Tensor::zeros(a.rows, b.cols);
        Tensor::matmul_acc(&mut c, a, b);
        c
    }

    /// C += A^T @ B.
    pub fn matmul_tn_acc(c: &mut Tensor, a: &Tensor, b: &Tensor) {
        assert_eq!(a.rows, b.rows);
        assert_eq!(c.rows, a.cols);
        assert_eq!(c.cols, b.cols);
        let n = b.cols;
        for k in 0..a.rows {
            let arow = &a.data[k * a.cols..(k + 1) * a.cols];
            let brow = &b.data[k * n..(k + 1) * n];
            for (i, &av) in arow.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let crow = &mut c.data[i * n..(i + 1) * n];
                for (cv, bv) in crow.iter_mut().zip(brow) {
                    *cv += av * bv;
                }
            }
        }
    }

    /// C += A @ B^T.
    pub fn matmul_nt_acc(c: &mut Tensor, a: &Tensor, b: &Tensor) {
        assert_eq!(a.cols, b.cols);
        assert_eq!(c.rows, a.rows);
        assert_eq!(c.cols, b.rows);
        for i in 0..a.rows {
            let arow = &a.data[i * a.cols..(i + 1) * a.cols];
            for j in 0..b.rows {
                let brow = &b.data[j * b.cols..(j + 1) * b.cols];
                let mut s = 0.0;
                for (av, bv) in arow.iter().zip(brow) {
                    s += av * bv;
                }
                c.data[i * c.cols + j] += s;
            }
        }
    }
}
