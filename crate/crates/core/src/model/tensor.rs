//! Minimal dense row-major matrix used for parameters and activations.

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn randn<R: Rng>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Self {
        // Box-Muller; two uniform draws per value keeps the stream simple.
        let data = (0..rows * cols)
            .map(|_| {
                let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
                let u2: f64 = rng.gen();
                std * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
            })
            .collect();
        Self { rows, cols, data }
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }
}

/// Dot product with four fixed accumulator lanes. The summation order is a
/// deterministic function of the length, independent of platform.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let chunks = a.len() / 4;
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..chunks {
        let j = 4 * i;
        s0 += a[j] * b[j];
        s1 += a[j + 1] * b[j + 1];
        s2 += a[j + 2] * b[j + 2];
        s3 += a[j + 3] * b[j + 3];
    }
    let mut tail = 0.0;
    for j in 4 * chunks..a.len() {
        tail += a[j] * b[j];
    }
    ((s0 + s1) + (s2 + s3)) + tail
}

#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * *xi;
    }
}

/// `y = x W^T` for `x: L x in`, `w: out x in`, giving `y: L x out`.
pub fn linear_fwd(x: &Tensor, w: &Tensor) -> Tensor {
    debug_assert_eq!(x.cols, w.cols);
    let mut y = Tensor::zeros(x.rows, w.rows);
    for i in 0..x.rows {
        let xi = x.row(i);
        let yi = y.row_mut(i);
        for (o, yo) in yi.iter_mut().enumerate() {
            *yo = dot(xi, w.row(o));
        }
    }
    y
}

/// Backward of `linear_fwd`: accumulates `dx += dy W` and `dw += dy^T x`.
pub fn linear_bwd(x: &Tensor, w: &Tensor, dy: &Tensor, dx: &mut Tensor, dw: &mut Tensor) {
    debug_assert_eq!(dy.rows, x.rows);
    debug_assert_eq!(dy.cols, w.rows);
    for i in 0..x.rows {
        let dyi = dy.row(i);
        let xi = x.row(i);
        let dxi = dx.row_mut(i);
        for (o, &g) in dyi.iter().enumerate() {
            if g != 0.0 {
                axpy(g, w.row(o), dxi);
                axpy(g, xi, dw.row_mut(o));
            }
        }
    }
}

/// In-place numerically stable softmax of a slice.
pub fn softmax_inplace(x: &mut [f64]) {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in x.iter_mut() {
        *v = (*v - m).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}

/// Softmax of a slice into a fresh vector.
pub fn softmax(x: &[f64]) -> Vec<f64> {
    let mut out = x.to_vec();
    softmax_inplace(&mut out);
    out
}

/// Gradient through a softmax row: given probabilities `p` and upstream
/// `dp`, writes `ds_j = p_j (dp_j - sum_k dp_k p_k)` into `ds`.
pub fn softmax_bwd(p: &[f64], dp: &[f64], ds: &mut [f64]) {
    let inner = dot(p, dp);
    for ((d, &pi), &di) in ds.iter_mut().zip(p).zip(dp) {
        *d = pi * (di - inner);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_matches_hand_example() {
        let x = Tensor {
            rows: 1,
            cols: 2,
            data: vec![1.0, 2.0],
        };
        let w = Tensor {
            rows: 2,
            cols: 2,
            data: vec![1.0, 0.0, 3.0, -1.0],
        };
        let y = linear_fwd(&x, &w);
        assert_eq!(y.data, vec![1.0, 1.0]);
    }

    #[test]
    fn softmax_sums_to_one() {
        let p = softmax(&[0.5, -1.0, 2.0, 0.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_bwd_rows_sum_to_zero() {
        let p = softmax(&[0.3, 1.2, -0.7]);
        let dp = [0.9, -0.1, 0.4];
        let mut ds = [0.0; 3];
        softmax_bwd(&p, &dp, &mut ds);
        assert!(ds.iter().sum::<f64>().abs() < 1e-12);
    }
}
