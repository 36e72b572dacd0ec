//! Rotary position embeddings.
//!
//! Position `j` is encoded by the block-diagonal matrix `Q_j` whose `k`-th 2x2
//! block rotates by `j * theta_k`, `theta_k = base^(-2k/d)` for
//! `k = 0..d/2`.

use crate::error::{invalid, Result};

pub const ROPE_BASE: f64 = 10_000.0;

pub fn rope_theta(pair: usize, dim: usize, base: f64) -> f64 {
    base.powf(-2.0 * pair as f64 / dim as f64)
}

/// Dense square matrix, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    n: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self { n, data }
    }

    pub fn from_rows(n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * n {
            return invalid(format!("expected {} entries for a {n}x{n} matrix", n * n));
        }
        Ok(Self { n, data })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.n + c]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn transpose(&self) -> Matrix {
        let n = self.n;
        let mut data = vec![0.0; n * n];
        for r in 0..n {
            for c in 0..n {
                data[c * n + r] = self.data[r * n + c];
            }
        }
        Matrix { n, data }
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        let n = self.n;
        let mut data = vec![0.0; n * n];
        for r in 0..n {
            for k in 0..n {
                let a = self.data[r * n + k];
                if a == 0.0 {
                    continue;
                }
                for c in 0..n {
                    data[r * n + c] += a * other.data[k * n + c];
                }
            }
        }
        Matrix { n, data }
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Largest singular value, by power iteration on `A^T A`.
    pub fn spectral_norm(&self) -> f64 {
        let n = self.n;
        let ata = self.transpose().matmul(self);
        let mut v: Vec<f64> = (0..n).map(|i| 1.0 + i as f64 / n as f64).collect();
        let mut lambda = 0.0;
        for _ in 0..500 {
            let mut w = vec![0.0; n];
            for r in 0..n {
                w[r] = (0..n).map(|c| ata.data[r * n + c] * v[c]).sum();
            }
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                return 0.0;
            }
            lambda = norm;
            v = w.into_iter().map(|x| x / norm).collect();
        }
        lambda.sqrt()
    }
}

/// `Q_j` for a `dim`-dimensional head (base 10000).
pub fn rope_matrix(position: usize, dim: usize) -> Result<Matrix> {
    if dim == 0 || dim % 2 != 0 {
        return invalid(format!("RoPE dimension must be even and positive, got {dim}"));
    }
    let mut m = Matrix { n: dim, data: vec![0.0; dim * dim] };
    for k in 0..dim / 2 {
        let angle = position as f64 * rope_theta(k, dim, ROPE_BASE);
        let (s, c) = angle.sin_cos();
        let r = 2 * k;
        m.data[r * dim + r] = c;
        m.data[r * dim + r + 1] = -s;
        m.data[(r + 1) * dim + r] = s;
        m.data[(r + 1) * dim + r + 1] = c;
    }
    Ok(m)
}
