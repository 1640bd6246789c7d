//! Small dense symmetric linear algebra: Cholesky factorization and
//! triangular solves. Direct solves are exact and cheap at the dataset sizes
//! the surrogate sees (n up to a few hundred).

use crate::error::{FmsError, Result};

/// Lower Cholesky factor of a symmetric positive-definite matrix (row-major,
/// reads the lower triangle only). Returns the factor `L` with `L·Lᵀ = A`.
pub fn cholesky_lower(n: usize, a: &[f64]) -> Option<Vec<f64>> {
    debug_assert_eq!(a.len(), n * n);
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for t in 0..j {
                s -= l[i * n + t] * l[j * n + t];
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return None;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Some(l)
}

/// Solve `L·x = b` in place (forward substitution, `L` lower triangular).
pub fn solve_lower(n: usize, l: &[f64], b: &mut [f64]) {
    for i in 0..n {
        let mut s = b[i];
        for t in 0..i {
            s -= l[i * n + t] * b[t];
        }
        b[i] = s / l[i * n + i];
    }
}

/// Solve `Lᵀ·x = b` in place (back substitution).
pub fn solve_lower_transpose(n: usize, l: &[f64], b: &mut [f64]) {
    for i in (0..n).rev() {
        let mut s = b[i];
        for t in i + 1..n {
            s -= l[t * n + i] * b[t];
        }
        b[i] = s / l[i * n + i];
    }
}

/// Solve `(L·Lᵀ)·x = b`, returning `x`.
pub fn cholesky_solve(n: usize, l: &[f64], b: &[f64]) -> Vec<f64> {
    let mut x = b.to_vec();
    solve_lower(n, l, &mut x);
    solve_lower_transpose(n, l, &mut x);
    x
}

/// Full inverse of `L·Lᵀ` from its Cholesky factor.
pub fn cholesky_inverse(n: usize, l: &[f64]) -> Vec<f64> {
    let mut inv = vec![0.0; n * n];
    let mut col = vec![0.0; n];
    for j in 0..n {
        col.fill(0.0);
        col[j] = 1.0;
        solve_lower(n, l, &mut col);
        solve_lower_transpose(n, l, &mut col);
        for i in 0..n {
            inv[i * n + j] = col[i];
        }
    }
    inv
}

/// Result of factoring a kernel matrix with the escalating-jitter policy.
#[derive(Debug)]
pub struct JitteredCholesky {
    pub factor: Vec<f64>,
    /// Jitter actually added to the diagonal (0 when the raw matrix factored).
    pub jitter: f64,
}

/// Factor `K` (symmetric, row-major), escalating diagonal jitter on failure:
/// first the raw matrix, then `mean(diag K)·1e-8` growing tenfold up to
/// `mean(diag K)·1e-2`.
pub fn cholesky_with_jitter(n: usize, k: &[f64]) -> Result<JitteredCholesky> {
    debug_assert_eq!(k.len(), n * n);
    if let Some(factor) = cholesky_lower(n, k) {
        return Ok(JitteredCholesky { factor, jitter: 0.0 });
    }
    let mean_diag = (0..n).map(|i| k[i * n + i]).sum::<f64>() / n.max(1) as f64;
    let scale = if mean_diag.abs() > 0.0 && mean_diag.is_finite() {
        mean_diag.abs()
    } else {
        1.0
    };
    let mut jitter = scale * 1e-8;
    let max_jitter = scale * 1e-2;
    let mut buf = vec![0.0; n * n];
    loop {
        buf.copy_from_slice(k);
        for i in 0..n {
            buf[i * n + i] += jitter;
        }
        if let Some(factor) = cholesky_lower(n, &buf) {
            return Ok(JitteredCholesky { factor, jitter });
        }
        if jitter >= max_jitter {
            return Err(FmsError::NotPositiveDefinite {
                attempted_jitter: jitter,
            });
        }
        jitter *= 10.0;
    }
}

/// Log-determinant of `L·Lᵀ` from the factor: `2·Σ log Lᵢᵢ`.
pub fn log_det_from_factor(n: usize, l: &[f64]) -> f64 {
    (0..n).map(|i| l[i * n + i].ln()).sum::<f64>() * 2.0
}
