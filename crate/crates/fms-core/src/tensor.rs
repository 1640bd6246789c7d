//! Dense row-major f64 tensors and the raw linear-algebra kernels the tape
//! builds on. No broadcasting, no views; shapes are explicit everywhere.

use crate::error::{FmsError, Result};

/// A dense tensor: row-major `data` with an explicit `shape`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Rows/cols of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(FmsError::ShapeMismatch {
                op: "dims2",
                details: format!("expected rank-2 tensor, got shape {:?}", self.shape),
            }),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reinterpret with a new shape of identical element count.
    pub fn reshaped(mut self, shape: Vec<usize>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape;
        self
    }
}

/// Row chunk size for parallel GEMM. Fixed (not thread-count dependent) so
/// results are identical across worker counts and the sequential fallback.
/// Large on purpose: per-chunk operand repacking makes fine splits a net
/// loss, and the outer (seed × method) fan-out already saturates cores.
const GEMM_ROW_CHUNK: usize = 2048;

/// `c += a · b` for row-major buffers, dimensions `m×k · k×n`.
///
/// `trans_a`/`trans_b` multiply by the transpose without materializing it
/// (the buffer is still the untransposed `m₀×k₀` layout; `m`,`k`,`n` refer to
/// the dimensions of the product actually computed).
pub fn gemm_acc(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let (rsa, csa) = if trans_a {
        (1isize, m as isize)
    } else {
        (k as isize, 1isize)
    };
    let (rsb, csb) = if trans_b {
        (1isize, k as isize)
    } else {
        (n as isize, 1isize)
    };

    // Output rows are disjoint, so the matrix can be split by row blocks of A
    // and C. Splitting A's rows under `trans_a` would need column strides into
    // a shared output; keep that case single-call.
    if !trans_a && m > GEMM_ROW_CHUNK && crate::exec::parallel_enabled() {
        crate::exec::for_each_chunk_mut(c, GEMM_ROW_CHUNK * n, |c_chunk, offset| {
            let row0 = offset / n;
            let rows = c_chunk.len() / n;
            let a_chunk = &a[row0 * k..row0 * k + rows * k];
            unsafe {
                matrixmultiply::dgemm(
                    rows,
                    k,
                    n,
                    1.0,
                    a_chunk.as_ptr(),
                    rsa,
                    csa,
                    b.as_ptr(),
                    rsb,
                    csb,
                    1.0,
                    c_chunk.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
        });
        return;
    }

    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `a · b` into a fresh buffer.
pub fn gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm_acc(m, k, n, a, false, b, false, &mut c);
    c
}

/// Pairwise squared Euclidean distances between the rows of `a` (m×d) and
/// `b` (n×d), written into `out` (m×n).
pub fn sqdist(m: usize, n: usize, d: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let ai = &a[i * d..(i + 1) * d];
        for j in 0..n {
            let bj = &b[j * d..(j + 1) * d];
            let mut s = 0.0;
            for t in 0..d {
                let diff = ai[t] - bj[t];
                s += diff * diff;
            }
            out[i * n + j] = s;
        }
    }
}
