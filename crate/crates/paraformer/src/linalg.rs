//! Dense and sparse linear-algebra primitives used by the attention kernels,
//! the model and the diagnostics suite.
//!
//! All dense matrices are `ndarray::Array2<f64>`. The softmax helpers subtract
//! the per-slice maximum before exponentiating so that large logits do not
//! overflow; the subtraction cancels exactly in the normalized result.

use ndarray::{Array1, Array2, Axis};

use crate::error::{Error, Result};

pub type Mat = Array2<f64>;

// ---------------------------------------------------------------------------
// softmax family
// ---------------------------------------------------------------------------

/// Row-wise softmax: every output row is non-negative and sums to 1.
pub fn row_softmax(x: &Mat) -> Mat {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum: f64 = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Column-wise softmax: every output column is non-negative and sums to 1.
pub fn col_softmax(x: &Mat) -> Mat {
    let mut out = x.clone();
    for mut col in out.columns_mut() {
        let max = col.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        col.mapv_inplace(|v| (v - max).exp());
        let sum: f64 = col.sum();
        col.mapv_inplace(|v| v / sum);
    }
    out
}

// ---------------------------------------------------------------------------
// norms and reductions
// ---------------------------------------------------------------------------

pub fn frobenius_norm(x: &Mat) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Maximum absolute entry; 0 for an empty matrix.
pub fn max_abs(x: &Mat) -> f64 {
    x.iter().fold(0.0_f64, |a, &b| a.max(b.abs()))
}

/// Operator 1-norm: the maximum absolute column sum.
pub fn l1_operator_norm(x: &Mat) -> f64 {
    let mut best = 0.0_f64;
    for col in x.columns() {
        let s: f64 = col.iter().map(|v| v.abs()).sum();
        best = best.max(s);
    }
    best
}

/// Spectral norm (largest singular value) via power iteration on `XᵀX`.
///
/// Deterministic: the start vector is fixed. Converges to a relative
/// tolerance of 1e-12 or after 10_000 iterations, whichever comes first.
pub fn spectral_norm(x: &Mat) -> f64 {
    let (n, d) = x.dim();
    if n == 0 || d == 0 {
        return 0.0;
    }
    // Fixed pseudo-random start so repeated calls agree bit-for-bit and the
    // iteration cannot start orthogonal to the top singular vector in any
    // reproducible test case.
    let mut v = Array1::from_shape_fn(d, |i| 1.0 + ((i as f64) * 0.7391).sin() * 0.5);
    let norm = v.dot(&v).sqrt();
    v.mapv_inplace(|e| e / norm);

    let mut sigma_sq_prev = 0.0_f64;
    for _ in 0..10_000 {
        // w = Xᵀ(Xv) keeps the iterate in R^d without forming XᵀX.
        let xv = x.dot(&v);
        let mut w = x.t().dot(&xv);
        let sigma_sq = w.dot(&v);
        let wn = w.dot(&w).sqrt();
        if wn == 0.0 {
            return 0.0;
        }
        w.mapv_inplace(|e| e / wn);
        v = w;
        if (sigma_sq - sigma_sq_prev).abs() <= 1e-12 * sigma_sq.abs().max(1.0) {
            sigma_sq_prev = sigma_sq;
            break;
        }
        sigma_sq_prev = sigma_sq;
    }
    sigma_sq_prev.max(0.0).sqrt()
}

pub fn row_sums(x: &Mat) -> Array1<f64> {
    x.sum_axis(Axis(1))
}

pub fn col_sums(x: &Mat) -> Array1<f64> {
    x.sum_axis(Axis(0))
}

pub fn all_finite(x: &Mat) -> bool {
    x.iter().all(|v| v.is_finite())
}

pub fn ensure_finite(x: &Mat, context: &str) -> Result<()> {
    if all_finite(x) {
        Ok(())
    } else {
        Err(Error::NonFinite {
            context: context.to_string(),
        })
    }
}

/// Checks that every row of `x` sums to 1 within `tol` and is non-negative.
pub fn ensure_row_stochastic(x: &Mat, tol: f64) -> Result<()> {
    for (i, row) in x.rows().into_iter().enumerate() {
        let sum: f64 = row.sum();
        if (sum - 1.0).abs() > tol || row.iter().any(|&v| v < -tol) {
            return Err(Error::NotRowStochastic { row: i, sum });
        }
    }
    Ok(())
}

pub fn relu(x: &Mat) -> Mat {
    x.mapv(|v| v.max(0.0))
}

// ---------------------------------------------------------------------------
// sparse matrices
// ---------------------------------------------------------------------------

/// Compressed sparse row matrix, used for normalized adjacencies so that the
/// local message-passing branch costs O(nnz · d) instead of O(n² · d).
#[derive(Debug, Clone, PartialEq)]
pub struct Csr {
    n_rows: usize,
    n_cols: usize,
    indptr: Vec<usize>,
    indices: Vec<u32>,
    data: Vec<f64>,
}

impl Csr {
    /// Builds from (row, col, value) triplets. Triplets may arrive in any
    /// order; duplicates are summed.
    pub fn from_triplets(
        n_rows: usize,
        n_cols: usize,
        triplets: impl IntoIterator<Item = (usize, usize, f64)>,
    ) -> Self {
        let mut per_row: Vec<Vec<(u32, f64)>> = vec![Vec::new(); n_rows];
        for (r, c, v) in triplets {
            assert!(r < n_rows && c < n_cols, "triplet out of range");
            per_row[r].push((c as u32, v));
        }
        let mut indptr = Vec::with_capacity(n_rows + 1);
        let mut indices = Vec::new();
        let mut data = Vec::new();
        indptr.push(0);
        for row in &mut per_row {
            row.sort_unstable_by_key(|&(c, _)| c);
            let mut iter = row.iter().peekable();
            while let Some(&(c, v)) = iter.next() {
                let mut acc = v;
                while let Some(&&(c2, v2)) = iter.peek() {
                    if c2 == c {
                        acc += v2;
                        iter.next();
                    } else {
                        break;
                    }
                }
                indices.push(c);
                data.push(acc);
            }
            indptr.push(indices.len());
        }
        Csr {
            n_rows,
            n_cols,
            indptr,
            indices,
            data,
        }
    }

    pub fn from_dense(x: &Mat) -> Self {
        let (n, m) = x.dim();
        Csr::from_triplets(
            n,
            m,
            x.indexed_iter()
                .filter(|(_, &v)| v != 0.0)
                .map(|((r, c), &v)| (r, c, v)),
        )
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.data.len()
    }

    /// Dense product `self · x`.
    pub fn matmul_dense(&self, x: &Mat) -> Mat {
        assert_eq!(
            self.n_cols,
            x.nrows(),
            "sparse-dense product dimension mismatch"
        );
        let d = x.ncols();
        let mut out = Mat::zeros((self.n_rows, d));
        for r in 0..self.n_rows {
            let mut acc = out.row_mut(r);
            for idx in self.indptr[r]..self.indptr[r + 1] {
                let c = self.indices[idx] as usize;
                let v = self.data[idx];
                acc.scaled_add(v, &x.row(c));
            }
        }
        out
    }

    pub fn transpose(&self) -> Csr {
        Csr::from_triplets(
            self.n_cols,
            self.n_rows,
            self.iter().map(|(r, c, v)| (c, r, v)),
        )
    }

    pub fn to_dense(&self) -> Mat {
        let mut out = Mat::zeros((self.n_rows, self.n_cols));
        for (r, c, v) in self.iter() {
            out[[r, c]] = v;
        }
        out
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n_rows).flat_map(move |r| {
            (self.indptr[r]..self.indptr[r + 1])
                .map(move |idx| (r, self.indices[idx] as usize, self.data[idx]))
        })
    }
}

// ---------------------------------------------------------------------------
// tests
// ---------------------------------------------------------------------------
