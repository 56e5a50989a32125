//! Dense kernels for the symmetric positive-definite systems that arise
//! from dissipative heat graphs.
//!
//! Matrices are row-major `n × n` slices. The Cholesky factor is stored in
//! the lower triangle; the strict upper triangle is left untouched.

use crate::exec::Execution;

const BLOCK: usize = 64;
const TILE: usize = 8;

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 8];
    let chunks = n / 8;
    for c in 0..chunks {
        let (x, y) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for t in 0..8 {
            acc[t] += x[t] * y[t];
        }
    }
    let mut tail = 0.0;
    for t in chunks * 8..n {
        tail += a[t] * b[t];
    }
    (acc[0] + acc[4]) + (acc[1] + acc[5]) + (acc[2] + acc[6]) + (acc[3] + acc[7]) + tail
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// The pivot that failed during factorization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NotPositiveDefinite {
    pub row: usize,
    pub pivot: f64,
}

/// Overwrites the lower triangle of `a` with its Cholesky factor `L`
/// (`a = L·Lᵀ`).
pub fn cholesky_in_place(
    a: &mut [f64],
    n: usize,
    exec: Execution,
) -> Result<(), NotPositiveDefinite> {
    assert_eq!(a.len(), n * n);
    let mut i0 = 0;
    while i0 < n {
        let i1 = (i0 + BLOCK).min(n);
        let (done, rest) = a.split_at_mut(i0 * n);
        let block = &mut rest[..(i1 - i0) * n];
        let done: &[f64] = done;

        // Columns left of the block only depend on finished rows.
        if i0 > 0 {
            exec.for_each_chunk_mut(block, TILE * n, |_, tile| {
                for j in 0..i0 {
                    let lj = &done[j * n..j * n + j];
                    let diag = done[j * n + j];
                    for row in tile.chunks_exact_mut(n) {
                        let s = row[j] - dot(&row[..j], lj);
                        row[j] = s / diag;
                    }
                }
            });
        }

        for j in i0..i1 {
            let local = j - i0;
            let (rj, below) = block[local * n..].split_at_mut(n);
            let s = rj[j] - dot(&rj[..j], &rj[..j]);
            if !(s > 0.0) || !s.is_finite() {
                return Err(NotPositiveDefinite { row: j, pivot: s });
            }
            let diag = s.sqrt();
            rj[j] = diag;
            for row in below.chunks_exact_mut(n) {
                let s = row[j] - dot(&row[..j], &rj[..j]);
                row[j] = s / diag;
            }
        }
        i0 = i1;
    }
    Ok(())
}

/// Solves `L·Lᵀ·x = b` given the factor from [`cholesky_in_place`].
pub fn cholesky_solve(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    assert_eq!(b.len(), n);
    let mut y = b.to_vec();
    for i in 0..n {
        let row = &l[i * n..i * n + i];
        y[i] = (y[i] - dot(row, &y[..i])) / l[i * n + i];
    }
    for i in (0..n).rev() {
        y[i] /= l[i * n + i];
        let yi = y[i];
        let row = &l[i * n..i * n + i];
        for (yk, lk) in y[..i].iter_mut().zip(row) {
            *yk -= lk * yi;
        }
    }
    y
}

/// Diagonal of `(L·Lᵀ)⁻¹`, i.e. the squared column norms of `L⁻¹`.
///
/// `L⁻¹` is built row by row (one triangular solve per unit vector).
pub fn inverse_diagonal(l: &[f64], n: usize, exec: Execution) -> Vec<f64> {
    assert_eq!(l.len(), n * n);
    let mut x = vec![0.0f64; n * n];
    let mut i0 = 0;
    while i0 < n {
        let i1 = (i0 + BLOCK).min(n);
        let (done, rest) = x.split_at_mut(i0 * n);
        let block = &mut rest[..(i1 - i0) * n];
        let done: &[f64] = done;

        exec.for_each_chunk_mut(block, TILE * n, |t, tile| {
            let first = i0 + t * TILE;
            for (r, row) in tile.chunks_exact_mut(n).enumerate() {
                row[first + r] = 1.0;
            }
            for k in 0..i0 {
                let xk = &done[k * n..k * n + k + 1];
                for (r, row) in tile.chunks_exact_mut(n).enumerate() {
                    let i = first + r;
                    let lik = l[i * n + k];
                    if lik != 0.0 {
                        axpy(-lik, xk, &mut row[..=k]);
                    }
                }
            }
        });

        for i in i0..i1 {
            let local = i - i0;
            let (above, below) = block.split_at_mut(local * n);
            let row = &mut below[..n];
            for k in i0..i {
                let lik = l[i * n + k];
                if lik != 0.0 {
                    let xk = &above[(k - i0) * n..(k - i0) * n + k + 1];
                    axpy(-lik, xk, &mut row[..=k]);
                }
            }
            let inv = 1.0 / l[i * n + i];
            row[..=i].iter_mut().for_each(|v| *v *= inv);
        }
        i0 = i1;
    }

    let mut diag = vec![0.0f64; n];
    for i in 0..n {
        for (d, v) in diag[..=i].iter_mut().zip(&x[i * n..i * n + i + 1]) {
            *d += v * v;
        }
    }
    diag
}
