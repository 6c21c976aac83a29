//! Dense matrix kernels shared by the tape ops and the exact-GP code.
//!
//! Matrices are row-major `&[f64]` slices with explicit dimensions. The
//! matmul kernels parallelize over output rows for large problems; each row
//! is written by exactly one thread, so results are bitwise independent of
//! the thread count.

use rayon::prelude::*;

/// Work threshold (multiply-adds) below which matmul stays single-threaded.
const PAR_THRESHOLD: usize = 1 << 20;

/// C[m,n] = A[m,k] * B[k,n]
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![0.0; m * n];
    let row = |ci: &mut [f64], ai: &[f64]| {
        for (p, &av) in ai.iter().enumerate() {
            if av != 0.0 {
                let brow = &b[p * n..(p + 1) * n];
                for (cv, &bv) in ci.iter_mut().zip(brow) {
                    *cv += av * bv;
                }
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        c.par_chunks_mut(n)
            .zip(a.par_chunks(k))
            .for_each(|(ci, ai)| row(ci, ai));
    } else {
        for (ci, ai) in c.chunks_mut(n).zip(a.chunks(k)) {
            row(ci, ai);
        }
    }
    c
}

/// C[m,n] = A[m,k] * B[n,k]^T
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut c = vec![0.0; m * n];
    let row = |ci: &mut [f64], ai: &[f64]| {
        for (j, cv) in ci.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (&av, &bv) in ai.iter().zip(brow) {
                s += av * bv;
            }
            *cv = s;
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        c.par_chunks_mut(n)
            .zip(a.par_chunks(k))
            .for_each(|(ci, ai)| row(ci, ai));
    } else {
        for (ci, ai) in c.chunks_mut(n).zip(a.chunks(k)) {
            row(ci, ai);
        }
    }
    c
}

/// C[m,n] = A[k,m]^T * B[k,n]
pub fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![0.0; m * n];
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                let crow = &mut c[i * n..(i + 1) * n];
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv += av * bv;
                }
            }
        }
    }
    c
}

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix,
/// or `None` when the decomposition breaks down.
pub fn cholesky(a: &[f64], n: usize) -> Option<Vec<f64>> {
    debug_assert_eq!(a.len(), n * n);
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for p in 0..j {
                s -= l[i * n + p] * l[j * n + p];
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

/// X = L^-1 B with L lower triangular; B is n x cols.
pub fn solve_lower(l: &[f64], b: &[f64], n: usize, cols: usize) -> Vec<f64> {
    debug_assert_eq!(l.len(), n * n);
    debug_assert_eq!(b.len(), n * cols);
    let mut x = b.to_vec();
    for i in 0..n {
        let (above, current) = x.split_at_mut(i * cols);
        let xi = &mut current[..cols];
        for p in 0..i {
            let lip = l[i * n + p];
            if lip != 0.0 {
                let xp = &above[p * cols..(p + 1) * cols];
                for (v, &w) in xi.iter_mut().zip(xp) {
                    *v -= lip * w;
                }
            }
        }
        let d = l[i * n + i];
        for v in xi.iter_mut() {
            *v /= d;
        }
    }
    x
}

/// X = L^-T B with L lower triangular; B is n x cols.
pub fn solve_lower_t(l: &[f64], b: &[f64], n: usize, cols: usize) -> Vec<f64> {
    debug_assert_eq!(l.len(), n * n);
    debug_assert_eq!(b.len(), n * cols);
    let mut x = b.to_vec();
    for i in (0..n).rev() {
        let (current, below) = x.split_at_mut((i + 1) * cols);
        let xi = &mut current[i * cols..];
        for p in (i + 1)..n {
            let lpi = l[p * n + i]; // (L^T)[i,p]
            if lpi != 0.0 {
                let xp = &below[(p - i - 1) * cols..(p - i) * cols];
                for (v, &w) in xi.iter_mut().zip(xp) {
                    *v -= lpi * w;
                }
            }
        }
        let d = l[i * n + i];
        for v in xi.iter_mut() {
            *v /= d;
        }
    }
    x
}

/// Jitter ladder used before declaring a Cholesky failure. The first rung
/// tries the matrix as-is.
pub const JITTER_LADDER: [f64; 6] = [0.0, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4];

/// Cholesky with escalating diagonal jitter. Returns the factor and the
/// jitter that succeeded.
pub fn cholesky_jittered(a: &[f64], n: usize) -> Option<(Vec<f64>, f64)> {
    let mut work = a.to_vec();
    for (rung, &jitter) in JITTER_LADDER.iter().enumerate() {
        if rung > 0 {
            let prev = JITTER_LADDER[rung - 1];
            for i in 0..n {
                work[i * n + i] += jitter - prev;
            }
        }
        if let Some(l) = cholesky(&work, n) {
            return Some((l, jitter));
        }
    }
    None
}
