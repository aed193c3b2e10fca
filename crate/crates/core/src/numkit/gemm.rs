//! Thin wrappers over `matrixmultiply::sgemm` for the three products the MLP
//! needs. All matrices are row-major.

/// `c = a · b` (or `c += a · b` when `accumulate`), `a: m×k`, `b: k×n`.
pub(crate) fn nn(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32], accumulate: bool) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    unsafe {
        matrixmultiply::sgemm(
            m, k, n, 1.0,
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), n as isize, 1,
            beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// `c = a · b` one row at a time, without packing. Each output row depends
/// only on its own input row, so results are bit-identical for any `m`.
pub(crate) fn rows_nn(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if n == 0 {
        return;
    }
    for (ar, cr) in a.chunks_exact(k.max(1)).zip(c.chunks_exact_mut(n)) {
        cr.fill(0.0);
        for (&ai, row) in ar.iter().zip(b.chunks_exact(n)) {
            let row = &row[..n];
            for j in 0..n {
                cr[j] += ai * row[j];
            }
        }
    }
}

/// `c = aᵀ · b`, `a: k×m` stored row-major, `b: k×n`, `c: m×n`.
pub(crate) fn tn(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::sgemm(
            m, k, n, 1.0,
            a.as_ptr(), 1, m as isize,
            b.as_ptr(), n as isize, 1,
            0.0,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// `c = a · bᵀ`, `a: m×k`, `b: n×k` stored row-major, `c: m×n`.
pub(crate) fn nt(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::sgemm(
            m, k, n, 1.0,
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), 1, k as isize,
            0.0,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}
