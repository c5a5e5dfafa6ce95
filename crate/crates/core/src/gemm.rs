//! Dense matrix product used by every linear operator in the crate.
//!
//! Each output element accumulates its `k` products in ascending `k` order starting from
//! its current value, so results are bitwise reproducible and agree exactly with a naive
//! triple loop. Vectorization only happens across independent output columns.

use crate::scalar::Scalar;

const MR: usize = 4;
const NR: usize = 16;

/// `c += a · b` with row-major `a: m×k`, `b: k×n`, `c: m×n`.
pub fn gemm_acc<T: Scalar>(m: usize, n: usize, k: usize, a: &[T], b: &[T], c: &mut [T]) {
    assert_eq!(a.len(), m * k, "gemm: lhs length");
    assert_eq!(b.len(), k * n, "gemm: rhs length");
    assert_eq!(c.len(), m * n, "gemm: output length");
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the CPU supports AVX2, checked just above.
            unsafe { gemm_avx2(m, n, k, a, b, c) };
            return;
        }
    }
    gemm_body(m, n, k, a, b, c);
}

/// Returns `a · b` as a fresh `m×n` buffer.
pub fn gemm<T: Scalar>(m: usize, n: usize, k: usize, a: &[T], b: &[T]) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    gemm_acc(m, n, k, a, b, &mut c);
    c
}

/// Row-major transpose of an `rows×cols` buffer.
pub fn transpose<T: Scalar>(rows: usize, cols: usize, src: &[T]) -> Vec<T> {
    assert_eq!(src.len(), rows * cols);
    let mut out = vec![T::zero(); src.len()];
    const B: usize = 32;
    for r0 in (0..rows).step_by(B) {
        for c0 in (0..cols).step_by(B) {
            for r in r0..(r0 + B).min(rows) {
                for c in c0..(c0 + B).min(cols) {
                    out[c * rows + r] = src[r * cols + c];
                }
            }
        }
    }
    out
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn gemm_avx2<T: Scalar>(m: usize, n: usize, k: usize, a: &[T], b: &[T], c: &mut [T]) {
    gemm_body(m, n, k, a, b, c);
}

#[inline(always)]
fn gemm_body<T: Scalar>(m: usize, n: usize, k: usize, a: &[T], b: &[T], c: &mut [T]) {
    let mut panel = vec![T::zero(); k * NR];
    let mut j0 = 0;
    while j0 + NR <= n {
        for p in 0..k {
            panel[p * NR..(p + 1) * NR].copy_from_slice(&b[p * n + j0..p * n + j0 + NR]);
        }
        let mut i0 = 0;
        while i0 + MR <= m {
            micro_tile(k, n, &a[i0 * k..(i0 + MR) * k], &panel, c, i0, j0);
            i0 += MR;
        }
        for i in i0..m {
            row_tile(n, &a[i * k..(i + 1) * k], &panel, c, i, j0);
        }
        j0 += NR;
    }
    if j0 < n {
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            for j in j0..n {
                let mut acc = c[i * n + j];
                for (p, &av) in arow.iter().enumerate() {
                    acc = acc + av * b[p * n + j];
                }
                c[i * n + j] = acc;
            }
        }
    }
}

#[inline(always)]
fn micro_tile<T: Scalar>(k: usize, n: usize, a: &[T], panel: &[T], c: &mut [T], i0: usize, j0: usize) {
    let mut acc = [[T::zero(); NR]; MR];
    for (r, row) in acc.iter_mut().enumerate() {
        row.copy_from_slice(&c[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR]);
    }
    for p in 0..k {
        let bp: &[T; NR] = panel[p * NR..(p + 1) * NR].try_into().unwrap();
        for (r, row) in acc.iter_mut().enumerate() {
            let av = a[r * k + p];
            for j in 0..NR {
                row[j] = row[j] + av * bp[j];
            }
        }
    }
    for (r, row) in acc.iter().enumerate() {
        c[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR].copy_from_slice(row);
    }
}

#[inline(always)]
fn row_tile<T: Scalar>(n: usize, a: &[T], panel: &[T], c: &mut [T], i: usize, j0: usize) {
    let mut acc = [T::zero(); NR];
    acc.copy_from_slice(&c[i * n + j0..i * n + j0 + NR]);
    for (p, &av) in a.iter().enumerate() {
        let bp: &[T; NR] = panel[p * NR..(p + 1) * NR].try_into().unwrap();
        for j in 0..NR {
            acc[j] = acc[j] + av * bp[j];
        }
    }
    c[i * n + j0..i * n + j0 + NR].copy_from_slice(&acc);
}
