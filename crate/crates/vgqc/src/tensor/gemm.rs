//! Row-major matrix kernels shared by the tape ops.
//!
//! Everything is written in saxpy (ikj) order: the inner loop walks
//! contiguous rows of the right operand and the output, which is what the
//! autovectorizer turns into wide FMAs. Dot-product (ijk) order is several
//! times slower on this workload, so transposes are materialized instead.

use super::Elem;

/// c[m,n] += a[m,k] * b[k,n]
pub fn gemm_nn<E: Elem>(m: usize, k: usize, n: usize, a: &[E], b: &[E], c: &mut [E]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == E::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// dst[c,r] = src[r,c]
pub fn transpose<E: Elem>(rows: usize, cols: usize, src: &[E], dst: &mut [E]) {
    debug_assert_eq!(src.len(), rows * cols);
    debug_assert_eq!(dst.len(), rows * cols);
    for r in 0..rows {
        let s_row = &src[r * cols..(r + 1) * cols];
        for (c, &v) in s_row.iter().enumerate() {
            dst[c * rows + r] = v;
        }
    }
}
