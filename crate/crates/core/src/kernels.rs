//! Dense row-major kernels used by the graph ops.

use crate::float::Float;

/// Dot product with eight independent accumulators so the compiler can
/// vectorize it. The summation order is fixed, which keeps results
/// reproducible run to run.
#[inline]
pub fn dot<T: Float>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::ZERO; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let xa = &a[c * 8..c * 8 + 8];
        let xb = &b[c * 8..c * 8 + 8];
        for l in 0..8 {
            acc[l] += xa[l] * xb[l];
        }
    }
    let mut tail = T::ZERO;
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[inline]
pub fn axpy<T: Float>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `out[m,n] += a[m,k] · b[k,n]`
pub fn matmul_acc<T: Float>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik != T::ZERO {
                axpy(aik, &b[kk * n..(kk + 1) * n], orow);
            }
        }
    }
}

/// `out[m,n] += a[m,k] · b[n,k]ᵀ`
pub fn matmul_nt_acc<T: Float>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `out[m,n] += a[k,m]ᵀ · b[k,n]`
pub fn matmul_tn_acc<T: Float>(a: &[T], b: &[T], out: &mut [T], k: usize, m: usize, n: usize) {
    for kk in 0..k {
        let brow = &b[kk * n..(kk + 1) * n];
        for i in 0..m {
            let aki = a[kk * m + i];
            if aki != T::ZERO {
                axpy(aki, brow, &mut out[i * n..(i + 1) * n]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn dot_matches_naive_sum() {
        let a: alloc::vec::Vec<f64> = (0..19).map(|i| i as f64 * 0.5).collect();
        let b: alloc::vec::Vec<f64> = (0..19).map(|i| 1.0 - i as f64).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-9);
    }

    #[test]
    fn transposed_variants_agree() {
        // a: 2x3, b: 3x2
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [7.0f64, 8.0, 9.0, 10.0, 11.0, 12.0];
        let bt = [7.0f64, 9.0, 11.0, 8.0, 10.0, 12.0];
        let at = [1.0f64, 4.0, 2.0, 5.0, 3.0, 6.0];
        let mut c1 = vec![0.0; 4];
        let mut c2 = vec![0.0; 4];
        let mut c3 = vec![0.0; 4];
        matmul_acc(&a, &b, &mut c1, 2, 3, 2);
        matmul_nt_acc(&a, &bt, &mut c2, 2, 3, 2);
        matmul_tn_acc(&at, &b, &mut c3, 3, 2, 2);
        assert_eq!(c1, vec![58.0, 64.0, 139.0, 154.0]);
        assert_eq!(c1, c2);
        assert_eq!(c1, c3);
    }
}
