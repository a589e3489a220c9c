//! Dense kernels behind the tape operations. All loops run in a fixed order,
//! so results are bit-reproducible.

use crate::scalar::Scalar;

#[inline]
pub(crate) fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * xi;
    }
}

#[inline]
pub(crate) fn dot<T: Scalar>(x: &[T], y: &[T]) -> T {
    let mut acc = T::zero();
    for (&a, &b) in x.iter().zip(y) {
        acc = acc + a * b;
    }
    acc
}

/// Below this many multiply-adds the plain loops beat packed kernels.
const BLOCKED_MIN_WORK: usize = 1 << 16;

/// `out[m×n] += a[m×k] · b[k×n]`
pub(crate) fn gemm_nn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    if m * k * n >= BLOCKED_MIN_WORK {
        return T::gemm(m, k, n, a, (k, 1), b, (n, 1), out, (n, 1));
    }
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in a[i * k..(i + 1) * k].iter().enumerate() {
            axpy(aik, &b[kk * n..(kk + 1) * n], row);
        }
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`
pub(crate) fn gemm_nt<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    if m * k * n >= BLOCKED_MIN_WORK {
        return T::gemm(m, k, n, a, (k, 1), b, (1, k), out, (n, 1));
    }
    for i in 0..m {
        let ai = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] = out[i * n + j] + dot(ai, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · g[m×n]`
pub(crate) fn gemm_tn<T: Scalar>(a: &[T], g: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    if m * k * n >= BLOCKED_MIN_WORK {
        return T::gemm(k, m, n, a, (1, k), g, (n, 1), out, (n, 1));
    }
    for i in 0..m {
        let gi = &g[i * n..(i + 1) * n];
        for kk in 0..k {
            axpy(a[i * k + kk], gi, &mut out[kk * n..(kk + 1) * n]);
        }
    }
}
