//! Plain matrix kernels on row-major slices.

use crate::scalar::Scalar;

/// `a (m×k) · b (k×n)`.
pub(crate) fn gemm<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for t in 0..k {
            let av = a[i * k + t];
            if av == T::zero() {
                continue;
            }
            let brow = &b[t * n..(t + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `g (m×n) · bᵀ` where `b` is `k×n`; result is `m×k`.
pub(crate) fn gemm_nt<T: Scalar>(g: &[T], b: &[T], m: usize, n: usize, k: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for t in 0..k {
            let brow = &b[t * n..(t + 1) * n];
            let mut acc = T::zero();
            for (&x, &y) in grow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * k + t] = acc;
        }
    }
    out
}

/// `aᵀ · g` where `a` is `m×k` and `g` is `m×n`; result is `k×n`.
pub(crate) fn gemm_tn<T: Scalar>(a: &[T], g: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for t in 0..k {
            let av = a[i * k + t];
            if av == T::zero() {
                continue;
            }
            let orow = &mut out[t * n..(t + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
    out
}

/// Decomposes a shape around `axis` into `(outer, axis_len, inner)`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = (0..k).map(|t| a[i * k + t] * b[t * n + j]).sum();
            }
        }
        out
    }

    fn transpose(x: &[f64], r: usize, c: usize) -> Vec<f64> {
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x[i * c + j];
            }
        }
        out
    }

    #[test]
    fn kernels_agree_with_naive_products() {
        let a: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect(); // 3×4
        let b: Vec<f64> = (0..8).map(|i| (i as f64 * 0.91).cos()).collect(); // 4×2
        let ab = gemm(&a, &b, 3, 4, 2);
        let reference = naive(&a, &b, 3, 4, 2);
        for (x, y) in ab.iter().zip(&reference) {
            assert!((x - y).abs() < 1e-14);
        }
        // g(3×2)·bᵀ(2×4)
        let g: Vec<f64> = (0..6).map(|i| i as f64 - 2.5).collect();
        let nt = gemm_nt(&g, &b, 3, 2, 4);
        let reference = naive(&g, &transpose(&b, 4, 2), 3, 2, 4);
        for (x, y) in nt.iter().zip(&reference) {
            assert!((x - y).abs() < 1e-14);
        }
        // aᵀ(4×3)·g(3×2)
        let tn = gemm_tn(&a, &g, 3, 4, 2);
        let reference = naive(&transpose(&a, 3, 4), &g, 4, 3, 2);
        for (x, y) in tn.iter().zip(&reference) {
            assert!((x - y).abs() < 1e-14);
        }
    }
}
