//! Dense linear-algebra primitives used by the conv and dense kernels.
//!
//! All matrices are row-major slices. The three matmul variants cover the
//! forward pass and both backward products of a convolution without ever
//! materializing a transpose: each one maps to a strided GEMM. f32 and f64
//! route to matrixmultiply's packed kernels (single-threaded and
//! deterministic, so repeated runs stay bit-identical); any other element
//! type falls back to a plain triple loop.

use crate::real::Real;
use core::any::TypeId;

/// C[m×n] += A·B where A and B are strided views over `a` and `b`.
///
/// `rsa`/`csa` are the row/column strides of logical A[m×k] in elements, and
/// likewise `rsb`/`csb` for B[k×n]. C is contiguous row-major.
fn gemm_strided<R: Real>(
    c: &mut [R],
    a: &[R],
    b: &[R],
    m: usize,
    k: usize,
    n: usize,
    rsa: isize,
    csa: isize,
    rsb: isize,
    csb: isize,
) {
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let id = TypeId::of::<R>();
    if id == TypeId::of::<f32>() {
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr().cast::<f32>(),
                rsa,
                csa,
                b.as_ptr().cast::<f32>(),
                rsb,
                csb,
                1.0,
                c.as_mut_ptr().cast::<f32>(),
                n as isize,
                1,
            );
        }
    } else if id == TypeId::of::<f64>() {
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr().cast::<f64>(),
                rsa,
                csa,
                b.as_ptr().cast::<f64>(),
                rsb,
                csb,
                1.0,
                c.as_mut_ptr().cast::<f64>(),
                n as isize,
                1,
            );
        }
    } else {
        gemm_strided_ref(c, a, b, m, k, n, rsa, csa, rsb, csb);
    }
}

/// Reference strided GEMM; also serves as the oracle in tests.
fn gemm_strided_ref<R: Real>(
    c: &mut [R],
    a: &[R],
    b: &[R],
    m: usize,
    k: usize,
    n: usize,
    rsa: isize,
    csa: isize,
    rsb: isize,
    csb: isize,
) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for l in 0..k {
            let av = a[(i as isize * rsa + l as isize * csa) as usize];
            for (j, cv) in crow.iter_mut().enumerate() {
                let bv = b[(l as isize * rsb + j as isize * csb) as usize];
                *cv = av.mul_add(bv, *cv);
            }
        }
    }
}

/// C[m×n] += A[m×k] · B[k×n].
pub fn matmul_acc<R: Real>(c: &mut [R], a: &[R], b: &[R], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    gemm_strided(c, a, b, m, k, n, k as isize, 1, n as isize, 1);
}

/// C[m×n] += Aᵀ · B, with A stored as [k×m] and B as [k×n].
pub fn matmul_at_b_acc<R: Real>(c: &mut [R], a: &[R], b: &[R], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    gemm_strided(c, a, b, m, k, n, 1, m as isize, n as isize, 1);
}

/// C[m×n] += A · Bᵀ, with A stored as [m×k] and B as [n×k].
pub fn matmul_a_bt_acc<R: Real>(c: &mut [R], a: &[R], b: &[R], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    gemm_strided(c, a, b, m, k, n, k as isize, 1, 1, k as isize);
}

/// Dot product of two equal-length slices.
#[inline]
pub fn dot<R: Real>(a: &[R], b: &[R]) -> R {
    debug_assert_eq!(a.len(), b.len());
    // Four independent accumulators break the FMA dependency chain.
    let mut acc = [R::zero(); 4];
    let mut chunks_a = a.chunks_exact(4);
    let mut chunks_b = b.chunks_exact(4);
    for (ca, cb) in (&mut chunks_a).zip(&mut chunks_b) {
        for i in 0..4 {
            acc[i] = ca[i].mul_add(cb[i], acc[i]);
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (&x, &y) in chunks_a.remainder().iter().zip(chunks_b.remainder()) {
        s = x.mul_add(y, s);
    }
    s
}

/// y += alpha * x.
#[inline]
pub fn axpy<R: Real>(y: &mut [R], alpha: R, x: &[R]) {
    debug_assert_eq!(y.len(), x.len());
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv = alpha.mul_add(xv, *yv);
    }
}

/// y[m] += A[m×n] · x[n].
pub fn matvec_acc<R: Real>(y: &mut [R], a: &[R], x: &[R], m: usize, n: usize) {
    debug_assert_eq!(y.len(), m);
    debug_assert_eq!(a.len(), m * n);
    for i in 0..m {
        y[i] += dot(&a[i * n..(i + 1) * n], x);
    }
}

/// y[n] += Aᵀ[n×m] · g[m], with A stored as [m×n].
pub fn matvec_t_acc<R: Real>(y: &mut [R], a: &[R], g: &[R], m: usize, n: usize) {
    debug_assert_eq!(y.len(), n);
    debug_assert_eq!(a.len(), m * n);
    for i in 0..m {
        axpy(y, g[i], &a[i * n..(i + 1) * n]);
    }
}

/// A[m×n] += g[m] ⊗ x[n].
pub fn outer_acc<R: Real>(a: &mut [R], g: &[R], x: &[R], m: usize, n: usize) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(g.len(), m);
    debug_assert_eq!(x.len(), n);
    for i in 0..m {
        axpy(&mut a[i * n..(i + 1) * n], g[i], x);
    }
}
