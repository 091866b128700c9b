/// `c = alpha * a @ b + beta * c` for row/column strided matrices.
///
/// `a` is `m x k`, `b` is `k x n`, `c` is `m x n` row-major. Strides are in
/// elements, which lets callers pass transposed views without copying.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c.iter_mut().for_each(|v| *v = 0.0);
        } else {
            c.iter_mut().for_each(|v| *v *= beta);
        }
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: the caller guarantees that `a`, `b` and `c` cover the strided
    // extents implied by the dimensions; every call site derives the strides
    // from the owning tensors' shapes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Plain row-major `a [m,k] @ b [k,n]`, accumulated into `out` when
/// `accumulate` is set.
pub fn matmul_into(
    a: &[f64],
    b: &[f64],
    m: usize,
    k: usize,
    n: usize,
    out: &mut [f64],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(out.len(), m * n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    gemm(
        m,
        k,
        n,
        1.0,
        a,
        (k as isize, 1),
        b,
        (n as isize, 1),
        beta,
        out,
    );
}
