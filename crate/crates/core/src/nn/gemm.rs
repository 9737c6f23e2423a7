/// Row-major `c = beta * c + op(a) * op(b)` where `op(a)` is `m x k` and `op(b)` is `k x n`.
#[allow(clippy::too_many_arguments)]
#[cfg(test)]
pub(crate) fn sgemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_trans: bool,
    b: &[f32],
    b_trans: bool,
    beta: f32,
    c: &mut [f32],
) {
    let lda = if a_trans { m } else { k };
    let ldb = if b_trans { k } else { n };
    sgemm_ld(m, k, n, a, lda, a_trans, b, ldb, b_trans, beta, c, n);
}

/// Like [`sgemm`] but with explicit leading dimensions (row strides of the
/// stored, untransposed matrices), so callers can address column blocks.
#[allow(clippy::too_many_arguments)]
pub(crate) fn sgemm_ld(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    lda: usize,
    a_trans: bool,
    b: &[f32],
    ldb: usize,
    b_trans: bool,
    beta: f32,
    c: &mut [f32],
    ldc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    let (a_rows, a_cols) = if a_trans { (k, m) } else { (m, k) };
    let (b_rows, b_cols) = if b_trans { (n, k) } else { (k, n) };
    assert!(a_cols <= lda && a.len() >= (a_rows - 1) * lda + a_cols);
    assert!(b_cols <= ldb && b.len() >= (b_rows - 1) * ldb + b_cols);
    assert!(n <= ldc && c.len() >= (m - 1) * ldc + n);
    let (rsa, csa) = if a_trans { (1, lda as isize) } else { (lda as isize, 1) };
    let (rsb, csb) = if b_trans { (1, ldb as isize) } else { (ldb as isize, 1) };
    // SAFETY: the asserts above bound every element addressed through these strides.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f32], at: bool, b: &[f32], bt: bool) -> Vec<f32> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    let av = if at { a[p * m + i] } else { a[i * k + p] };
                    let bv = if bt { b[j * k + p] } else { b[p * n + j] };
                    s += av * bv;
                }
                c[i * n + j] = s;
            }
        }
        c
    }

    #[test]
    fn transposes_match_naive_product() {
        let (m, k, n) = (3, 5, 4);
        let a: Vec<f32> = (0..m * k).map(|i| (i as f32 * 0.37).sin()).collect();
        let b: Vec<f32> = (0..k * n).map(|i| (i as f32 * 0.11).cos()).collect();
        for at in [false, true] {
            for bt in [false, true] {
                let mut c = vec![0.0; m * n];
                sgemm(m, k, n, &a, at, &b, bt, 0.0, &mut c);
                let want = naive(m, k, n, &a, at, &b, bt);
                for (x, y) in c.iter().zip(&want) {
                    assert!((x - y).abs() < 1e-5);
                }
            }
        }
    }
}
