//! Thin wrappers over the dgemm kernel. All matrices are row-major f64.

/// c(m,n) += a(m,k) * b(k,n), with optional transposed reads of a and b.
/// `beta` scales the existing contents of c (0.0 overwrites).
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_trans {
        (1isize, m as isize)
    } else {
        (k as isize, 1isize)
    };
    let (rsb, csb) = if b_trans {
        (1isize, k as isize)
    } else {
        (n as isize, 1isize)
    };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_product() {
        // [1 2; 3 4] * [5 6; 7 8] = [19 22; 43 50]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, 1.0, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn transposed_reads() {
        let a = [1.0, 3.0, 2.0, 4.0]; // transpose of [1 2; 3 4] stored (2,2)
        let b = [5.0, 7.0, 6.0, 8.0]; // transpose of [5 6; 7 8]
        let mut c = [0.0; 4];
        gemm(2, 2, 2, 1.0, &a, true, &b, true, 0.0, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn beta_accumulates() {
        let a = [1.0, 0.0, 0.0, 1.0];
        let b = [1.0, 2.0, 3.0, 4.0];
        let mut c = [10.0, 10.0, 10.0, 10.0];
        gemm(2, 2, 2, 1.0, &a, false, &b, false, 1.0, &mut c);
        assert_eq!(c, [11.0, 12.0, 13.0, 14.0]);
    }
}
