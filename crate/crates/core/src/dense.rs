//! Thin wrappers over LAPACK/BLAS for the dense kernels.
//!
//! `DMatrix` is column-major, so buffers pass straight through. Dimensions are
//! asserted to fit in i32 before any call; every routine checks `info`.

use crate::error::{CoreError, Result};
use nalgebra::{DMatrix, DVector};

fn dim(n: usize) -> i32 {
    i32::try_from(n).expect("matrix dimension exceeds i32")
}

/// C = alpha * op(A) * op(B) + beta * C, op selected by `ta`/`tb`.
pub fn gemm(ta: bool, tb: bool, alpha: f64, a: &DMatrix<f64>, b: &DMatrix<f64>, beta: f64, c: &mut DMatrix<f64>) {
    let (m, k) = if ta { (a.ncols(), a.nrows()) } else { (a.nrows(), a.ncols()) };
    let (kb, n) = if tb { (b.ncols(), b.nrows()) } else { (b.nrows(), b.ncols()) };
    assert_eq!(k, kb, "gemm inner dimensions");
    assert_eq!((c.nrows(), c.ncols()), (m, n), "gemm output dimensions");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        *c *= beta;
        return;
    }
    unsafe {
        blas::dgemm(
            if ta { b'T' } else { b'N' },
            if tb { b'T' } else { b'N' },
            dim(m),
            dim(n),
            dim(k),
            alpha,
            a.as_slice(),
            dim(a.nrows()),
            b.as_slice(),
            dim(b.nrows()),
            beta,
            c.as_mut_slice(),
            dim(m),
        );
    }
}

/// Thin SVD A = U diag(s) V^T via the divide-and-conquer routine.
/// Returns (U: m x min, s descending, Vt: min x n).
pub fn svd_thin(a: &DMatrix<f64>) -> Result<(DMatrix<f64>, DVector<f64>, DMatrix<f64>)> {
    let (m, n) = (a.nrows(), a.ncols());
    let mn = m.min(n);
    if mn == 0 {
        return Ok((
            DMatrix::zeros(m, 0),
            DVector::zeros(0),
            DMatrix::zeros(0, n),
        ));
    }
    let mut buf = a.as_slice().to_vec();
    let mut s = vec![0.0f64; mn];
    let mut u = vec![0.0f64; m * mn];
    let mut vt = vec![0.0f64; mn * n];
    let mut iwork = vec![0i32; 8 * mn];
    let mut info = 0i32;
    let mut work = vec![0.0f64; 1];
    unsafe {
        lapack::dgesdd(
            b'S', dim(m), dim(n), &mut buf, dim(m), &mut s, &mut u, dim(m), &mut vt, dim(mn),
            &mut work, -1, &mut iwork, &mut info,
        );
        let lwork = work[0] as usize;
        work = vec![0.0f64; lwork];
        lapack::dgesdd(
            b'S', dim(m), dim(n), &mut buf, dim(m), &mut s, &mut u, dim(m), &mut vt, dim(mn),
            &mut work, dim(lwork), &mut iwork, &mut info,
        );
    }
    if info != 0 {
        return Err(CoreError::Factorization(format!(
            "SVD did not converge (dgesdd info = {info})"
        )));
    }
    Ok((
        DMatrix::from_vec(m, mn, u),
        DVector::from_vec(s),
        DMatrix::from_vec(mn, n, vt),
    ))
}

/// Singular values only, descending.
pub fn singular_values(a: &DMatrix<f64>) -> Result<DVector<f64>> {
    let (m, n) = (a.nrows(), a.ncols());
    let mn = m.min(n);
    if mn == 0 {
        return Ok(DVector::zeros(0));
    }
    let mut buf = a.as_slice().to_vec();
    let mut s = vec![0.0f64; mn];
    let mut u = [0.0f64];
    let mut vt = [0.0f64];
    let mut iwork = vec![0i32; 8 * mn];
    let mut info = 0i32;
    let mut work = vec![0.0f64; 1];
    unsafe {
        lapack::dgesdd(
            b'N', dim(m), dim(n), &mut buf, dim(m), &mut s, &mut u, 1, &mut vt, 1,
            &mut work, -1, &mut iwork, &mut info,
        );
        let lwork = work[0] as usize;
        work = vec![0.0f64; lwork];
        lapack::dgesdd(
            b'N', dim(m), dim(n), &mut buf, dim(m), &mut s, &mut u, 1, &mut vt, 1,
            &mut work, dim(lwork), &mut iwork, &mut info,
        );
    }
    if info != 0 {
        return Err(CoreError::Factorization(format!(
            "SVD did not converge (dgesdd info = {info})"
        )));
    }
    Ok(DVector::from_vec(s))
}

/// Symmetric eigendecomposition A = V diag(w) V^T, eigenvalues ascending.
pub fn symmetric_eigen(a: &DMatrix<f64>) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "symmetric_eigen needs a square matrix");
    if n == 0 {
        return Ok((DMatrix::zeros(0, 0), DVector::zeros(0)));
    }
    let mut buf = a.as_slice().to_vec();
    let mut w = vec![0.0f64; n];
    let mut info = 0i32;
    let mut work = vec![0.0f64; 1];
    let mut iwork = vec![0i32; 1];
    unsafe {
        lapack::dsyevd(b'V', b'U', dim(n), &mut buf, dim(n), &mut w, &mut work, -1, &mut iwork, -1, &mut info);
        let (lwork, liwork) = (work[0] as usize, iwork[0] as usize);
        work = vec![0.0f64; lwork];
        iwork = vec![0i32; liwork];
        lapack::dsyevd(
            b'V', b'U', dim(n), &mut buf, dim(n), &mut w,
            &mut work, dim(lwork), &mut iwork, dim(liwork), &mut info,
        );
    }
    if info != 0 {
        return Err(CoreError::Factorization(format!(
            "symmetric eigendecomposition failed (dsyevd info = {info})"
        )));
    }
    Ok((DMatrix::from_vec(n, n, buf), DVector::from_vec(w)))
}

/// Upper-triangular Cholesky factor R with A = R^T R.
pub struct DenseChol {
    r: DMatrix<f64>,
}

impl DenseChol {
    pub fn new(a: DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        assert_eq!(n, a.ncols(), "cholesky needs a square matrix");
        let mut buf = a;
        if n > 0 {
            let mut info = 0i32;
            unsafe {
                lapack::dpotrf(b'U', dim(n), buf.as_mut_slice(), dim(n), &mut info);
            }
            if info != 0 {
                return Err(CoreError::Factorization(format!(
                    "matrix not positive definite (dpotrf info = {info})"
                )));
            }
            // dpotrf leaves the strict lower triangle untouched; zero it so the
            // factor can be used as a plain matrix.
            for j in 0..n {
                for i in (j + 1)..n {
                    buf[(i, j)] = 0.0;
                }
            }
        }
        Ok(DenseChol { r: buf })
    }

    pub fn n(&self) -> usize {
        self.r.nrows()
    }

    /// The factor R itself (upper triangular).
    pub fn factor(&self) -> &DMatrix<f64> {
        &self.r
    }

    pub fn into_factor(self) -> DMatrix<f64> {
        self.r
    }

    /// X <- R^{-1} X.
    pub fn solve_r_in_place(&self, x: &mut DMatrix<f64>) {
        trsm_left(&self.r, false, x);
    }

    /// X <- R^{-T} X.
    pub fn solve_rt_in_place(&self, x: &mut DMatrix<f64>) {
        trsm_left(&self.r, true, x);
    }

    /// X <- X R^{-1}.
    pub fn solve_r_right_in_place(&self, x: &mut DMatrix<f64>) {
        trsm_right(&self.r, false, x);
    }

    /// X <- A^{-1} X = R^{-1} R^{-T} X.
    pub fn solve_in_place(&self, x: &mut DMatrix<f64>) {
        self.solve_rt_in_place(x);
        self.solve_r_in_place(x);
    }
}

/// X <- op(R)^{-1} X for upper-triangular R.
pub fn trsm_left(r: &DMatrix<f64>, transpose: bool, x: &mut DMatrix<f64>) {
    let n = r.nrows();
    assert_eq!(n, r.ncols());
    assert_eq!(x.nrows(), n, "trsm_left dimension mismatch");
    if n == 0 || x.ncols() == 0 {
        return;
    }
    unsafe {
        blas::dtrsm(
            b'L', b'U',
            if transpose { b'T' } else { b'N' },
            b'N',
            dim(n), dim(x.ncols()), 1.0,
            r.as_slice(), dim(n),
            x.as_mut_slice(), dim(n),
        );
    }
}

/// X <- X op(R)^{-1} for upper-triangular R.
pub fn trsm_right(r: &DMatrix<f64>, transpose: bool, x: &mut DMatrix<f64>) {
    let n = r.nrows();
    assert_eq!(n, r.ncols());
    assert_eq!(x.ncols(), n, "trsm_right dimension mismatch");
    if n == 0 || x.nrows() == 0 {
        return;
    }
    let m = dim(x.nrows());
    unsafe {
        blas::dtrsm(
            b'R', b'U',
            if transpose { b'T' } else { b'N' },
            b'N',
            m, dim(n), 1.0,
            r.as_slice(), dim(n),
            x.as_mut_slice(), m,
        );
    }
}

/// X <- op(R) X for upper-triangular R.
pub fn trmm_left(r: &DMatrix<f64>, transpose: bool, x: &mut DMatrix<f64>) {
    let n = r.nrows();
    assert_eq!(n, r.ncols());
    assert_eq!(x.nrows(), n, "trmm_left dimension mismatch");
    if n == 0 || x.ncols() == 0 {
        return;
    }
    unsafe {
        blas::dtrmm(
            b'L', b'U',
            if transpose { b'T' } else { b'N' },
            b'N',
            dim(n), dim(x.ncols()), 1.0,
            r.as_slice(), dim(n),
            x.as_mut_slice(), dim(n),
        );
    }
}

/// C <- alpha * A^T A + beta * C. Only the upper triangle of C is written.
pub fn syrk_t(alpha: f64, a: &DMatrix<f64>, beta: f64, c: &mut DMatrix<f64>) {
    let n = a.ncols();
    assert_eq!((c.nrows(), c.ncols()), (n, n), "syrk output dimensions");
    if n == 0 {
        return;
    }
    if a.nrows() == 0 {
        *c *= beta;
        return;
    }
    unsafe {
        blas::dsyrk(
            b'U', b'T',
            dim(n), dim(a.nrows()),
            alpha, a.as_slice(), dim(a.nrows()),
            beta, c.as_mut_slice(), dim(n),
        );
    }
}

/// Like `syrk_t`, but skips the leading zero rows each column of A carries.
/// Columns are grouped in panels; each panel pair multiplies only from the
/// shallowest head it contains, so triangular-solve outputs with staggered
/// fronts cost a fraction of the full product.
pub fn syrk_t_ragged(alpha: f64, a: &DMatrix<f64>, beta: f64, c: &mut DMatrix<f64>) {
    let (n, m) = (a.nrows(), a.ncols());
    assert_eq!((c.nrows(), c.ncols()), (m, m), "syrk output dimensions");
    if m == 0 {
        return;
    }
    let panel = 64usize;
    let az = a.as_slice();
    // First stored row per panel (minimum over its columns).
    let heads: Vec<usize> = (0..m.div_ceil(panel))
        .map(|p| {
            (p * panel..m.min((p + 1) * panel))
                .map(|j| az[j * n..(j + 1) * n].iter().position(|&v| v != 0.0).unwrap_or(n))
                .min()
                .unwrap()
        })
        .collect();
    let cz = c.as_mut_slice();
    for jp in 0..heads.len() {
        let j0 = jp * panel;
        let jw = panel.min(m - j0);
        for ip in 0..=jp {
            let i0 = ip * panel;
            let iw = panel.min(m - i0);
            let r0 = heads[ip].max(heads[jp]);
            if r0 == n {
                for q in j0..j0 + jw {
                    let lo = i0;
                    let hi = if ip == jp { q + 1 } else { i0 + iw };
                    for v in &mut cz[q * m + lo..q * m + hi] {
                        *v *= beta;
                    }
                }
                continue;
            }
            unsafe {
                if ip == jp {
                    blas::dsyrk(
                        b'U', b'T',
                        dim(jw), dim(n - r0),
                        alpha, &az[j0 * n + r0..], dim(n),
                        beta, &mut cz[j0 * m + j0..], dim(m),
                    );
                } else {
                    blas::dgemm(
                        b'T', b'N',
                        dim(iw), dim(jw), dim(n - r0),
                        alpha, &az[i0 * n + r0..], dim(n),
                        &az[j0 * n + r0..], dim(n),
                        beta, &mut cz[j0 * m + i0..], dim(m),
                    );
                }
            }
        }
    }
}

/// Thin QR: returns Q (m x min(m, n)) and the diagonal of R, whose magnitudes
/// expose rank deficiency of the input columns.
pub fn qr_thin(a: &DMatrix<f64>) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let (m, n) = (a.nrows(), a.ncols());
    let k = m.min(n);
    if k == 0 {
        return Ok((DMatrix::zeros(m, 0), Vec::new()));
    }
    let mut buf = a.as_slice().to_vec();
    let mut tau = vec![0.0f64; k];
    let mut info = 0i32;
    let mut work = vec![0.0f64; 1];
    unsafe {
        lapack::dgeqrf(dim(m), dim(n), &mut buf, dim(m), &mut tau, &mut work, -1, &mut info);
        let lwork = work[0] as usize;
        work = vec![0.0f64; lwork];
        lapack::dgeqrf(dim(m), dim(n), &mut buf, dim(m), &mut tau, &mut work, dim(lwork), &mut info);
    }
    if info != 0 {
        return Err(CoreError::Factorization(format!("QR failed (dgeqrf info = {info})")));
    }
    let rdiag: Vec<f64> = (0..k).map(|j| buf[j * m + j]).collect();
    let mut work = vec![0.0f64; 1];
    unsafe {
        lapack::dorgqr(dim(m), dim(k), dim(k), &mut buf, dim(m), &tau, &mut work, -1, &mut info);
        let lwork = work[0] as usize;
        work = vec![0.0f64; lwork];
        lapack::dorgqr(dim(m), dim(k), dim(k), &mut buf, dim(m), &tau, &mut work, dim(lwork), &mut info);
    }
    if info != 0 {
        return Err(CoreError::Factorization(format!("QR failed (dorgqr info = {info})")));
    }
    buf.truncate(m * k);
    Ok((DMatrix::from_vec(m, k, buf), rdiag))
}

/// Thin QR: returns Q with orthonormal columns (m x min(m, n)).
pub fn qr_q(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Ok(qr_thin(a)?.0)
}
