//! Dense symmetric eigensolves (system LAPACK), a Lanczos estimator for the
//! smallest eigenvalue at scales where dense reduction is too expensive, and
//! small-matrix helpers (Cholesky, pseudoinverse, low-rank operator norms).

use crate::error::{Error, Result};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use std::os::raw::c_char;
use std::sync::Once;

#[link(name = "openblas")]
extern "C" {
    fn dsyevr_(
        jobz: *const c_char,
        range: *const c_char,
        uplo: *const c_char,
        n: *const i32,
        a: *mut f64,
        lda: *const i32,
        vl: *const f64,
        vu: *const f64,
        il: *const i32,
        iu: *const i32,
        abstol: *const f64,
        m: *mut i32,
        w: *mut f64,
        z: *mut f64,
        ldz: *const i32,
        isuppz: *mut i32,
        work: *mut f64,
        lwork: *const i32,
        iwork: *mut i32,
        liwork: *const i32,
        info: *mut i32,
    );
    fn dsyevd_(
        jobz: *const c_char,
        uplo: *const c_char,
        n: *const i32,
        a: *mut f64,
        lda: *const i32,
        w: *mut f64,
        work: *mut f64,
        lwork: *const i32,
        iwork: *mut i32,
        liwork: *const i32,
        info: *mut i32,
    );
    fn openblas_set_num_threads(n: i32);
}

/// BLAS threading is pinned to one thread; parallelism lives at the task
/// level (seeds, probe points) where it composes with rayon.
fn init_blas() {
    static ONCE: Once = Once::new();
    ONCE.call_once(|| unsafe { openblas_set_num_threads(1) });
}

fn to_col_major_buf(a: ArrayView2<f64>) -> (Vec<f64>, usize) {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "matrix must be square");
    // Symmetric input, so row-major copy equals the column-major layout.
    let mut buf = Vec::with_capacity(n * n);
    for r in a.rows() {
        buf.extend(r.iter().copied());
    }
    (buf, n)
}

fn syevr(
    a: ArrayView2<f64>,
    il: usize,
    iu: usize,
    want_vectors: bool,
) -> Result<(Vec<f64>, Option<Array2<f64>>)> {
    init_blas();
    let (mut buf, n) = to_col_major_buf(a);
    let ni = n as i32;
    let nsel = iu - il + 1;
    let jobz = if want_vectors { b"V\0" } else { b"N\0" };
    let (vl, vu, abstol) = (0.0f64, 0.0f64, 0.0f64);
    let (ilf, iuf) = (il as i32, iu as i32);
    let mut m = 0i32;
    let mut w = vec![0.0f64; n];
    let ldz = if want_vectors { n as i32 } else { 1 };
    let mut z = vec![0.0f64; if want_vectors { n * nsel } else { 1 }];
    let mut isuppz = vec![0i32; 2 * nsel.max(1)];
    let lwork = (40 * n).max(1) as i32;
    let liwork = (20 * n).max(1) as i32;
    let mut work = vec![0.0f64; lwork as usize];
    let mut iwork = vec![0i32; liwork as usize];
    let mut info = 0i32;
    unsafe {
        dsyevr_(
            jobz.as_ptr() as *const c_char,
            b"I\0".as_ptr() as *const c_char,
            b"L\0".as_ptr() as *const c_char,
            &ni,
            buf.as_mut_ptr(),
            &ni,
            &vl,
            &vu,
            &ilf,
            &iuf,
            &abstol,
            &mut m,
            w.as_mut_ptr(),
            z.as_mut_ptr(),
            &ldz,
            isuppz.as_mut_ptr(),
            work.as_mut_ptr(),
            &lwork,
            iwork.as_mut_ptr(),
            &liwork,
            &mut info,
        );
    }
    if info != 0 {
        return Err(Error::Numerical(format!("dsyevr failed with info = {info}")));
    }
    w.truncate(m as usize);
    let vecs = if want_vectors {
        // LAPACK Z is column-major n x nsel.
        let mut v = Array2::zeros((n, nsel));
        for c in 0..nsel {
            for r in 0..n {
                v[(r, c)] = z[c * n + r];
            }
        }
        Some(v)
    } else {
        None
    };
    Ok((w, vecs))
}

/// Smallest eigenvalue of a dense symmetric matrix.
pub fn smallest_eigenvalue(a: ArrayView2<f64>) -> Result<f64> {
    Ok(syevr(a, 1, 1, false)?.0[0])
}

/// Largest eigenvalue of a dense symmetric matrix.
pub fn largest_eigenvalue(a: ArrayView2<f64>) -> Result<f64> {
    let n = a.nrows();
    Ok(syevr(a, n, n, false)?.0[0])
}

/// Extreme eigenpair (value, unit eigenvector) of a dense symmetric matrix.
pub fn extreme_eigenpair(a: ArrayView2<f64>, largest: bool) -> Result<(f64, Array1<f64>)> {
    let n = a.nrows();
    let (il, iu) = if largest { (n, n) } else { (1, 1) };
    let (w, v) = syevr(a, il, iu, true)?;
    let vecs = v.unwrap();
    Ok((w[0], vecs.column(0).to_owned()))
}

/// All eigenvalues (ascending) and eigenvectors (columns) of a symmetric matrix.
pub fn sym_eig(a: ArrayView2<f64>) -> Result<(Vec<f64>, Array2<f64>)> {
    init_blas();
    let (mut buf, n) = to_col_major_buf(a);
    let ni = n as i32;
    let mut w = vec![0.0f64; n];
    let lwork = (1 + 6 * n + 2 * n * n) as i32;
    let liwork = (3 + 5 * n) as i32;
    let mut work = vec![0.0f64; lwork as usize];
    let mut iwork = vec![0i32; liwork as usize];
    let mut info = 0i32;
    unsafe {
        dsyevd_(
            b"V\0".as_ptr() as *const c_char,
            b"L\0".as_ptr() as *const c_char,
            &ni,
            buf.as_mut_ptr(),
            &ni,
            w.as_mut_ptr(),
            work.as_mut_ptr(),
            &lwork,
            iwork.as_mut_ptr(),
            &liwork,
            &mut info,
        );
    }
    if info != 0 {
        return Err(Error::Numerical(format!("dsyevd failed with info = {info}")));
    }
    // buf now holds eigenvectors column-major; transpose into ndarray.
    let mut v = Array2::zeros((n, n));
    for c in 0..n {
        for r in 0..n {
            v[(r, c)] = buf[c * n + r];
        }
    }
    Ok((w, v))
}

/// All eigenvalues (ascending) of a symmetric matrix.
pub fn sym_eigvals(a: ArrayView2<f64>) -> Result<Vec<f64>> {
    init_blas();
    let (mut buf, n) = to_col_major_buf(a);
    let ni = n as i32;
    let mut w = vec![0.0f64; n];
    let lwork = (2 * n + 1).max(64) as i32;
    let liwork = 8i32.max(1);
    let mut work = vec![0.0f64; lwork as usize];
    let mut iwork = vec![0i32; liwork as usize];
    let mut info = 0i32;
    unsafe {
        dsyevd_(
            b"N\0".as_ptr() as *const c_char,
            b"L\0".as_ptr() as *const c_char,
            &ni,
            buf.as_mut_ptr(),
            &ni,
            w.as_mut_ptr(),
            work.as_mut_ptr(),
            &lwork,
            iwork.as_mut_ptr(),
            &liwork,
            &mut info,
        );
    }
    if info != 0 {
        return Err(Error::Numerical(format!("dsyevd failed with info = {info}")));
    }
    Ok(w)
}

/// Lower Cholesky factor of a symmetric positive definite matrix.
pub fn cholesky(a: ArrayView2<f64>) -> Result<Array2<f64>> {
    let n = a.nrows();
    let mut l = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            if i == j {
                if s <= 0.0 {
                    return Err(Error::Degenerate(format!(
                        "Cholesky pivot {s:.3e} at index {i}; matrix not positive definite"
                    )));
                }
                l[(i, i)] = s.sqrt();
            } else {
                l[(i, j)] = s / l[(j, j)];
            }
        }
    }
    Ok(l)
}

/// Solve A x = b for symmetric positive definite A via Cholesky.
pub fn solve_spd(a: ArrayView2<f64>, b: ArrayView1<f64>) -> Result<Array1<f64>> {
    let l = cholesky(a)?;
    let n = b.len();
    let mut y = Array1::zeros(n);
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[(i, k)] * y[k];
        }
        y[i] = s / l[(i, i)];
    }
    let mut x = Array1::zeros(n);
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= l[(k, i)] * x[k];
        }
        x[i] = s / l[(i, i)];
    }
    Ok(x)
}

/// Solve A X = B column-wise for symmetric positive definite A.
pub fn solve_spd_multi(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<Array2<f64>> {
    let mut x = Array2::zeros(b.raw_dim());
    for (j, col) in b.columns().into_iter().enumerate() {
        x.column_mut(j).assign(&solve_spd(a, col)?);
    }
    Ok(x)
}

/// Moore–Penrose pseudoinverse of a symmetric matrix, truncating singular
/// values below `rel_tol * sigma_max`.
pub fn pinv_sym(a: ArrayView2<f64>, rel_tol: f64) -> Result<Array2<f64>> {
    let (w, v) = sym_eig(a)?;
    let smax = w.iter().fold(0.0f64, |m, &x| m.max(x.abs()));
    let n = a.nrows();
    let mut out = Array2::zeros((n, n));
    for (j, &lam) in w.iter().enumerate() {
        if lam.abs() > rel_tol * smax {
            let vj = v.column(j);
            let inv = 1.0 / lam;
            for r in 0..n {
                for c in 0..n {
                    out[(r, c)] += inv * vj[r] * vj[c];
                }
            }
        }
    }
    Ok(out)
}

/// Operator norm of the low-rank product U V^T without materializing it:
/// the nonzero spectrum of (U V^T)(U V^T)^T equals that of
/// S^{1/2} (V^T V) S^{1/2} with S = U^T U, a small symmetric problem.
pub fn lowrank_opnorm(u: ArrayView2<f64>, v: ArrayView2<f64>) -> Result<f64> {
    let s = u.t().dot(&u);
    let g = v.t().dot(&v);
    let (w, q) = sym_eig(s.view())?;
    let k = w.len();
    let mut shalf = Array2::zeros((k, k));
    for (j, &lam) in w.iter().enumerate() {
        let sq = lam.max(0.0).sqrt();
        let qj = q.column(j);
        for r in 0..k {
            for c in 0..k {
                shalf[(r, c)] += sq * qj[r] * qj[c];
            }
        }
    }
    let m = shalf.dot(&g).dot(&shalf);
    let ev = sym_eigvals(m.view())?;
    Ok(ev.last().copied().unwrap_or(0.0).max(0.0).sqrt())
}

/// Smallest-eigenvalue estimate by Lanczos with full reorthogonalization.
///
/// Runs `iters` Krylov steps on the operator and returns the smallest Ritz
/// value, an upper bound on the true smallest eigenvalue. Used above the
/// dense-eigensolve size cutoff.
pub fn lanczos_smallest<F>(apply: F, n: usize, iters: usize, seed: u64) -> Result<f64>
where
    F: Fn(ArrayView1<f64>) -> Array1<f64>,
{
    let m = iters.min(n);
    let mut v = crate::rng::standard_normal_vec(seed, "lanczos-init", n);
    let nrm = v.dot(&v).sqrt();
    v.mapv_inplace(|x| x / nrm);
    let mut basis: Vec<Array1<f64>> = vec![v.clone()];
    let mut alpha: Vec<f64> = Vec::with_capacity(m);
    let mut beta: Vec<f64> = Vec::with_capacity(m);
    let mut prev: Option<Array1<f64>> = None;
    for j in 0..m {
        let mut w = apply(basis[j].view());
        if !w.iter().all(|x| x.is_finite()) {
            return Err(Error::Numerical("Lanczos operator produced non-finite values".into()));
        }
        let a = w.dot(&basis[j]);
        alpha.push(a);
        w.scaled_add(-a, &basis[j]);
        if let Some(p) = &prev {
            w.scaled_add(-beta[j - 1], p);
        }
        // Full reorthogonalization against the whole basis.
        for b in &basis {
            let c = w.dot(b);
            w.scaled_add(-c, b);
        }
        let b = w.dot(&w).sqrt();
        if b < 1e-14 || j + 1 == m {
            beta.push(b);
            break;
        }
        beta.push(b);
        w.mapv_inplace(|x| x / b);
        prev = Some(basis[j].clone());
        basis.push(w);
    }
    let k = alpha.len();
    let mut d = alpha.clone();
    let mut e: Vec<f64> = (0..k).map(|i| if i + 1 < k { beta[i] } else { 0.0 }).collect();
    let mut z = vec![0.0; k];
    z[0] = 1.0;
    crate::quad::tridiag_eig_first_row_pub(&mut d, &mut e, &mut z);
    Ok(d.iter().cloned().fold(f64::INFINITY, f64::min))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn smallest_and_largest_on_known_matrix() {
        let a = array![[2.0, 1.0, 0.0], [1.0, 2.0, 1.0], [0.0, 1.0, 2.0]];
        // eigenvalues 2 - sqrt(2), 2, 2 + sqrt(2)
        assert_abs_diff_eq!(smallest_eigenvalue(a.view()).unwrap(), 2.0 - 2f64.sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(largest_eigenvalue(a.view()).unwrap(), 2.0 + 2f64.sqrt(), epsilon = 1e-12);
        let (lam, v) = extreme_eigenpair(a.view(), true).unwrap();
        let av = a.dot(&v);
        for i in 0..3 {
            assert_abs_diff_eq!(av[i], lam * v[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn cholesky_solve_roundtrip() {
        let a = array![[4.0, 1.0], [1.0, 3.0]];
        let b = array![1.0, 2.0];
        let x = solve_spd(a.view(), b.view()).unwrap();
        let r = a.dot(&x) - &b;
        assert!(r.iter().all(|v| v.abs() < 1e-13));
    }

    #[test]
    fn pinv_truncates_null_directions() {
        let a = array![[1.0, 0.0], [0.0, 0.0]];
        let p = pinv_sym(a.view(), 1e-10).unwrap();
        assert_abs_diff_eq!(p[(0, 0)], 1.0, epsilon = 1e-13);
        assert_abs_diff_eq!(p[(1, 1)], 0.0, epsilon = 1e-13);
    }

    #[test]
    fn lowrank_opnorm_matches_dense() {
        let u = array![[1.0, 0.5], [0.0, 2.0], [1.0, -1.0]];
        let v = array![[0.3, 1.0], [1.0, 0.0], [-0.5, 0.7]];
        let dense = u.dot(&v.t());
        let g = dense.t().dot(&dense);
        let ev = sym_eigvals(g.view()).unwrap();
        let want = ev.last().unwrap().sqrt();
        assert_abs_diff_eq!(lowrank_opnorm(u.view(), v.view()).unwrap(), want, epsilon = 1e-12);
    }

    #[test]
    fn lanczos_agrees_with_dense_on_moderate_spectrum() {
        let n = 120;
        let g = crate::rng::standard_normal_vec(5, "lanczos-test", n * n);
        let mut a = Array2::zeros((n, n));
        for i in 0..n {
            for j in 0..=i {
                let v = g[i * n + j];
                a[(i, j)] = v;
                a[(j, i)] = v;
            }
        }
        let dense = smallest_eigenvalue(a.view()).unwrap();
        let lan = lanczos_smallest(|v| a.dot(&v), n, 120, 0).unwrap();
        assert_abs_diff_eq!(lan, dense, epsilon = 1e-8);
    }
}
