//! Thin wrappers over BLAS/LAPACK (OpenBLAS), loaded at runtime.
//!
//! Dense symmetric eigendecomposition (`dsyevd`), symmetric tridiagonal
//! eigendecomposition (`dstevd`), and the level-2/3 kernels used by the
//! Lanczos solver. All dense matrices here are column-major flat slices,
//! matching the Fortran convention.
//!
//! The library is dlopen'ed instead of linked so that `OPENBLAS_CORETYPE`
//! can be pinned before OpenBLAS's constructor dispatches its kernels: the
//! auto-detected AVX-512 kernels are miscompiled on some virtualized CPUs
//! (returning wrong dgemm results), while the explicitly selected older
//! kernels are fine. A one-time dgemm spot-check guards against silently
//! corrupt kernels either way.

use crate::error::{Error, Result};
use std::ffi::{c_void, CStr};
use std::os::raw::{c_char, c_int};
use std::sync::OnceLock;

type DsyevdFn = unsafe extern "C" fn(
    *const c_char, // jobz
    *const c_char, // uplo
    *const c_int,  // n
    *mut f64,      // a
    *const c_int,  // lda
    *mut f64,      // w
    *mut f64,      // work
    *const c_int,  // lwork
    *mut c_int,    // iwork
    *const c_int,  // liwork
    *mut c_int,    // info
);
type DstevdFn = unsafe extern "C" fn(
    *const c_char, // jobz
    *const c_int,  // n
    *mut f64,      // d
    *mut f64,      // e
    *mut f64,      // z
    *const c_int,  // ldz
    *mut f64,      // work
    *const c_int,  // lwork
    *mut c_int,    // iwork
    *const c_int,  // liwork
    *mut c_int,    // info
);
type DgemvFn = unsafe extern "C" fn(
    *const c_char,
    *const c_int,
    *const c_int,
    *const f64,
    *const f64,
    *const c_int,
    *const f64,
    *const c_int,
    *const f64,
    *mut f64,
    *const c_int,
);
type DgemmFn = unsafe extern "C" fn(
    *const c_char,
    *const c_char,
    *const c_int,
    *const c_int,
    *const c_int,
    *const f64,
    *const f64,
    *const c_int,
    *const f64,
    *const c_int,
    *const f64,
    *mut f64,
    *const c_int,
);
type DdotFn =
    unsafe extern "C" fn(*const c_int, *const f64, *const c_int, *const f64, *const c_int) -> f64;

struct Blas {
    dsyevd: DsyevdFn,
    dstevd: DstevdFn,
    dgemv: DgemvFn,
    dgemm: DgemmFn,
    ddot: DdotFn,
}

unsafe impl Send for Blas {}
unsafe impl Sync for Blas {}

static BLAS: OnceLock<Blas> = OnceLock::new();

fn pick_coretype() -> Option<&'static str> {
    if std::env::var_os("OPENBLAS_CORETYPE").is_some() {
        return None; // caller knows better
    }
    let info = std::fs::read_to_string("/proc/cpuinfo").unwrap_or_default();
    if !info.contains("GenuineIntel") && !info.contains("AuthenticAMD") {
        return None;
    }
    if info.contains(" avx2") {
        Some("HASWELL")
    } else if info.contains(" sse4_2") {
        Some("NEHALEM")
    } else {
        None
    }
}

fn load() -> Blas {
    if let Some(core) = pick_coretype() {
        std::env::set_var("OPENBLAS_CORETYPE", core);
    }
    let handle = unsafe {
        let mut h = libc::dlopen(
            b"libopenblas.so.0\0".as_ptr() as *const c_char,
            libc::RTLD_NOW | libc::RTLD_LOCAL,
        );
        if h.is_null() {
            h = libc::dlopen(
                b"libopenblas.so\0".as_ptr() as *const c_char,
                libc::RTLD_NOW | libc::RTLD_LOCAL,
            );
        }
        if h.is_null() {
            let err = CStr::from_ptr(libc::dlerror()).to_string_lossy().into_owned();
            panic!("cannot load libopenblas: {err}");
        }
        h
    };
    let sym = |name: &[u8]| -> *mut c_void {
        let p = unsafe { libc::dlsym(handle, name.as_ptr() as *const c_char) };
        if p.is_null() {
            panic!("symbol {} missing from libopenblas", String::from_utf8_lossy(name));
        }
        p
    };
    let blas = unsafe {
        Blas {
            dsyevd: std::mem::transmute::<*mut c_void, DsyevdFn>(sym(b"dsyevd_\0")),
            dstevd: std::mem::transmute::<*mut c_void, DstevdFn>(sym(b"dstevd_\0")),
            dgemv: std::mem::transmute::<*mut c_void, DgemvFn>(sym(b"dgemv_\0")),
            dgemm: std::mem::transmute::<*mut c_void, DgemmFn>(sym(b"dgemm_\0")),
            ddot: std::mem::transmute::<*mut c_void, DdotFn>(sym(b"ddot_\0")),
        }
    };
    selftest(&blas);
    blas
}

/// Spot-checks dgemm against naive products at a size large enough to hit
/// the blocked kernels. Panics with a diagnostic rather than letting corrupt
/// kernels poison every result downstream.
fn selftest(blas: &Blas) {
    let (m, k, n) = (96usize, 65usize, 43usize);
    let mut s = 0x9e3779b97f4a7c15u64;
    let mut rnd = move || {
        s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((s >> 11) as f64) / ((1u64 << 53) as f64) - 0.5
    };
    let a: Vec<f64> = (0..m * k).map(|_| rnd()).collect();
    let b: Vec<f64> = (0..k * n).map(|_| rnd()).collect();
    let mut c = vec![0.0f64; m * n];
    let (mi, ni, ki) = (m as c_int, n as c_int, k as c_int);
    let (one, zero) = (1.0f64, 0.0f64);
    let t = b'N' as c_char;
    unsafe {
        (blas.dgemm)(
            &t,
            &t,
            &mi,
            &ni,
            &ki,
            &one,
            a.as_ptr(),
            &mi,
            b.as_ptr(),
            &ki,
            &zero,
            c.as_mut_ptr(),
            &mi,
        );
    }
    let mut worst = 0.0f64;
    for &(i, j) in &[(0usize, 0usize), (m - 1, n - 1), (m / 2, n / 2), (1, n - 2)] {
        let mut acc = 0.0;
        for l in 0..k {
            acc += a[l * m + i] * b[j * k + l];
        }
        worst = worst.max((acc - c[j * m + i]).abs());
    }
    assert!(
        worst < 1e-10,
        "BLAS dgemm self-check failed (error {worst:.2e}); \
         the loaded OpenBLAS kernels are corrupt for this CPU. \
         Set OPENBLAS_CORETYPE to a supported core (e.g. HASWELL or NEHALEM) and retry."
    );
}

fn blas() -> &'static Blas {
    BLAS.get_or_init(load)
}

/// x · y
pub fn dot(x: &[f64], y: &[f64]) -> f64 {
    debug_assert_eq!(x.len(), y.len());
    let n = x.len() as c_int;
    let inc = 1 as c_int;
    unsafe { (blas().ddot)(&n, x.as_ptr(), &inc, y.as_ptr(), &inc) }
}

/// ‖x‖₂
pub fn norm2(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

/// y = Aᵀ x for column-major A of shape (m, k); y has length k.
pub fn gemv_t(a: &[f64], m: usize, k: usize, x: &[f64], y: &mut [f64]) {
    debug_assert!(a.len() >= m * k && x.len() == m && y.len() == k);
    if m == 0 || k == 0 {
        return;
    }
    let (mi, ki) = (m as c_int, k as c_int);
    let (one, zero, inc) = (1.0f64, 0.0f64, 1 as c_int);
    unsafe {
        (blas().dgemv)(
            &(b'T' as c_char),
            &mi,
            &ki,
            &one,
            a.as_ptr(),
            &mi,
            x.as_ptr(),
            &inc,
            &zero,
            y.as_mut_ptr(),
            &inc,
        );
    }
}

/// w -= A c for column-major A of shape (m, k); c has length k.
pub fn gemv_n_sub(a: &[f64], m: usize, k: usize, c: &[f64], w: &mut [f64]) {
    debug_assert!(a.len() >= m * k && c.len() == k && w.len() == m);
    if m == 0 || k == 0 {
        return;
    }
    let (mi, ki) = (m as c_int, k as c_int);
    let (neg_one, one, inc) = (-1.0f64, 1.0f64, 1 as c_int);
    unsafe {
        (blas().dgemv)(
            &(b'N' as c_char),
            &mi,
            &ki,
            &neg_one,
            a.as_ptr(),
            &mi,
            c.as_ptr(),
            &inc,
            &one,
            w.as_mut_ptr(),
            &inc,
        );
    }
}

/// C = A B for column-major A (m×k) and B (k×n); C is column-major (m×n).
pub fn gemm(a: &[f64], m: usize, k: usize, b: &[f64], n: usize, c: &mut [f64]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let (mi, ni, ki) = (m as c_int, n as c_int, k as c_int);
    let (one, zero) = (1.0f64, 0.0f64);
    let t = b'N' as c_char;
    unsafe {
        (blas().dgemm)(
            &t,
            &t,
            &mi,
            &ni,
            &ki,
            &one,
            a.as_ptr(),
            &mi,
            b.as_ptr(),
            &ki,
            &zero,
            c.as_mut_ptr(),
            &mi,
        );
    }
}

/// Full eigendecomposition of a symmetric matrix given as a column-major
/// n×n slice. Returns eigenvalues in ascending order; on exit `a` holds the
/// eigenvectors (column j is the eigenvector of the j-th eigenvalue).
pub fn eigh_inplace(a: &mut [f64], n: usize) -> Result<Vec<f64>> {
    assert_eq!(a.len(), n * n);
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut w = vec![0.0f64; n];
    let jobz = b'V' as c_char;
    let uplo = b'L' as c_char;
    let ni = n as c_int;
    let mut info = 0 as c_int;

    // Workspace query.
    let mut wkopt = 0.0f64;
    let mut iwkopt = 0 as c_int;
    let m1 = -1 as c_int;
    unsafe {
        (blas().dsyevd)(
            &jobz,
            &uplo,
            &ni,
            a.as_mut_ptr(),
            &ni,
            w.as_mut_ptr(),
            &mut wkopt,
            &m1,
            &mut iwkopt,
            &m1,
            &mut info,
        );
    }
    if info != 0 {
        return Err(Error::Lapack { routine: "dsyevd", info });
    }
    let lwork = wkopt as c_int;
    let liwork = iwkopt;
    let mut work = vec![0.0f64; lwork as usize];
    let mut iwork = vec![0 as c_int; liwork as usize];
    unsafe {
        (blas().dsyevd)(
            &jobz,
            &uplo,
            &ni,
            a.as_mut_ptr(),
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
        return Err(Error::Lapack { routine: "dsyevd", info });
    }
    Ok(w)
}

/// Eigendecomposition of a symmetric tridiagonal matrix with diagonal `diag`
/// and off-diagonal `offdiag` (length n−1). Eigenvalues ascend; eigenvectors
/// (column-major n×n) are returned only when requested.
pub fn eigh_tridiagonal(
    diag: &[f64],
    offdiag: &[f64],
    want_vectors: bool,
) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
    let n = diag.len();
    assert!(offdiag.len() + 1 == n || (n == 0 && offdiag.is_empty()));
    if n == 0 {
        return Ok((Vec::new(), if want_vectors { Some(Vec::new()) } else { None }));
    }
    let mut d = diag.to_vec();
    let mut e = offdiag.to_vec();
    e.push(0.0); // LAPACK reads n-1 entries; keep the slice non-dangling for n=1.
    let jobz = if want_vectors { b'V' } else { b'N' } as c_char;
    let ni = n as c_int;
    let mut z = if want_vectors { vec![0.0f64; n * n] } else { vec![0.0f64; 1] };
    let ldz = n as c_int;
    let mut info = 0 as c_int;

    let mut wkopt = 0.0f64;
    let mut iwkopt = 0 as c_int;
    let m1 = -1 as c_int;
    unsafe {
        (blas().dstevd)(
            &jobz,
            &ni,
            d.as_mut_ptr(),
            e.as_mut_ptr(),
            z.as_mut_ptr(),
            &ldz,
            &mut wkopt,
            &m1,
            &mut iwkopt,
            &m1,
            &mut info,
        );
    }
    if info != 0 {
        return Err(Error::Lapack { routine: "dstevd", info });
    }
    let lwork = wkopt as c_int;
    let liwork = iwkopt;
    let mut work = vec![0.0f64; lwork.max(1) as usize];
    let mut iwork = vec![0 as c_int; liwork.max(1) as usize];
    unsafe {
        (blas().dstevd)(
            &jobz,
            &ni,
            d.as_mut_ptr(),
            e.as_mut_ptr(),
            z.as_mut_ptr(),
            &ldz,
            work.as_mut_ptr(),
            &lwork,
            iwork.as_mut_ptr(),
            &liwork,
            &mut info,
        );
    }
    if info != 0 {
        return Err(Error::Lapack { routine: "dstevd", info });
    }
    Ok((d, if want_vectors { Some(z) } else { None }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eigh_2x2_known() {
        // [[2, 1], [1, 2]] has eigenvalues 1 and 3.
        let mut a = vec![2.0, 1.0, 1.0, 2.0];
        let w = eigh_inplace(&mut a, 2).unwrap();
        assert!((w[0] - 1.0).abs() < 1e-12);
        assert!((w[1] - 3.0).abs() < 1e-12);
        // Eigenvector of 3 is (1,1)/sqrt(2) up to sign.
        let v = &a[2..4];
        assert!((v[0].abs() - (0.5f64).sqrt()).abs() < 1e-12);
        assert!((v[0] - v[1]).abs() < 1e-12);
    }

    /// Residuals of a full decomposition at a size where the blocked LAPACK
    /// paths (and their dgemm calls) are exercised.
    #[test]
    fn eigh_residuals_at_blocked_sizes() {
        let n = 257;
        let mut s = 0x243f6a8885a308d3u64;
        let mut rnd = move || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64) / ((1u64 << 53) as f64) - 0.5
        };
        let mut a0 = vec![0.0f64; n * n];
        for i in 0..n {
            for j in 0..=i {
                let v = rnd();
                a0[j * n + i] = v;
                a0[i * n + j] = v;
            }
        }
        let mut a = a0.clone();
        let w = eigh_inplace(&mut a, n).unwrap();
        for k in [0usize, n / 3, n - 1] {
            let v = &a[k * n..(k + 1) * n];
            let mut worst = 0.0f64;
            for i in 0..n {
                let mut av = 0.0;
                for j in 0..n {
                    av += a0[j * n + i] * v[j];
                }
                worst = worst.max((av - w[k] * v[i]).abs());
            }
            assert!(worst < 1e-10, "pair {k} residual {worst:.2e}");
        }
        // Orthonormality of two far-apart eigenvectors.
        let v1 = &a[0..n];
        let v2 = &a[(n - 1) * n..n * n];
        assert!(dot(v1, v2).abs() < 1e-10);
        assert!((dot(v1, v1) - 1.0).abs() < 1e-10);
    }

    #[test]
    fn tridiagonal_matches_dense() {
        let n = 137;
        let mut s = 0x243f6a8885a308d3u64;
        let mut rnd = move || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64) / ((1u64 << 53) as f64) - 0.5
        };
        let diag: Vec<f64> = (0..n).map(|_| rnd()).collect();
        let off: Vec<f64> = (0..n - 1).map(|_| rnd()).collect();

        let (vals_tri, vecs_tri) = eigh_tridiagonal(&diag, &off, true).unwrap();
        let vecs_tri = vecs_tri.unwrap();

        let mut dense = vec![0.0f64; n * n];
        for i in 0..n {
            dense[i * n + i] = diag[i];
        }
        for i in 0..n - 1 {
            dense[i * n + (i + 1)] = off[i];
            dense[(i + 1) * n + i] = off[i];
        }
        let vals_dense = eigh_inplace(&mut dense, n).unwrap();
        for k in 0..n {
            assert!((vals_tri[k] - vals_dense[k]).abs() < 1e-11);
        }
        // Residual check T z = λ z on the tridiagonal route.
        for k in 0..n {
            let z = &vecs_tri[k * n..(k + 1) * n];
            for i in 0..n {
                let mut t = diag[i] * z[i];
                if i > 0 {
                    t += off[i - 1] * z[i - 1];
                }
                if i + 1 < n {
                    t += off[i] * z[i + 1];
                }
                assert!((t - vals_tri[k] * z[i]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn gemv_roundtrip() {
        // A is 3x2 column-major: columns (1,2,3) and (0,1,0).
        let a = vec![1.0, 2.0, 3.0, 0.0, 1.0, 0.0];
        let x = vec![1.0, 1.0, 1.0];
        let mut y = vec![0.0; 2];
        gemv_t(&a, 3, 2, &x, &mut y);
        assert_eq!(y, vec![6.0, 1.0]);
        // w -= A y with A y = 6·(1,2,3) + 1·(0,1,0) = (6,13,18).
        let mut w = vec![10.0, 10.0, 10.0];
        gemv_n_sub(&a, 3, 2, &y, &mut w);
        assert_eq!(w, vec![4.0, -3.0, -8.0]);
    }

    #[test]
    fn gemm_against_naive_at_odd_sizes() {
        let (m, k, n) = (67usize, 43usize, 29usize);
        let mut s = 5u64;
        let mut rnd = move || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64) / ((1u64 << 53) as f64) - 0.5
        };
        let a: Vec<f64> = (0..m * k).map(|_| rnd()).collect();
        let b: Vec<f64> = (0..k * n).map(|_| rnd()).collect();
        let mut c = vec![0.0f64; m * n];
        gemm(&a, m, k, &b, n, &mut c);
        for i in (0..m).step_by(7) {
            for j in (0..n).step_by(5) {
                let mut acc = 0.0;
                for l in 0..k {
                    acc += a[l * m + i] * b[j * k + l];
                }
                assert!((acc - c[j * m + i]).abs() < 1e-12);
            }
        }
    }
}
