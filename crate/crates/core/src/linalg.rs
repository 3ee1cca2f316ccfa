//! Dense linear algebra on small matrices.
//!
//! Everything here operates on `ndarray` matrices of side at most a few
//! hundred (the QoE state spaces have K(K+1)/2 states, i.e. 120 for K=15).
//! Eigendecomposition and linear solves are delegated to the system LAPACK
//! through a minimal FFI shim; the matrix exponential is the classic
//! Padé-13 scaling-and-squaring scheme.

use ndarray::{Array1, Array2};
use num_complex::Complex64;

use crate::error::{Error, Result};

mod ffi {
    use std::os::raw::c_char;

    extern "C" {
        pub fn dgeev_(
            jobvl: *const c_char,
            jobvr: *const c_char,
            n: *const i32,
            a: *mut f64,
            lda: *const i32,
            wr: *mut f64,
            wi: *mut f64,
            vl: *mut f64,
            ldvl: *const i32,
            vr: *mut f64,
            ldvr: *const i32,
            work: *mut f64,
            lwork: *const i32,
            info: *mut i32,
        );

    }
}

fn to_col_major(a: &Array2<f64>) -> Vec<f64> {
    let (rows, cols) = a.dim();
    let mut buf = vec![0.0; rows * cols];
    for j in 0..cols {
        for i in 0..rows {
            buf[j * rows + i] = a[[i, j]];
        }
    }
    buf
}

/// Eigenvalues and right eigenvectors of a general real matrix.
///
/// Returns `(values, vectors)` where column `k` of `vectors` is the
/// eigenvector for `values[k]`. Complex conjugate pairs are unpacked from
/// LAPACK's packed real representation.
pub fn eig(a: &Array2<f64>) -> Result<(Vec<Complex64>, Array2<Complex64>)> {
    let n = a.nrows();
    if n != a.ncols() {
        return Err(Error::invalid("eig: matrix must be square"));
    }
    if n == 0 {
        return Err(Error::invalid("eig: empty matrix"));
    }
    let ni = n as i32;
    let mut buf = to_col_major(a);
    let mut wr = vec![0.0; n];
    let mut wi = vec![0.0; n];
    let mut vr = vec![0.0; n * n];
    let mut info = 0i32;

    // Workspace query, then the real call.
    let mut work_query = [0.0f64];
    let query = -1i32;
    unsafe {
        ffi::dgeev_(
            b"N".as_ptr().cast(),
            b"V".as_ptr().cast(),
            &ni,
            buf.as_mut_ptr(),
            &ni,
            wr.as_mut_ptr(),
            wi.as_mut_ptr(),
            std::ptr::null_mut(),
            &ni,
            vr.as_mut_ptr(),
            &ni,
            work_query.as_mut_ptr(),
            &query,
            &mut info,
        );
    }
    if info != 0 {
        return Err(Error::numerical("dgeev", format!("workspace query info={info}")));
    }
    let lwork = (work_query[0] as i32).max(4 * ni);
    let mut work = vec![0.0; lwork as usize];
    unsafe {
        ffi::dgeev_(
            b"N".as_ptr().cast(),
            b"V".as_ptr().cast(),
            &ni,
            buf.as_mut_ptr(),
            &ni,
            wr.as_mut_ptr(),
            wi.as_mut_ptr(),
            std::ptr::null_mut(),
            &ni,
            vr.as_mut_ptr(),
            &ni,
            work.as_mut_ptr(),
            &lwork,
            &mut info,
        );
    }
    if info != 0 {
        return Err(Error::numerical(
            "dgeev",
            format!("eigendecomposition failed, info={info}"),
        ));
    }

    let values: Vec<Complex64> = wr
        .iter()
        .zip(&wi)
        .map(|(&re, &im)| Complex64::new(re, im))
        .collect();

    // Unpack eigenvectors: a conjugate pair (wi[j] > 0, wi[j+1] < 0) stores
    // real and imaginary parts in columns j and j+1 (column-major in `vr`).
    let mut vectors = Array2::<Complex64>::zeros((n, n));
    let mut j = 0;
    while j < n {
        if wi[j] == 0.0 {
            for i in 0..n {
                vectors[[i, j]] = Complex64::new(vr[j * n + i], 0.0);
            }
            j += 1;
        } else {
            for i in 0..n {
                let re = vr[j * n + i];
                let im = vr[(j + 1) * n + i];
                vectors[[i, j]] = Complex64::new(re, im);
                vectors[[i, j + 1]] = Complex64::new(re, -im);
            }
            j += 2;
        }
    }
    Ok((values, vectors))
}

/// Solve `A X = B` for real square `A` by LU with partial pivoting.
///
/// Hand-rolled rather than LAPACK: the distro's OpenBLAS-backed `*gesv`
/// burns multiple megabytes of stack even for tiny systems, which kills
/// 2 MiB test threads; at our sizes (n <= ~200) the unblocked factorization
/// is more than fast enough.
pub fn solve_real(a: &Array2<f64>, b: &Array2<f64>) -> Result<Array2<f64>> {
    let n = a.nrows();
    if n != a.ncols() || b.nrows() != n {
        return Err(Error::invalid("solve_real: dimension mismatch"));
    }
    let mut lu = a.clone();
    let mut x = b.clone();
    let nrhs = x.ncols();
    for col in 0..n {
        let mut pivot = col;
        let mut best = lu[[col, col]].abs();
        for row in (col + 1)..n {
            let mag = lu[[row, col]].abs();
            if mag > best {
                best = mag;
                pivot = row;
            }
        }
        if best < 1e-300 {
            return Err(Error::numerical(
                "lu solve",
                format!("matrix is singular at column {col}"),
            ));
        }
        if pivot != col {
            for j in 0..n {
                lu.swap([col, j], [pivot, j]);
            }
            for j in 0..nrhs {
                x.swap([col, j], [pivot, j]);
            }
        }
        let diag = lu[[col, col]];
        for row in (col + 1)..n {
            let factor = lu[[row, col]] / diag;
            if factor == 0.0 {
                continue;
            }
            lu[[row, col]] = factor;
            for j in (col + 1)..n {
                let v = lu[[col, j]];
                lu[[row, j]] -= factor * v;
            }
            for j in 0..nrhs {
                let v = x[[col, j]];
                x[[row, j]] -= factor * v;
            }
        }
    }
    for col in (0..n).rev() {
        let diag = lu[[col, col]];
        for j in 0..nrhs {
            let mut acc = x[[col, j]];
            for k in (col + 1)..n {
                acc -= lu[[col, k]] * x[[k, j]];
            }
            x[[col, j]] = acc / diag;
        }
    }
    Ok(x)
}

/// Solve `A X = B` for complex square `A`; same unblocked LU as
/// [`solve_real`].
pub fn solve_complex(a: &Array2<Complex64>, b: &Array2<Complex64>) -> Result<Array2<Complex64>> {
    let n = a.nrows();
    if n != a.ncols() || b.nrows() != n {
        return Err(Error::invalid("solve_complex: dimension mismatch"));
    }
    let mut lu = a.clone();
    let mut x = b.clone();
    let nrhs = x.ncols();
    for col in 0..n {
        let mut pivot = col;
        let mut best = lu[[col, col]].norm_sqr();
        for row in (col + 1)..n {
            let mag = lu[[row, col]].norm_sqr();
            if mag > best {
                best = mag;
                pivot = row;
            }
        }
        if best < 1e-300 {
            return Err(Error::numerical(
                "lu solve",
                format!("matrix is singular at column {col}"),
            ));
        }
        if pivot != col {
            for j in 0..n {
                lu.swap([col, j], [pivot, j]);
            }
            for j in 0..nrhs {
                x.swap([col, j], [pivot, j]);
            }
        }
        let diag = lu[[col, col]];
        for row in (col + 1)..n {
            let factor = lu[[row, col]] / diag;
            if factor.norm_sqr() == 0.0 {
                continue;
            }
            lu[[row, col]] = factor;
            for j in (col + 1)..n {
                let v = lu[[col, j]];
                lu[[row, j]] -= factor * v;
            }
            for j in 0..nrhs {
                let v = x[[col, j]];
                x[[row, j]] -= factor * v;
            }
        }
    }
    for col in (0..n).rev() {
        let diag = lu[[col, col]];
        for j in 0..nrhs {
            let mut acc = x[[col, j]];
            for k in (col + 1)..n {
                acc -= lu[[col, k]] * x[[k, j]];
            }
            x[[col, j]] = acc / diag;
        }
    }
    Ok(x)
}

/// Inverse of a complex square matrix.
pub fn inv_complex(a: &Array2<Complex64>) -> Result<Array2<Complex64>> {
    let n = a.nrows();
    let eye = Array2::from_shape_fn((n, n), |(i, j)| {
        if i == j {
            Complex64::new(1.0, 0.0)
        } else {
            Complex64::new(0.0, 0.0)
        }
    });
    solve_complex(a, &eye)
}

/// Maximum absolute column sum.
pub fn one_norm(a: &Array2<f64>) -> f64 {
    let mut norm: f64 = 0.0;
    for j in 0..a.ncols() {
        let s: f64 = a.column(j).iter().map(|v| v.abs()).sum();
        norm = norm.max(s);
    }
    norm
}

/// Maximum absolute row sum.
pub fn inf_norm_complex(a: &Array2<Complex64>) -> f64 {
    let mut norm: f64 = 0.0;
    for i in 0..a.nrows() {
        let s: f64 = a.row(i).iter().map(|v| v.norm()).sum();
        norm = norm.max(s);
    }
    norm
}

pub fn one_norm_complex(a: &Array2<Complex64>) -> f64 {
    let mut norm: f64 = 0.0;
    for j in 0..a.ncols() {
        let s: f64 = a.column(j).iter().map(|v| v.norm()).sum();
        norm = norm.max(s);
    }
    norm
}

/// Matrix exponential by Padé approximation with scaling and squaring
/// (Higham 2005). Exact enough for generators: rows of `expm(Q)` for a
/// CTMC generator `Q` sum to one at working precision.
pub fn expm(a: &Array2<f64>) -> Result<Array2<f64>> {
    // Order thresholds theta_m for the 1-norm, from Higham's analysis.
    const THETA_3: f64 = 1.495585217958292e-2;
    const THETA_5: f64 = 2.539398330063230e-1;
    const THETA_7: f64 = 9.504178996162932e-1;
    const THETA_9: f64 = 2.097847961257068;
    const THETA_13: f64 = 5.371920351148152;

    let n = a.nrows();
    if n != a.ncols() {
        return Err(Error::invalid("expm: matrix must be square"));
    }
    let norm = one_norm(a);
    let (u, v, squarings) = if norm <= THETA_3 {
        let (u, v) = pade_uv(a, &[120.0, 60.0, 12.0, 1.0]);
        (u, v, 0)
    } else if norm <= THETA_5 {
        let (u, v) = pade_uv(a, &[30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0]);
        (u, v, 0)
    } else if norm <= THETA_7 {
        let (u, v) = pade_uv(
            a,
            &[17297280.0, 8648640.0, 1995840.0, 277200.0, 25200.0, 1512.0, 56.0, 1.0],
        );
        (u, v, 0)
    } else if norm <= THETA_9 {
        let (u, v) = pade_uv(
            a,
            &[
                17643225600.0,
                8821612800.0,
                2075673600.0,
                302702400.0,
                30270240.0,
                2162160.0,
                110880.0,
                3960.0,
                90.0,
                1.0,
            ],
        );
        (u, v, 0)
    } else {
        let squarings = ((norm / THETA_13).log2().ceil() as i32).max(0);
        let scaled = a.mapv(|x| x * 2f64.powi(-squarings));
        let (u, v) = pade13_uv(&scaled);
        (u, v, squarings)
    };

    // Pade approximant is (V + U) / (V - U).
    let numer = &v + &u;
    let denom = &v - &u;
    let mut result = solve_real(&denom, &numer)?;
    for _ in 0..squarings {
        result = result.dot(&result);
    }
    Ok(result)
}

fn pade_uv(a: &Array2<f64>, b: &[f64]) -> (Array2<f64>, Array2<f64>) {
    let n = a.nrows();
    let eye = Array2::<f64>::eye(n);
    let a2 = a.dot(a);
    // U = A (b1 I + b3 A^2 + b5 A^4 + ...), V = b0 I + b2 A^2 + b4 A^4 + ...
    let mut u_sum = &eye * b[1];
    let mut v_sum = &eye * b[0];
    let mut power = a2.clone();
    let mut k = 2;
    while k < b.len() {
        v_sum = v_sum + &power * b[k];
        if k + 1 < b.len() {
            u_sum = u_sum + &power * b[k + 1];
        }
        if k + 2 < b.len() {
            power = power.dot(&a2);
        }
        k += 2;
    }
    (a.dot(&u_sum), v_sum)
}

fn pade13_uv(a: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    const B: [f64; 14] = [
        64764752532480000.0,
        32382376266240000.0,
        7771770303897600.0,
        1187353796428800.0,
        129060195264000.0,
        10559470521600.0,
        670442572800.0,
        33522128640.0,
        1323241920.0,
        40840800.0,
        960960.0,
        16380.0,
        182.0,
        1.0,
    ];
    let n = a.nrows();
    let eye = Array2::<f64>::eye(n);
    let a2 = a.dot(a);
    let a4 = a2.dot(&a2);
    let a6 = a4.dot(&a2);

    let u_inner = &a6 * B[13] + &a4 * B[11] + &a2 * B[9];
    let u_poly = a6.dot(&u_inner) + &a6 * B[7] + &a4 * B[5] + &a2 * B[3] + &eye * B[1];
    let u = a.dot(&u_poly);

    let v_inner = &a6 * B[12] + &a4 * B[10] + &a2 * B[8];
    let v = a6.dot(&v_inner) + &a6 * B[6] + &a4 * B[4] + &a2 * B[2] + &eye * B[0];
    (u, v)
}

/// Classic fixed-step RK4 for `y' = M y`, from `y0` over `[0, t]`.
///
/// Serves as the cross-method oracle for the spectral ODE solutions.
pub fn rk4_propagate(m: &Array2<f64>, y0: &Array1<f64>, t: f64, steps: usize) -> Array1<f64> {
    let h = t / steps as f64;
    let mut y = y0.clone();
    for _ in 0..steps {
        let k1 = m.dot(&y);
        let k2 = m.dot(&(&y + &(&k1 * (h / 2.0))));
        let k3 = m.dot(&(&y + &(&k2 * (h / 2.0))));
        let k4 = m.dot(&(&y + &(&k3 * h)));
        y = &y + &((k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0));
    }
    y
}

/// RK4 for the matrix equation `X' = M X` from `X0 = I`.
pub fn rk4_propagate_matrix(m: &Array2<f64>, t: f64, steps: usize) -> Array2<f64> {
    let n = m.nrows();
    let h = t / steps as f64;
    let mut x = Array2::<f64>::eye(n);
    for _ in 0..steps {
        let k1 = m.dot(&x);
        let k2 = m.dot(&(&x + &(&k1 * (h / 2.0))));
        let k3 = m.dot(&(&x + &(&k2 * (h / 2.0))));
        let k4 = m.dot(&(&x + &(&k3 * h)));
        x = &x + &((k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0));
    }
    x
}
