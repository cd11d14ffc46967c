use super::matrix::{dot, DenseMatrix};
use super::rng::RngStream;
use crate::error::{Error, Result};

const SYMMETRY_TOL: f64 = 1e-8;
const PSD_TOL: f64 = 1e-8;

/// Random `m × n` matrix with orthonormal columns.
///
/// Gaussian columns are orthonormalized by modified Gram–Schmidt, applied
/// twice so the result is orthogonal to working precision.
pub fn orthonormal_basis(rng: &mut RngStream, m: usize, n: usize) -> Result<DenseMatrix> {
    if n > m {
        return Err(Error::Dimension(format!(
            "cannot fit {n} orthonormal columns in dimension {m}"
        )));
    }
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    while cols.len() < n {
        let mut v: Vec<f64> = (0..m).map(|_| rng.standard_normal()).collect();
        for _ in 0..2 {
            for q in &cols {
                let c = dot(q, &v);
                v.iter_mut().zip(q).for_each(|(vi, qi)| *vi -= c * qi);
            }
        }
        let nrm = dot(&v, &v).sqrt();
        // A draw numerically inside the current span is discarded.
        if nrm < 1e-8 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= nrm);
        cols.push(v);
    }
    DenseMatrix::from_cols(&cols)
}

fn check_symmetric(a: &DenseMatrix) -> Result<()> {
    let (r, c) = a.shape();
    if r != c {
        return Err(Error::shape(format!("eigenvalues need a square matrix, got {r}x{c}")));
    }
    let scale = a.frobenius_norm().max(1.0);
    for i in 0..r {
        for j in 0..i {
            if (a[(i, j)] - a[(j, i)]).abs() > SYMMETRY_TOL * scale {
                return Err(Error::shape(format!(
                    "matrix not symmetric at ({i}, {j}): {} vs {}",
                    a[(i, j)],
                    a[(j, i)]
                )));
            }
        }
    }
    Ok(())
}

/// Eigenvalues of a symmetric matrix in descending order (Householder
/// tridiagonalization followed by implicit QR).
pub fn sym_eigvals(a: &DenseMatrix) -> Result<Vec<f64>> {
    check_symmetric(a)?;
    let n = a.rows();
    // symmetrize exactly; the solver reads only the lower triangle
    let m = nalgebra::DMatrix::from_fn(n, n, |i, j| 0.5 * (a[(i, j)] + a[(j, i)]));
    let mut ev: Vec<f64> = m.symmetric_eigenvalues().iter().copied().collect();
    if ev.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain("eigenvalue solver produced a non-finite value"));
    }
    ev.sort_by(|a, b| b.total_cmp(a));
    Ok(ev)
}

/// Eigenvalues of a positive semidefinite matrix, descending. Values in
/// `[-1e-8·scale, 0)` are clamped to zero; anything more negative is an error.
pub fn psd_eigvals(a: &DenseMatrix) -> Result<Vec<f64>> {
    let mut ev = sym_eigvals(a)?;
    let scale = ev.first().copied().unwrap_or(0.0).abs().max(1.0);
    for v in &mut ev {
        if *v < 0.0 {
            if *v < -PSD_TOL * scale {
                return Err(Error::domain(format!("matrix flagged PSD has eigenvalue {v}")));
            }
            *v = 0.0;
        }
    }
    Ok(ev)
}

/// Solves `A x = b` for symmetric positive definite `A` by Cholesky.
pub fn solve_spd(a: &DenseMatrix, b: &[f64]) -> Result<Vec<f64>> {
    let n = a.rows();
    if a.cols() != n || b.len() != n {
        return Err(Error::shape("solve_spd needs a square system"));
    }
    let scale = (0..n).map(|i| a[(i, i)].abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let mut l = DenseMatrix::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d <= 1e-12 * scale {
            return Err(Error::Singular(format!("pivot {j} is {d:e}")));
        }
        let d = d.sqrt();
        l[(j, j)] = d;
        for i in j + 1..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / d;
        }
    }
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[(i, k)] * y[k];
        }
        y[i] = s / l[(i, i)];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= l[(k, i)] * x[k];
        }
        x[i] = s / l[(i, i)];
    }
    Ok(x)
}
