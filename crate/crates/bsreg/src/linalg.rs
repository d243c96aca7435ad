//! Small dense linear algebra for the p-dimensional parameter space.
//!
//! The parameter dimension in these models is tiny (p rarely exceeds
//! five or six), so everything here is a plain dense routine: Cholesky
//! factorization for symmetric positive definite solves, Householder QR
//! for least squares, and a cyclic Jacobi sweep for the eigenvalues used
//! in condition-number estimates.

use ndarray::{Array1, Array2};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("matrix is not positive definite (pivot {pivot:e} at column {col})")]
    NotPositiveDefinite { col: usize, pivot: f64 },
    #[error("least-squares design is rank deficient (column {col})")]
    RankDeficient { col: usize },
    #[error("dimension mismatch: {0}")]
    Shape(String),
}

/// Lower Cholesky factor L with A = L Lᵀ.
pub fn cholesky(a: &Array2<f64>) -> Result<Array2<f64>, LinalgError> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(LinalgError::Shape(format!(
            "cholesky needs a square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    let mut l = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[[i, j]];
            for k in 0..j {
                sum -= l[[i, k]] * l[[j, k]];
            }
            if i == j {
                if !(sum > 0.0) || !sum.is_finite() {
                    return Err(LinalgError::NotPositiveDefinite { col: i, pivot: sum });
                }
                l[[i, j]] = sum.sqrt();
            } else {
                l[[i, j]] = sum / l[[j, j]];
            }
        }
    }
    Ok(l)
}

/// Solve A x = b given the lower Cholesky factor of A.
pub fn chol_solve(l: &Array2<f64>, b: &Array1<f64>) -> Array1<f64> {
    let n = l.nrows();
    // forward: L y = b
    let mut y = Array1::<f64>::zeros(n);
    for i in 0..n {
        let mut sum = b[i];
        for k in 0..i {
            sum -= l[[i, k]] * y[k];
        }
        y[i] = sum / l[[i, i]];
    }
    // backward: Lᵀ x = y
    let mut x = Array1::<f64>::zeros(n);
    for i in (0..n).rev() {
        let mut sum = y[i];
        for k in (i + 1)..n {
            sum -= l[[k, i]] * x[k];
        }
        x[i] = sum / l[[i, i]];
    }
    x
}

/// Solve the SPD system A x = b.
pub fn solve_spd(a: &Array2<f64>, b: &Array1<f64>) -> Result<Array1<f64>, LinalgError> {
    let l = cholesky(a)?;
    Ok(chol_solve(&l, b))
}

/// Inverse of an SPD matrix, symmetrized so that the result is exactly
/// symmetric (the bias formulae contract vec() of this inverse against
/// symmetric Hessian rows).
pub fn spd_inverse(a: &Array2<f64>) -> Result<Array2<f64>, LinalgError> {
    let n = a.nrows();
    let l = cholesky(a)?;
    let mut inv = Array2::<f64>::zeros((n, n));
    let mut e = Array1::<f64>::zeros(n);
    for j in 0..n {
        e[j] = 1.0;
        let col = chol_solve(&l, &e);
        for i in 0..n {
            inv[[i, j]] = col[i];
        }
        e[j] = 0.0;
    }
    for i in 0..n {
        for j in 0..i {
            let s = 0.5 * (inv[[i, j]] + inv[[j, i]]);
            inv[[i, j]] = s;
            inv[[j, i]] = s;
        }
    }
    Ok(inv)
}

/// Least-squares solution of min ‖X b − y‖₂ by Householder QR.
pub fn lstsq(x: &Array2<f64>, y: &Array1<f64>) -> Result<Array1<f64>, LinalgError> {
    let (n, p) = x.dim();
    if y.len() != n {
        return Err(LinalgError::Shape(format!(
            "lstsq: {} rows in X but {} responses",
            n,
            y.len()
        )));
    }
    if n < p {
        return Err(LinalgError::Shape(format!(
            "lstsq: underdetermined system ({} rows, {} columns)",
            n, p
        )));
    }
    let mut r = x.clone();
    let mut qty = y.clone();
    let mut col_scale = 0.0_f64;
    for j in 0..p {
        for i in 0..n {
            col_scale = col_scale.max(r[[i, j]].abs());
        }
    }
    for k in 0..p {
        // Householder reflector for column k, rows k..n.
        let mut norm2 = 0.0;
        for i in k..n {
            norm2 += r[[i, k]] * r[[i, k]];
        }
        let norm = norm2.sqrt();
        if norm <= f64::EPSILON * col_scale * (n as f64) {
            return Err(LinalgError::RankDeficient { col: k });
        }
        let alpha = if r[[k, k]] >= 0.0 { -norm } else { norm };
        let mut v = Array1::<f64>::zeros(n - k);
        for i in k..n {
            v[i - k] = r[[i, k]];
        }
        v[0] -= alpha;
        let vtv: f64 = v.iter().map(|t| t * t).sum();
        if vtv == 0.0 {
            return Err(LinalgError::RankDeficient { col: k });
        }
        let beta = 2.0 / vtv;
        // apply reflector to remaining columns of R
        for j in k..p {
            let mut dot = 0.0;
            for i in k..n {
                dot += v[i - k] * r[[i, j]];
            }
            let f = beta * dot;
            for i in k..n {
                r[[i, j]] -= f * v[i - k];
            }
        }
        // and to the response
        let mut dot = 0.0;
        for i in k..n {
            dot += v[i - k] * qty[i];
        }
        let f = beta * dot;
        for i in k..n {
            qty[i] -= f * v[i - k];
        }
    }
    // back substitution on the upper-triangular R
    let mut b = Array1::<f64>::zeros(p);
    for i in (0..p).rev() {
        let mut sum = qty[i];
        for j in (i + 1)..p {
            sum -= r[[i, j]] * b[j];
        }
        b[i] = sum / r[[i, i]];
    }
    Ok(b)
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations,
/// ascending order.
pub fn sym_eigenvalues(a: &Array2<f64>) -> Vec<f64> {
    let n = a.nrows();
    let mut m = a.clone();
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += m[[i, j]] * m[[i, j]];
            }
        }
        let scale: f64 = (0..n).map(|i| m[[i, i]].abs()).fold(0.0, f64::max);
        if off.sqrt() <= 1e-15 * scale.max(1e-300) {
            break;
        }
        for i in 0..n {
            for j in (i + 1)..n {
                if m[[i, j]] == 0.0 {
                    continue;
                }
                let theta = (m[[j, j]] - m[[i, i]]) / (2.0 * m[[i, j]]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mik = m[[i, k]];
                    let mjk = m[[j, k]];
                    m[[i, k]] = c * mik - s * mjk;
                    m[[j, k]] = s * mik + c * mjk;
                }
                for k in 0..n {
                    let mki = m[[k, i]];
                    let mkj = m[[k, j]];
                    m[[k, i]] = c * mki - s * mkj;
                    m[[k, j]] = s * mki + c * mkj;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| m[[i, i]]).collect();
    ev.sort_by(|a, b| a.partial_cmp(b).unwrap());
    ev
}
