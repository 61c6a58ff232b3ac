//! Dense symmetric eigensolver and singular values for desk-scale matrices.
//!
//! Singular values are obtained from the eigenvalues of the smaller Gram
//! matrix (A^T A or A A^T), which is accurate to ~eps * sigma_max^2 — far
//! below the 1e-10 * sigma_max zeroing tolerance used by callers.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 64;

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns `(eigenvalues, eigenvectors)` sorted by descending eigenvalue;
/// eigenvectors are columns of the returned matrix.
pub fn sym_eigh_jacobi(m: &Array2<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
    let n = m.nrows();
    if n != m.ncols() {
        return Err(Error::Shape(format!(
            "eigensolver needs a square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("matrix has non-finite entries".into()));
    }
    let mut a = m.clone();
    let mut v = Array2::<f64>::eye(n);
    if n <= 1 {
        return Ok((a.diag().to_owned(), v));
    }

    let off_norm = |a: &Array2<f64>| {
        let mut s = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                s += a[[p, q]] * a[[p, q]];
            }
        }
        s.sqrt()
    };
    let scale: f64 = m.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);

    for _ in 0..MAX_SWEEPS {
        if off_norm(&a) <= 1e-14 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[[p, q]];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let app = a[[p, p]];
                let aqq = a[[q, q]];
                let theta = (aqq - app) / (2.0 * apq);
                // stable tangent of the rotation angle
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[[k, p]];
                    let akq = a[[k, q]];
                    a[[k, p]] = c * akp - s * akq;
                    a[[k, q]] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[[p, k]];
                    let aqk = a[[q, k]];
                    a[[p, k]] = c * apk - s * aqk;
                    a[[q, k]] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    let diag: Vec<f64> = (0..n).map(|i| a[[i, i]]).collect();
    order.sort_by(|&i, &j| diag[j].partial_cmp(&diag[i]).unwrap_or(std::cmp::Ordering::Equal));
    let eigvals = Array1::from_iter(order.iter().map(|&i| diag[i]));
    let mut eigvecs = Array2::<f64>::zeros((n, n));
    for (dst, &src) in order.iter().enumerate() {
        eigvecs.column_mut(dst).assign(&v.column(src));
    }
    Ok((eigvals, eigvecs))
}

/// Singular values of a rectangular matrix, descending, via the smaller Gram
/// dimension. Negative eigenvalue round-off is clamped at zero.
pub fn singular_values(a: &Array2<f64>) -> Result<Array1<f64>> {
    let (n, d) = a.dim();
    if n == 0 || d == 0 {
        return Err(Error::Shape("matrix has a zero dimension".into()));
    }
    let gram = if d <= n {
        a.t().dot(a)
    } else {
        a.dot(&a.t())
    };
    let (eigvals, _) = sym_eigh_jacobi(&gram)?;
    Ok(eigvals.mapv(|l| l.max(0.0).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn eigh_diagonal() {
        let m = arr2(&[[3.0, 0.0], [0.0, 1.0]]);
        let (vals, vecs) = sym_eigh_jacobi(&m).unwrap();
        assert!((vals[0] - 3.0).abs() < 1e-12);
        assert!((vals[1] - 1.0).abs() < 1e-12);
        assert!((vecs[[0, 0]].abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn eigh_known_2x2() {
        // [[2, 1], [1, 2]] has eigenvalues 3 and 1
        let m = arr2(&[[2.0, 1.0], [1.0, 2.0]]);
        let (vals, vecs) = sym_eigh_jacobi(&m).unwrap();
        assert!((vals[0] - 3.0).abs() < 1e-12);
        assert!((vals[1] - 1.0).abs() < 1e-12);
        // residual || M v - lambda v ||
        for i in 0..2 {
            let v = vecs.column(i);
            let mv = m.dot(&v);
            for k in 0..2 {
                assert!((mv[k] - vals[i] * v[k]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn singular_values_of_rank_one() {
        let u = ndarray::arr1(&[1.0, 2.0, 3.0]);
        let v = ndarray::arr1(&[2.0, -1.0]);
        let mut m = Array2::<f64>::zeros((3, 2));
        for i in 0..3 {
            for j in 0..2 {
                m[[i, j]] = u[i] * v[j];
            }
        }
        let s = singular_values(&m).unwrap();
        let expected = (u.dot(&u)).sqrt() * (v.dot(&v)).sqrt();
        assert!((s[0] - expected).abs() < 1e-10);
        assert!(s[1].abs() < 1e-10);
    }

    #[test]
    fn singular_values_match_transpose() {
        let m = arr2(&[[1.0, 2.0, 0.5], [0.0, -1.0, 2.0]]);
        let s1 = singular_values(&m).unwrap();
        let s2 = singular_values(&m.t().to_owned()).unwrap();
        for (a, b) in s1.iter().zip(s2.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}
