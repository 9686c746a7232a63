//! Cyclic Jacobi eigensolver for dense symmetric matrices.

use crate::error::{Error, Result};

/// Off-diagonal Frobenius norm at which iteration stops, relative to
/// `max(1, ‖A‖_F)`.
pub const JACOBI_TOLERANCE: f64 = 1e-12;
const MAX_SWEEPS: usize = 100;

/// Eigen-decomposition of a symmetric matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricEigen {
    /// Ascending eigenvalues.
    pub values: Vec<f64>,
    /// Row `i` is the unit eigenvector for `values[i]`; empty when vectors
    /// were not requested.
    pub vectors: Vec<Vec<f64>>,
}

fn off_norm(a: &[f64], n: usize) -> f64 {
    let mut s = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            s += 2.0 * a[i * n + j] * a[i * n + j];
        }
    }
    s.sqrt()
}

/// Eigenvalues (and optionally eigenvectors) of the `n × n` symmetric matrix
/// stored row-major in `a`.
pub fn symmetric_eigen(a: &[f64], n: usize, want_vectors: bool) -> Result<SymmetricEigen> {
    if a.len() != n * n {
        return Err(Error::Numerical(format!("expected {} entries, got {}", n * n, a.len())));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("matrix has non-finite entries".into()));
    }
    for i in 0..n {
        for j in (i + 1)..n {
            let (x, y) = (a[i * n + j], a[j * n + i]);
            if (x - y).abs() > 1e-12 * x.abs().max(y.abs()).max(1.0) {
                return Err(Error::Numerical(format!("matrix not symmetric at ({i}, {j})")));
            }
        }
    }
    let mut m = a.to_vec();
    // Rows of `v` hold the accumulated rotations (eigenvectors).
    let mut v: Vec<f64> = if want_vectors {
        let mut id = vec![0.0; n * n];
        (0..n).for_each(|i| id[i * n + i] = 1.0);
        id
    } else {
        Vec::new()
    };

    let scale = m.iter().map(|x| x * x).sum::<f64>().sqrt().max(1.0);
    let target = JACOBI_TOLERANCE * scale;
    let mut sweeps = 0;
    while off_norm(&m, n) > target {
        if sweeps == MAX_SWEEPS {
            return Err(Error::Numerical(format!(
                "Jacobi iteration did not converge in {MAX_SWEEPS} sweeps"
            )));
        }
        sweeps += 1;
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                if apq.abs() < 1e-3 * f64::EPSILON * app.abs().min(aqq.abs()) {
                    m[p * n + q] = 0.0;
                    m[q * n + p] = 0.0;
                    continue;
                }
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;

                for k in 0..n {
                    if k == p || k == q {
                        continue;
                    }
                    let akp = m[p * n + k];
                    let akq = m[q * n + k];
                    let np = c * akp - s * akq;
                    let nq = s * akp + c * akq;
                    m[p * n + k] = np;
                    m[q * n + k] = nq;
                    m[k * n + p] = np;
                    m[k * n + q] = nq;
                }
                m[p * n + p] = app - t * apq;
                m[q * n + q] = aqq + t * apq;
                m[p * n + q] = 0.0;
                m[q * n + p] = 0.0;

                if want_vectors {
                    let (head, tail) = v.split_at_mut(q * n);
                    let vp = &mut head[p * n..p * n + n];
                    let vq = &mut tail[..n];
                    for (x, y) in vp.iter_mut().zip(vq.iter_mut()) {
                        let (a, b) = (*x, *y);
                        *x = c * a - s * b;
                        *y = s * a + c * b;
                    }
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[i * n + i].total_cmp(&m[j * n + j]));
    let values = order.iter().map(|&i| m[i * n + i]).collect();
    let vectors = if want_vectors {
        order.iter().map(|&i| v[i * n..i * n + n].to_vec()).collect()
    } else {
        Vec::new()
    };
    Ok(SymmetricEigen { values, vectors })
}

/// Eigenvalues only.
pub fn symmetric_eigenvalues(a: &[f64], n: usize) -> Result<Vec<f64>> {
    Ok(symmetric_eigen(a, n, false)?.values)
}

/// Clamps eigenvalues in `[-tol, 0)` to zero; anything more negative is an
/// error.
pub fn clamp_psd(values: &mut [f64], tol: f64) -> Result<()> {
    for v in values.iter_mut() {
        if *v < -tol {
            return Err(Error::Numerical(format!(
                "matrix is not positive semidefinite (eigenvalue {v:e})"
            )));
        }
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    Ok(())
}

/// Symmetric PSD square root `V diag(√λ) Vᵀ`.
pub fn psd_sqrt(a: &[f64], n: usize, tol: f64) -> Result<Vec<f64>> {
    let mut eig = symmetric_eigen(a, n, true)?;
    clamp_psd(&mut eig.values, tol)?;
    let mut out = vec![0.0; n * n];
    for (lambda, vec) in eig.values.iter().zip(&eig.vectors) {
        let r = lambda.sqrt();
        for i in 0..n {
            for j in 0..n {
                out[i * n + j] += r * vec[i] * vec[j];
            }
        }
    }
    Ok(out)
}

pub(crate) fn matmul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            for j in 0..n {
                out[i * n + j] += aik * b[k * n + j];
            }
        }
    }
    out
}
