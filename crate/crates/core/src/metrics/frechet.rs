//! Fréchet distance between Gaussian fits of two point sets.

use super::linalg::{clamp_psd, matmul, psd_sqrt, symmetric_eigenvalues};
use super::FeatureSet;
use crate::error::{Error, Result};

const NEGATIVE_TOLERANCE: f64 = 1e-8;

/// Mean and covariance (row-major `dim × dim`).
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMoments {
    pub mean: Vec<f64>,
    pub cov: Vec<f64>,
}

impl GaussianMoments {
    pub fn new(mean: Vec<f64>, cov: Vec<f64>) -> Result<Self> {
        let d = mean.len();
        if d == 0 || cov.len() != d * d {
            return Err(Error::Degenerate("moment dimensions do not match".into()));
        }
        Ok(GaussianMoments { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Sample mean and unbiased (1/(n−1)) covariance; needs `n ≥ d + 1`.
    pub fn fit(fs: &FeatureSet) -> Result<Self> {
        let (n, d) = (fs.len(), fs.dim());
        if n < d + 1 {
            return Err(Error::InsufficientSamples { needed: d + 1, got: n });
        }
        let mut mean = vec![0.0; d];
        for r in fs.rows() {
            mean.iter_mut().zip(r).for_each(|(m, x)| *m += x);
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut cov = vec![0.0; d * d];
        for r in fs.rows() {
            for i in 0..d {
                let di = r[i] - mean[i];
                for j in i..d {
                    cov[i * d + j] += di * (r[j] - mean[j]);
                }
            }
        }
        let k = 1.0 / (n - 1) as f64;
        for i in 0..d {
            for j in i..d {
                cov[i * d + j] *= k;
                cov[j * d + i] = cov[i * d + j];
            }
        }
        Ok(GaussianMoments { mean, cov })
    }
}

/// `Tr((Σa Σb)^½)` via the symmetric form `Σa^½ Σb Σa^½`.
fn trace_sqrt_product(a: &[f64], b: &[f64], d: usize) -> Result<f64> {
    if d == 2 {
        // Eigenvalues λ₁, λ₂ of ΣaΣb: √λ₁ + √λ₂ = √(tr + 2√det).
        let tr = a[0] * b[0] + a[1] * b[2] + a[2] * b[1] + a[3] * b[3];
        let det_a = a[0] * a[3] - a[1] * a[2];
        let det_b = b[0] * b[3] - b[1] * b[2];
        let mut det = [det_a * det_b];
        clamp_psd(&mut det, NEGATIVE_TOLERANCE)?;
        let mut inner = [tr + 2.0 * det[0].sqrt()];
        clamp_psd(&mut inner, NEGATIVE_TOLERANCE)?;
        return Ok(inner[0].sqrt());
    }
    trace_sqrt_product_general(a, b, d)
}

pub(crate) fn trace_sqrt_product_general(a: &[f64], b: &[f64], d: usize) -> Result<f64> {
    let ra = psd_sqrt(a, d, NEGATIVE_TOLERANCE)?;
    let mut m = matmul(&matmul(&ra, b, d), &ra, d);
    // Symmetrize away rounding before the symmetric solver.
    for i in 0..d {
        for j in (i + 1)..d {
            let s = 0.5 * (m[i * d + j] + m[j * d + i]);
            m[i * d + j] = s;
            m[j * d + i] = s;
        }
    }
    let mut vals = symmetric_eigenvalues(&m, d)?;
    clamp_psd(&mut vals, NEGATIVE_TOLERANCE)?;
    Ok(vals.iter().map(|v| v.sqrt()).sum())
}

/// `‖μa − μb‖² + Tr(Σa + Σb − 2(ΣaΣb)^½)`.
pub fn frechet_from_moments(a: &GaussianMoments, b: &GaussianMoments) -> Result<f64> {
    let d = a.dim();
    if b.dim() != d {
        return Err(Error::Degenerate(format!("dimension mismatch: {d} vs {}", b.dim())));
    }
    let mean_term: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y) * (x - y)).sum();
    let tr_a: f64 = (0..d).map(|i| a.cov[i * d + i]).sum();
    let tr_b: f64 = (0..d).map(|i| b.cov[i * d + i]).sum();
    let cross = trace_sqrt_product(&a.cov, &b.cov, d)?;
    let fd = mean_term + tr_a + tr_b - 2.0 * cross;
    if !fd.is_finite() {
        return Err(Error::Numerical("Fréchet distance is not finite".into()));
    }
    let mut v = [fd];
    clamp_psd(&mut v, NEGATIVE_TOLERANCE * (1.0 + tr_a + tr_b))?;
    Ok(v[0])
}

pub fn frechet_distance(a: &FeatureSet, b: &FeatureSet) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Degenerate(format!("dimension mismatch: {} vs {}", a.dim(), b.dim())));
    }
    frechet_from_moments(&GaussianMoments::fit(a)?, &GaussianMoments::fit(b)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn iso(mean: [f64; 2], var: f64) -> GaussianMoments {
        GaussianMoments::new(mean.to_vec(), vec![var, 0.0, 0.0, var]).unwrap()
    }

    #[test]
    fn moment_level_cases() {
        let fd = frechet_from_moments(&iso([0.0, 0.0], 1.0), &iso([3.0, 4.0], 1.0)).unwrap();
        assert!((fd - 25.0).abs() < 1e-9);
        let fd = frechet_from_moments(&iso([0.0, 0.0], 1.0), &iso([0.0, 0.0], 4.0)).unwrap();
        assert!((fd - 2.0).abs() < 1e-9);
    }

    #[test]
    fn closed_form_matches_eigen_route() {
        let a = [1.3, 0.4, 0.4, 0.8];
        let b = [0.5, -0.2, -0.2, 2.1];
        let closed = trace_sqrt_product(&a, &b, 2).unwrap();
        let general = trace_sqrt_product_general(&a, &b, 2).unwrap();
        assert!((closed - general).abs() < 1e-12);
    }

    #[test]
    fn identical_sets_are_zero() {
        let f = FeatureSet::new(2, vec![0.0, 1.0, 2.0, -1.0, 0.5, 0.3, 4.0, 2.0]).unwrap();
        assert!(frechet_distance(&f, &f).unwrap().abs() < 1e-10);
        let f3 = FeatureSet::new(3, vec![0.0, 1.0, 2.0, -1.0, 0.5, 0.3, 4.0, 2.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!(frechet_distance(&f3, &f3).unwrap().abs() < 1e-10);
    }

    #[test]
    fn too_few_points() {
        let f = FeatureSet::new(2, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        assert!(matches!(
            frechet_distance(&f, &f),
            Err(Error::InsufficientSamples { needed: 3, got: 2 })
        ));
    }

    proptest! {
        #[test]
        fn symmetric_and_nonnegative(
            a in proptest::collection::vec(-3.0f64..3.0, 2 * 8),
            b in proptest::collection::vec(-3.0f64..3.0, 2 * 8),
        ) {
            let fa = FeatureSet::new(2, a).unwrap();
            let fb = FeatureSet::new(2, b).unwrap();
            let ab = frechet_distance(&fa, &fb).unwrap();
            let ba = frechet_distance(&fb, &fa).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - ba).abs() <= 1e-9 * (1.0 + ab));
        }
    }
}
