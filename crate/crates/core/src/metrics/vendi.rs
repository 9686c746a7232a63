//! Vendi score: exponential of the entropy of the normalized kernel spectrum.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::linalg::{clamp_psd, symmetric_eigenvalues};
use super::FeatureSet;
use crate::error::{Error, Result};

/// RBF similarity `exp(−‖x − y‖² / (2σ²))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KernelConfig {
    pub bandwidth: f64,
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig { bandwidth: 1.0 }
    }
}

pub fn vendi_score(s: &FeatureSet, k: &KernelConfig) -> Result<f64> {
    if !(k.bandwidth > 0.0 && k.bandwidth.is_finite()) {
        return Err(Error::Config(format!("kernel bandwidth must be > 0, got {}", k.bandwidth)));
    }
    let n = s.len();
    if n == 0 {
        return Err(Error::InsufficientSamples { needed: 1, got: 0 });
    }
    let inv = 1.0 / (2.0 * k.bandwidth * k.bandwidth);
    let scale = 1.0 / n as f64;
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        m[i * n + i] = scale;
        let xi = s.row(i);
        for j in (i + 1)..n {
            let d2: f64 = xi.iter().zip(s.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            let v = scale * (-d2 * inv).exp();
            m[i * n + j] = v;
            m[j * n + i] = v;
        }
    }
    let mut eig = symmetric_eigenvalues(&m, n)?;
    clamp_psd(&mut eig, 1e-10)?;
    let entropy: f64 = eig.iter().filter(|&&l| l > 0.0).map(|&l| -l * l.ln()).sum();
    Ok(entropy.exp().clamp(1.0, n as f64))
}

/// Up to `max_points` rows chosen uniformly without replacement, kept in
/// their original order; the whole set when it is small enough.
pub fn subsample(s: &FeatureSet, max_points: usize, seed: u64) -> FeatureSet {
    if s.len() <= max_points {
        return s.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, s.len(), max_points).into_vec();
    idx.sort_unstable();
    s.select(&idx)
}
