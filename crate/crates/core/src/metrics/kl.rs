//! Forward KL `D(p_ref ‖ p_gen)` against an analytic reference mixture, with
//! `p_gen` estimated by a Gaussian KDE.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::FeatureSet;
use crate::error::{Error, Result};
use crate::world::{GaussianComponent, Mat2, Mixture};

/// Minimum number of generated points.
pub const MIN_KL_SAMPLES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlEstimator {
    /// Reference draws and density are taken from `p_ref` convolved with the
    /// KDE kernel, so both sides carry the same smoothing.
    SmoothingMatched,
    /// Plain plug-in: `E_{p_ref}[log p_ref − log p̂_gen]`.
    PlugIn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KlConfig {
    pub estimator: KlEstimator,
    /// Monte-Carlo draws from the reference.
    pub reference_samples: usize,
    /// Lower bound on every per-dimension bandwidth.
    pub bandwidth_floor: f64,
    pub seed: u64,
}

impl Default for KlConfig {
    fn default() -> Self {
        KlConfig {
            estimator: KlEstimator::SmoothingMatched,
            reference_samples: 10_000,
            bandwidth_floor: 1e-3,
            seed: 0,
        }
    }
}

/// Scott's rule `h_j = σ_j · n^(−1/(d+4))`, floored at `floor`.
pub fn scott_bandwidths(fs: &FeatureSet, floor: f64) -> Vec<f64> {
    let (n, d) = (fs.len(), fs.dim());
    let factor = (n as f64).powf(-1.0 / (d as f64 + 4.0));
    (0..d)
        .map(|j| {
            let mean = fs.rows().map(|r| r[j]).sum::<f64>() / n as f64;
            let var = fs.rows().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / (n.max(2) - 1) as f64;
            (var.sqrt() * factor).max(floor)
        })
        .collect()
}

/// Gaussian product-kernel density estimate in log space.
struct Kde<'a> {
    points: &'a FeatureSet,
    inv_h: Vec<f64>,
    log_norm: f64,
}

impl<'a> Kde<'a> {
    fn new(points: &'a FeatureSet, h: &[f64]) -> Self {
        let d = h.len() as f64;
        let log_norm = -(points.len() as f64).ln()
            - 0.5 * d * (2.0 * std::f64::consts::PI).ln()
            - h.iter().map(|v| v.ln()).sum::<f64>();
        Kde {
            points,
            inv_h: h.iter().map(|v| 1.0 / v).collect(),
            log_norm,
        }
    }

    fn log_density(&self, x: &[f64], buf: &mut Vec<f64>) -> f64 {
        buf.clear();
        let mut max = f64::NEG_INFINITY;
        for p in self.points.rows() {
            let q: f64 = p
                .iter()
                .zip(x)
                .zip(&self.inv_h)
                .map(|((a, b), ih)| ((a - b) * ih).powi(2))
                .sum();
            let e = -0.5 * q;
            max = max.max(e);
            buf.push(e);
        }
        let s: f64 = buf.iter().map(|e| (e - max).exp()).sum();
        self.log_norm + max + s.ln()
    }
}

/// Forward KL of a generated 2D set against `reference`, clamped at 0.
pub fn forward_kl(reference: &Mixture, generated: &FeatureSet, cfg: &KlConfig) -> Result<f64> {
    if generated.len() < MIN_KL_SAMPLES {
        return Err(Error::InsufficientSamples {
            needed: MIN_KL_SAMPLES,
            got: generated.len(),
        });
    }
    if generated.dim() != 2 {
        return Err(Error::Degenerate(format!(
            "forward KL needs 2D points, got dimension {}",
            generated.dim()
        )));
    }
    if cfg.reference_samples == 0 {
        return Err(Error::EmptyRequest("KL reference sample count is zero"));
    }
    if !(cfg.bandwidth_floor > 0.0) {
        return Err(Error::Config("KL bandwidth floor must be > 0".into()));
    }
    let h = scott_bandwidths(generated, cfg.bandwidth_floor);
    let target = match cfg.estimator {
        KlEstimator::PlugIn => reference.clone(),
        KlEstimator::SmoothingMatched => {
            let extra = Mat2::diag(h[0] * h[0], h[1] * h[1]);
            let comps = reference
                .components()
                .iter()
                .map(|c| GaussianComponent::new(c.mean, c.cov.add(&extra)))
                .collect::<Result<Vec<_>>>()?;
            Mixture::new(comps, reference.weights().to_vec())?
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let draws = target.sample(cfg.reference_samples, &mut rng)?;
    let prepared = target.prepared();
    let kde = Kde::new(generated, &h);
    let mut buf = Vec::with_capacity(generated.len());
    let mut total = 0.0;
    for x in &draws {
        total += prepared.log_density(*x) - kde.log_density(&[x.x, x.y], &mut buf);
    }
    let kl = total / draws.len() as f64;
    if kl.is_nan() {
        return Err(Error::Numerical("KL estimate is NaN".into()));
    }
    Ok(kl.max(0.0))
}
