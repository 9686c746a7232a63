//! k-NN precision, density and coverage.

use serde::{Deserialize, Serialize};

use super::FeatureSet;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prdc {
    pub precision: f64,
    pub density: f64,
    pub coverage: f64,
}

fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Squared distance from each real point to its `k`-th nearest other real
/// point; ties are ordered by index.
pub(crate) fn knn_radii_sq(real: &FeatureSet, k: usize) -> Vec<f64> {
    let n = real.len();
    let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
    (0..n)
        .map(|i| {
            best.clear();
            let xi = real.row(i);
            for j in (0..n).filter(|&j| j != i) {
                let cand = (dist_sq(xi, real.row(j)), j);
                if best.len() == k && cand >= *best.last().expect("k >= 1") {
                    continue;
                }
                let pos = best.partition_point(|b| *b < cand);
                best.insert(pos, cand);
                best.truncate(k);
            }
            best[k - 1].0
        })
        .collect()
}

/// Balls are closed: a point at exactly the radius is inside.
pub fn precision_density_coverage(real: &FeatureSet, gen: &FeatureSet, k: usize) -> Result<Prdc> {
    if real.dim() != gen.dim() {
        return Err(Error::Degenerate(format!(
            "dimension mismatch: {} vs {}",
            real.dim(),
            gen.dim()
        )));
    }
    if k == 0 {
        return Err(Error::Config("neighbour count k must be at least 1".into()));
    }
    for set in [real, gen] {
        if k >= set.len() {
            return Err(Error::InsufficientSamples {
                needed: k + 1,
                got: set.len(),
            });
        }
    }
    let radii = knn_radii_sq(real, k);
    let mut covered = vec![false; real.len()];
    let mut hit_gen = 0usize;
    let mut memberships = 0usize;
    for g in gen.rows() {
        let mut any = false;
        for (i, r) in real.rows().enumerate() {
            if dist_sq(g, r) <= radii[i] {
                any = true;
                memberships += 1;
                covered[i] = true;
            }
        }
        hit_gen += usize::from(any);
    }
    let m = gen.len() as f64;
    Ok(Prdc {
        precision: hit_gen as f64 / m,
        density: memberships as f64 / (k as f64 * m),
        coverage: covered.iter().filter(|&&c| c).count() as f64 / real.len() as f64,
    })
}
