//! Ground-truth data distribution: a weighted mixture of 2D Gaussians, the
//! prompt vocabulary that maps labels onto component subsets, and sample
//! sets drawn from it.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::fmt;
use std::io::{Read, Write};
use std::ops::{Add, AddAssign, Mul, Neg, Sub};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A point or vector in the plane.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Vec2 { x, y }
    }

    pub fn dot(self, other: Vec2) -> f64 {
        self.x * other.x + self.y * other.y
    }

    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl AddAssign for Vec2 {
    fn add_assign(&mut self, o: Vec2) {
        self.x += o.x;
        self.y += o.y;
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<Vec2> for f64 {
    type Output = Vec2;
    fn mul(self, v: Vec2) -> Vec2 {
        Vec2::new(self * v.x, self * v.y)
    }
}

impl Neg for Vec2 {
    type Output = Vec2;
    fn neg(self) -> Vec2 {
        Vec2::new(-self.x, -self.y)
    }
}

impl fmt::Display for Vec2 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.x, self.y)
    }
}

/// Row-major 2x2 matrix `[[a, b], [c, d]]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mat2 {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
}

impl Mat2 {
    pub const IDENTITY: Mat2 = Mat2::diag(1.0, 1.0);

    pub const fn new(a: f64, b: f64, c: f64, d: f64) -> Self {
        Mat2 { a, b, c, d }
    }

    pub const fn diag(a: f64, d: f64) -> Self {
        Mat2 { a, b: 0.0, c: 0.0, d }
    }

    pub fn scaled_identity(s: f64) -> Self {
        Mat2::diag(s, s)
    }

    pub fn det(&self) -> f64 {
        self.a * self.d - self.b * self.c
    }

    pub fn trace(&self) -> f64 {
        self.a + self.d
    }

    pub fn scale(&self, s: f64) -> Mat2 {
        Mat2::new(s * self.a, s * self.b, s * self.c, s * self.d)
    }

    pub fn add(&self, o: &Mat2) -> Mat2 {
        Mat2::new(self.a + o.a, self.b + o.b, self.c + o.c, self.d + o.d)
    }

    pub fn apply(&self, v: Vec2) -> Vec2 {
        Vec2::new(self.a * v.x + self.b * v.y, self.c * v.x + self.d * v.y)
    }

    pub fn inverse(&self) -> Option<Mat2> {
        let det = self.det();
        if det == 0.0 || !det.is_finite() {
            return None;
        }
        Some(Mat2::new(self.d / det, -self.b / det, -self.c / det, self.a / det))
    }

    pub fn is_symmetric(&self) -> bool {
        self.b == self.c
    }

    pub fn is_spd(&self) -> bool {
        self.is_symmetric()
            && self.a.is_finite()
            && self.b.is_finite()
            && self.d.is_finite()
            && self.det() > 0.0
            && self.trace() > 0.0
    }

    /// Lower Cholesky factor of an SPD matrix.
    pub fn cholesky(&self) -> Option<Mat2> {
        if !self.is_spd() {
            return None;
        }
        let l11 = self.a.sqrt();
        let l21 = self.c / l11;
        let l22 = (self.d - l21 * l21).sqrt();
        Some(Mat2::new(l11, 0.0, l21, l22))
    }
}

/// One Gaussian component of the world.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianComponent {
    pub mean: Vec2,
    pub cov: Mat2,
}

impl GaussianComponent {
    pub fn new(mean: Vec2, cov: Mat2) -> Result<Self> {
        if !mean.is_finite() {
            return Err(Error::InvalidWorld(format!("non-finite mean {mean}")));
        }
        if !cov.is_spd() {
            return Err(Error::InvalidWorld(format!("covariance {cov:?} is not SPD")));
        }
        Ok(GaussianComponent { mean, cov })
    }

    pub fn log_pdf(&self, x: Vec2) -> f64 {
        PreparedGaussian::new(self).log_pdf(x)
    }
}

/// Gaussian with its precision matrix and normalizer precomputed.
#[derive(Debug, Clone, Copy)]
pub(crate) struct PreparedGaussian {
    pub mean: Vec2,
    pub precision: Mat2,
    pub log_norm: f64,
}

impl PreparedGaussian {
    pub fn new(c: &GaussianComponent) -> Self {
        let det = c.cov.det();
        // Covariances are validated SPD on construction.
        let precision = c.cov.inverse().expect("SPD covariance is invertible");
        PreparedGaussian {
            mean: c.mean,
            precision,
            log_norm: -(2.0 * PI).ln() - 0.5 * det.ln(),
        }
    }

    pub fn log_pdf(&self, x: Vec2) -> f64 {
        let d = x - self.mean;
        self.log_norm - 0.5 * d.dot(self.precision.apply(d))
    }

    /// Gradient of `log_pdf` at `x`.
    pub fn score(&self, x: Vec2) -> Vec2 {
        -self.precision.apply(x - self.mean)
    }
}

/// Weighted mixture of 2D Gaussians.
#[derive(Debug, Clone, PartialEq)]
pub struct Mixture {
    components: Vec<GaussianComponent>,
    weights: Vec<f64>,
}

const WEIGHT_SUM_TOL: f64 = 1e-12;

impl Mixture {
    pub fn new(components: Vec<GaussianComponent>, weights: Vec<f64>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::InvalidWorld("mixture needs at least one component".into()));
        }
        if components.len() != weights.len() {
            return Err(Error::InvalidWorld(format!(
                "{} components but {} weights",
                components.len(),
                weights.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidWorld("weights must be finite and nonnegative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::InvalidWorld(format!("weights sum to {total}, not 1")));
        }
        for c in &components {
            GaussianComponent::new(c.mean, c.cov)?;
        }
        Ok(Mixture { components, weights })
    }

    /// Single-component mixture.
    pub fn gaussian(mean: Vec2, cov: Mat2) -> Result<Self> {
        Mixture::new(vec![GaussianComponent::new(mean, cov)?], vec![1.0])
    }

    pub fn components(&self) -> &[GaussianComponent] {
        &self.components
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    /// Same weights, means multiplied by `factor`.
    pub fn scale_means(&self, factor: f64) -> Mixture {
        let components = self
            .components
            .iter()
            .map(|c| GaussianComponent {
                mean: factor * c.mean,
                cov: c.cov,
            })
            .collect();
        Mixture {
            components,
            weights: self.weights.clone(),
        }
    }

    /// Restriction to `indices` with renormalized weights.
    pub fn restrict(&self, indices: &BTreeSet<usize>) -> Result<Mixture> {
        if indices.is_empty() {
            return Err(Error::EmptyRequest("restriction to an empty component set"));
        }
        let mut components = Vec::with_capacity(indices.len());
        let mut weights = Vec::with_capacity(indices.len());
        for &i in indices {
            let c = self.components.get(i).ok_or_else(|| {
                Error::InvalidWorld(format!("component index {i} out of range"))
            })?;
            components.push(*c);
            weights.push(self.weights[i]);
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::Degenerate("restricted components carry zero weight".into()));
        }
        weights.iter_mut().for_each(|w| *w /= total);
        Ok(Mixture { components, weights })
    }

    pub(crate) fn prepared(&self) -> PreparedMixture {
        PreparedMixture {
            gaussians: self.components.iter().map(PreparedGaussian::new).collect(),
            log_weights: self.weights.iter().map(|w| w.ln()).collect(),
        }
    }

    /// `log Σᵢ wᵢ N(x; μᵢ, Σᵢ)` evaluated with log-sum-exp.
    pub fn log_density(&self, x: Vec2) -> f64 {
        self.prepared().log_density(x)
    }

    /// `∇ₓ log p(x)`.
    pub fn score(&self, x: Vec2) -> Vec2 {
        self.prepared().score(x)
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<Vec2>> {
        Ok(self.sample_labeled(n, rng)?.into_iter().map(|(p, _)| p).collect())
    }

    /// Draws points together with the index of the generating component.
    pub fn sample_labeled<R: Rng + ?Sized>(
        &self,
        n: usize,
        rng: &mut R,
    ) -> Result<Vec<(Vec2, usize)>> {
        if n == 0 {
            return Err(Error::EmptyRequest("sample count must be at least 1"));
        }
        let chol: Vec<Mat2> = self
            .components
            .iter()
            .map(|c| c.cov.cholesky().expect("validated SPD"))
            .collect();
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let k = pick_weighted(&self.weights, rng.random::<f64>());
            let z = Vec2::new(rng.sample(StandardNormal), rng.sample(StandardNormal));
            out.push((self.components[k].mean + chol[k].apply(z), k));
        }
        Ok(out)
    }
}

/// Index of the bucket containing `u ∈ [0,1)` under cumulative `weights`.
pub(crate) fn pick_weighted(weights: &[f64], u: f64) -> usize {
    let total: f64 = weights.iter().sum();
    let mut acc = 0.0;
    let target = u * total;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if target < acc {
            return i;
        }
    }
    // Round-off can leave `target` at the very top; fall back to the last
    // component with positive weight.
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

#[derive(Debug, Clone)]
pub(crate) struct PreparedMixture {
    pub gaussians: Vec<PreparedGaussian>,
    pub log_weights: Vec<f64>,
}

impl PreparedMixture {
    pub fn log_density(&self, x: Vec2) -> f64 {
        let terms: Vec<f64> = self
            .gaussians
            .iter()
            .zip(&self.log_weights)
            .map(|(g, lw)| lw + g.log_pdf(x))
            .collect();
        log_sum_exp(&terms)
    }

    pub fn score(&self, x: Vec2) -> Vec2 {
        if self.gaussians.len() == 1 {
            return self.gaussians[0].score(x);
        }
        let mut logits: Vec<f64> = self
            .gaussians
            .iter()
            .zip(&self.log_weights)
            .map(|(g, lw)| lw + g.log_pdf(x))
            .collect();
        softmax_in_place(&mut logits);
        let mut s = Vec2::ZERO;
        for (g, r) in self.gaussians.iter().zip(&logits) {
            if *r > 0.0 {
                s += *r * g.score(x);
            }
        }
        s
    }
}

pub(crate) fn log_sum_exp(terms: &[f64]) -> f64 {
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = terms.iter().map(|t| (t - max).exp()).sum();
    max + sum.ln()
}

pub(crate) fn softmax_in_place(logits: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for l in logits.iter_mut() {
        *l = (*l - max).exp();
        total += *l;
    }
    for l in logits.iter_mut() {
        *l /= total;
    }
}

/// Prompt labels and the component subsets they denote.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConceptVocabulary {
    entries: BTreeMap<String, BTreeSet<usize>>,
}

impl ConceptVocabulary {
    pub fn new(
        entries: BTreeMap<String, BTreeSet<usize>>,
        component_count: usize,
    ) -> Result<Self> {
        for (label, set) in &entries {
            if label.trim().is_empty() {
                return Err(Error::InvalidWorld("empty vocabulary label".into()));
            }
            if set.is_empty() {
                return Err(Error::InvalidWorld(format!("label `{label}` maps to no component")));
            }
            if let Some(bad) = set.iter().find(|&&i| i >= component_count) {
                return Err(Error::InvalidWorld(format!(
                    "label `{label}` references component {bad} of {component_count}"
                )));
            }
        }
        Ok(ConceptVocabulary { entries })
    }

    pub fn get(&self, label: &str) -> Result<&BTreeSet<usize>> {
        self.entries
            .get(label)
            .ok_or_else(|| Error::UnknownConcept(label.to_string()))
    }

    pub fn contains(&self, label: &str) -> bool {
        self.entries.contains_key(label)
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn entries(&self) -> &BTreeMap<String, BTreeSet<usize>> {
        &self.entries
    }

    pub fn is_fine_grained(&self, label: &str) -> Result<bool> {
        Ok(self.get(label)?.len() == 1)
    }

    pub fn fine_grained_labels(&self) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|(_, s)| s.len() == 1)
            .map(|(l, _)| l.as_str())
            .collect()
    }

    pub fn general_labels(&self) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|(_, s)| s.len() >= 2)
            .map(|(l, _)| l.as_str())
            .collect()
    }

    /// First fine-grained label (in label order) denoting exactly `component`.
    pub fn fine_label_for(&self, component: usize) -> Option<&str> {
        self.entries
            .iter()
            .find(|(_, s)| s.len() == 1 && s.contains(&component))
            .map(|(l, _)| l.as_str())
    }

    /// Whitespace-separated words across all labels, sorted and deduplicated.
    pub fn tokens(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self
            .entries
            .keys()
            .flat_map(|l| l.split_whitespace())
            .collect();
        set.into_iter().map(str::to_string).collect()
    }
}

/// The mixture together with its vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub mixture: Mixture,
    pub vocabulary: ConceptVocabulary,
}

impl World {
    pub fn new(mixture: Mixture, vocabulary: ConceptVocabulary) -> Result<Self> {
        // Re-validate indices against this mixture.
        let vocabulary = ConceptVocabulary::new(vocabulary.entries, mixture.len())?;
        Ok(World { mixture, vocabulary })
    }

    pub fn conditional(&self, prompt: &str) -> Result<Mixture> {
        conditional_mixture(&self.mixture, &self.vocabulary, prompt)
    }

    /// Mixture for an optional condition; `None` is the full world.
    pub fn for_condition(&self, condition: Option<&str>) -> Result<Mixture> {
        match condition {
            Some(c) => self.conditional(c),
            None => Ok(self.mixture.clone()),
        }
    }

    /// Prior mass of a label: summed weight of its components.
    pub fn prior(&self, label: &str) -> Result<f64> {
        let w = self.mixture.weights();
        Ok(self.vocabulary.get(label)?.iter().map(|&i| w[i]).sum())
    }

    pub fn scale_means(&self, factor: f64) -> World {
        World {
            mixture: self.mixture.scale_means(factor),
            vocabulary: self.vocabulary.clone(),
        }
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let file: WorldFile = serde_json::from_str(s)?;
        file.into_world()
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&WorldFile::from_world(self))?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut s = String::new();
        std::fs::File::open(path)?.read_to_string(&mut s)?;
        World::from_json_str(&s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json_string()? + "\n")?;
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ComponentFile {
    mean: [f64; 2],
    cov: [[f64; 2]; 2],
}

/// On-disk world description.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WorldFile {
    components: Vec<ComponentFile>,
    weights: Vec<f64>,
    vocabulary: BTreeMap<String, Vec<usize>>,
}

impl WorldFile {
    fn into_world(self) -> Result<World> {
        let components = self
            .components
            .iter()
            .map(|c| {
                let cov = Mat2::new(c.cov[0][0], c.cov[0][1], c.cov[1][0], c.cov[1][1]);
                GaussianComponent::new(Vec2::new(c.mean[0], c.mean[1]), cov)
            })
            .collect::<Result<Vec<_>>>()?;
        let mixture = Mixture::new(components, self.weights)?;
        let entries = self
            .vocabulary
            .into_iter()
            .map(|(k, v)| (k, v.into_iter().collect()))
            .collect();
        let vocabulary = ConceptVocabulary::new(entries, mixture.len())?;
        Ok(World { mixture, vocabulary })
    }

    fn from_world(w: &World) -> Self {
        WorldFile {
            components: w
                .mixture
                .components()
                .iter()
                .map(|c| ComponentFile {
                    mean: [c.mean.x, c.mean.y],
                    cov: [[c.cov.a, c.cov.b], [c.cov.c, c.cov.d]],
                })
                .collect(),
            weights: w.mixture.weights().to_vec(),
            vocabulary: w
                .vocabulary
                .entries()
                .iter()
                .map(|(k, v)| (k.clone(), v.iter().copied().collect()))
                .collect(),
        }
    }
}

/// Component indices of the quadrant world, in storage order.
pub mod quadrant {
    pub const WHITE_DOG: usize = 0;
    pub const BLACK_DOG: usize = 1;
    pub const WHITE_CAT: usize = 2;
    pub const BLACK_CAT: usize = 3;
}

/// Four equal-weight Gaussians with covariance 0.7·I, one per quadrant,
/// labelled with colour/animal prompts.
pub fn build_quadrant_world() -> (Mixture, ConceptVocabulary) {
    use quadrant::*;
    let cov = Mat2::scaled_identity(0.7);
    let means = [(-3.0, 3.0), (-3.0, -3.0), (3.0, 3.0), (3.0, -3.0)];
    let components = means
        .iter()
        .map(|&(x, y)| GaussianComponent {
            mean: Vec2::new(x, y),
            cov,
        })
        .collect();
    let mixture = Mixture {
        components,
        weights: vec![0.25; 4],
    };
    let mut entries: BTreeMap<String, BTreeSet<usize>> = BTreeMap::new();
    let mut put = |label: &str, idx: &[usize]| {
        entries.insert(label.to_string(), idx.iter().copied().collect());
    };
    put("white cat", &[WHITE_CAT]);
    put("white dog", &[WHITE_DOG]);
    put("black dog", &[BLACK_DOG]);
    put("black cat", &[BLACK_CAT]);
    put("cat", &[WHITE_CAT, BLACK_CAT]);
    put("dog", &[WHITE_DOG, BLACK_DOG]);
    put("white", &[WHITE_CAT, WHITE_DOG]);
    put("black", &[BLACK_CAT, BLACK_DOG]);
    let vocab = ConceptVocabulary::new(entries, 4).expect("static vocabulary is valid");
    (mixture, vocab)
}

pub fn quadrant_world() -> World {
    let (mixture, vocabulary) = build_quadrant_world();
    World { mixture, vocabulary }
}

/// The mixture restricted to the components a prompt denotes.
pub fn conditional_mixture(m: &Mixture, v: &ConceptVocabulary, prompt: &str) -> Result<Mixture> {
    m.restrict(v.get(prompt)?)
}

pub fn log_density(m: &Mixture, x: Vec2) -> f64 {
    m.log_density(x)
}

/// Provenance attached to a set of generated or drawn points.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SampleMeta {
    pub condition: Option<String>,
    pub guidance: String,
    pub seed: u64,
    pub sampler: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub points: Vec<Vec2>,
    pub meta: SampleMeta,
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        write_points_csv(&self.points, w)
    }

    /// Writes `path` as CSV and a JSON manifest next to it.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))?;
        let manifest = serde_json::to_string_pretty(&self.meta)?;
        std::fs::write(manifest_path(path), manifest + "\n")?;
        Ok(())
    }

    /// Reads a CSV written by [`SampleSet::save`]; the manifest is optional.
    pub fn load(path: &Path) -> Result<Self> {
        let points = read_points_csv(std::fs::File::open(path)?)?;
        let mpath = manifest_path(path);
        let meta = if mpath.exists() {
            serde_json::from_str(&std::fs::read_to_string(mpath)?)?
        } else {
            SampleMeta::default()
        };
        Ok(SampleSet { points, meta })
    }
}

/// `samples.csv` → `samples.manifest.json`.
pub fn manifest_path(path: &Path) -> std::path::PathBuf {
    path.with_extension("manifest.json")
}

pub fn write_points_csv<W: Write>(points: &[Vec2], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["x", "y"])?;
    for p in points {
        wtr.write_record([p.x.to_string(), p.y.to_string()])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_points_csv<R: Read>(r: R) -> Result<Vec<Vec2>> {
    let fs = crate::metrics::FeatureSet::from_csv(r)?;
    if fs.dim() != 2 {
        return Err(Error::Parse(format!("expected 2 columns, found {}", fs.dim())));
    }
    Ok(fs.rows().map(|r| Vec2::new(r[0], r[1])).collect())
}

/// Draws `n` i.i.d. points from `m`.
pub fn sample_mixture<R: Rng + ?Sized>(m: &Mixture, n: usize, rng: &mut R) -> Result<SampleSet> {
    Ok(SampleSet {
        points: m.sample(n, rng)?,
        meta: SampleMeta {
            condition: None,
            guidance: "none".into(),
            seed: 0,
            sampler: "mixture".into(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadrant_world_layout() {
        let (m, v) = build_quadrant_world();
        assert_eq!(m.components()[0].mean, Vec2::new(-3.0, 3.0));
        assert_eq!(m.components()[0].cov, Mat2::diag(0.7, 0.7));
        assert_eq!(m.weights(), &[0.25; 4]);
        let dog = v.get("dog").unwrap();
        let expected: BTreeSet<usize> = [quadrant::WHITE_DOG, quadrant::BLACK_DOG].into();
        assert_eq!(dog, &expected);
        // white cat lives in quadrant I
        let wc = m.components()[*v.get("white cat").unwrap().first().unwrap()].mean;
        assert!(wc.x > 0.0 && wc.y > 0.0);
        assert_eq!(v.fine_grained_labels().len(), 4);
        assert_eq!(v.general_labels().len(), 4);
    }

    #[test]
    fn conditional_restriction() {
        let (m, v) = build_quadrant_world();
        let wd = conditional_mixture(&m, &v, "white dog").unwrap();
        assert_eq!(wd.len(), 1);
        assert_eq!(wd.weights(), &[1.0]);
        let cat = conditional_mixture(&m, &v, "cat").unwrap();
        assert_eq!(cat.weights(), &[0.5, 0.5]);
        assert!(matches!(
            conditional_mixture(&m, &v, "zebra"),
            Err(Error::UnknownConcept(_))
        ));
    }

    #[test]
    fn log_density_closed_forms() {
        let g = Mixture::gaussian(Vec2::ZERO, Mat2::IDENTITY).unwrap();
        assert!((g.log_density(Vec2::ZERO) + (2.0 * PI).ln()).abs() < 1e-12);
        assert!((g.log_density(Vec2::ZERO) - (-1.837877)).abs() < 1e-6);

        let c = |x| GaussianComponent::new(Vec2::new(x, 0.0), Mat2::IDENTITY).unwrap();
        let two = Mixture::new(vec![c(3.0), c(-3.0)], vec![0.5, 0.5]).unwrap();
        let expected = (0.5 / (2.0 * PI) * (1.0 + (-18.0f64).exp())).ln();
        assert!((two.log_density(Vec2::new(3.0, 0.0)) - expected).abs() < 1e-12);

        let (world, _) = build_quadrant_world();
        let far = world.log_density(Vec2::new(100.0, 100.0));
        assert!(far.is_finite() && far < -1e3);
    }

    #[test]
    fn invalid_mixtures_rejected() {
        let c = GaussianComponent::new(Vec2::ZERO, Mat2::IDENTITY).unwrap();
        assert!(Mixture::new(vec![c], vec![0.9]).is_err());
        assert!(Mixture::new(vec![], vec![]).is_err());
        assert!(Mixture::new(vec![c, c], vec![1.5, -0.5]).is_err());
        assert!(GaussianComponent::new(Vec2::ZERO, Mat2::new(1.0, 0.5, 0.4, 1.0)).is_err());
        assert!(GaussianComponent::new(Vec2::ZERO, Mat2::new(1.0, 2.0, 2.0, 1.0)).is_err());
    }

    #[test]
    fn sampling_is_seeded() {
        let (m, _) = build_quadrant_world();
        let a = sample_mixture(&m, 10_000, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let b = sample_mixture(&m, 10_000, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(a.points, b.points);
        assert!(matches!(
            sample_mixture(&m, 0, &mut ChaCha8Rng::seed_from_u64(7)),
            Err(Error::EmptyRequest(_))
        ));
    }

    #[test]
    fn sample_mean_of_standard_normal() {
        let n = 100_000;
        let g = Mixture::gaussian(Vec2::ZERO, Mat2::IDENTITY).unwrap();
        let pts = g.sample(n, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let mean = pts.iter().fold(Vec2::ZERO, |a, p| a + *p);
        let mean = (1.0 / n as f64) * mean;
        // 3σ/√n bound for unit variance
        let bound = 3.0 / (n as f64).sqrt();
        assert!(bound <= 0.02);
        assert!(mean.x.abs() < bound && mean.y.abs() < bound, "{mean}");
    }

    #[test]
    fn quadrant_counts_concentrate() {
        let (m, _) = build_quadrant_world();
        let pts = m.sample(10_000, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let mut counts = [0usize; 4];
        for p in &pts {
            let q = match (p.x >= 0.0, p.y >= 0.0) {
                (true, true) => 0,
                (false, true) => 1,
                (false, false) => 2,
                (true, false) => 3,
            };
            counts[q] += 1;
        }
        // Binomial(10⁴, 1/4): σ ≈ 43.3, so ±200 is > 4σ. Leakage across
        // axes is ~1e-4 per point at distance 3 with σ² = 0.7.
        for c in counts {
            assert!((2300..=2700).contains(&c), "{counts:?}");
        }
    }

    #[test]
    fn density_integrates_to_one() {
        let (m, _) = build_quadrant_world();
        let pm = m.prepared();
        let n = 800;
        let h = 20.0 / n as f64;
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..n {
                let x = Vec2::new(-10.0 + (i as f64 + 0.5) * h, -10.0 + (j as f64 + 0.5) * h);
                total += pm.log_density(x).exp();
            }
        }
        assert!((total * h * h - 1.0).abs() < 1e-3, "{}", total * h * h);
    }

    #[test]
    fn world_json_roundtrip_and_validation() {
        let w = quadrant_world();
        let s = w.to_json_string().unwrap();
        assert_eq!(World::from_json_str(&s).unwrap(), w);
        let bad = r#"{"components":[{"mean":[0,0],"cov":[[1,0],[0,1]]}],"weights":[1.0],"vocabulary":{"a":[3]}}"#;
        assert!(World::from_json_str(bad).is_err());
        let asym = r#"{"components":[{"mean":[0,0],"cov":[[1,0.2],[0,1]]}],"weights":[1.0],"vocabulary":{"a":[0]}}"#;
        assert!(World::from_json_str(asym).is_err());
    }

    #[test]
    fn tokens_cover_labels() {
        let (_, v) = build_quadrant_world();
        assert_eq!(v.tokens(), vec!["black", "cat", "dog", "white"]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn world_with_weights(raw: [f64; 4]) -> World {
            let total: f64 = raw.iter().sum();
            let (m, v) = build_quadrant_world();
            let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
            let weights = {
                // force an exact simplex for validation
                let s: f64 = weights.iter().sum();
                weights.iter().map(|w| w / s).collect()
            };
            World::new(Mixture::new(m.components().to_vec(), weights).unwrap(), v).unwrap()
        }

        proptest! {
            #[test]
            fn conditional_weights_sum_to_one(raw in proptest::array::uniform4(0.05f64..1.0)) {
                let w = world_with_weights(raw);
                for label in w.vocabulary.labels() {
                    let c = w.conditional(label).unwrap();
                    let s: f64 = c.weights().iter().sum();
                    prop_assert!((s - 1.0).abs() < 1e-12);
                }
            }

            #[test]
            fn general_density_decomposes(
                raw in proptest::array::uniform4(0.05f64..1.0),
                x in -8.0f64..8.0, y in -8.0f64..8.0,
            ) {
                let w = world_with_weights(raw);
                let p = Vec2::new(x, y);
                for g in w.vocabulary.general_labels() {
                    let dens = w.conditional(g).unwrap().log_density(p).exp();
                    let mut acc = 0.0;
                    let mut prior = 0.0;
                    for &i in w.vocabulary.get(g).unwrap() {
                        let fine = w.vocabulary.fine_label_for(i).unwrap();
                        let wi = w.prior(fine).unwrap();
                        acc += wi * w.conditional(fine).unwrap().log_density(p).exp();
                        prior += wi;
                    }
                    let expected = acc / prior;
                    prop_assert!((dens - expected).abs() <= 1e-12 * expected.max(1e-300) + 1e-300);
                }
            }
        }
    }
}
