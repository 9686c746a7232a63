//! Sample-quality metrics over point sets of any dimension.

pub mod frechet;
pub mod kl;
pub mod linalg;
pub mod prdc;
pub mod vendi;

use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::world::{Mixture, Vec2};

pub use frechet::{frechet_distance, frechet_from_moments, GaussianMoments};
pub use kl::{forward_kl, scott_bandwidths, KlConfig, KlEstimator};
pub use prdc::{precision_density_coverage, Prdc};
pub use vendi::{subsample, vendi_score, KernelConfig};

/// `n` points of dimension `dim`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    dim: usize,
    data: Vec<f64>,
}

impl FeatureSet {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Parse("feature dimension must be at least 1".into()));
        }
        if !data.len().is_multiple_of(dim) {
            return Err(Error::Parse(format!(
                "{} values do not form rows of dimension {dim}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Parse(format!("non-finite value in row {}", i / dim)));
        }
        Ok(FeatureSet { dim, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if dim == 0 {
            return Err(Error::Parse("feature rows carry no values".into()));
        }
        if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != dim) {
            return Err(Error::Parse(format!("row {i} has {} values, expected {dim}", r.len())));
        }
        FeatureSet::new(dim, rows.concat())
    }

    pub fn from_points(points: &[Vec2]) -> Result<Self> {
        FeatureSet::new(2, points.iter().flat_map(|p| [p.x, p.y]).collect())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// The rows as 2D points; fails unless `dim == 2`.
    pub fn points(&self) -> Result<Vec<Vec2>> {
        if self.dim != 2 {
            return Err(Error::Parse(format!("expected 2D points, found dimension {}", self.dim)));
        }
        Ok(self.rows().map(|r| Vec2::new(r[0], r[1])).collect())
    }

    /// Rows selected by `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> FeatureSet {
        let data = indices.iter().flat_map(|&i| self.row(i).iter().copied()).collect();
        FeatureSet { dim: self.dim, data }
    }

    /// Numeric CSV; a first line with any non-numeric field is a header.
    pub fn from_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_reader(r);
        let mut dim = None;
        let mut data = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            if rec.iter().all(|f| f.is_empty()) {
                continue;
            }
            let parsed: std::result::Result<Vec<f64>, _> = rec.iter().map(str::parse::<f64>).collect();
            let row = match parsed {
                Ok(row) => row,
                Err(_) if line == 0 => continue,
                Err(_) => return Err(Error::Parse(format!("line {}: non-numeric field", line + 1))),
            };
            match dim {
                None => dim = Some(row.len()),
                Some(d) if d != row.len() => {
                    return Err(Error::Parse(format!(
                        "line {}: {} fields, expected {d}",
                        line + 1,
                        row.len()
                    )))
                }
                _ => {}
            }
            data.extend(row);
        }
        let dim = dim.ok_or(Error::EmptyRequest("feature file has no rows"))?;
        FeatureSet::new(dim, data)
    }

    /// One JSON array of numbers per line; blank lines are skipped.
    pub fn from_jsonl<R: Read>(r: R) -> Result<Self> {
        let mut rows = Vec::new();
        for (i, line) in BufReader::new(r).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let row: Vec<f64> = serde_json::from_str(&line)
                .map_err(|e| Error::Parse(format!("line {}: {e}", i + 1)))?;
            rows.push(row);
        }
        if rows.is_empty() {
            return Err(Error::EmptyRequest("feature file has no rows"));
        }
        FeatureSet::from_rows(&rows)
    }

    /// Reads `.jsonl`/`.json` as JSON lines and anything else as CSV.
    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("json") => FeatureSet::from_jsonl(file),
            _ => FeatureSet::from_csv(file),
        }
    }
}

/// Estimator settings, echoed into every report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricConfig {
    pub k: usize,
    pub kernel: KernelConfig,
    pub kl: KlConfig,
    /// Points used for Vendi; larger sets are subsampled deterministically.
    pub vendi_max_points: usize,
    pub seed: u64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig {
            k: 5,
            kernel: KernelConfig::default(),
            kl: KlConfig::default(),
            vendi_max_points: 1000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub kl: Option<f64>,
    pub fd: f64,
    pub vendi: f64,
    pub vendi_points: usize,
    pub precision: f64,
    pub density: f64,
    pub coverage: f64,
    pub n_reference: usize,
    pub n_generated: usize,
    pub config: MetricConfig,
}

/// All metrics of `generated` against `reference`; KL needs the reference
/// density.
pub fn evaluate(
    reference: &FeatureSet,
    generated: &FeatureSet,
    reference_density: Option<&Mixture>,
    cfg: &MetricConfig,
) -> Result<MetricReport> {
    if reference.dim() != generated.dim() {
        return Err(Error::Parse(format!(
            "dimension mismatch: reference {} vs generated {}",
            reference.dim(),
            generated.dim()
        )));
    }
    let kl = reference_density
        .map(|m| forward_kl(m, generated, &cfg.kl))
        .transpose()?;
    let fd = frechet_distance(reference, generated)?;
    let vs_set = subsample(generated, cfg.vendi_max_points, cfg.seed);
    let vendi = vendi_score(&vs_set, &cfg.kernel)?;
    let prdc = precision_density_coverage(reference, generated, cfg.k)?;
    Ok(MetricReport {
        kl,
        fd,
        vendi,
        vendi_points: vs_set.len(),
        precision: prdc.precision,
        density: prdc.density,
        coverage: prdc.coverage,
        n_reference: reference.len(),
        n_generated: generated.len(),
        config: cfg.clone(),
    })
}
