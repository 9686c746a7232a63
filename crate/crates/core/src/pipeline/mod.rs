//! Prompt-complexity benchmark construction: pair captions with similar
//! images per complexity level, align the image pool across levels, sample
//! captions and fix the per-prompt generation count.

mod align;
pub mod fixture;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::{BufRead, BufReader, Read};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeds::{substream, Stream};

pub use align::{align, common_images, union_images, AlignOutcome};

/// One image with its embedding and per-level captions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingRecord {
    pub image_id: String,
    pub embedding: Vec<f64>,
    /// Complexity level (as a decimal string) → caption.
    pub captions: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption_embeddings: Option<BTreeMap<String, Vec<f64>>>,
}

impl EmbeddingRecord {
    pub fn caption(&self, level: usize) -> Option<&str> {
        self.captions.get(&level.to_string()).map(String::as_str)
    }

    pub fn caption_embedding(&self, level: usize) -> Option<&[f64]> {
        self.caption_embeddings
            .as_ref()?
            .get(&level.to_string())
            .map(Vec::as_slice)
    }
}

fn parse_level(key: &str) -> Result<usize> {
    key.parse::<usize>()
        .ok()
        .filter(|&k| k >= 1)
        .ok_or_else(|| Error::Parse(format!("caption level `{key}` is not a positive integer")))
}

/// Reads one record per line, skipping blank lines, and checks that ids are
/// unique, embeddings share one dimension and levels are numeric.
pub fn read_records<R: Read>(r: R) -> Result<Vec<EmbeddingRecord>> {
    let mut out: Vec<EmbeddingRecord> = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in BufReader::new(r).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: EmbeddingRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Parse(format!("line {}: {e}", i + 1)))?;
        if rec.embedding.is_empty() || rec.embedding.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parse(format!("line {}: empty or non-finite embedding", i + 1)));
        }
        if let Some(first) = out.first() {
            if first.embedding.len() != rec.embedding.len() {
                return Err(Error::Parse(format!(
                    "line {}: embedding dimension {} differs from {}",
                    i + 1,
                    rec.embedding.len(),
                    first.embedding.len()
                )));
            }
        }
        for key in rec.captions.keys() {
            parse_level(key)?;
        }
        for (key, e) in rec.caption_embeddings.iter().flatten() {
            parse_level(key)?;
            if e.len() != rec.embedding.len() || e.iter().any(|v| !v.is_finite()) {
                return Err(Error::Parse(format!(
                    "line {}: caption embedding for level {key} is malformed",
                    i + 1
                )));
            }
        }
        if !ids.insert(rec.image_id.clone()) {
            return Err(Error::Parse(format!("line {}: duplicate image id `{}`", i + 1, rec.image_id)));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn write_records(records: &[EmbeddingRecord]) -> Result<String> {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    Ok(s)
}

/// A caption and the image ids paired with it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairedCaption {
    /// Position of the caption in its level's input order.
    pub index: usize,
    pub caption: String,
    pub images: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairedLevel {
    pub level: usize,
    pub captions: Vec<PairedCaption>,
}

/// Paired captions for every level, in ascending level order.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PairedSets {
    pub levels: Vec<PairedLevel>,
}

impl PairedSets {
    /// `level → caption index → sorted ids`, the `paired.json` layout.
    pub fn to_index_map(&self) -> BTreeMap<usize, BTreeMap<usize, Vec<String>>> {
        self.levels
            .iter()
            .map(|l| {
                let m = l
                    .captions
                    .iter()
                    .map(|c| (c.index, c.images.iter().cloned().collect()))
                    .collect();
                (l.level, m)
            })
            .collect()
    }

    pub fn caption_count(&self) -> usize {
        self.levels.iter().map(|l| l.captions.len()).sum()
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Pairs every level-`level` caption with the images whose cosine
/// similarity to its embedding is at least `tau`; captions with fewer than
/// `min_pair_size` images are dropped.
pub fn pair(records: &[EmbeddingRecord], level: usize, tau: f64, min_pair_size: usize) -> Result<PairedLevel> {
    if records.is_empty() {
        return Err(Error::EmptyRequest("no records to pair"));
    }
    let mut captions = Vec::new();
    let mut index = 0;
    for r in records {
        let Some(text) = r.caption(level) else { continue };
        let emb = r.caption_embedding(level).ok_or_else(|| {
            Error::MissingEmbeddings(format!("record `{}` at level {level}", r.image_id))
        })?;
        let images: BTreeSet<String> = records
            .iter()
            .filter(|img| cosine(emb, &img.embedding) >= tau)
            .map(|img| img.image_id.clone())
            .collect();
        if images.len() >= min_pair_size {
            captions.push(PairedCaption {
                index,
                caption: text.to_string(),
                images,
            });
        }
        index += 1;
    }
    if index == 0 {
        return Err(Error::EmptyRequest("no captions at the requested level"));
    }
    Ok(PairedLevel { level, captions })
}

/// Keeps `m` captions per level, chosen uniformly without replacement and
/// kept in index order.
pub fn subsample_captions<R: Rng + ?Sized>(aligned: &PairedSets, m: usize, rng: &mut R) -> Result<PairedSets> {
    if m == 0 {
        return Err(Error::EmptyRequest("caption sample size is zero"));
    }
    let mut levels = Vec::with_capacity(aligned.levels.len());
    for l in &aligned.levels {
        if m > l.captions.len() {
            return Err(Error::InsufficientSamples {
                needed: m,
                got: l.captions.len(),
            });
        }
        let mut idx = rand::seq::index::sample(rng, l.captions.len(), m).into_vec();
        idx.sort_unstable();
        levels.push(PairedLevel {
            level: l.level,
            captions: idx.into_iter().map(|i| l.captions[i].clone()).collect(),
        });
    }
    Ok(PairedSets { levels })
}

/// Smallest image-set size over all selected captions.
pub fn compute_ngen(selected: &PairedSets) -> Result<usize> {
    selected
        .levels
        .iter()
        .flat_map(|l| l.captions.iter().map(|c| c.images.len()))
        .min()
        .ok_or(Error::EmptyRequest("no captions selected"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Number of complexity levels; `None` uses every level in the data.
    pub levels: Option<usize>,
    pub tau: f64,
    pub min_pair_size: usize,
    pub floor: usize,
    /// Captions kept per level; `None` keeps the smallest retained count.
    pub sample_m: Option<usize>,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            levels: None,
            tau: 0.85,
            min_pair_size: 20,
            floor: 20,
            sample_m: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelCounts {
    pub level: usize,
    pub captions: usize,
    pub paired: usize,
    pub aligned: usize,
    pub sampled: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineManifest {
    pub config: PipelineConfig,
    pub dataset: String,
    pub records: usize,
    pub alignment_iterations: usize,
    pub common_images: usize,
    pub levels: Vec<LevelCounts>,
    pub n_gen: usize,
    pub outputs: Vec<String>,
}

/// A caption ready for generation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptEntry {
    pub level: usize,
    pub caption_index: usize,
    pub caption: String,
    pub n_gen: usize,
}

pub const PAIRED_FILE: &str = "paired.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PROMPTS_FILE: &str = "prompts.jsonl";

/// Everything produced by [`run_records`].
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    pub manifest: PipelineManifest,
    pub selected: PairedSets,
    pub prompts: Vec<PromptEntry>,
}

fn staged<T>(stage: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.at_stage(stage))
}

fn dataset_levels(records: &[EmbeddingRecord], cfg: &PipelineConfig) -> Result<Vec<usize>> {
    let present: BTreeSet<usize> = records
        .iter()
        .flat_map(|r| r.captions.keys())
        .map(|k| parse_level(k))
        .collect::<Result<_>>()?;
    let k = match cfg.levels {
        Some(k) => k,
        None => present.iter().next_back().copied().unwrap_or(0),
    };
    if k == 0 {
        return Err(Error::EmptyRequest("dataset has no captions"));
    }
    if let Some(missing) = (1..=k).find(|l| !present.contains(l)) {
        return Err(Error::Parse(format!("no captions at level {missing}")));
    }
    Ok((1..=k).collect())
}

/// pair → align → subsample → N_gen over in-memory records.
pub fn run_records(records: &[EmbeddingRecord], cfg: &PipelineConfig, dataset: &str) -> Result<PipelineOutput> {
    if !(cfg.tau.is_finite() && (-1.0..=1.0).contains(&cfg.tau)) {
        return Err(Error::Config(format!("tau must lie in [-1, 1], got {}", cfg.tau)));
    }
    let levels = staged("pair", {
        if records.is_empty() {
            Err(Error::EmptyRequest("dataset is empty"))
        } else {
            dataset_levels(records, cfg)
        }
    })?;

    let mut paired = PairedSets::default();
    let mut captions_per_level = Vec::new();
    for &k in &levels {
        let lvl = staged("pair", pair(records, k, cfg.tau, cfg.min_pair_size))?;
        captions_per_level.push(records.iter().filter(|r| r.caption(k).is_some()).count());
        paired.levels.push(lvl);
    }

    let outcome = staged("align", align(&paired, cfg.floor))?;
    let aligned = &outcome.sets;

    let m = match cfg.sample_m {
        Some(m) => m,
        None => aligned.levels.iter().map(|l| l.captions.len()).min().unwrap_or(0),
    };
    let mut rng = substream(cfg.seed, Stream::Pipeline);
    let selected = staged("subsample", subsample_captions(aligned, m, &mut rng))?;
    let n_gen = staged("ngen", compute_ngen(&selected))?;

    let counts = levels
        .iter()
        .enumerate()
        .map(|(i, &level)| LevelCounts {
            level,
            captions: captions_per_level[i],
            paired: paired.levels[i].captions.len(),
            aligned: aligned.levels[i].captions.len(),
            sampled: selected.levels[i].captions.len(),
        })
        .collect();
    let prompts = selected
        .levels
        .iter()
        .flat_map(|l| {
            l.captions.iter().map(move |c| PromptEntry {
                level: l.level,
                caption_index: c.index,
                caption: c.caption.clone(),
                n_gen,
            })
        })
        .collect();
    let manifest = PipelineManifest {
        config: cfg.clone(),
        dataset: dataset.to_string(),
        records: records.len(),
        alignment_iterations: outcome.iterations,
        common_images: common_images(aligned).len(),
        levels: counts,
        n_gen,
        outputs: vec![PAIRED_FILE.into(), PROMPTS_FILE.into(), MANIFEST_FILE.into()],
    };
    Ok(PipelineOutput {
        manifest,
        selected,
        prompts,
    })
}

/// Runs the pipeline on a JSONL dataset and writes `paired.json`,
/// `prompts.jsonl` and `manifest.json` into `out_dir`.
pub fn run_pipeline(dataset: &Path, cfg: &PipelineConfig, out_dir: &Path) -> Result<PipelineManifest> {
    let records = staged("load", std::fs::File::open(dataset).map_err(Error::from).and_then(read_records))?;
    let name = dataset
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let out = run_records(&records, cfg, &name)?;
    staged("write", write_outputs(&out, out_dir))?;
    Ok(out.manifest)
}

fn write_outputs(out: &PipelineOutput, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let path = |f: &str| -> PathBuf { dir.join(f) };
    std::fs::write(
        path(PAIRED_FILE),
        serde_json::to_string_pretty(&out.selected.to_index_map())? + "\n",
    )?;
    let mut prompts = String::new();
    for p in &out.prompts {
        prompts.push_str(&serde_json::to_string(p)?);
        prompts.push('\n');
    }
    std::fs::write(path(PROMPTS_FILE), prompts)?;
    std::fs::write(path(MANIFEST_FILE), serde_json::to_string_pretty(&out.manifest)? + "\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn record(id: &str, emb: Vec<f64>, caption_emb: Option<Vec<f64>>) -> EmbeddingRecord {
        EmbeddingRecord {
            image_id: id.into(),
            embedding: emb,
            captions: [("1".to_string(), format!("caption {id}"))].into(),
            caption_embeddings: caption_emb.map(|e| [("1".to_string(), e)].into()),
        }
    }

    fn two_clusters() -> Vec<EmbeddingRecord> {
        (0..30)
            .map(|i| {
                let e = if i < 15 { vec![1.0, 0.0] } else { vec![0.0, 1.0] };
                record(&format!("img{i}"), e.clone(), Some(e))
            })
            .collect()
    }

    #[test]
    fn self_similarity_pairs() {
        let recs = vec![
            record("a", vec![1.0, 2.0], Some(vec![1.0, 2.0])),
            record("b", vec![-2.0, 1.0], Some(vec![5.0, 5.0])),
        ];
        let lvl = pair(&recs, 1, 0.999, 1).unwrap();
        assert!(lvl.captions[0].images.contains("a"));
    }

    #[test]
    fn disabled_threshold_pairs_everything() {
        let recs = two_clusters();
        let lvl = pair(&recs, 1, -1.0, 1).unwrap();
        assert_eq!(lvl.captions.len(), 30);
        assert!(lvl.captions.iter().all(|c| c.images.len() == 30));
    }

    #[test]
    fn orthogonal_clusters() {
        let recs = two_clusters();
        let lvl = pair(&recs, 1, 0.9, 1).unwrap();
        for c in &lvl.captions {
            let expected: BTreeSet<String> = if c.index < 15 { 0..15 } else { 15..30 }
                .map(|i| format!("img{i}"))
                .collect();
            assert_eq!(c.images, expected);
        }
        assert!(pair(&recs, 1, 0.9, 20).unwrap().captions.is_empty());
    }

    #[test]
    fn missing_embeddings() {
        let recs = vec![record("a", vec![1.0], None)];
        assert!(matches!(pair(&recs, 1, 0.5, 1), Err(Error::MissingEmbeddings(_))));
    }

    fn sets(sizes: &[usize]) -> PairedSets {
        PairedSets {
            levels: vec![PairedLevel {
                level: 1,
                captions: sizes
                    .iter()
                    .enumerate()
                    .map(|(i, &n)| PairedCaption {
                        index: i,
                        caption: String::new(),
                        images: (0..n).map(|j| j.to_string()).collect(),
                    })
                    .collect(),
            }],
        }
    }

    #[test]
    fn ngen_is_minimum() {
        assert_eq!(compute_ngen(&sets(&[20, 25, 31])).unwrap(), 20);
        assert_eq!(compute_ngen(&sets(&[20, 20])).unwrap(), 20);
        assert!(compute_ngen(&PairedSets::default()).is_err());
    }

    #[test]
    fn subsample_contract() {
        let s = sets(&[21, 22, 23, 24, 25]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(subsample_captions(&s, 5, &mut rng).unwrap(), s);
        let a = subsample_captions(&s, 2, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = subsample_captions(&s, 2, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.levels[0].captions.len(), 2);
        assert!(subsample_captions(&s, 6, &mut rng).is_err());
        assert!(subsample_captions(&s, 0, &mut rng).is_err());
    }

    #[test]
    fn subsample_is_uniform() {
        let s = sets(&[1, 2, 3, 4, 5]);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let trials = 10_000;
        let mut counts = [0usize; 5];
        for _ in 0..trials {
            let pick = subsample_captions(&s, 1, &mut rng).unwrap();
            counts[pick.levels[0].captions[0].index] += 1;
        }
        let p = 0.2;
        let sd = (trials as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - trials as f64 * p).abs() <= 3.0 * sd, "{counts:?}");
        }
    }

    #[test]
    fn record_parsing() {
        let line = r#"{"image_id":"x","embedding":[1,0],"captions":{"1":"a","2":"b"},"caption_embeddings":{"1":[1,0]}}"#;
        let recs = read_records(line.as_bytes()).unwrap();
        assert_eq!(recs[0].caption(2), Some("b"));
        assert_eq!(recs[0].caption_embedding(2), None);
        let dup = format!("{line}\n{line}\n");
        assert!(read_records(dup.as_bytes()).is_err());
        assert!(read_records(r#"{"image_id":"x","embedding":[1],"captions":{"zero":"a"}}"#.as_bytes()).is_err());
        assert!(read_records(r#"{"image_id":"x","embedding":[],"captions":{}}"#.as_bytes()).is_err());
        assert!(read_records(r#"{"image_id":"x"}"#.as_bytes()).is_err());
        let roundtrip = read_records(write_records(&recs).unwrap().as_bytes()).unwrap();
        assert_eq!(roundtrip, recs);
    }

    #[test]
    fn empty_dataset_fails_at_pairing() {
        let err = run_records(&[], &PipelineConfig::default(), "empty").unwrap_err();
        assert!(matches!(err, Error::Stage { stage: "pair", .. }), "{err}");
    }
}
