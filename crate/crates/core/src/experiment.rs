//! The general-vs-fine-grained generalization study on the quadrant world:
//! general prompts on a model trained with fine-grained prompts (OR), and
//! fine-grained prompts on a model trained with general prompts (AND).

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diffusion::{AnalyticField, NoiseSchedule, ScheduleConfig, ScoreField};
use crate::error::{Error, Result};
use crate::guidance::{CompositionSpec, GuidanceConfig, Weighting};
use crate::metrics::{
    forward_kl, frechet_distance, precision_density_coverage, subsample, vendi_score, FeatureSet,
    MetricConfig,
};
use crate::net::{train, Checkpoint, NetField, ScoreNet, TrainConfig, TrainMode, TrainReport};
use crate::sampler::{ancestral_sample, Conditioning, SampleRequest};
use crate::seeds::{substream, substream_seed, Stream};
use crate::world::{write_points_csv, SampleSet, Vec2, World};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Scenario {
    /// "cat" on a model that only saw fine-grained prompts.
    #[serde(rename = "or-general-cat")]
    OrGeneralCat,
    /// "black dog" on a model that only saw general prompts.
    #[serde(rename = "and-black-dog")]
    AndBlackDog,
}

impl Scenario {
    pub const ALL: [Scenario; 2] = [Scenario::OrGeneralCat, Scenario::AndBlackDog];

    pub fn id(self) -> &'static str {
        match self {
            Scenario::OrGeneralCat => "or-general-cat",
            Scenario::AndBlackDog => "and-black-dog",
        }
    }

    pub fn prompt(self) -> &'static str {
        match self {
            Scenario::OrGeneralCat => "cat",
            Scenario::AndBlackDog => "black dog",
        }
    }

    /// Prompts of the other granularity whose composition gives `prompt`.
    pub fn composition(self) -> CompositionSpec {
        match self {
            Scenario::OrGeneralCat => {
                CompositionSpec::or(&["white cat", "black cat"], Weighting::ExactLikelihood)
            }
            Scenario::AndBlackDog => CompositionSpec::and(&["black", "dog"]),
        }
    }

    pub fn trained_on(self) -> TrainMode {
        match self {
            Scenario::OrGeneralCat => TrainMode::FineGrained,
            Scenario::AndBlackDog => TrainMode::General,
        }
    }

    /// Published values at ω = 1 and ω = 3.
    pub fn published_values(self, omega: f64) -> Option<PublishedValues> {
        let v = |kl, fd, vs_gen, vs_ref| {
            Some(PublishedValues {
                kl,
                fd,
                vs_gen,
                vs_ref,
            })
        };
        match (self, omega) {
            (Scenario::OrGeneralCat, w) if w == 1.0 => v(1.20, 2.48, 1.43, 1.82),
            (Scenario::OrGeneralCat, w) if w == 3.0 => v(23.78, 14.41, 1.03, 1.82),
            (Scenario::AndBlackDog, w) if w == 1.0 => v(1.51, 6.64, 2.04, 1.10),
            (Scenario::AndBlackDog, w) if w == 3.0 => v(0.93, 1.32, 1.33, 1.10),
            _ => None,
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Scenario {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.id() == s)
            .ok_or_else(|| Error::Config(format!("unknown scenario `{s}`")))
    }
}

/// How the scenario prompt reaches the score field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceMode {
    /// Condition on the prompt itself.
    #[default]
    Direct,
    /// Compose the scores of the constituent prompts.
    Composed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldSource {
    Analytic,
    /// Checkpoints `fine.ckpt` and `general.ckpt` under `dir`, trained first
    /// when `train` is set and they are missing.
    Trained { dir: PathBuf, train: bool },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub scenarios: Vec<Scenario>,
    pub field: FieldSource,
    pub inference: InferenceMode,
    /// Guidance rule; its scale is replaced by each entry of `omegas`.
    pub guidance: GuidanceConfig,
    pub omegas: Vec<f64>,
    pub n: usize,
    pub seed: u64,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
    pub metrics: MetricConfig,
}

impl ExperimentSpec {
    pub fn new(field: FieldSource) -> Self {
        ExperimentSpec {
            scenarios: Scenario::ALL.to_vec(),
            field,
            inference: InferenceMode::Direct,
            guidance: GuidanceConfig::cfg(1.0),
            omegas: vec![1.0, 3.0],
            n: 10_000,
            seed: 0,
            schedule: ScheduleConfig::default(),
            train: TrainConfig::default(),
            metrics: MetricConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 100 {
            return Err(Error::Config(format!("need at least 100 samples per run, got {}", self.n)));
        }
        if self.scenarios.is_empty() || self.omegas.is_empty() {
            return Err(Error::Config("no scenarios or guidance scales requested".into()));
        }
        for &w in &self.omegas {
            self.guidance.with_omega(w).validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PublishedValues {
    pub kl: f64,
    pub fd: f64,
    pub vs_gen: f64,
    pub vs_ref: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReproductionRow {
    pub scenario: Scenario,
    pub omega: f64,
    pub kl: f64,
    pub fd: f64,
    pub vs_gen: f64,
    pub vs_ref: f64,
    pub precision: f64,
    pub density: f64,
    pub coverage: f64,
    /// Generated points, relative to the results directory.
    pub samples: String,
    pub published: Option<PublishedValues>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReproductionTable {
    pub rows: Vec<ReproductionRow>,
    /// Reference draws per scenario, relative to the results directory.
    pub references: BTreeMap<Scenario, String>,
    pub notes: Vec<String>,
    pub spec: ExperimentSpec,
}

impl ReproductionTable {
    pub fn row(&self, scenario: Scenario, omega: f64) -> Option<&ReproductionRow> {
        self.rows.iter().find(|r| r.scenario == scenario && r.omega == omega)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "scenario", "omega", "kl", "fd", "vs_gen", "vs_ref", "precision", "density", "coverage",
            "published_kl", "published_fd", "published_vs_gen", "published_vs_ref",
        ])?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            w.write_record([
                r.scenario.id().to_string(),
                r.omega.to_string(),
                r.kl.to_string(),
                r.fd.to_string(),
                r.vs_gen.to_string(),
                r.vs_ref.to_string(),
                r.precision.to_string(),
                r.density.to_string(),
                r.coverage.to_string(),
                opt(r.published.map(|p| p.kl)),
                opt(r.published.map(|p| p.fd)),
                opt(r.published.map(|p| p.vs_gen)),
                opt(r.published.map(|p| p.vs_ref)),
            ])?;
        }
        String::from_utf8(w.into_inner().map_err(|e| Error::Io(e.into_error()))?)
            .map_err(|e| Error::Parse(e.to_string()))
    }
}

/// A finished study: the table plus the point sets behind it.
#[derive(Debug, Clone)]
pub struct Reproduction {
    pub table: ReproductionTable,
    pub generated: Vec<SampleSet>,
    pub references: BTreeMap<Scenario, Vec<Vec2>>,
    pub train_reports: Vec<TrainReport>,
}

pub const TABLE_JSON: &str = "table.json";
pub const TABLE_CSV: &str = "table.csv";

fn samples_name(s: Scenario, omega: f64) -> String {
    format!("samples/{}_w{omega}.csv", s.id())
}

fn reference_name(s: Scenario) -> String {
    format!("samples/{}_reference.csv", s.id())
}

fn checkpoint_name(mode: TrainMode) -> &'static str {
    match mode {
        TrainMode::FineGrained => "fine.ckpt",
        TrainMode::General => "general.ckpt",
    }
}

/// Loads the checkpoint for `mode` from `dir`, training and saving it first
/// when it is missing and `allow_train` is set.
pub fn obtain_model(
    world: &World,
    mode: TrainMode,
    dir: &Path,
    allow_train: bool,
    cfg: &TrainConfig,
    schedule: &ScheduleConfig,
) -> Result<(Checkpoint, Option<TrainReport>)> {
    let path = dir.join(checkpoint_name(mode));
    if path.exists() {
        return Ok((Checkpoint::load(&path)?, None));
    }
    if !allow_train {
        return Err(Error::Config(format!(
            "checkpoint {} is missing; rerun with training enabled",
            path.display()
        )));
    }
    let sched = schedule.build()?;
    log::info!("training {mode:?} model ({} epochs)", cfg.epochs);
    let (net, report) = train(world, mode, cfg, &sched)?;
    let ckpt = Checkpoint {
        net,
        schedule: *schedule,
        mode: Some(mode),
        train: Some(cfg.clone()),
    };
    std::fs::create_dir_all(dir)?;
    ckpt.save(&path)?;
    log::info!("saved {} (final loss {:.4})", path.display(), report.final_loss);
    Ok((ckpt, Some(report)))
}

fn mode_seed(seed: u64, mode: TrainMode) -> u64 {
    let offset = match mode {
        TrainMode::FineGrained => 0,
        TrainMode::General => 1,
    };
    substream_seed(seed, Stream::Train).wrapping_add(offset)
}

/// Runs every scenario at every ω and scores the results.
pub fn reproduce_trends(spec: &ExperimentSpec, world: &World) -> Result<Reproduction> {
    spec.validate()?;
    let analytic_schedule = spec.schedule.build()?;
    let mut models: BTreeMap<&'static str, (ScoreNet, NoiseSchedule)> = BTreeMap::new();
    let mut train_reports = Vec::new();
    if let FieldSource::Trained { dir, train } = &spec.field {
        for s in &spec.scenarios {
            let mode = s.trained_on();
            let key = checkpoint_name(mode);
            if models.contains_key(key) {
                continue;
            }
            let cfg = TrainConfig {
                seed: mode_seed(spec.seed, mode),
                ..spec.train.clone()
            };
            let (ckpt, report) = obtain_model(world, mode, dir, *train, &cfg, &spec.schedule)?;
            train_reports.extend(report);
            let sched = ckpt.schedule.build()?;
            models.insert(key, (ckpt.net, sched));
        }
    }

    let sample_seed = substream_seed(spec.seed, Stream::Sample);
    let mut eval_rng = substream(spec.seed, Stream::Eval);
    let mut rows = Vec::new();
    let mut generated = Vec::new();
    let mut references = BTreeMap::new();
    for &scenario in &spec.scenarios {
        let target = world.conditional(scenario.prompt())?;
        let reference = target.sample(spec.n, &mut eval_rng)?;
        let ref_set = FeatureSet::from_points(&reference)?;
        let vs_ref = vendi_score(
            &subsample(&ref_set, spec.metrics.vendi_max_points, spec.metrics.seed),
            &spec.metrics.kernel,
        )?;

        let (field, schedule): (Box<dyn ScoreField + '_>, &NoiseSchedule) = match &spec.field {
            FieldSource::Analytic => (
                Box::new(AnalyticField::new(world, &analytic_schedule)),
                &analytic_schedule,
            ),
            FieldSource::Trained { .. } => {
                let (net, sched) = &models[checkpoint_name(scenario.trained_on())];
                (Box::new(NetField::new(net, sched)), sched)
            }
        };
        let conditioning = match spec.inference {
            InferenceMode::Direct => Conditioning::Label(scenario.prompt().to_string()),
            InferenceMode::Composed => Conditioning::Composite(scenario.composition()),
        };

        for &omega in &spec.omegas {
            let req = SampleRequest::new(
                conditioning.clone(),
                spec.guidance.with_omega(omega),
                spec.n,
                sample_seed,
            );
            log::info!("sampling {scenario} at omega {omega}");
            let set = ancestral_sample(field.as_ref(), schedule, &req, Some(world))?;
            let gen = FeatureSet::from_points(&set.points)?;
            let kl = forward_kl(&target, &gen, &spec.metrics.kl)?;
            let fd = frechet_distance(&ref_set, &gen)?;
            let vs_gen = vendi_score(
                &subsample(&gen, spec.metrics.vendi_max_points, spec.metrics.seed),
                &spec.metrics.kernel,
            )?;
            let prdc = precision_density_coverage(&ref_set, &gen, spec.metrics.k)?;
            rows.push(ReproductionRow {
                scenario,
                omega,
                kl,
                fd,
                vs_gen,
                vs_ref,
                precision: prdc.precision,
                density: prdc.density,
                coverage: prdc.coverage,
                samples: samples_name(scenario, omega),
                published: scenario.published_values(omega),
            });
            generated.push(set);
        }
        references.insert(scenario, reference);
    }

    let vendi_points = spec.metrics.vendi_max_points.min(spec.n);
    let notes = vec![
        format!(
            "Vendi uses an RBF kernel with bandwidth {} on the raw 2D points ({} points per set); \
             published Vendi values come from an unstated kernel and are comparable as trends only.",
            spec.metrics.kernel.bandwidth, vendi_points
        ),
        "Published values depend on training noise and unstated estimators; compare orderings and ratios.".into(),
    ];
    let table = ReproductionTable {
        rows,
        references: references.keys().map(|&s| (s, reference_name(s))).collect(),
        notes,
        spec: spec.clone(),
    };
    Ok(Reproduction {
        table,
        generated,
        references,
        train_reports,
    })
}

/// Writes `table.json`, `table.csv` and every point set under `dir`.
pub fn write_reproduction(rep: &Reproduction, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir.join("samples"))?;
    for (row, set) in rep.table.rows.iter().zip(&rep.generated) {
        set.save(&dir.join(&row.samples))?;
    }
    for (scenario, pts) in &rep.references {
        let f = std::fs::File::create(dir.join(reference_name(*scenario)))?;
        write_points_csv(pts, std::io::BufWriter::new(f))?;
    }
    std::fs::write(dir.join(TABLE_JSON), serde_json::to_string_pretty(&rep.table)? + "\n")?;
    std::fs::write(dir.join(TABLE_CSV), rep.table.to_csv()?)?;
    Ok(())
}

/// Plot-ready series derived from a results directory: one scatter CSV per
/// (scenario, ω) with generated and reference points, and one metrics CSV.
/// Every input is read before anything is written.
pub fn emit_plot_data(results: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let table_path = results.join(TABLE_JSON);
    if !table_path.exists() {
        return Err(Error::EmptyRequest("results directory has no table.json"));
    }
    let table: ReproductionTable = serde_json::from_str(&std::fs::read_to_string(&table_path)?)?;
    if table.rows.is_empty() {
        return Err(Error::EmptyRequest("results table has no rows"));
    }

    let mut refs = BTreeMap::new();
    for (scenario, rel) in &table.references {
        refs.insert(*scenario, SampleSet::load(&results.join(rel))?.points);
    }
    let mut outputs: Vec<(PathBuf, String)> = Vec::new();
    for row in &table.rows {
        let gen = SampleSet::load(&results.join(&row.samples))?.points;
        let reference = refs.get(&row.scenario).ok_or_else(|| {
            Error::Parse(format!("no reference set recorded for {}", row.scenario))
        })?;
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["set", "x", "y"])?;
        for (tag, pts) in [("generated", &gen), ("reference", reference)] {
            for p in pts.iter() {
                w.write_record([tag.to_string(), p.x.to_string(), p.y.to_string()])?;
            }
        }
        let body = String::from_utf8(w.into_inner().map_err(|e| Error::Io(e.into_error()))?)
            .map_err(|e| Error::Parse(e.to_string()))?;
        outputs.push((
            out_dir.join(format!("scatter_{}_w{}.csv", row.scenario.id(), row.omega)),
            body,
        ));
    }
    outputs.push((out_dir.join("metrics_vs_omega.csv"), table.to_csv()?));

    std::fs::create_dir_all(out_dir)?;
    for (path, body) in &outputs {
        std::fs::write(path, body)?;
    }
    Ok(outputs.into_iter().map(|(p, _)| p).collect())
}
