//! `complab` command-line front end.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use complab::diffusion::{AnalyticField, NoiseSchedule, ScheduleConfig};
use complab::experiment::{
    emit_plot_data, reproduce_trends, write_reproduction, ExperimentSpec, FieldSource, InferenceMode,
    Scenario,
};
use complab::guidance::{CompositionSpec, GuidanceConfig};
use complab::metrics::{evaluate, FeatureSet, KlEstimator, MetricConfig};
use complab::net::{train, Checkpoint, NetField, TrainConfig, TrainMode};
use complab::pipeline::{run_pipeline, PipelineConfig};
use complab::sampler::{ancestral_sample, Conditioning, PosteriorVariance, SampleRequest};
use complab::world::{quadrant_world, Mixture, World};
use complab::{Error, ErrorClass};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

#[derive(Debug, Parser)]
#[command(name = "complab", version, about = "Prompt-complexity laboratory for conditional diffusion")]
struct Cli {
    /// Root seed; every random draw derives from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file or directory (meaning depends on the command).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// JSON file with the command's configuration; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// World definitions.
    #[command(subcommand)]
    World(WorldCommand),
    /// Train a noise-prediction network.
    Train(TrainArgs),
    /// Draw samples with guidance or composition.
    Sample(SampleArgs),
    /// Score a generated feature set against a reference set.
    Eval(EvalArgs),
    /// Benchmark dataset construction.
    #[command(subcommand)]
    Pipeline(PipelineCommand),
    /// Reproduction studies.
    #[command(subcommand)]
    Reproduce(ReproduceCommand),
    /// Plot-ready CSV series from a reproduction results directory.
    EmitPlots(EmitPlotsArgs),
}

#[derive(Debug, Subcommand)]
enum WorldCommand {
    /// Write the quadrant world as JSON.
    Init(WorldInitArgs),
}

#[derive(Debug, Args)]
struct WorldInitArgs {
    /// Multiply every component mean by this factor [default: 1].
    #[arg(long)]
    scale: Option<f64>,
    /// Component weights in storage order (white dog, black dog, white cat,
    /// black cat).
    #[arg(long, value_delimiter = ',')]
    weights: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Fine,
    General,
}

impl From<ModeArg> for TrainMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Fine => TrainMode::FineGrained,
            ModeArg::General => TrainMode::General,
        }
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Label assignment used for training.
    #[arg(long, value_enum)]
    mode: ModeArg,
    /// World JSON; defaults to the quadrant world.
    #[arg(long)]
    world: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    dataset_size: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    cond_drop_prob: Option<f64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum VarianceArg {
    Beta,
    BetaTilde,
}

#[derive(Debug, Args)]
struct SampleArgs {
    /// `analytic` or `checkpoint:PATH`.
    #[arg(long, default_value = "analytic")]
    field: String,
    /// World JSON for the analytic field, exact OR weights and expansion.
    #[arg(long)]
    world: Option<PathBuf>,
    /// Conditioning label; omit for unconditional sampling.
    #[arg(long, conflicts_with = "compose")]
    condition: Option<String>,
    /// `cfg:ω`, `apg:η,r,β,ω`, `cads:τ1,τ2,s,φ,ω` or `interval:lo,hi,ω`
    /// [default: cfg:1].
    #[arg(long)]
    guidance: Option<String>,
    /// `or-exact:L1,L2,...`, `or-uniform:...` or `and:...`.
    #[arg(long)]
    compose: Option<String>,
    /// Replace a general label by an oracle-drawn fine-grained one.
    #[arg(long)]
    expand_oracle: bool,
    /// Number of samples [default: 1000].
    #[arg(long)]
    n: Option<usize>,
    /// Reverse-step noise variance [default: beta].
    #[arg(long, value_enum)]
    variance: Option<VarianceArg>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum KlEstimatorArg {
    SmoothingMatched,
    PlugIn,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Reference features (CSV or JSONL).
    #[arg(long)]
    reference: PathBuf,
    /// Generated features (CSV or JSONL).
    #[arg(long)]
    generated: PathBuf,
    /// Label whose true density is the KL reference; `unconditional` uses
    /// the whole world. Omit to skip KL.
    #[arg(long)]
    kl_condition: Option<String>,
    /// World JSON for the KL density; defaults to the quadrant world.
    #[arg(long)]
    world: Option<PathBuf>,
    /// Neighbours for precision/density/coverage.
    #[arg(long)]
    k: Option<usize>,
    /// RBF bandwidth of the Vendi kernel.
    #[arg(long)]
    kernel_bandwidth: Option<f64>,
    #[arg(long)]
    vendi_max_points: Option<usize>,
    #[arg(long, value_enum)]
    kl_estimator: Option<KlEstimatorArg>,
    #[arg(long)]
    kl_reference_samples: Option<usize>,
    #[arg(long)]
    kl_bandwidth_floor: Option<f64>,
}

#[derive(Debug, Subcommand)]
enum PipelineCommand {
    /// Pair, align and subsample a JSONL embedding dataset.
    Run(PipelineArgs),
}

#[derive(Debug, Args)]
struct PipelineArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    levels: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    min_pair_size: Option<usize>,
    #[arg(long)]
    floor: Option<usize>,
    #[arg(long)]
    sample_m: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum ReproduceCommand {
    /// General- vs fine-grained-prompt generalization study.
    #[command(name = "section2")]
    Trends(ReproduceArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum InferenceArg {
    Direct,
    Composed,
}

#[derive(Debug, Args)]
struct ReproduceArgs {
    /// Use the exact score instead of trained networks.
    #[arg(long, conflicts_with_all = ["models", "train"])]
    analytic: bool,
    /// Checkpoint directory (`fine.ckpt`, `general.ckpt`).
    #[arg(long)]
    models: Option<PathBuf>,
    /// Train missing checkpoints.
    #[arg(long)]
    train: bool,
    /// Scenario ids; defaults to all.
    #[arg(long, value_delimiter = ',')]
    scenarios: Option<Vec<String>>,
    #[arg(long, value_enum)]
    inference: Option<InferenceArg>,
    /// Guidance rule; its ω is replaced by each entry of `--omegas`.
    #[arg(long)]
    guidance: Option<String>,
    #[arg(long, value_delimiter = ',')]
    omegas: Option<Vec<f64>>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    dataset_size: Option<usize>,
}

#[derive(Debug, Args)]
struct EmitPlotsArgs {
    /// Directory written by `reproduce section2`.
    #[arg(long)]
    results: PathBuf,
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Error::Config(msg.into()).into()
}

/// Default configuration overlaid with the `--config` JSON object.
fn configured<T: Serialize + DeserializeOwned>(base: T, path: Option<&Path>) -> Result<T> {
    let Some(path) = path else {
        return Ok(base);
    };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let overlay: Value = serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let mut merged = serde_json::to_value(base)?;
    merge(&mut merged, overlay);
    serde_json::from_value(merged).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, o) => *b = o,
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn out_path(cli_out: &Option<PathBuf>, default: &str) -> PathBuf {
    cli_out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}"))
}

/// `{command, version, seed, config, outputs}` next to the command's output.
fn write_manifest(path: &Path, command: &str, seed: u64, config: &impl Serialize, outputs: &[&Path]) -> Result<()> {
    let body = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "seed": seed,
        "config": config,
        "outputs": outputs.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
    });
    std::fs::write(path, serde_json::to_string_pretty(&body)? + "\n")
        .with_context(|| format!("writing {}", path.display()))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    Ok(())
}

fn load_world(path: Option<&Path>) -> Result<World> {
    match path {
        Some(p) => Ok(World::load(p)?),
        None => Ok(quadrant_world()),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct WorldInitConfig {
    scale: f64,
    weights: Option<Vec<f64>>,
}

fn world_init(cli: &Cli, args: &WorldInitArgs) -> Result<()> {
    let base = WorldInitConfig {
        scale: 1.0,
        weights: None,
    };
    let mut cfg: WorldInitConfig = configured(base, cli.config.as_deref())?;
    set(&mut cfg.scale, args.scale);
    if args.weights.is_some() {
        cfg.weights = args.weights.clone();
    }
    if !(cfg.scale.is_finite() && cfg.scale > 0.0) {
        return Err(usage(format!("--scale must be positive, got {}", cfg.scale)));
    }
    let base = quadrant_world().scale_means(cfg.scale);
    let world = match &cfg.weights {
        Some(w) => World::new(
            Mixture::new(base.mixture.components().to_vec(), w.clone())?,
            base.vocabulary.clone(),
        )?,
        None => base,
    };
    let out = out_path(&cli.out, "world.json");
    ensure_parent(&out)?;
    world.save(&out)?;
    let config = json!({ "scale": cfg.scale, "weights": world.mixture.weights() });
    write_manifest(&with_suffix(&out, "manifest.json"), "world init", cli.seed.unwrap_or(0), &config, &[&out])?;
    println!("wrote {}", out.display());
    Ok(())
}

fn train_cmd(cli: &Cli, args: &TrainArgs) -> Result<()> {
    let world = load_world(args.world.as_deref())?;
    let mut cfg: TrainConfig = configured(TrainConfig::default(), cli.config.as_deref())?;
    set(&mut cfg.seed, cli.seed);
    set(&mut cfg.epochs, args.epochs);
    set(&mut cfg.dataset_size, args.dataset_size);
    set(&mut cfg.batch_size, args.batch_size);
    set(&mut cfg.learning_rate, args.learning_rate);
    set(&mut cfg.cond_drop_prob, args.cond_drop_prob);
    let mode = TrainMode::from(args.mode);
    let schedule = ScheduleConfig::default();
    let (net, report) = train(&world, mode, &cfg, &schedule.build()?)?;
    let out = out_path(&cli.out, "model.ckpt");
    ensure_parent(&out)?;
    Checkpoint {
        net,
        schedule,
        mode: Some(mode),
        train: Some(cfg.clone()),
    }
    .save(&out)?;
    let report_path = with_suffix(&out, "report.json");
    std::fs::write(&report_path, serde_json::to_string_pretty(&report)? + "\n")?;
    let config = json!({ "mode": mode, "train": cfg, "schedule": schedule, "world": args.world });
    write_manifest(
        &with_suffix(&out, "manifest.json"),
        "train",
        cfg.seed,
        &config,
        &[&out, &report_path],
    )?;
    println!(
        "trained {mode:?} model: final loss {:.5}, {} steps, {:.1}s -> {}",
        report.final_loss,
        report.steps,
        report.wall_time_secs,
        out.display()
    );
    Ok(())
}

enum FieldChoice {
    Analytic,
    Checkpoint(PathBuf),
}

fn parse_field(s: &str) -> Result<FieldChoice> {
    match s.split_once(':') {
        None if s == "analytic" => Ok(FieldChoice::Analytic),
        Some(("checkpoint", p)) if !p.is_empty() => Ok(FieldChoice::Checkpoint(PathBuf::from(p))),
        _ => Err(usage(format!("--field must be `analytic` or `checkpoint:PATH`, got `{s}`"))),
    }
}

fn sample_cmd(cli: &Cli, args: &SampleArgs) -> Result<()> {
    let base = SampleRequest::new(Conditioning::Unconditional, GuidanceConfig::cfg(1.0), 1000, 0);
    let mut req: SampleRequest = configured(base, cli.config.as_deref())?;
    match (&args.condition, &args.compose) {
        (_, Some(c)) => req.conditioning = Conditioning::Composite(c.parse::<CompositionSpec>()?),
        (Some(l), None) => req.conditioning = Conditioning::Label(l.clone()),
        (None, None) => {}
    }
    if let Some(g) = &args.guidance {
        req.guidance = g.parse()?;
    }
    req.expand_oracle |= args.expand_oracle;
    set(&mut req.n, args.n);
    set(&mut req.seed, cli.seed);
    set(
        &mut req.variance,
        args.variance.map(|v| match v {
            VarianceArg::Beta => PosteriorVariance::Beta,
            VarianceArg::BetaTilde => PosteriorVariance::BetaTilde,
        }),
    );
    let world = load_world(args.world.as_deref())?;
    let (set, schedule) = match parse_field(&args.field)? {
        FieldChoice::Analytic => {
            let schedule = ScheduleConfig::default();
            let sched = schedule.build()?;
            let field = AnalyticField::new(&world, &sched);
            (ancestral_sample(&field, &sched, &req, Some(&world))?, schedule)
        }
        FieldChoice::Checkpoint(path) => {
            let ckpt = Checkpoint::load(&path)?;
            let sched: NoiseSchedule = ckpt.schedule.build()?;
            let field = NetField::new(&ckpt.net, &sched);
            (ancestral_sample(&field, &sched, &req, Some(&world))?, ckpt.schedule)
        }
    };
    let out = out_path(&cli.out, "samples.csv");
    ensure_parent(&out)?;
    set.save(&out)?;
    let config = json!({
        "field": args.field,
        "world": args.world,
        "request": req,
        "schedule": schedule,
        "meta": set.meta,
    });
    write_manifest(&with_suffix(&out, "run.json"), "sample", req.seed, &config, &[&out])?;
    println!("wrote {} samples to {}", set.len(), out.display());
    Ok(())
}

fn eval_cmd(cli: &Cli, args: &EvalArgs) -> Result<()> {
    let mut cfg: MetricConfig = configured(MetricConfig::default(), cli.config.as_deref())?;
    set(&mut cfg.seed, cli.seed);
    set(&mut cfg.k, args.k);
    set(&mut cfg.kernel.bandwidth, args.kernel_bandwidth);
    set(&mut cfg.vendi_max_points, args.vendi_max_points);
    set(
        &mut cfg.kl.estimator,
        args.kl_estimator.map(|e| match e {
            KlEstimatorArg::SmoothingMatched => KlEstimator::SmoothingMatched,
            KlEstimatorArg::PlugIn => KlEstimator::PlugIn,
        }),
    );
    set(&mut cfg.kl.reference_samples, args.kl_reference_samples);
    set(&mut cfg.kl.bandwidth_floor, args.kl_bandwidth_floor);
    let reference = FeatureSet::load(&args.reference)?;
    let generated = FeatureSet::load(&args.generated)?;
    let density = match &args.kl_condition {
        None => None,
        Some(label) => {
            let world = load_world(args.world.as_deref())?;
            Some(if label == "unconditional" {
                world.mixture.clone()
            } else {
                world.conditional(label)?
            })
        }
    };
    let report = evaluate(&reference, &generated, density.as_ref(), &cfg)?;
    let out = out_path(&cli.out, "report.json");
    ensure_parent(&out)?;
    let body = json!({
        "report": report,
        "reference": args.reference,
        "generated": args.generated,
        "kl_condition": args.kl_condition,
        "world": args.world,
    });
    std::fs::write(&out, serde_json::to_string_pretty(&body)? + "\n")?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn pipeline_cmd(cli: &Cli, args: &PipelineArgs) -> Result<()> {
    let mut cfg: PipelineConfig = configured(PipelineConfig::default(), cli.config.as_deref())?;
    set(&mut cfg.seed, cli.seed);
    if args.levels.is_some() {
        cfg.levels = args.levels;
    }
    set(&mut cfg.tau, args.tau);
    set(&mut cfg.min_pair_size, args.min_pair_size);
    set(&mut cfg.floor, args.floor);
    if args.sample_m.is_some() {
        cfg.sample_m = args.sample_m;
    }
    let out = out_path(&cli.out, "pipeline-out");
    let manifest = run_pipeline(&args.data, &cfg, &out)?;
    for l in &manifest.levels {
        println!(
            "level {}: {} captions, {} paired, {} aligned, {} sampled",
            l.level, l.captions, l.paired, l.aligned, l.sampled
        );
    }
    println!(
        "{} common images after {} alignment passes; N_gen = {}",
        manifest.common_images, manifest.alignment_iterations, manifest.n_gen
    );
    Ok(())
}

fn reproduce_cmd(cli: &Cli, args: &ReproduceArgs) -> Result<()> {
    let field = if args.analytic {
        FieldSource::Analytic
    } else {
        let dir = args
            .models
            .clone()
            .ok_or_else(|| usage("pass --models DIR (with --train to create them) or --analytic"))?;
        FieldSource::Trained { dir, train: args.train }
    };
    let mut spec: ExperimentSpec = configured(ExperimentSpec::new(field.clone()), cli.config.as_deref())?;
    spec.field = field;
    set(&mut spec.seed, cli.seed);
    if let Some(ids) = &args.scenarios {
        spec.scenarios = ids.iter().map(|s| s.parse::<Scenario>()).collect::<complab::Result<_>>()?;
    }
    set(
        &mut spec.inference,
        args.inference.map(|i| match i {
            InferenceArg::Direct => InferenceMode::Direct,
            InferenceArg::Composed => InferenceMode::Composed,
        }),
    );
    if let Some(g) = &args.guidance {
        spec.guidance = g.parse()?;
    }
    set(&mut spec.omegas, args.omegas.clone());
    set(&mut spec.n, args.n);
    set(&mut spec.train.epochs, args.epochs);
    set(&mut spec.train.dataset_size, args.dataset_size);
    let rep = reproduce_trends(&spec, &load_world(None)?)?;
    let out = out_path(&cli.out, "results");
    write_reproduction(&rep, &out)?;
    write_manifest(
        &out.join("manifest.json"),
        "reproduce section2",
        spec.seed,
        &spec,
        &[&out.join(complab::experiment::TABLE_JSON), &out.join(complab::experiment::TABLE_CSV)],
    )?;
    println!(
        "{:<16} {:>5} {:>9} {:>9} {:>7} {:>7}   published: {:>6} {:>6} {:>5} {:>5}",
        "scenario", "omega", "KL", "FD", "VS_gen", "VS_ref", "KL", "FD", "VSg", "VSr"
    );
    for r in &rep.table.rows {
        let p = r
            .published
            .map(|p| format!("{:>6.2} {:>6.2} {:>5.2} {:>5.2}", p.kl, p.fd, p.vs_gen, p.vs_ref))
            .unwrap_or_default();
        println!(
            "{:<16} {:>5} {:>9.3} {:>9.3} {:>7.3} {:>7.3}   published: {p}",
            r.scenario.id(),
            r.omega,
            r.kl,
            r.fd,
            r.vs_gen,
            r.vs_ref
        );
    }
    for n in &rep.table.notes {
        println!("note: {n}");
    }
    Ok(())
}

fn emit_plots_cmd(cli: &Cli, args: &EmitPlotsArgs) -> Result<()> {
    let out = out_path(&cli.out, "plots");
    let files = emit_plot_data(&args.results, &out)?;
    let refs: Vec<&Path> = files.iter().map(PathBuf::as_path).collect();
    write_manifest(
        &out.join("manifest.json"),
        "emit-plots",
        cli.seed.unwrap_or(0),
        &json!({ "results": args.results }),
        &refs,
    )?;
    for f in &files {
        println!("wrote {}", f.display());
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::World(WorldCommand::Init(a)) => world_init(cli, a),
        Command::Train(a) => train_cmd(cli, a),
        Command::Sample(a) => sample_cmd(cli, a),
        Command::Eval(a) => eval_cmd(cli, a),
        Command::Pipeline(PipelineCommand::Run(a)) => pipeline_cmd(cli, a),
        Command::Reproduce(ReproduceCommand::Trends(a)) => reproduce_cmd(cli, a),
        Command::EmitPlots(a) => emit_plots_cmd(cli, a),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>().map(Error::class) {
        Some(ErrorClass::Usage) => 1,
        Some(ErrorClass::Numerical) => 3,
        Some(ErrorClass::Data) | None => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
