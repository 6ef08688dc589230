//! `pearl` command-line interface.
//!
//! Exit codes: 0 success, 2 configuration error, 3 gateway failure,
//! 4 partial run (resumable), 1 anything else.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use pearl_core::calibrate::{self, AlphaGrid, CalibrateError, ThresholdStore, DEFAULT_TARGET_FPR};
use pearl_core::corpus::{self, CorpusError, Label, LoadOptions, TaskKind, TaskSpec};
use pearl_core::metrics::MetricKind;
use pearl_core::modelgw::{BackendKind, GatewayConfig, GatewayError};
use pearl_core::perturb::{perturb_all, PerturbError, PerturbMode, PerturbationPlan};
use pearl_core::pipeline::artifacts::{read_jsonl_strict, write_jsonl, VerdictRecord};
use pearl_core::pipeline::{self, PipelineError, ReportFormat, RunConfig};
use pearl_core::simlab::{self, PlantOptions, SimError};

#[derive(Parser)]
#[command(name = "pearl", version, about = "Black-box memorization auditing for language models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a corpus and print per-source counts.
    Ingest(IngestArgs),
    /// Write bit-flip variants of every sample's input.
    Perturb(PerturbArgs),
    /// Run (or resume) a full audit.
    Run(RunArgs),
    /// Re-score stored outputs without querying the model.
    Score(ScoreArgs),
    /// Sweep thresholds over known-negative sensitivities and pick one.
    Calibrate(CalibrateArgs),
    /// Apply a threshold to a verdicts file.
    Decide(DecideArgs),
    /// Export memorized counts or plots from a verdicts file.
    Report(ReportArgs),
    /// Synthetic model with planted memorization.
    Simlab {
        #[command(subcommand)]
        command: SimlabCommand,
    },
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Reject samples below the token floor.
    #[arg(long)]
    strict: bool,
    #[arg(long, default_value_t = corpus::DEFAULT_MIN_TOKENS)]
    min_tokens: usize,
    /// Rewrite the validated corpus in canonical form.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PlanArgs {
    /// Comma-separated intensities in percent, starting at 0.
    #[arg(long, value_delimiter = ',')]
    intensities: Option<Vec<u32>>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    mode: Option<PerturbMode>,
}

impl PlanArgs {
    fn apply(&self, plan: &mut PerturbationPlan) {
        if let Some(k) = &self.intensities {
            plan.intensities = k.clone();
        }
        if let Some(s) = self.seed {
            plan.global_seed = s;
        }
        if let Some(m) = self.mode {
            plan.mode = m;
        }
    }
}

#[derive(Args)]
struct PerturbArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_parser = parse_task, default_value = "completion")]
    task: TaskKind,
    #[arg(long, default_value_t = corpus::DEFAULT_SPLIT_FRACTION)]
    fraction: f64,
    #[command(flatten)]
    plan: PlanArgs,
}

#[derive(Args)]
struct RunArgs {
    /// TOML run configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long, value_parser = parse_task)]
    task: Option<TaskKind>,
    #[arg(long)]
    fraction: Option<f64>,
    #[arg(long)]
    metric: Option<MetricKind>,
    #[command(flatten)]
    plan: PlanArgs,
    #[arg(long)]
    backend: Option<BackendKind>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    url: Option<String>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    audit_log: Option<PathBuf>,
    /// Generations per perturbed input.
    #[arg(long = "n-samples", short = 'i')]
    n_samples: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Read alpha from a calibration store.
    #[arg(long, conflicts_with = "alpha")]
    store: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
    /// Stop after this many samples; rerun to resume.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    run_dir: PathBuf,
    /// Where to write re-scored curves and verdicts (default: the run dir).
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long, default_value = "ncd_performance")]
    metric: MetricKind,
    #[arg(long)]
    alpha: Option<f64>,
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long)]
    verdicts: PathBuf,
    /// Only use verdicts with this label (e.g. `negative`).
    #[arg(long, value_parser = parse_label)]
    label: Option<Label>,
    /// start,stop,step
    #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [0.0, 1.0, 0.01])]
    grid: Vec<f64>,
    #[arg(long, default_value_t = DEFAULT_TARGET_FPR)]
    target_fpr: f64,
    #[arg(long, default_value = "fpr_curve.csv")]
    curve_out: PathBuf,
    #[arg(long, default_value = "pearl-store.toml")]
    store: PathBuf,
    /// Name recorded for the negative corpus.
    #[arg(long)]
    corpus_id: Option<String>,
}

#[derive(Args)]
struct DecideArgs {
    #[arg(long)]
    verdicts: PathBuf,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, conflicts_with = "alpha")]
    store: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    verdicts: PathBuf,
    #[arg(long, default_value = "markdown")]
    format: ReportFormat,
    /// Thresholds for the count columns.
    #[arg(long, value_delimiter = ',', default_values_t = [0.2])]
    alphas: Vec<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum SimlabCommand {
    /// Generate a synthetic corpus and a simulator manifest.
    Plant(PlantArgs),
}

#[derive(Args)]
struct PlantArgs {
    #[arg(long)]
    total: usize,
    #[arg(long)]
    memorized: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    corpus_out: PathBuf,
    #[arg(long)]
    manifest_out: PathBuf,
    #[arg(long, value_parser = parse_task, default_value = "completion")]
    task: TaskKind,
    #[arg(long, default_value_t = corpus::DEFAULT_SPLIT_FRACTION)]
    fraction: f64,
    #[arg(long, default_value_t = simlab::DEFAULT_CLIFF_THRESHOLD)]
    cliff: f64,
    #[arg(long, default_value_t = simlab::DEFAULT_DEGRADATION_RATE)]
    degradation_rate: f64,
}

fn parse_task(s: &str) -> Result<TaskKind, String> {
    match s {
        "completion" => Ok(TaskKind::Completion),
        "summarization" => Ok(TaskKind::Summarization),
        other => Err(format!("unknown task {other:?}")),
    }
}

fn parse_label(s: &str) -> Result<Label, String> {
    match s {
        "positive" => Ok(Label::Positive),
        "negative" => Ok(Label::Negative),
        "unknown" => Ok(Label::Unknown),
        other => Err(format!("unknown label {other:?}")),
    }
}

fn ingest(args: IngestArgs) -> Result<()> {
    let samples = corpus::load_corpus_with(
        &args.corpus,
        LoadOptions {
            strict: args.strict,
            min_tokens: args.min_tokens,
        },
    )?;
    let mut by_source = std::collections::BTreeMap::<&str, usize>::new();
    for s in &samples {
        *by_source.entry(&s.source).or_default() += 1;
    }
    println!("{} samples", samples.len());
    for (source, n) in by_source {
        println!("  {source}: {n}");
    }
    if let Some(out) = args.out {
        corpus::write_corpus(&out, &samples)?;
    }
    Ok(())
}

fn perturb(args: PerturbArgs) -> Result<()> {
    let mut plan = PerturbationPlan::default();
    args.plan.apply(&mut plan);
    plan.validate()?;
    let samples = corpus::load_corpus(&args.corpus)?;
    let mut variants = Vec::with_capacity(samples.len() * plan.intensities.len());
    for s in &samples {
        let input = match args.task {
            TaskKind::Completion => corpus::split_completion(s, args.fraction)?.input_x,
            TaskKind::Summarization => s.text.clone(),
        };
        variants.extend(perturb_all(&s.id, &input, &plan)?);
    }
    write_jsonl(&args.out, &variants)?;
    println!("{} variants written to {}", variants.len(), args.out.display());
    Ok(())
}

fn build_run_config(args: &RunArgs) -> Result<RunConfig> {
    let mut config = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => {
            let (Some(corpus), Some(out)) = (&args.corpus, &args.out_dir) else {
                return Err(PipelineError::Config("--corpus and --out-dir are required without --config".into()).into());
            };
            RunConfig::new(corpus, out)
        }
    };
    if let Some(c) = &args.corpus {
        config.corpus = c.clone();
    }
    if let Some(o) = &args.out_dir {
        config.out_dir = o.clone();
    }
    if let Some(kind) = args.task {
        let fraction = config.task.split_fraction;
        config.task = TaskSpec::for_kind(kind);
        config.task.split_fraction = fraction;
    }
    if let Some(f) = args.fraction {
        config.task.split_fraction = f;
    }
    if let Some(m) = args.metric {
        config.task.metric = m;
    }
    args.plan.apply(&mut config.plan);
    let gw: &mut GatewayConfig = &mut config.gateway;
    if let Some(b) = args.backend {
        gw.backend = b;
    }
    if let Some(m) = &args.manifest {
        gw.manifest = Some(m.clone());
    }
    if let Some(u) = &args.url {
        gw.url = Some(u.clone());
    }
    if let Some(m) = &args.model {
        gw.model = Some(m.clone());
    }
    if let Some(t) = args.temperature {
        gw.temperature = t;
    }
    if let Some(a) = &args.audit_log {
        gw.audit_log = Some(a.clone());
    }
    if let Some(n) = args.n_samples {
        config.n_samples = n;
    }
    if let Some(a) = args.alpha {
        config.alpha = Some(a);
    }
    if let Some(store) = &args.store {
        config.alpha = Some(ThresholdStore::load(store)?.alpha);
    }
    if let Some(w) = args.workers {
        config.workers = w;
    }
    if args.limit.is_some() {
        config.limit = args.limit;
    }
    Ok(config)
}

async fn run(args: RunArgs) -> Result<()> {
    let config = build_run_config(&args)?;
    let report = pipeline::run_audit(&config).await?;
    println!(
        "{} of {} samples complete, {} memorized, {} model calls",
        report.samples_completed,
        report.corpus_size,
        report.memorized(),
        report.stats.model_calls
    );
    for (source, c) in &report.per_source {
        println!(
            "  {source}: {} total, {} memorized, {} not memorized, {} undecided",
            c.total, c.memorized, c.not_memorized, c.undecided
        );
    }
    Ok(())
}

fn score(args: ScoreArgs) -> Result<()> {
    let dest = args.out_dir.unwrap_or_else(|| args.run_dir.clone());
    let verdicts = pipeline::rescore(&args.run_dir, &dest, args.metric, args.alpha)?;
    println!("re-scored {} samples with {}", verdicts.len(), args.metric.name());
    Ok(())
}

fn calibrate_cmd(args: CalibrateArgs) -> Result<()> {
    let verdicts: Vec<VerdictRecord> = read_jsonl_strict(&args.verdicts)?;
    let sens: Vec<f64> = verdicts
        .iter()
        .filter(|v| args.label.is_none() || v.label == args.label)
        .map(|v| v.sensitivity)
        .collect();
    let grid = AlphaGrid {
        start: args.grid[0],
        stop: args.grid[1],
        step: args.grid[2],
    };
    let corpus_id = args
        .corpus_id
        .unwrap_or_else(|| args.verdicts.display().to_string());
    let curve = calibrate::sweep(&sens, grid, &corpus_id)?;
    curve.write_csv(&args.curve_out)?;
    let alpha = calibrate::select_threshold(&curve, args.target_fpr)?;
    ThresholdStore {
        alpha,
        target_fpr: args.target_fpr,
        negative_corpus_id: corpus_id,
        n_samples: sens.len(),
        grid,
    }
    .save(&args.store)?;
    println!("alpha = {alpha} (target FPR {}, {} negatives)", args.target_fpr, sens.len());
    Ok(())
}

fn decide_cmd(args: DecideArgs) -> Result<()> {
    let alpha = match (args.alpha, &args.store) {
        (Some(a), _) => a,
        (None, Some(store)) => ThresholdStore::load(store)?.alpha,
        (None, None) => bail!(PipelineError::Config("one of --alpha or --store is required".into())),
    };
    let verdicts: Vec<VerdictRecord> = read_jsonl_strict(&args.verdicts)?;
    let decided = pipeline::apply_alpha(&verdicts, alpha);
    write_jsonl(&args.out, &decided)?;
    let n = decided.iter().filter(|v| v.memorized == Some(true)).count();
    println!("{n} of {} samples memorized at alpha = {alpha}", decided.len());
    Ok(())
}

fn report_cmd(args: ReportArgs) -> Result<()> {
    let verdicts: Vec<VerdictRecord> = read_jsonl_strict(&args.verdicts)?;
    pipeline::emit_report(&verdicts, args.format, &args.alphas, &args.out)?;
    Ok(())
}

fn plant(args: PlantArgs) -> Result<()> {
    let opts = PlantOptions {
        task: args.task,
        split_fraction: args.fraction,
        cliff_threshold: args.cliff,
        degradation_rate: args.degradation_rate,
        ..PlantOptions::default()
    };
    let (samples, model) = simlab::plant_corpus(args.total, args.memorized, args.seed, &opts)?;
    corpus::write_corpus(&args.corpus_out, &samples).context("writing corpus")?;
    model.save(&args.manifest_out)?;
    println!(
        "planted {} samples ({} memorized) -> {}, manifest {}",
        samples.len(),
        args.memorized,
        args.corpus_out.display(),
        args.manifest_out.display()
    );
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if let Some(e) = err.downcast_ref::<PipelineError>() {
        return match e {
            PipelineError::Config(_) | PipelineError::Perturb(_) => 2,
            PipelineError::Gateway(g) => gateway_code(g),
            PipelineError::Corpus(CorpusError::Gateway(g)) => gateway_code(g),
            PipelineError::Corpus(CorpusError::SchemaViolation { .. } | CorpusError::DuplicateId(_)) => 2,
            PipelineError::Partial { .. } => 4,
            _ => 1,
        };
    }
    if let Some(g) = err.downcast_ref::<GatewayError>() {
        return gateway_code(g);
    }
    if err.downcast_ref::<PerturbError>().is_some() {
        return 2;
    }
    if let Some(e) = err.downcast_ref::<CorpusError>() {
        return match e {
            CorpusError::SchemaViolation { .. } | CorpusError::DuplicateId(_) | CorpusError::BadFraction(_) => 2,
            _ => 1,
        };
    }
    if let Some(e) = err.downcast_ref::<CalibrateError>() {
        return match e {
            CalibrateError::BadGrid(_) | CalibrateError::BadTarget(_) | CalibrateError::Parse { .. } => 2,
            _ => 1,
        };
    }
    if let Some(e) = err.downcast_ref::<SimError>() {
        return match e {
            SimError::BadCounts { .. } | SimError::BadParameter(_) => 2,
            _ => 1,
        };
    }
    1
}

fn gateway_code(e: &GatewayError) -> u8 {
    match e {
        GatewayError::Config(_) | GatewayError::Template(_) | GatewayError::BadRequest(_) => 2,
        _ => 3,
    }
}

#[tokio::main]
async fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Ingest(a) => ingest(a),
        Command::Perturb(a) => perturb(a),
        Command::Run(a) => run(a).await,
        Command::Score(a) => score(a),
        Command::Calibrate(a) => calibrate_cmd(a),
        Command::Decide(a) => decide_cmd(a),
        Command::Report(a) => report_cmd(a),
        Command::Simlab {
            command: SimlabCommand::Plant(a),
        } => plant(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
