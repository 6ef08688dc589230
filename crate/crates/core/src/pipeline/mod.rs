//! End-to-end audit: split, perturb, generate, score, measure sensitivity,
//! decide. Every stage is persisted under the run's output directory so an
//! interrupted run resumes without repeating model calls, and stored outputs
//! can be re-scored under a different metric.

pub mod artifacts;
pub mod report;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::calibrate::CalibrateError;
use crate::corpus::{self, CorpusError, Sample, TaskKind, TaskSpec};
use crate::metrics::{self, MetricError, MetricMetadata, COMPRESSOR_ID};
use crate::modelgw::{build_prompt, Gateway, GatewayConfig, GatewayError, GenerationRequest, OutputSet};
use crate::perturb::{perturb_all, PerturbError, PerturbationPlan, PerturbedVariant};
use crate::sensitivity::{compute_sensitivity, decide, PerformanceCurve, SensitivityError};

use artifacts::{
    io_err, read_jsonl, write_jsonl, CurveRecord, JsonlAppender, SplitRecord, VerdictRecord, CURVES, OUTPUTS,
    REPORT, RUN_META, SPLITS, VARIANTS, VERDICTS,
};
pub use report::{emit_report, Histogram, ReportFormat, RunReport, SensitivitySummary, SourceCounts};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Perturb(#[from] PerturbError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Sensitivity(#[from] SensitivityError),
    #[error(transparent)]
    Calibrate(#[from] CalibrateError),
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad artifact: {0}")]
    Artifact(String),
    #[error("run stopped after {processed} samples, {remaining} remaining; rerun to resume")]
    Partial { processed: usize, remaining: usize },
}

fn default_n_samples() -> usize {
    crate::modelgw::DEFAULT_N_SAMPLES
}

fn default_workers() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub corpus: PathBuf,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub task: TaskSpec,
    #[serde(default)]
    pub plan: PerturbationPlan,
    #[serde(default)]
    pub gateway: GatewayConfig,
    /// Generations per perturbed input.
    #[serde(default = "default_n_samples")]
    pub n_samples: usize,
    /// Memorization threshold; without it verdicts carry only sensitivities.
    #[serde(default)]
    pub alpha: Option<f64>,
    /// Output length cap; defaults to 1.5x the reference length.
    #[serde(default)]
    pub max_output_chars: Option<usize>,
    #[serde(default = "default_workers")]
    pub workers: usize,
    /// Stop after this many newly processed samples (the run stays resumable).
    #[serde(default)]
    pub limit: Option<usize>,
}

impl RunConfig {
    pub fn new(corpus: impl Into<PathBuf>, out_dir: impl Into<PathBuf>) -> Self {
        RunConfig {
            corpus: corpus.into(),
            out_dir: out_dir.into(),
            task: TaskSpec::default(),
            plan: PerturbationPlan::default(),
            gateway: GatewayConfig::default(),
            n_samples: default_n_samples(),
            alpha: None,
            max_output_chars: None,
            workers: default_workers(),
            limit: None,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        toml::from_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.n_samples == 0 {
            return Err(PipelineError::Config("n_samples must be at least 1".into()));
        }
        if self.workers == 0 {
            return Err(PipelineError::Config("workers must be at least 1".into()));
        }
        if self.task.kind == TaskKind::Completion && !(self.task.split_fraction > 0.0 && self.task.split_fraction < 1.0) {
            return Err(PipelineError::Config(format!("split fraction {} outside (0, 1)", self.task.split_fraction)));
        }
        if let Some(a) = self.alpha {
            if !a.is_finite() {
                return Err(PipelineError::Config("alpha must be finite".into()));
            }
        }
        build_prompt(&self.task, "").map_err(|e| PipelineError::Config(e.to_string()))?;
        self.plan.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        Ok(())
    }
}

/// Settings that determine the content of a run's artifacts. Resuming into
/// a directory whose fingerprint differs is refused.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFingerprint {
    pub corpus: PathBuf,
    pub task: TaskSpec,
    pub plan: PerturbationPlan,
    pub n_samples: usize,
    pub max_output_chars: Option<usize>,
    pub compressor: String,
    pub template_sha256: String,
}

impl RunFingerprint {
    pub fn of(config: &RunConfig) -> Self {
        RunFingerprint {
            corpus: config.corpus.clone(),
            task: config.task.clone(),
            plan: config.plan.clone(),
            n_samples: config.n_samples,
            max_output_chars: config.max_output_chars,
            compressor: COMPRESSOR_ID.to_string(),
            template_sha256: sha256_hex(config.task.prompt_template.as_bytes()),
        }
    }
}

pub fn sha256_hex(data: &[u8]) -> String {
    Sha256::digest(data).iter().map(|b| format!("{b:02x}")).collect()
}

/// Everything produced for one sample.
struct SampleResult {
    split: SplitRecord,
    variants: Vec<PerturbedVariant>,
    curve: CurveRecord,
    verdict: VerdictRecord,
}

struct Shared {
    gateway: Gateway,
    task: TaskSpec,
    plan: PerturbationPlan,
    n_samples: usize,
    max_output_chars: Option<usize>,
    alpha: Option<f64>,
    checkpoint: HashMap<(String, u32), OutputSet>,
    outputs_log: Mutex<JsonlAppender>,
    reused: std::sync::atomic::AtomicUsize,
}

impl Shared {
    async fn output_set(&self, variant: &PerturbedVariant, max_chars: usize) -> Result<OutputSet, PipelineError> {
        let key = (variant.sample_id.clone(), variant.intensity);
        if let Some(set) = self.checkpoint.get(&key) {
            self.reused.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
            return Ok(set.clone());
        }
        let request = GenerationRequest {
            prompt: build_prompt(&self.task, &variant.perturbed_text)?,
            n_samples: self.n_samples,
            temperature: self.gateway.temperature(),
            max_output_chars: max_chars,
            seed: variant.seed,
        };
        let set = self.gateway.generate(&variant.sample_id, variant.intensity, &request).await?;
        self.outputs_log.lock().expect("outputs log lock").append(&set)?;
        Ok(set)
    }

    async fn process(&self, sample: Sample) -> Result<SampleResult, PipelineError> {
        let completion = match self.task.kind {
            TaskKind::Completion => Some(corpus::split_completion(&sample, self.task.split_fraction)?),
            TaskKind::Summarization => None,
        };
        let input_x = completion.as_ref().map_or(sample.text.as_str(), |s| s.input_x.as_str());
        let variants = perturb_all(&sample.id, input_x, &self.plan)?;

        let mut sets = Vec::with_capacity(variants.len());
        let (split_kind, reference) = match &completion {
            Some(split) => (split.split_kind, split.reference_y.clone()),
            None => {
                // The first unperturbed generation doubles as the reference.
                let cap = self.max_output_chars.unwrap_or_else(|| sample.text.chars().count());
                let base = self.output_set(&variants[0], cap).await?;
                let reference = base.outputs[0].clone();
                if reference.trim().is_empty() {
                    return Err(CorpusError::EmptyReference(sample.id.clone()).into());
                }
                sets.push(base);
                (corpus::SplitKind::ModelGenerated, reference)
            }
        };
        let cap = self
            .max_output_chars
            .unwrap_or_else(|| (reference.chars().count() * 3).div_ceil(2).max(1));
        let pending = variants.iter().skip(sets.len()).map(|v| self.output_set(v, cap));
        sets.extend(futures::future::try_join_all(pending).await?);

        let split = SplitRecord {
            sample_id: sample.id.clone(),
            source: sample.source.clone(),
            label: sample.label,
            split_kind,
            input_x: input_x.to_string(),
            reference_y: reference,
        };
        let (curve, verdict) = score_sample(&split, &sets, &self.plan.intensities, self.task.metric, self.alpha)?;
        Ok(SampleResult {
            split,
            variants,
            curve,
            verdict,
        })
    }
}

/// Score stored output sets (ordered by intensity) against the reference and
/// derive the curve and verdict.
pub fn score_sample(
    split: &SplitRecord,
    sets: &[OutputSet],
    intensities: &[u32],
    metric: metrics::MetricKind,
    alpha: Option<f64>,
) -> Result<(CurveRecord, VerdictRecord), PipelineError> {
    let meta = MetricMetadata::for_kind(metric);
    let mut m_values = Vec::with_capacity(sets.len());
    let mut raw = Vec::new();
    for set in sets {
        m_values.push(metrics::score_outputs(&set.outputs, &split.reference_y, metric)?);
        if metric == metrics::MetricKind::NcdPerformance {
            raw.push(metrics::mean_raw_ncd(&set.outputs, &split.reference_y)?);
        }
    }
    let curve = PerformanceCurve::new(split.sample_id.clone(), intensities.to_vec(), m_values)?;
    let (sensitivity, argmax_step) = compute_sensitivity(&curve.m_values)?;
    let verdict = VerdictRecord {
        sample_id: split.sample_id.clone(),
        source: split.source.clone(),
        label: split.label,
        m_values: curve.m_values.clone(),
        sensitivity,
        alpha,
        memorized: alpha.map(|a| decide(sensitivity, a)),
        argmax_step,
        metric: meta.clone(),
    };
    let record = CurveRecord {
        sample_id: curve.sample_id,
        intensities: curve.intensities,
        m_values: curve.m_values,
        raw_ncd: (!raw.is_empty()).then_some(raw),
        metric: meta,
    };
    Ok((record, verdict))
}

#[derive(Debug, Serialize, Deserialize)]
struct RunMeta {
    fingerprint: RunFingerprint,
}

/// Keep only lines belonging to completed samples; drops records of samples
/// interrupted between artifact writes.
fn retain_completed<T>(path: &Path, completed: &HashSet<String>, id: impl Fn(&T) -> &str) -> Result<(), PipelineError>
where
    T: serde::de::DeserializeOwned + Serialize,
{
    let records: Vec<T> = read_jsonl(path)?;
    let kept: Vec<&T> = records.iter().filter(|r| completed.contains(id(r))).collect();
    write_jsonl(path, &kept)
}

pub async fn run_audit(config: &RunConfig) -> Result<RunReport, PipelineError> {
    let gateway = Gateway::from_config(&config.gateway)?;
    run_audit_with(config, gateway).await
}

/// Run an audit against an already constructed gateway.
pub async fn run_audit_with(config: &RunConfig, gateway: Gateway) -> Result<RunReport, PipelineError> {
    config.validate()?;
    let started = Instant::now();
    let out = &config.out_dir;
    std::fs::create_dir_all(out).map_err(io_err(out))?;

    let fingerprint = RunFingerprint::of(config);
    let meta_path = out.join(RUN_META);
    if meta_path.exists() {
        let text = std::fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?;
        let meta: RunMeta = serde_json::from_str(&text).map_err(|e| PipelineError::Artifact(e.to_string()))?;
        if meta.fingerprint != fingerprint {
            return Err(PipelineError::Config(format!(
                "{} holds a run with different settings; use a fresh output directory",
                out.display()
            )));
        }
    } else {
        let text = serde_json::to_string_pretty(&RunMeta {
            fingerprint: fingerprint.clone(),
        })
        .expect("meta serializes");
        std::fs::write(&meta_path, text).map_err(io_err(&meta_path))?;
    }

    let samples = corpus::load_corpus(&config.corpus)?;

    // Completed samples are exactly those with a verdict; verdicts are
    // written in corpus order after every other per-sample artifact.
    let verdicts_path = out.join(VERDICTS);
    let done: Vec<VerdictRecord> = read_jsonl(&verdicts_path)?;
    write_jsonl(&verdicts_path, &done)?;
    let completed: HashSet<String> = done.iter().map(|v| v.sample_id.clone()).collect();
    retain_completed::<SplitRecord>(&out.join(SPLITS), &completed, |r| &r.sample_id)?;
    retain_completed::<PerturbedVariant>(&out.join(VARIANTS), &completed, |r| &r.sample_id)?;
    retain_completed::<CurveRecord>(&out.join(CURVES), &completed, |r| &r.sample_id)?;

    let outputs_path = out.join(OUTPUTS);
    let stored: Vec<OutputSet> = read_jsonl(&outputs_path)?;
    write_jsonl(&outputs_path, &stored)?;
    let checkpoint: HashMap<(String, u32), OutputSet> = stored
        .into_iter()
        .filter(|s| s.outputs.len() == config.n_samples)
        .map(|s| ((s.sample_id.clone(), s.intensity), s))
        .collect();

    let pending: Vec<Sample> = samples.iter().filter(|s| !completed.contains(&s.id)).cloned().collect();
    let total_pending = pending.len();
    let batch: Vec<Sample> = match config.limit {
        Some(n) => pending.into_iter().take(n).collect(),
        None => pending,
    };
    let batch_len = batch.len();

    let shared = Arc::new(Shared {
        gateway,
        task: config.task.clone(),
        plan: config.plan.clone(),
        n_samples: config.n_samples,
        max_output_chars: config.max_output_chars,
        alpha: config.alpha,
        checkpoint,
        outputs_log: Mutex::new(JsonlAppender::open(outputs_path)?),
        reused: Default::default(),
    });

    let mut splits = JsonlAppender::open(out.join(SPLITS))?;
    let mut variants_log = JsonlAppender::open(out.join(VARIANTS))?;
    let mut curves = JsonlAppender::open(out.join(CURVES))?;
    let mut verdicts = JsonlAppender::open(verdicts_path.clone())?;

    let mut results = stream::iter(batch)
        .map(|sample| {
            let shared = Arc::clone(&shared);
            tokio::spawn(async move { shared.process(sample).await })
        })
        .buffered(config.workers);

    let mut processed = 0;
    let mut failure = None;
    while let Some(joined) = results.next().await {
        let result = match joined {
            Ok(r) => r,
            Err(e) => Err(PipelineError::Artifact(format!("worker panicked: {e}"))),
        };
        match result {
            Ok(r) => {
                splits.append(&r.split)?;
                for v in &r.variants {
                    variants_log.append(v)?;
                }
                curves.append(&r.curve)?;
                verdicts.append(&r.verdict)?;
                processed += 1;
            }
            Err(e) => {
                failure = Some(e);
                break;
            }
        }
    }
    drop(results);

    let all: Vec<VerdictRecord> = read_jsonl(&verdicts_path)?;
    let report = RunReport::build(
        &all,
        samples.len(),
        report::RunStats {
            elapsed_ms: started.elapsed().as_millis() as u64,
            model_calls: shared.gateway.calls(),
            reused_output_sets: shared.reused.load(std::sync::atomic::Ordering::Relaxed),
            samples_processed: processed,
        },
        serde_json::to_value(config).expect("config serializes"),
        fingerprint,
    );
    report.save(&out.join(REPORT))?;

    if let Some(e) = failure {
        return Err(e);
    }
    if batch_len < total_pending {
        return Err(PipelineError::Partial {
            processed,
            remaining: total_pending - processed,
        });
    }
    Ok(report)
}

/// Recompute curves and verdicts from stored outputs under `metric`,
/// without any model calls. Writes `curves.jsonl` and `verdicts.jsonl`
/// into `dest` and returns the verdicts.
pub fn rescore(
    run_dir: &Path,
    dest: &Path,
    metric: metrics::MetricKind,
    alpha: Option<f64>,
) -> Result<Vec<VerdictRecord>, PipelineError> {
    let meta_path = run_dir.join(RUN_META);
    let text = std::fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?;
    let meta: RunMeta = serde_json::from_str(&text).map_err(|e| PipelineError::Artifact(e.to_string()))?;
    let intensities = meta.fingerprint.plan.intensities;

    let splits: Vec<SplitRecord> = read_jsonl(&run_dir.join(SPLITS))?;
    let outputs: Vec<OutputSet> = read_jsonl(&run_dir.join(OUTPUTS))?;
    let mut by_key: HashMap<(String, u32), OutputSet> =
        outputs.into_iter().map(|s| ((s.sample_id.clone(), s.intensity), s)).collect();

    let mut curves = Vec::new();
    let mut verdicts = Vec::new();
    for split in &splits {
        let sets: Option<Vec<OutputSet>> = intensities
            .iter()
            .map(|&k| by_key.remove(&(split.sample_id.clone(), k)))
            .collect();
        let Some(sets) = sets else {
            return Err(PipelineError::Artifact(format!("missing outputs for sample {}", split.sample_id)));
        };
        let (c, v) = score_sample(split, &sets, &intensities, metric, alpha)?;
        curves.push(c);
        verdicts.push(v);
    }
    std::fs::create_dir_all(dest).map_err(io_err(dest))?;
    write_jsonl(&dest.join(CURVES), &curves)?;
    write_jsonl(&dest.join(VERDICTS), &verdicts)?;
    Ok(verdicts)
}

/// Apply a threshold to existing verdicts.
pub fn apply_alpha(verdicts: &[VerdictRecord], alpha: f64) -> Vec<VerdictRecord> {
    verdicts
        .iter()
        .map(|v| VerdictRecord {
            alpha: Some(alpha),
            memorized: Some(decide(v.sensitivity, alpha)),
            ..v.clone()
        })
        .collect()
}

/// Per-source counts of verdicts, keyed by source tag.
pub fn counts_by_source(verdicts: &[VerdictRecord]) -> BTreeMap<String, SourceCounts> {
    let mut map: BTreeMap<String, SourceCounts> = BTreeMap::new();
    for v in verdicts {
        let c = map.entry(v.source.clone()).or_default();
        c.total += 1;
        match v.memorized {
            Some(true) => c.memorized += 1,
            Some(false) => c.not_memorized += 1,
            None => c.undecided += 1,
        }
    }
    map
}
