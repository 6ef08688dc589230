//! Corpus ingestion and input/reference splitting.
//!
//! A corpus is a JSONL file, one object per line with `id`, `source`, `text`
//! and an optional `label`. Completion tasks split each text into a prompt
//! prefix and a reference suffix at a whitespace boundary; summarization
//! tasks take the whole text as input and ask the model for the reference.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::MetricKind;
use crate::modelgw::{build_prompt, Gateway, GatewayError, GenerationRequest};

pub const DEFAULT_MIN_TOKENS: usize = 300;
pub const DEFAULT_SPLIT_FRACTION: f64 = 0.7;
pub const DEFAULT_COMPLETION_TEMPLATE: &str = "Continue the following text:\n\n{x}";
pub const DEFAULT_SUMMARIZATION_TEMPLATE: &str = "Summarize the following text:\n\n{x}";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("schema violation at line {line}: {reason}")]
    SchemaViolation { line: usize, reason: String },
    #[error("duplicate sample id {0:?}")]
    DuplicateId(String),
    #[error("sample {0:?} has no whitespace boundary to split on")]
    TooShort(String),
    #[error("split fraction {0} outside (0, 1)")]
    BadFraction(f64),
    #[error("empty reference output for sample {0:?}")]
    EmptyReference(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Positive,
    Negative,
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub source: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<Label>,
}

impl Sample {
    pub fn new(id: impl Into<String>, source: impl Into<String>, text: impl Into<String>) -> Self {
        Sample {
            id: id.into(),
            source: source.into(),
            text: text.into(),
            label: None,
        }
    }

    pub fn with_label(mut self, label: Label) -> Self {
        self.label = Some(label);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Completion,
    Summarization,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Fraction of characters kept as prompt input (completion only).
    pub split_fraction: f64,
    pub prompt_template: String,
    pub metric: MetricKind,
}

impl TaskSpec {
    pub fn completion() -> Self {
        TaskSpec {
            kind: TaskKind::Completion,
            split_fraction: DEFAULT_SPLIT_FRACTION,
            prompt_template: DEFAULT_COMPLETION_TEMPLATE.to_string(),
            metric: MetricKind::NcdPerformance,
        }
    }

    pub fn summarization() -> Self {
        TaskSpec {
            kind: TaskKind::Summarization,
            split_fraction: DEFAULT_SPLIT_FRACTION,
            prompt_template: DEFAULT_SUMMARIZATION_TEMPLATE.to_string(),
            metric: MetricKind::RougeL,
        }
    }

    pub fn for_kind(kind: TaskKind) -> Self {
        match kind {
            TaskKind::Completion => Self::completion(),
            TaskKind::Summarization => Self::summarization(),
        }
    }
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self::completion()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    PrefixSuffix,
    ModelGenerated,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSample {
    pub sample_id: String,
    pub input_x: String,
    pub reference_y: String,
    pub split_kind: SplitKind,
}

#[derive(Debug, Clone, Copy)]
pub struct LoadOptions {
    /// Enforce the minimum whitespace-token count per sample.
    pub strict: bool,
    pub min_tokens: usize,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            strict: false,
            min_tokens: DEFAULT_MIN_TOKENS,
        }
    }
}

/// Whitespace token count.
pub fn token_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Byte ranges of the whitespace-separated tokens of `text`.
pub fn token_spans(text: &str) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut start = None;
    for (i, c) in text.char_indices() {
        match (c.is_whitespace(), start) {
            (true, Some(s)) => {
                spans.push((s, i));
                start = None;
            }
            (false, None) => start = Some(i),
            _ => {}
        }
    }
    if let Some(s) = start {
        spans.push((s, text.len()));
    }
    spans
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<Sample>, CorpusError> {
    load_corpus_with(path, LoadOptions::default())
}

pub fn load_corpus_with(
    path: impl AsRef<Path>,
    options: LoadOptions,
) -> Result<Vec<Sample>, CorpusError> {
    let path = path.as_ref();
    let io_err = |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    };
    let reader = BufReader::new(File::open(path).map_err(io_err)?);
    let mut seen = HashSet::new();
    let mut samples = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err)?;
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let sample = parse_line(&line, line_no, options)?;
        if !seen.insert(sample.id.clone()) {
            return Err(CorpusError::DuplicateId(sample.id));
        }
        samples.push(sample);
    }
    Ok(samples)
}

fn parse_line(line: &str, line_no: usize, options: LoadOptions) -> Result<Sample, CorpusError> {
    let violation = |reason: String| CorpusError::SchemaViolation {
        line: line_no,
        reason,
    };
    let sample: Sample = serde_json::from_str(line).map_err(|e| violation(e.to_string()))?;
    if sample.id.is_empty() {
        return Err(violation("empty id".into()));
    }
    if sample.text.trim().is_empty() {
        return Err(violation(format!("sample {:?} has empty text", sample.id)));
    }
    if options.strict {
        let n = token_count(&sample.text);
        if n < options.min_tokens {
            return Err(violation(format!(
                "sample {:?} has {n} tokens, minimum is {}",
                sample.id, options.min_tokens
            )));
        }
    }
    Ok(sample)
}

/// Write samples as canonical JSONL (`id`, `source`, `text`, optional `label`).
pub fn write_corpus(path: impl AsRef<Path>, samples: &[Sample]) -> Result<(), CorpusError> {
    let path = path.as_ref();
    let io_err = |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut out = BufWriter::new(File::create(path).map_err(io_err)?);
    for sample in samples {
        let line = serde_json::to_string(sample).expect("sample serializes");
        writeln!(out, "{line}").map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

/// Split a sample into a prompt prefix and reference suffix.
///
/// The cut lands on the inter-token whitespace run whose start is nearest to
/// `fraction * char_length` (ties go to the earlier run). The whitespace run
/// itself belongs to neither side, so `text == input_x + run + reference_y`.
pub fn split_completion(sample: &Sample, fraction: f64) -> Result<SplitSample, CorpusError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(CorpusError::BadFraction(fraction));
    }
    let text = &sample.text;
    let spans = token_spans(text);
    if spans.len() < 2 {
        return Err(CorpusError::TooShort(sample.id.clone()));
    }
    let total_chars = text.chars().count() as f64;
    let target = fraction * total_chars;

    let mut best: Option<(f64, usize, usize)> = None;
    let mut chars_before = text[..spans[0].1].chars().count();
    for pair in spans.windows(2) {
        let (run_start, run_end) = (pair[0].1, pair[1].0);
        let dist = (chars_before as f64 - target).abs();
        if best.map_or(true, |(d, _, _)| dist < d) {
            best = Some((dist, run_start, run_end));
        }
        chars_before += text[run_start..pair[1].1].chars().count();
    }
    let (_, run_start, run_end) = best.expect("at least one boundary");
    Ok(SplitSample {
        sample_id: sample.id.clone(),
        input_x: text[..run_start].to_string(),
        reference_y: text[run_end..].to_string(),
        split_kind: SplitKind::PrefixSuffix,
    })
}

/// Obtain the reference output for a summarization task by querying the
/// model once on the unperturbed input.
pub async fn reference_for_summarization(
    sample: &Sample,
    gateway: &Gateway,
    task: &TaskSpec,
    seed: u64,
) -> Result<SplitSample, CorpusError> {
    let prompt = build_prompt(task, &sample.text)?;
    let request = GenerationRequest {
        prompt,
        n_samples: 1,
        temperature: gateway.temperature(),
        max_output_chars: sample.text.chars().count(),
        seed,
    };
    let set = gateway.generate(&sample.id, 0, &request).await?;
    let reference = set.outputs.into_iter().next().unwrap_or_default();
    if reference.trim().is_empty() {
        return Err(CorpusError::EmptyReference(sample.id.clone()));
    }
    Ok(SplitSample {
        sample_id: sample.id.clone(),
        input_x: sample.text.clone(),
        reference_y: reference,
        split_kind: SplitKind::ModelGenerated,
    })
}
