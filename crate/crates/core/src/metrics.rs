//! Task-performance scores in [0, 1], higher is better.
//!
//! Completion outputs are scored with `1 - NCD` against the reference;
//! summarization outputs with the ROUGE-L F-measure.

use std::io::Write;

use flate2::write::DeflateEncoder;
use flate2::Compression;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Compressor used for every NCD computation. Changing it changes scores.
pub const COMPRESSOR_ID: &str = "deflate-raw/miniz_oxide/level-9";
const COMPRESSION_LEVEL: u32 = 9;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricError {
    #[error("NCD is undefined for empty input")]
    EmptyInput,
    #[error("cannot score an empty output set")]
    EmptyOutputSet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    NcdPerformance,
    RougeL,
}

impl MetricKind {
    pub fn score(self, candidate: &str, reference: &str) -> Result<f64, MetricError> {
        match self {
            MetricKind::NcdPerformance => ncd_performance(candidate, reference),
            MetricKind::RougeL => Ok(rouge_l(candidate, reference)),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MetricKind::NcdPerformance => "ncd_performance",
            MetricKind::RougeL => "rouge_l",
        }
    }
}

impl std::str::FromStr for MetricKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ncd_performance" | "ncd" => Ok(MetricKind::NcdPerformance),
            "rouge_l" | "rouge-l" => Ok(MetricKind::RougeL),
            other => Err(format!("unknown metric {other:?}")),
        }
    }
}

/// Metric identity persisted with every curve and verdict.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricMetadata {
    pub metric: MetricKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compressor: Option<String>,
}

impl MetricMetadata {
    pub fn for_kind(metric: MetricKind) -> Self {
        MetricMetadata {
            metric,
            compressor: (metric == MetricKind::NcdPerformance).then(|| COMPRESSOR_ID.to_string()),
        }
    }
}

pub fn compressed_len(data: &[u8]) -> usize {
    let mut enc = DeflateEncoder::new(Vec::with_capacity(data.len() / 2 + 16), Compression::new(COMPRESSION_LEVEL));
    enc.write_all(data).expect("in-memory write");
    enc.finish().expect("in-memory finish").len()
}

/// Normalized compression distance
/// `(C(ab) - min(C(a), C(b))) / max(C(a), C(b))`.
pub fn ncd(a: &str, b: &str) -> Result<f64, MetricError> {
    if a.is_empty() || b.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    let ca = compressed_len(a.as_bytes());
    let cb = compressed_len(b.as_bytes());
    let mut joined = Vec::with_capacity(a.len() + b.len());
    joined.extend_from_slice(a.as_bytes());
    joined.extend_from_slice(b.as_bytes());
    let cab = compressed_len(&joined);
    let (lo, hi) = (ca.min(cb) as f64, ca.max(cb) as f64);
    Ok((cab as f64 - lo) / hi)
}

pub fn ncd_performance(candidate: &str, reference: &str) -> Result<f64, MetricError> {
    Ok(1.0 - ncd(candidate, reference)?.clamp(0.0, 1.0))
}

pub fn rouge_tokens(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

/// Length of the longest common subsequence, two-row dynamic program.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let (long, short) = if a.len() >= b.len() { (a, b) } else { (b, a) };
    if short.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; short.len() + 1];
    let mut cur = vec![0usize; short.len() + 1];
    for x in long {
        for (j, y) in short.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[short.len()]
}

/// ROUGE-L F1 over lowercased whitespace tokens; 0 when either side is empty.
pub fn rouge_l(candidate: &str, reference: &str) -> f64 {
    let cand = rouge_tokens(candidate);
    let refs = rouge_tokens(reference);
    rouge_l_tokens(&cand, &refs)
}

pub fn rouge_l_tokens<T: PartialEq>(candidate: &[T], reference: &[T]) -> f64 {
    let l = lcs_len(candidate, reference);
    if l == 0 {
        return 0.0;
    }
    let p = l as f64 / candidate.len() as f64;
    let r = l as f64 / reference.len() as f64;
    2.0 * p * r / (p + r)
}

/// Mean per-output score against the reference.
pub fn score_outputs<S: AsRef<str>>(outputs: &[S], reference: &str, metric: MetricKind) -> Result<f64, MetricError> {
    if outputs.is_empty() {
        return Err(MetricError::EmptyOutputSet);
    }
    let mut total = 0.0;
    for out in outputs {
        total += metric.score(out.as_ref(), reference)?;
    }
    Ok(total / outputs.len() as f64)
}

/// Mean raw NCD, persisted next to `ncd_performance` scores.
pub fn mean_raw_ncd<S: AsRef<str>>(outputs: &[S], reference: &str) -> Result<f64, MetricError> {
    if outputs.is_empty() {
        return Err(MetricError::EmptyOutputSet);
    }
    let mut total = 0.0;
    for out in outputs {
        total += ncd(out.as_ref(), reference)?;
    }
    Ok(total / outputs.len() as f64)
}
