//! Append-only JSONL artifacts written by an audit run.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::corpus::{Label, SplitKind};
use crate::metrics::MetricMetadata;

pub const SPLITS: &str = "splits.jsonl";
pub const VARIANTS: &str = "variants.jsonl";
pub const OUTPUTS: &str = "outputs.jsonl";
pub const CURVES: &str = "curves.jsonl";
pub const VERDICTS: &str = "verdicts.jsonl";
pub const RUN_META: &str = "run.json";
pub const REPORT: &str = "report.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitRecord {
    pub sample_id: String,
    pub source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<Label>,
    pub split_kind: SplitKind,
    pub input_x: String,
    pub reference_y: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRecord {
    pub sample_id: String,
    pub intensities: Vec<u32>,
    pub m_values: Vec<f64>,
    /// Mean raw NCD per intensity, kept when scoring with `ncd_performance`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_ncd: Option<Vec<f64>>,
    pub metric: MetricMetadata,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictRecord {
    pub sample_id: String,
    pub source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<Label>,
    pub m_values: Vec<f64>,
    pub sensitivity: f64,
    /// Absent until a threshold has been applied.
    pub alpha: Option<f64>,
    pub memorized: Option<bool>,
    pub argmax_step: usize,
    pub metric: MetricMetadata,
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn to_line<T: Serialize>(record: &T) -> String {
    let mut line = serde_json::to_string(record).expect("artifact record serializes");
    line.push('\n');
    line
}

/// Read every complete, parseable line. A torn final line (no trailing
/// newline or malformed JSON) from an interrupted write is dropped.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, PipelineError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    let mut lines = text.split_inclusive('\n').peekable();
    let mut line_no = 0;
    while let Some(line) = lines.next() {
        line_no += 1;
        let last = lines.peek().is_none();
        if !line.ends_with('\n') {
            break;
        }
        match serde_json::from_str(line.trim_end()) {
            Ok(v) => out.push(v),
            Err(_) if last => break,
            Err(e) => {
                return Err(PipelineError::Artifact(format!("{}:{line_no}: {e}", path.display())));
            }
        }
    }
    Ok(out)
}

/// Strict reader for user-supplied files (no torn-line tolerance).
pub fn read_jsonl_strict<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, PipelineError> {
    let f = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| PipelineError::Artifact(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), PipelineError> {
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    for r in records {
        w.write_all(to_line(r).as_bytes()).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Append-mode JSONL writer that flushes after every record.
pub struct JsonlAppender {
    path: PathBuf,
    file: File,
}

impl JsonlAppender {
    pub fn open(path: PathBuf) -> Result<Self, PipelineError> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(io_err(&path))?;
        Ok(JsonlAppender { path, file })
    }

    pub fn append<T: Serialize>(&mut self, record: &T) -> Result<(), PipelineError> {
        self.file
            .write_all(to_line(record).as_bytes())
            .map_err(io_err(&self.path))?;
        self.file.flush().map_err(io_err(&self.path))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    struct R {
        a: u32,
    }

    #[test]
    fn torn_tail_is_dropped() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.jsonl");
        fs::write(&p, "{\"a\":1}\n{\"a\":2}\n{\"a\":").unwrap();
        assert_eq!(read_jsonl::<R>(&p).unwrap(), vec![R { a: 1 }, R { a: 2 }]);
        fs::write(&p, "{\"a\":1}\n{\"a\":\n").unwrap();
        assert_eq!(read_jsonl::<R>(&p).unwrap(), vec![R { a: 1 }]);
        fs::write(&p, "{\"a\":\n{\"a\":1}\n").unwrap();
        assert!(read_jsonl::<R>(&p).is_err());
        assert!(read_jsonl::<R>(&dir.path().join("missing")).unwrap().is_empty());
    }

    #[test]
    fn appender_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("y.jsonl");
        let mut w = JsonlAppender::open(p.clone()).unwrap();
        w.append(&R { a: 5 }).unwrap();
        w.append(&R { a: 6 }).unwrap();
        drop(w);
        assert_eq!(read_jsonl_strict::<R>(&p).unwrap(), vec![R { a: 5 }, R { a: 6 }]);
    }
}
