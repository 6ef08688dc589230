//! Run summaries and exported tables/plots.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::artifacts::{io_err, VerdictRecord};
use super::{counts_by_source, PipelineError, RunFingerprint};
use crate::calibrate::{fpr_at, sweep, AlphaGrid};
use crate::corpus::Label;
use crate::sensitivity::decide;

pub const HISTOGRAM_BINS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SourceCounts {
    pub total: usize,
    pub memorized: usize,
    pub not_memorized: usize,
    /// Verdicts without a threshold.
    pub undecided: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<usize>,
}

impl Histogram {
    /// Equal-width bins over `[min, max]`; the maximum lands in the last bin.
    pub fn new(values: &[f64], bins: usize) -> Self {
        let bins = bins.max(1);
        let mut counts = vec![0; bins];
        if values.is_empty() {
            return Histogram { lo: 0.0, hi: 0.0, counts };
        }
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let width = (hi - lo) / bins as f64;
        for &v in values {
            let b = if width > 0.0 { ((v - lo) / width) as usize } else { 0 };
            counts[b.min(bins - 1)] += 1;
        }
        Histogram { lo, hi, counts }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivitySummary {
    pub count: usize,
    pub min: Option<f64>,
    pub median: Option<f64>,
    pub max: Option<f64>,
    pub histogram: Histogram,
}

impl SensitivitySummary {
    pub fn of(values: &[f64]) -> Self {
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let median = match sorted.len() {
            0 => None,
            n if n % 2 == 1 => Some(sorted[n / 2]),
            n => Some((sorted[n / 2 - 1] + sorted[n / 2]) / 2.0),
        };
        SensitivitySummary {
            count: sorted.len(),
            min: sorted.first().copied(),
            median,
            max: sorted.last().copied(),
            histogram: Histogram::new(&sorted, HISTOGRAM_BINS),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub elapsed_ms: u64,
    pub model_calls: u64,
    pub reused_output_sets: usize,
    pub samples_processed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub corpus_size: usize,
    pub samples_completed: usize,
    pub per_source: BTreeMap<String, SourceCounts>,
    pub sensitivity: SensitivitySummary,
    pub stats: RunStats,
    pub fingerprint: RunFingerprint,
    pub config: serde_json::Value,
}

impl RunReport {
    pub fn build(
        verdicts: &[VerdictRecord],
        corpus_size: usize,
        stats: RunStats,
        config: serde_json::Value,
        fingerprint: RunFingerprint,
    ) -> Self {
        let sens: Vec<f64> = verdicts.iter().map(|v| v.sensitivity).collect();
        RunReport {
            corpus_size,
            samples_completed: verdicts.len(),
            per_source: counts_by_source(verdicts),
            sensitivity: SensitivitySummary::of(&sens),
            stats,
            fingerprint,
            config,
        }
    }

    pub fn memorized(&self) -> usize {
        self.per_source.values().map(|c| c.memorized).sum()
    }

    pub fn save(&self, path: &Path) -> Result<(), PipelineError> {
        let text = serde_json::to_string_pretty(self).expect("report serializes");
        std::fs::write(path, text).map_err(io_err(path))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Markdown,
    Svg,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "markdown" | "markdown-table" | "md" => Ok(ReportFormat::Markdown),
            "svg" | "svg-plot" => Ok(ReportFormat::Svg),
            other => Err(format!("unknown report format {other:?}")),
        }
    }
}

/// Memorized counts per source at several thresholds.
#[derive(Debug, Clone, PartialEq)]
pub struct CountTable {
    pub alphas: Vec<f64>,
    /// source -> (total, memorized count per alpha)
    pub rows: BTreeMap<String, (usize, Vec<usize>)>,
}

impl CountTable {
    pub fn from_verdicts(verdicts: &[VerdictRecord], alphas: &[f64]) -> Self {
        let mut rows: BTreeMap<String, (usize, Vec<usize>)> = BTreeMap::new();
        for v in verdicts {
            let row = rows.entry(v.source.clone()).or_insert_with(|| (0, vec![0; alphas.len()]));
            row.0 += 1;
            for (slot, &a) in row.1.iter_mut().zip(alphas) {
                *slot += decide(v.sensitivity, a) as usize;
            }
        }
        CountTable {
            alphas: alphas.to_vec(),
            rows,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("source,total");
        for a in &self.alphas {
            let _ = write!(out, ",alpha={a}");
        }
        out.push('\n');
        for (source, (total, counts)) in &self.rows {
            let _ = write!(out, "{},{total}", csv_field(source));
            for c in counts {
                let _ = write!(out, ",{c}");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self, PipelineError> {
        let bad = |m: String| PipelineError::Artifact(format!("count table: {m}"));
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty".into()))?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.len() < 2 || cols[0] != "source" || cols[1] != "total" {
            return Err(bad(format!("unexpected header {header:?}")));
        }
        let alphas = cols[2..]
            .iter()
            .map(|c| {
                c.strip_prefix("alpha=")
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| bad(format!("bad column {c:?}")))
            })
            .collect::<Result<Vec<f64>, _>>()?;
        let mut rows = BTreeMap::new();
        for line in lines.filter(|l| !l.is_empty()) {
            let (source, rest) = split_csv_source(line).ok_or_else(|| bad(format!("bad row {line:?}")))?;
            let nums = rest
                .split(',')
                .map(|v| v.parse::<usize>().map_err(|e| bad(e.to_string())))
                .collect::<Result<Vec<_>, _>>()?;
            if nums.len() != alphas.len() + 1 {
                return Err(bad(format!("row {line:?} has {} values", nums.len())));
            }
            rows.insert(source, (nums[0], nums[1..].to_vec()));
        }
        Ok(CountTable { alphas, rows })
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::from("| Source | Samples |");
        for a in &self.alphas {
            let _ = write!(out, " Memorized (α = {a}) |");
        }
        out.push_str("\n|---|---:|");
        out.push_str(&"---:|".repeat(self.alphas.len()));
        out.push('\n');
        for (source, (total, counts)) in &self.rows {
            let _ = write!(out, "| {} | {total} |", source.replace('|', "\\|"));
            for c in counts {
                let _ = write!(out, " {c} |");
            }
            out.push('\n');
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn split_csv_source(line: &str) -> Option<(String, &str)> {
    if let Some(rest) = line.strip_prefix('"') {
        let mut source = String::new();
        let mut chars = rest.char_indices().peekable();
        while let Some((i, c)) = chars.next() {
            if c == '"' {
                if chars.peek().map(|&(_, n)| n) == Some('"') {
                    source.push('"');
                    chars.next();
                } else {
                    return rest[i + 1..].strip_prefix(',').map(|r| (source, r));
                }
            } else {
                source.push(c);
            }
        }
        None
    } else {
        line.split_once(',').map(|(s, r)| (s.to_string(), r))
    }
}

/// Sensitivity histogram, plus the FPR-vs-alpha curve over negatively
/// labeled verdicts when there are any.
pub fn render_svg(verdicts: &[VerdictRecord]) -> String {
    let sens: Vec<f64> = verdicts.iter().map(|v| v.sensitivity).collect();
    let hist = Histogram::new(&sens, HISTOGRAM_BINS);
    let negatives: Vec<f64> = verdicts
        .iter()
        .filter(|v| v.label == Some(Label::Negative))
        .map(|v| v.sensitivity)
        .collect();
    let panels = if negatives.is_empty() { 1 } else { 2 };
    let (w, h, pad) = (480.0, 300.0, 40.0);
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"11\">\n",
        w * panels as f64
    );
    let peak = hist.counts.iter().copied().max().unwrap_or(0).max(1) as f64;
    let bar_w = (w - 2.0 * pad) / hist.counts.len() as f64;
    let _ = writeln!(svg, "<text x=\"{pad}\" y=\"20\">Sensitivity distribution (n = {})</text>", sens.len());
    for (i, &c) in hist.counts.iter().enumerate() {
        let bh = (h - 2.0 * pad) * c as f64 / peak;
        let _ = writeln!(
            svg,
            "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"#4477aa\"><title>{c}</title></rect>",
            pad + i as f64 * bar_w,
            h - pad - bh,
            (bar_w - 1.0).max(0.5),
            bh
        );
    }
    let _ = writeln!(svg, "<text x=\"{pad}\" y=\"{}\">{:.3}</text>", h - pad + 14.0, hist.lo);
    let _ = writeln!(svg, "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{:.3}</text>", w - pad, h - pad + 14.0, hist.hi);

    if !negatives.is_empty() {
        let hi = negatives.iter().copied().fold(0.0f64, f64::max).max(0.01);
        let grid = AlphaGrid {
            start: 0.0,
            stop: (hi * 100.0).ceil() / 100.0 + 0.01,
            step: 0.01,
        };
        if let Ok(curve) = sweep(&negatives, grid, "labeled negatives") {
            let x0 = w + pad;
            let span = grid.stop;
            let pts: Vec<String> = curve
                .points
                .iter()
                .map(|p| {
                    format!(
                        "{:.2},{:.2}",
                        x0 + (w - 2.0 * pad) * p.alpha / span,
                        h - pad - (h - 2.0 * pad) * p.fpr
                    )
                })
                .collect();
            let _ = writeln!(svg, "<text x=\"{x0}\" y=\"20\">FPR vs threshold (n = {})</text>", negatives.len());
            let _ = writeln!(
                svg,
                "<polyline fill=\"none\" stroke=\"#cc3311\" stroke-width=\"1.5\" points=\"{}\"/>",
                pts.join(" ")
            );
            let _ = writeln!(svg, "<text x=\"{x0}\" y=\"{}\">0</text>", h - pad + 14.0);
            let _ = writeln!(svg, "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{span:.2}</text>", 2.0 * w - pad, h - pad + 14.0);
        }
    }
    svg.push_str("</svg>\n");
    svg
}

/// Write a report for `verdicts` at the given thresholds.
pub fn emit_report(
    verdicts: &[VerdictRecord],
    format: ReportFormat,
    alphas: &[f64],
    out: &Path,
) -> Result<(), PipelineError> {
    let body = match format {
        ReportFormat::Csv => CountTable::from_verdicts(verdicts, alphas).to_csv(),
        ReportFormat::Markdown => CountTable::from_verdicts(verdicts, alphas).to_markdown(),
        ReportFormat::Svg => render_svg(verdicts),
    };
    std::fs::write(out, body).map_err(io_err(out))
}

/// FPR over negatively labeled verdicts at each alpha (`None` without any).
pub fn labeled_fpr(verdicts: &[VerdictRecord], alphas: &[f64]) -> Option<Vec<(f64, f64)>> {
    let neg: Vec<f64> = verdicts
        .iter()
        .filter(|v| v.label == Some(Label::Negative))
        .map(|v| v.sensitivity)
        .collect();
    if neg.is_empty() {
        return None;
    }
    Some(alphas.iter().map(|&a| (a, fpr_at(&neg, a).expect("non-empty"))).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{MetricKind, MetricMetadata};

    fn v(id: &str, source: &str, s: f64) -> VerdictRecord {
        VerdictRecord {
            sample_id: id.into(),
            source: source.into(),
            label: None,
            m_values: vec![],
            sensitivity: s,
            alpha: None,
            memorized: None,
            argmax_step: 0,
            metric: MetricMetadata::for_kind(MetricKind::NcdPerformance),
        }
    }

    #[test]
    fn histogram_conserves_mass() {
        let vals: Vec<f64> = (0..137).map(|i| ((i * 37) % 101) as f64 / 100.0 - 0.2).collect();
        let h = Histogram::new(&vals, 20);
        assert_eq!(h.counts.len(), 20);
        assert_eq!(h.counts.iter().sum::<usize>(), 137);
        let flat = Histogram::new(&[0.3; 5], 20);
        assert_eq!(flat.counts[0], 5);
    }

    #[test]
    fn median_even_odd() {
        assert_eq!(SensitivitySummary::of(&[3.0, 1.0, 2.0]).median, Some(2.0));
        assert_eq!(SensitivitySummary::of(&[4.0, 1.0, 2.0, 3.0]).median, Some(2.5));
        assert_eq!(SensitivitySummary::of(&[]).median, None);
    }

    #[test]
    fn table_shape_and_csv_round_trip() {
        let vs = vec![
            v("1", "Bible", 0.47),
            v("2", "Bible", 0.02),
            v("3", "NYT", 0.27),
            v("4", "HumanEval", 0.42),
            v("5", "HumanEval", 0.15),
            v("6", "we,ird \"src\"", 0.5),
        ];
        let alphas = [0.14, 0.24, 0.29];
        let t = CountTable::from_verdicts(&vs, &alphas);
        assert_eq!(t.rows["HumanEval"], (2, vec![2, 1, 1]));
        assert_eq!(t.rows["NYT"], (1, vec![1, 1, 0]));
        let back = CountTable::from_csv(&t.to_csv()).unwrap();
        assert_eq!(back, t);
        let md = t.to_markdown();
        assert_eq!(md.lines().count(), 2 + 4);
    }

    #[test]
    fn svg_has_fpr_panel_only_with_negatives() {
        let mut vs = vec![v("1", "a", 0.1), v("2", "a", 0.3)];
        assert!(!render_svg(&vs).contains("polyline"));
        vs[0].label = Some(Label::Negative);
        let svg = render_svg(&vs);
        assert!(svg.contains("polyline") && svg.starts_with("<svg"));
        assert_eq!(labeled_fpr(&vs, &[0.05, 0.2]), Some(vec![(0.05, 1.0), (0.2, 0.0)]));
    }
}
