//! Threshold calibration on a corpus known to be outside the training set.
//!
//! Every sample of such a corpus flagged as memorized is a false positive,
//! so the false positive rate at a threshold is simply the share of
//! sensitivities above it.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_TARGET_FPR: f64 = 0.05;

#[derive(Debug, Error)]
pub enum CalibrateError {
    #[error("no sensitivities to calibrate on")]
    EmptyInput,
    #[error("bad alpha grid: {0}")]
    BadGrid(String),
    #[error("target FPR {0} outside [0, 1]")]
    BadTarget(f64),
    #[error("no grid threshold reaches FPR <= {0}")]
    Unattainable(f64),
    #[error("invalid calibration curve: {0}")]
    BadCurve(String),
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed {what}: {reason}")]
    Parse { what: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaGrid {
    pub start: f64,
    pub stop: f64,
    pub step: f64,
}

impl Default for AlphaGrid {
    fn default() -> Self {
        AlphaGrid {
            start: 0.0,
            stop: 1.0,
            step: 0.01,
        }
    }
}

impl AlphaGrid {
    /// Grid values `start + j * step` up to and including `stop`, rounded to
    /// 1e-12 so that e.g. 0.1 * 3 lands on 0.3.
    pub fn values(&self) -> Result<Vec<f64>, CalibrateError> {
        if !(self.step > 0.0) || !self.step.is_finite() {
            return Err(CalibrateError::BadGrid(format!("step {} must be positive", self.step)));
        }
        if !(self.start < self.stop) {
            return Err(CalibrateError::BadGrid(format!(
                "start {} must be below stop {}",
                self.start, self.stop
            )));
        }
        let n = ((self.stop - self.start) / self.step + 1e-9).floor() as usize + 1;
        Ok((0..n)
            .map(|j| ((self.start + j as f64 * self.step) * 1e12).round() / 1e12)
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationPoint {
    pub alpha: f64,
    pub fpr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationCurve {
    pub points: Vec<CalibrationPoint>,
    pub negative_corpus_id: String,
    pub n_samples: usize,
}

impl CalibrationCurve {
    pub fn new(points: Vec<CalibrationPoint>, negative_corpus_id: impl Into<String>, n_samples: usize) -> Result<Self, CalibrateError> {
        if points.windows(2).any(|w| w[0].alpha >= w[1].alpha) {
            return Err(CalibrateError::BadCurve("alphas must strictly increase".into()));
        }
        if points.windows(2).any(|w| w[1].fpr > w[0].fpr) {
            return Err(CalibrateError::BadCurve("fpr must not increase with alpha".into()));
        }
        if points.iter().any(|p| !(0.0..=1.0).contains(&p.fpr)) {
            return Err(CalibrateError::BadCurve("fpr outside [0, 1]".into()));
        }
        Ok(CalibrationCurve {
            points,
            negative_corpus_id: negative_corpus_id.into(),
            n_samples,
        })
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<(), CalibrateError> {
        let path = path.as_ref();
        let mut out = String::from("alpha,fpr\n");
        for p in &self.points {
            out.push_str(&format!("{},{}\n", p.alpha, p.fpr));
        }
        fs::write(path, out).map_err(|source| CalibrateError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

/// Share of sensitivities strictly above `alpha`.
pub fn fpr_at(sensitivities: &[f64], alpha: f64) -> Result<f64, CalibrateError> {
    if sensitivities.is_empty() {
        return Err(CalibrateError::EmptyInput);
    }
    let above = sensitivities.iter().filter(|&&s| s > alpha).count();
    Ok(above as f64 / sensitivities.len() as f64)
}

pub fn sweep(sensitivities: &[f64], grid: AlphaGrid, negative_corpus_id: &str) -> Result<CalibrationCurve, CalibrateError> {
    if sensitivities.is_empty() {
        return Err(CalibrateError::EmptyInput);
    }
    let points = grid
        .values()?
        .into_iter()
        .map(|alpha| {
            Ok(CalibrationPoint {
                alpha,
                fpr: fpr_at(sensitivities, alpha)?,
            })
        })
        .collect::<Result<Vec<_>, CalibrateError>>()?;
    CalibrationCurve::new(points, negative_corpus_id, sensitivities.len())
}

/// Smallest grid alpha whose FPR is at most `target_fpr`.
pub fn select_threshold(curve: &CalibrationCurve, target_fpr: f64) -> Result<f64, CalibrateError> {
    if !(0.0..=1.0).contains(&target_fpr) {
        return Err(CalibrateError::BadTarget(target_fpr));
    }
    if curve.points.is_empty() {
        return Err(CalibrateError::BadCurve("empty curve".into()));
    }
    curve
        .points
        .iter()
        .find(|p| p.fpr <= target_fpr)
        .map(|p| p.alpha)
        .ok_or(CalibrateError::Unattainable(target_fpr))
}

/// Persisted outcome of a calibration, read back by `decide` and `run`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdStore {
    pub alpha: f64,
    pub target_fpr: f64,
    pub negative_corpus_id: String,
    pub n_samples: usize,
    pub grid: AlphaGrid,
}

impl ThresholdStore {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CalibrateError> {
        let path = path.as_ref();
        let text = toml::to_string_pretty(self).map_err(|e| CalibrateError::Parse {
            what: "threshold store".into(),
            reason: e.to_string(),
        })?;
        let mut f = fs::File::create(path).map_err(|source| CalibrateError::Io {
            path: path.display().to_string(),
            source,
        })?;
        f.write_all(text.as_bytes()).map_err(|source| CalibrateError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CalibrateError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| CalibrateError::Io {
            path: path.display().to_string(),
            source,
        })?;
        toml::from_str(&text).map_err(|e| CalibrateError::Parse {
            what: path.display().to_string(),
            reason: e.to_string(),
        })
    }
}
