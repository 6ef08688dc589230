//! Perturbation sensitivity and the memorization decision.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SensitivityError {
    #[error("performance curve needs at least two points, got {0}")]
    CurveTooShort(usize),
    #[error("invalid performance curve: {0}")]
    BadCurve(String),
}

/// Mean task-performance score per perturbation intensity for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerformanceCurve {
    pub sample_id: String,
    pub intensities: Vec<u32>,
    pub m_values: Vec<f64>,
}

impl PerformanceCurve {
    pub fn new(sample_id: impl Into<String>, intensities: Vec<u32>, m_values: Vec<f64>) -> Result<Self, SensitivityError> {
        if intensities.len() != m_values.len() {
            return Err(SensitivityError::BadCurve(format!(
                "{} intensities but {} m-values",
                intensities.len(),
                m_values.len()
            )));
        }
        if intensities.first().is_some_and(|&k| k != 0) || intensities.windows(2).any(|w| w[0] >= w[1]) {
            return Err(SensitivityError::BadCurve(
                "intensities must start at 0 and strictly increase".into(),
            ));
        }
        Ok(PerformanceCurve {
            sample_id: sample_id.into(),
            intensities,
            m_values,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityVerdict {
    pub sample_id: String,
    pub sensitivity: f64,
    pub alpha: f64,
    pub memorized: bool,
    pub argmax_step: usize,
}

/// Largest drop `m[j] - m[j+1]` over consecutive intensities, starting from
/// the unperturbed point. Returns the drop and the smallest `j` attaining it.
/// Negative when the curve only rises.
pub fn compute_sensitivity(m_values: &[f64]) -> Result<(f64, usize), SensitivityError> {
    if m_values.len() < 2 {
        return Err(SensitivityError::CurveTooShort(m_values.len()));
    }
    let mut best = (f64::NEG_INFINITY, 0);
    for (j, w) in m_values.windows(2).enumerate() {
        let drop = w[0] - w[1];
        if drop > best.0 {
            best = (drop, j);
        }
    }
    Ok(best)
}

/// Memorized iff sensitivity strictly exceeds alpha.
pub fn decide(sensitivity: f64, alpha: f64) -> bool {
    sensitivity > alpha
}

pub fn verdict(curve: &PerformanceCurve, alpha: f64) -> Result<SensitivityVerdict, SensitivityError> {
    let (sensitivity, argmax_step) = compute_sensitivity(&curve.m_values)?;
    Ok(SensitivityVerdict {
        sample_id: curve.sample_id.clone(),
        sensitivity,
        alpha,
        memorized: decide(sensitivity, alpha),
        argmax_step,
    })
}
