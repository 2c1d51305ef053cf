//! Session accuracies, their average, and run-level results.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::write_atomic;
use crate::error::{Result, SvtError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionMetrics {
    #[serde(rename = "i")]
    pub session_index: usize,
    /// Percent in `[0, 100]`.
    pub top1: f64,
    pub n_test: usize,
    #[serde(rename = "n_classes")]
    pub n_classes_seen: usize,
}

/// `100 × correct / n`.
pub fn top1_accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(SvtError::Input("no predictions to score".into()));
    }
    if predictions.len() != labels.len() {
        return Err(SvtError::Input(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(100.0 * correct as f64 / predictions.len() as f64)
}

pub fn average_accuracy(session_accs: &[f64]) -> Result<f64> {
    if session_accs.is_empty() {
        return Err(SvtError::Input("no session accuracies to average".into()));
    }
    Ok(session_accs.iter().sum::<f64>() / session_accs.len() as f64)
}

/// Percentage-point gain of `ours_avg` over `baseline_avg`.
pub fn relative_improvement(ours_avg: f64, baseline_avg: f64) -> f64 {
    ours_avg - baseline_avg
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub config_hash: String,
    pub seed: u64,
    #[serde(rename = "sessions")]
    pub per_session: Vec<SessionMetrics>,
    pub avg: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_log_ref: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_ref: Option<PathBuf>,
}

impl RunResult {
    pub fn new(config_hash: String, seed: u64, per_session: Vec<SessionMetrics>) -> Result<Self> {
        let accs: Vec<f64> = per_session.iter().map(|m| m.top1).collect();
        let avg = average_accuracy(&accs)?;
        Ok(RunResult {
            config_hash,
            seed,
            per_session,
            avg,
            loss_log_ref: None,
            checkpoint_ref: None,
        })
    }

    pub fn accuracies(&self) -> Vec<f64> {
        self.per_session.iter().map(|m| m.top1).collect()
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| SvtError::Format(e.to_string()))?;
        write_atomic(path, text.as_bytes())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| SvtError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| SvtError::Format(format!("{}: {e}", path.display())))
    }
}
