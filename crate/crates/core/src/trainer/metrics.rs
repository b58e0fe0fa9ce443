//! Per-iteration training metrics, CSV and JSON output.

use serde::Serialize;

/// Bytes moved through the master during one dictionary-update phase.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct PhaseBytes {
    /// Partial sums received from the workers.
    pub up: u64,
    /// Dictionary broadcast to the workers.
    pub down: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct IterationMetrics {
    pub iter: usize,
    /// Objective after the full iteration (both updates).
    pub objective: f64,
    pub rmse: f64,
    /// Objective after the left update, before the right-phase coding.
    pub objective_mid: f64,
    /// Fresh codes, dictionaries before the left update.
    pub left_before: f64,
    /// Same codes (compensated), updated left dictionary.
    pub left_after: f64,
    pub right_before: f64,
    pub right_after: f64,
    pub code_seconds: f64,
    pub update_seconds: f64,
    pub left_bytes: PhaseBytes,
    pub right_bytes: PhaseBytes,
}

impl IterationMetrics {
    pub fn bytes_up(&self) -> u64 {
        self.left_bytes.up + self.right_bytes.up
    }

    pub fn bytes_down(&self) -> u64 {
        self.left_bytes.down + self.right_bytes.down
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RunMetrics {
    pub nodes: usize,
    pub samples: usize,
    pub patch_side: usize,
    /// Row 0 holds the initial objective before any update.
    pub iterations: Vec<IterationMetrics>,
    /// Wall time of the main loop (excludes setup and result collection).
    pub total_seconds: f64,
    /// Shard assignment and initial dictionary broadcast.
    pub setup_bytes: u64,
}

pub const CSV_HEADER: &str = "iter,objective,rmse,code_seconds,update_seconds,bytes_up,bytes_down";

impl RunMetrics {
    pub fn rmse_of(&self, objective: f64) -> f64 {
        rmse_from_objective(objective, self.samples, self.patch_side)
    }

    pub fn final_objective(&self) -> Option<f64> {
        self.iterations.last().map(|it| it.objective)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for it in &self.iterations {
            out.push_str(&format!(
                "{},{:e},{:e},{:.6},{:.6},{},{}\n",
                it.iter,
                it.objective,
                it.rmse,
                it.code_seconds,
                it.update_seconds,
                it.bytes_up(),
                it.bytes_down()
            ));
        }
        out
    }

    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "nodes": self.nodes,
            "samples": self.samples,
            "patch_side": self.patch_side,
            "iterations": self.iterations.len().saturating_sub(1),
            "initial_objective": self.iterations.first().map(|i| i.objective),
            "final_objective": self.final_objective(),
            "final_rmse": self.iterations.last().map(|i| i.rmse),
            "total_seconds": self.total_seconds,
            "setup_bytes": self.setup_bytes,
            "per_iteration": self.iterations,
        })
    }
}

/// Per-pixel RMSE: `sqrt(objective / (N · m²))`.
pub fn rmse_from_objective(objective: f64, samples: usize, m: usize) -> f64 {
    (objective / (samples * m * m) as f64).sqrt()
}
