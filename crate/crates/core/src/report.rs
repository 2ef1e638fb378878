//! Evaluation reports: per-dataset metric rows, optional profiler numbers,
//! JSON and aligned-column CSV serialization (floats at 4 decimals, matching
//! the usual table formatting).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::write_json;
use crate::error::{Error, Result};
use crate::metrics::IntegrityReport;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalRow {
    pub dataset: String,
    pub model: String,
    pub m_dice: f64,
    pub m_iou: f64,
    pub mae: f64,
    pub fnr: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Profile {
    pub param_count: u64,
    pub mac_count: u64,
    /// Median frames per second over the timed forwards; hardware-specific.
    pub fps: f64,
    pub input_size: usize,
    pub hardware: String,
}

impl Profile {
    /// Params in millions, MACs in billions, FPS — the usual table units.
    pub fn table_units(&self) -> (f64, f64, f64) {
        (
            self.param_count as f64 / 1e6,
            self.mac_count as f64 / 1e9,
            self.fps,
        )
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub threshold: f64,
    pub rows: Vec<EvalRow>,
    pub profile: Option<Profile>,
}

fn pad(s: &str, width: usize) -> String {
    format!("{s:<width$}")
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut name_width = "dataset".len();
        let mut model_width = "model".len();
        for row in &self.rows {
            name_width = name_width.max(row.dataset.len());
            model_width = model_width.max(row.model.len());
        }
        let mut out = format!(
            "{}, {}, mDice , mIoU  , MAE   , FNR\n",
            pad("dataset", name_width),
            pad("model", model_width)
        );
        for row in &self.rows {
            out.push_str(&format!(
                "{}, {}, {:.4}, {:.4}, {:.4}, {:.4}\n",
                pad(&row.dataset, name_width),
                pad(&row.model, model_width),
                row.m_dice,
                row.m_iou,
                row.mae,
                row.fnr
            ));
        }
        out
    }

    pub fn write(&self, json_path: &Path, csv_path: &Path) -> Result<()> {
        write_json(self, json_path)?;
        std::fs::write(csv_path, self.to_csv()).map_err(|e| Error::io(csv_path, e))
    }
}

/// Integrity CSV: one row per image plus a summary row.
pub fn integrity_csv(report: &IntegrityReport) -> String {
    let mut out =
        String::from("image, gt_components, macro_misses, micro_deficit, fnr\n");
    for row in &report.per_image {
        out.push_str(&format!(
            "{}, {}, {}, {:.4}, {:.4}\n",
            row.id, row.gt_components, row.macro_misses, row.micro_deficit, row.fnr
        ));
    }
    out.push_str(&format!(
        "TOTAL, {}, {}, {:.4}, {:.4}\n",
        report.total_components, report.total_macro_misses, report.micro_mean_deficit,
        report.mean_fnr
    ));
    out
}

/// Best-effort hardware description for profiler stamps.
pub fn hardware_description() -> String {
    let cores = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1);
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|body| {
            body.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|s| s.trim().to_string())
        })
        .unwrap_or_else(|| std::env::consts::ARCH.to_string());
    format!("{cpu} ({cores} cores, {})", std::env::consts::OS)
}
