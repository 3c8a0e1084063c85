use std::path::Path;

use serde::{Deserialize, Serialize};

use super::experiment::{Aggregate, RunReport};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub domain: String,
    pub method: String,
    pub seed: u64,
    pub mean_accuracy: f64,
    pub wall_clock_seconds: f64,
}

/// Contents of `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub stream: String,
    pub num_batches: usize,
    pub batch_size: usize,
    pub methods: Vec<Aggregate>,
    pub cells: Vec<CellSummary>,
    pub total_wall_clock_seconds: f64,
}

impl Summary {
    pub fn from_report(report: &RunReport) -> Self {
        Summary {
            stream: report.stream.clone(),
            num_batches: report.num_batches,
            batch_size: report.batch_size,
            methods: report.aggregate(),
            cells: report
                .cells
                .iter()
                .map(|c| CellSummary {
                    domain: c.domain.clone(),
                    method: c.method.to_string(),
                    seed: c.seed,
                    mean_accuracy: c.mean_accuracy,
                    wall_clock_seconds: c.wall_clock_seconds,
                })
                .collect(),
            total_wall_clock_seconds: report.cells.iter().map(|c| c.wall_clock_seconds).sum(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse { line: e.line(), message: e.to_string() })
    }
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| Error::io(path, std::io::Error::other(e)))
}

/// Writes `results.csv`, `summary.json` and `coeffs.csv` into `dir`.
pub fn emit_report(report: &RunReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let path = dir.join("results.csv");
    let io = |e: csv::Error| Error::io(&path, std::io::Error::other(e));
    let mut w = csv_writer(&path)?;
    w.write_record(["domain", "method", "seed", "batch_idx", "accuracy"]).map_err(io)?;
    for c in &report.cells {
        for (i, a) in c.batch_accuracies.iter().enumerate() {
            w.write_record([c.domain.clone(), c.method.to_string(), c.seed.to_string(), i.to_string(), a.to_string()])
                .map_err(io)?;
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.join("coeffs.csv");
    let io = |e: csv::Error| Error::io(&path, std::io::Error::other(e));
    let mut w = csv_writer(&path)?;
    w.write_record(["domain", "method", "seed", "t", "expert", "alpha_enc", "alpha_head"]).map_err(io)?;
    for c in &report.cells {
        for coeffs in &c.coefficients {
            for (k, (e, h)) in coeffs.encoder.iter().zip(&coeffs.head).enumerate() {
                w.write_record([
                    c.domain.clone(),
                    c.method.to_string(),
                    c.seed.to_string(),
                    coeffs.timestamp.to_string(),
                    c.experts[k].clone(),
                    e.to_string(),
                    h.to_string(),
                ])
                .map_err(io)?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.join("summary.json");
    let json = serde_json::to_string_pretty(&Summary::from_report(report))
        .map_err(|e| Error::Config(format!("summary serialization: {e}")))?;
    std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
}
