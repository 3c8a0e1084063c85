//! Parameter-space geometry between experts: per-layer angles, norm ratios,
//! depth-wise angular drift and the norm shrinkage of equal-weight averaging.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{cosine_slices, norm, LayerSelector, ParameterSet};

/// Pair-count convention used by [`mean_angular_drift`].
pub const PAIR_CONVENTION: &str = "mean over all K(K-1)/2 unordered expert pairs";

/// Angle in degrees between the flattened (weights then bias) layers.
pub fn layer_angle(a: &ParameterSet, b: &ParameterSet, layer: &LayerSelector) -> Result<f64> {
    a.check_compatible(b)?;
    let (x, y) = (a.flatten_layer(layer)?, b.flatten_layer(layer)?);
    Ok(cosine_slices(x.data(), y.data())?.acos().to_degrees())
}

/// `||p_a|| / ||p_b||` for the selected layer.
pub fn norm_ratio(a: &ParameterSet, b: &ParameterSet, layer: &LayerSelector) -> Result<f64> {
    a.check_compatible(b)?;
    let (x, y) = (a.flatten_layer(layer)?, b.flatten_layer(layer)?);
    let d = norm(&y);
    if d == 0.0 {
        return Err(Error::DegenerateVector(format!("layer {} of the second model is zero", layer.label())));
    }
    Ok(norm(&x) / d)
}

/// Percent norm lost when averaging two equal-norm vectors `angle` degrees
/// apart: `100 (1 - cos(angle / 2))`.
pub fn signal_loss(angle_degrees: f64) -> Result<f64> {
    if !(0.0..=180.0).contains(&angle_degrees) {
        return Err(Error::Domain(format!("angle {angle_degrees} outside [0, 180] degrees")));
    }
    Ok(100.0 * (1.0 - (angle_degrees.to_radians() / 2.0).cos()))
}

/// Geometry of one expert pair at one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairGeometry {
    pub layer: String,
    pub expert_i: usize,
    pub expert_j: usize,
    pub angle_deg: f64,
    pub norm_ratio: f64,
}

/// Per-layer summary across pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthDrift {
    pub layer: String,
    pub mean_angle_deg: f64,
    pub signal_loss_percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub pair_convention: String,
    /// Layer-major, then `i < j` in lexicographic order.
    pub pairs: Vec<PairGeometry>,
    /// Encoder blocks in order, then the head.
    pub depths: Vec<DepthDrift>,
}

impl DriftReport {
    pub fn compute(pool: &[&ParameterSet]) -> Result<Self> {
        if pool.len() < 2 {
            return Err(Error::Config(format!("drift needs at least two experts, got {}", pool.len())));
        }
        for m in &pool[1..] {
            pool[0].check_compatible(m)?;
        }
        let mut pairs = Vec::new();
        for sel in pool[0].selectors() {
            for i in 0..pool.len() {
                for j in i + 1..pool.len() {
                    pairs.push(PairGeometry {
                        layer: sel.label().to_string(),
                        expert_i: i,
                        expert_j: j,
                        angle_deg: layer_angle(pool[i], pool[j], &sel)?,
                        norm_ratio: norm_ratio(pool[i], pool[j], &sel)?,
                    });
                }
            }
        }
        Self::from_pairs(pairs)
    }

    /// Rebuilds the depth summaries from pair rows, keeping first-seen layer order.
    pub fn from_pairs(pairs: Vec<PairGeometry>) -> Result<Self> {
        let mut layers: Vec<(String, f64, usize)> = Vec::new();
        for p in &pairs {
            match layers.iter_mut().find(|(l, _, _)| *l == p.layer) {
                Some(entry) => {
                    entry.1 += p.angle_deg;
                    entry.2 += 1;
                }
                None => layers.push((p.layer.clone(), p.angle_deg, 1)),
            }
        }
        let depths = layers
            .into_iter()
            .map(|(layer, sum, n)| {
                let mean = sum / n as f64;
                Ok(DepthDrift {
                    layer,
                    mean_angle_deg: mean,
                    signal_loss_percent: signal_loss(mean.clamp(0.0, 180.0))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(DriftReport { pair_convention: PAIR_CONVENTION.to_string(), pairs, depths })
    }

    /// Mean angle of the head.
    pub fn head_drift(&self) -> Option<f64> {
        self.depths.iter().find(|d| d.layer == "head").map(|d| d.mean_angle_deg)
    }

    /// Mean of the encoder blocks' mean angles.
    pub fn encoder_drift(&self) -> Option<f64> {
        let enc: Vec<f64> = self.depths.iter().filter(|d| d.layer != "head").map(|d| d.mean_angle_deg).collect();
        (!enc.is_empty()).then(|| enc.iter().sum::<f64>() / enc.len() as f64)
    }
}

/// Mean pairwise angle per encoder block, then the head.
pub fn mean_angular_drift(pool: &[&ParameterSet]) -> Result<Vec<f64>> {
    Ok(DriftReport::compute(pool)?.depths.into_iter().map(|d| d.mean_angle_deg).collect())
}

const HEATMAP_HEADER: [&str; 5] = ["layer", "expert_i", "expert_j", "angle_deg", "norm_ratio"];

/// Writes the long-format pairwise table with 6 decimal places.
pub fn write_heatmap_csv(report: &DriftReport, path: &Path) -> Result<()> {
    let io = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(HEATMAP_HEADER).map_err(io)?;
    for p in &report.pairs {
        w.write_record([
            p.layer.clone(),
            p.expert_i.to_string(),
            p.expert_j.to_string(),
            format!("{:.6}", p.angle_deg),
            format!("{:.6}", p.norm_ratio),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Computes the pool's drift report and writes it as a heatmap table.
pub fn export_heatmap_csv(pool: &[&ParameterSet], path: &Path) -> Result<DriftReport> {
    let report = DriftReport::compute(pool)?;
    write_heatmap_csv(&report, path)?;
    Ok(report)
}

pub fn read_heatmap_csv(path: &Path) -> Result<DriftReport> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    let header = r.headers().map_err(|e| Error::Parse { line: 1, message: e.to_string() })?;
    if header.iter().ne(HEATMAP_HEADER) {
        return Err(Error::Parse { line: 1, message: format!("unexpected header {header:?}") });
    }
    let mut pairs = Vec::new();
    for (n, rec) in r.records().enumerate() {
        let line = n + 2;
        let rec = rec.map_err(|e| Error::Parse { line, message: e.to_string() })?;
        let field = |i: usize| rec.get(i).ok_or_else(|| Error::Parse { line, message: format!("missing column {i}") });
        let bad = |e: &dyn std::fmt::Display| Error::Parse { line, message: e.to_string() };
        pairs.push(PairGeometry {
            layer: field(0)?.to_string(),
            expert_i: field(1)?.parse().map_err(|e| bad(&e))?,
            expert_j: field(2)?.parse().map_err(|e| bad(&e))?,
            angle_deg: field(3)?.parse().map_err(|e| bad(&e))?,
            norm_ratio: field(4)?.parse().map_err(|e| bad(&e))?,
        });
    }
    DriftReport::from_pairs(pairs)
}
