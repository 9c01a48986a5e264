//! Metrics and scoring: 3D box IoU, threshold accuracies, 2D mask IoU, and
//! closest-center box matching.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::perception::Mask2D;
use crate::projection::Aabb3;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("cannot build a report from zero records")]
    NoRecords,
    #[error("mask dimensions differ: predicted {pred_w}x{pred_h}, ground truth {gt_w}x{gt_h}")]
    MaskDimensions {
        pred_w: u32,
        pred_h: u32,
        gt_w: u32,
        gt_h: u32,
    },
    #[error("cannot access {path}: {detail}")]
    Io { path: String, detail: String },
    #[error("malformed record on line {line}: {detail}")]
    MalformedRecord { line: usize, detail: String },
}

/// Volume-overlap ratio of two axis-aligned boxes.
///
/// Thresholded strictly (`> 0.25`, `> 0.5`) by the callers. Zero-volume
/// boxes score 0 against everything except an identical zero-volume box,
/// which scores 1 by convention so exact degenerate matches still count.
pub fn iou3d(a: &Aabb3, b: &Aabb3) -> f64 {
    if a == b {
        return 1.0;
    }
    let mut intersection = 1.0;
    for axis in 0..3 {
        let lo = a.min[axis].max(b.min[axis]);
        let hi = a.max[axis].min(b.max[axis]);
        if hi <= lo {
            return 0.0;
        }
        intersection *= hi - lo;
    }
    let union = a.volume() + b.volume() - intersection;
    if union <= 0.0 {
        return 0.0;
    }
    intersection / union
}

/// Pixel-overlap ratio of two binary masks of equal dimensions. Two empty
/// masks score 1 by convention: predicting nothing when there is nothing
/// is a perfect answer.
pub fn mask_iou(pred: &Mask2D, gt: &Mask2D) -> Result<f64, EvalError> {
    if pred.width != gt.width || pred.height != gt.height {
        return Err(EvalError::MaskDimensions {
            pred_w: pred.width,
            pred_h: pred.height,
            gt_w: gt.width,
            gt_h: gt.height,
        });
    }
    let mut intersection = 0u64;
    let mut union = 0u64;
    for v in 0..pred.height {
        for u in 0..pred.width {
            let (p, g) = (pred.get(u, v), gt.get(u, v));
            intersection += (p && g) as u64;
            union += (p || g) as u64;
        }
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(intersection as f64 / union as f64)
}

/// Index of the ground-truth box whose center is nearest to the predicted
/// box center; ties go to the lowest index.
pub fn nr3d_match(pred: &Aabb3, gt_boxes: &[Aabb3]) -> usize {
    assert!(!gt_boxes.is_empty(), "need at least one ground-truth box");
    let pc = pred.center();
    let mut best = (0usize, f64::INFINITY);
    for (i, gt) in gt_boxes.iter().enumerate() {
        let gc = gt.center();
        let d2 = (0..3).map(|k| (pc[k] - gc[k]).powi(2)).sum::<f64>();
        if d2 < best.1 {
            best = (i, d2);
        }
    }
    best.0
}

/// One scored query. Hits are derived from the IoU at construction so the
/// strict-threshold rule cannot drift.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub query_id: String,
    pub iou3d: f64,
    pub hit25: bool,
    pub hit50: bool,
    /// Accuracy buckets this query belongs to; empty → overall only.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub splits: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_iou: Option<f64>,
}

impl EvalRecord {
    pub fn new(
        query_id: impl Into<String>,
        iou: f64,
        splits: Vec<String>,
        mask_iou: Option<f64>,
    ) -> EvalRecord {
        EvalRecord {
            query_id: query_id.into(),
            iou3d: iou,
            hit25: iou > 0.25,
            hit50: iou > 0.5,
            splits,
            mask_iou,
        }
    }
}

/// Accuracy within one bucket, percentages rounded to one decimal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitAccuracy {
    pub count: usize,
    pub acc_at_25: f64,
    pub acc_at_50: f64,
}

fn percent(hits: usize, total: usize) -> f64 {
    (hits as f64 / total as f64 * 100.0 * 10.0).round() / 10.0
}

fn bucket_accuracy(records: &[&EvalRecord]) -> SplitAccuracy {
    let hits25 = records.iter().filter(|r| r.hit25).count();
    let hits50 = records.iter().filter(|r| r.hit50).count();
    SplitAccuracy {
        count: records.len(),
        acc_at_25: percent(hits25, records.len()),
        acc_at_50: percent(hits50, records.len()),
    }
}

/// Per-split and overall threshold accuracies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub overall: SplitAccuracy,
    pub splits: BTreeMap<String, SplitAccuracy>,
    /// Mean 2D mask IoU over records that carry one, when any do.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_mask_iou: Option<f64>,
}

impl Report {
    /// Aligned-column text rendering, splits alphabetical, overall last.
    pub fn render_table(&self) -> String {
        let name_width = self
            .splits
            .keys()
            .map(|s| s.len())
            .chain(["overall".len()].into_iter())
            .max()
            .unwrap_or(7)
            .max(5);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<name_width$}  {:>6}  {:>8}  {:>8}",
            "split", "count", "Acc@0.25", "Acc@0.50"
        );
        for (name, acc) in &self.splits {
            let _ = writeln!(
                out,
                "{:<name_width$}  {:>6}  {:>8.1}  {:>8.1}",
                name, acc.count, acc.acc_at_25, acc.acc_at_50
            );
        }
        let _ = writeln!(
            out,
            "{:<name_width$}  {:>6}  {:>8.1}  {:>8.1}",
            "overall", self.overall.count, self.overall.acc_at_25, self.overall.acc_at_50
        );
        if let Some(m) = self.mean_mask_iou {
            let _ = writeln!(out, "mean 2D mask IoU: {m:.3}");
        }
        out
    }
}

/// Aggregates records into per-split and overall accuracies. The overall row
/// covers every record given, so when the splits partition the records it
/// equals their count-weighted mean.
pub fn accuracy_report(records: &[EvalRecord]) -> Result<Report, EvalError> {
    if records.is_empty() {
        return Err(EvalError::NoRecords);
    }
    let mut by_split: BTreeMap<String, Vec<&EvalRecord>> = BTreeMap::new();
    for record in records {
        for split in &record.splits {
            by_split.entry(split.clone()).or_default().push(record);
        }
    }
    let splits = by_split
        .into_iter()
        .map(|(name, members)| (name, bucket_accuracy(&members)))
        .collect();
    let with_mask: Vec<f64> = records.iter().filter_map(|r| r.mask_iou).collect();
    let mean_mask_iou = if with_mask.is_empty() {
        None
    } else {
        Some(with_mask.iter().sum::<f64>() / with_mask.len() as f64)
    };
    Ok(Report {
        overall: bucket_accuracy(&records.iter().collect::<Vec<_>>()),
        splits,
        mean_mask_iou,
    })
}

/// Writes records as JSON-lines (one record per line).
pub fn write_records_jsonl(path: &Path, records: &[EvalRecord]) -> Result<(), EvalError> {
    let io_err = |e: std::io::Error| EvalError::Io {
        path: path.display().to_string(),
        detail: e.to_string(),
    };
    let mut text = String::new();
    for record in records {
        let line = serde_json::to_string(record).expect("record serializes");
        text.push_str(&line);
        text.push('\n');
    }
    std::fs::write(path, text).map_err(io_err)
}

/// Reads records from a JSON-lines file, skipping blank lines.
pub fn read_records_jsonl(path: &Path) -> Result<Vec<EvalRecord>, EvalError> {
    let text = std::fs::read_to_string(path).map_err(|e| EvalError::Io {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(line).map_err(|e| EvalError::MalformedRecord {
            line: i + 1,
            detail: e.to_string(),
        })?;
        records.push(record);
    }
    Ok(records)
}
