//! Pixel-level F1 and ROC AUC, and the image-count weighted average across datasets.

use serde::{Deserialize, Serialize};

use crate::diffusion::{MaskState, TAMPERED};
use crate::error::{invalid, Result};

fn check_len(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(invalid(format!(
            "{what}: prediction has {a} pixels, ground truth has {b}"
        )));
    }
    Ok(())
}

/// `2TP / (2TP + FP + FN)` with tampered as the positive class. Both masks empty scores
/// 1; an empty ground truth with any predicted positive scores 0.
pub fn f1(pred: &MaskState, gt: &MaskState) -> Result<f64> {
    if pred.height() != gt.height() || pred.width() != gt.width() {
        return Err(crate::Error::ShapeMismatch {
            op: "f1",
            lhs: vec![pred.height(), pred.width()],
            rhs: vec![gt.height(), gt.width()],
        });
    }
    let (mut tp, mut fp, mut fne) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
        match (p == TAMPERED, g == TAMPERED) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fne += 1,
            _ => {}
        }
    }
    if tp + fp + fne == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * tp as f64 / (2 * tp + fp + fne) as f64)
}

/// Mann-Whitney AUC: probability that a tampered pixel scores above an untampered one,
/// with ties counted as one half. Computed from average ranks.
pub fn auc(probs: &[f64], gt: &MaskState) -> Result<f64> {
    check_len(probs.len(), gt.pixels(), "auc")?;
    if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(invalid(format!("probability {p} outside [0, 1]")));
    }
    let pos = gt.labels().iter().filter(|&&l| l == TAMPERED).count();
    let neg = gt.pixels() - pos;
    if pos == 0 || neg == 0 {
        return Err(invalid(
            "AUC is undefined when the ground truth has a single class",
        ));
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[a].total_cmp(&probs[b]));
    let labels = gt.labels();
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && probs[order[j + 1]] == probs[order[i]] {
            j += 1;
        }
        // Ranks i+1 ..= j+1 share their mean.
        let mean_rank = (i + j + 2) as f64 / 2.0;
        let tied_pos = order[i..=j]
            .iter()
            .filter(|&&k| labels[k] == TAMPERED)
            .count();
        rank_sum += mean_rank * tied_pos as f64;
        i = j + 1;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub name: String,
    /// Number of images.
    pub num: usize,
    pub f1: f64,
    /// Mean AUC over the images where it is defined.
    pub auc: Option<f64>,
}

/// `sum_i metric_i * num_i / sum_i num_i`.
pub fn weighted_average(entries: &[(f64, usize)]) -> Result<f64> {
    if entries.is_empty() {
        return Err(invalid("weighted average of no datasets"));
    }
    if entries.iter().any(|&(_, n)| n == 0) {
        return Err(invalid("every dataset needs at least one image"));
    }
    let total: usize = entries.iter().map(|&(_, n)| n).sum();
    Ok(entries.iter().map(|&(m, n)| m * n as f64).sum::<f64>() / total as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub datasets: Vec<DatasetEntry>,
    pub ave_f1: f64,
    pub ave_auc: Option<f64>,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub provenance: serde_json::Value,
}

/// Per-image scores for one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub id: String,
    pub f1: f64,
    pub auc: Option<f64>,
}

/// Dataset entry from per-image scores: mean F1 over all images, mean AUC over the
/// images with both classes present.
pub fn dataset_entry(name: &str, scores: &[ImageScore]) -> Result<DatasetEntry> {
    if scores.is_empty() {
        return Err(invalid(format!("dataset '{name}' has no images")));
    }
    let aucs: Vec<f64> = scores.iter().filter_map(|s| s.auc).collect();
    Ok(DatasetEntry {
        name: name.to_string(),
        num: scores.len(),
        f1: scores.iter().map(|s| s.f1).sum::<f64>() / scores.len() as f64,
        auc: (!aucs.is_empty()).then(|| aucs.iter().sum::<f64>() / aucs.len() as f64),
    })
}

impl MetricsReport {
    pub fn from_entries(
        datasets: Vec<DatasetEntry>,
        provenance: serde_json::Value,
    ) -> Result<Self> {
        let ave_f1 = weighted_average(&datasets.iter().map(|d| (d.f1, d.num)).collect::<Vec<_>>())?;
        let with_auc: Vec<(f64, usize)> = datasets
            .iter()
            .filter_map(|d| d.auc.map(|a| (a, d.num)))
            .collect();
        let ave_auc = if with_auc.is_empty() {
            None
        } else {
            Some(weighted_average(&with_auc)?)
        };
        Ok(MetricsReport {
            datasets,
            ave_f1,
            ave_auc,
            provenance,
        })
    }

    pub fn table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |a| format!("{a:.4}"));
        let mut s = format!("{:<16} {:>6} {:>8} {:>8}\n", "dataset", "num", "F1", "AUC");
        for d in &self.datasets {
            s += &format!(
                "{:<16} {:>6} {:>8.4} {:>8}\n",
                d.name,
                d.num,
                d.f1,
                fmt(d.auc)
            );
        }
        let n: usize = self.datasets.iter().map(|d| d.num).sum();
        s += &format!(
            "{:<16} {:>6} {:>8.4} {:>8}\n",
            "Ave",
            n,
            self.ave_f1,
            fmt(self.ave_auc)
        );
        s
    }
}
