//! Grounding metrics over an evaluation split: Pr@τ, meanIoU and cmuIoU.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{overlap, BoxCxCyWH};

/// IoU thresholds reported as Pr@τ.
pub const THRESHOLDS: [f64; 5] = [0.5, 0.6, 0.7, 0.8, 0.9];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Fraction of samples with IoU ≥ τ, parallel to [`THRESHOLDS`].
    pub pr_at: [f64; 5],
    pub mean_iou: f64,
    pub cmu_iou: f64,
    pub n_samples: usize,
}

impl MetricsReport {
    /// Report from per-sample `(intersection, union)` areas.
    pub fn from_areas(areas: &[(f64, f64)]) -> Result<Self> {
        if areas.is_empty() {
            return Err(Error::Usage("cannot evaluate an empty prediction set".into()));
        }
        let mut hits = [0usize; 5];
        let (mut sum_ratio, mut sum_i, mut sum_u) = (0.0, 0.0, 0.0);
        for &(i, u) in areas {
            let iou = if u > 0.0 { i / u } else { 0.0 };
            for (h, &t) in hits.iter_mut().zip(&THRESHOLDS) {
                if iou >= t {
                    *h += 1;
                }
            }
            sum_ratio += iou;
            sum_i += i;
            sum_u += u;
        }
        let n = areas.len() as f64;
        Ok(Self {
            pr_at: hits.map(|h| h as f64 / n),
            mean_iou: sum_ratio / n,
            cmu_iou: if sum_u > 0.0 { sum_i / sum_u } else { 0.0 },
            n_samples: areas.len(),
        })
    }

    pub fn pr(&self, tau: f64) -> Option<f64> {
        THRESHOLDS.iter().position(|&t| t == tau).map(|i| self.pr_at[i])
    }

    /// `key=value` lines.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for (t, v) in THRESHOLDS.iter().zip(&self.pr_at) {
            let _ = writeln!(s, "pr@{t:.1}={v}");
        }
        let _ = writeln!(s, "mean_iou={}", self.mean_iou);
        let _ = writeln!(s, "cmu_iou={}", self.cmu_iou);
        let _ = writeln!(s, "n_samples={}", self.n_samples);
        s
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<10} {:>8}", "metric", "value");
        for (t, v) in THRESHOLDS.iter().zip(&self.pr_at) {
            let _ = writeln!(s, "{:<10} {:>8.4}", format!("Pr@{t:.1}"), v);
        }
        let _ = writeln!(s, "{:<10} {:>8.4}", "meanIoU", self.mean_iou);
        let _ = writeln!(s, "{:<10} {:>8.4}", "cmuIoU", self.cmu_iou);
        let _ = writeln!(s, "{:<10} {:>8}", "samples", self.n_samples);
        s
    }
}

/// Metrics over `(predicted, ground truth)` box pairs.
pub fn evaluate(pairs: &[(BoxCxCyWH, BoxCxCyWH)]) -> Result<MetricsReport> {
    let areas: Vec<(f64, f64)> = pairs
        .iter()
        .map(|(p, g)| {
            let ov = overlap(p.to_array(), g.to_array());
            (ov.intersection, ov.union)
        })
        .collect();
    MetricsReport::from_areas(&areas)
}
