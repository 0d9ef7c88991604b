//! Multi-seed comparison of model variants.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, Variant};
use crate::error::{Error, Result};
use crate::trainer::{run_training_on, Data};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub seeds: Vec<u64>,
    pub challenge_iou: Vec<f64>,
    pub iou: Vec<f64>,
    pub mc_iou: Vec<f64>,
    pub median_challenge_iou: f64,
    pub median_iou: f64,
    pub median_mc_iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub steps: usize,
    pub rows: Vec<AblationRow>,
}

/// Median; the upper middle element for even lengths.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v.get(v.len() / 2).copied().unwrap_or(f64::NAN)
}

/// Trains every variant once per seed on `data` and scores the eval split.
/// `progress` is called after each run.
pub fn run_ablation(
    base: &RunConfig,
    data: &Data,
    variants: &[Variant],
    seeds: &[u64],
    mut progress: impl FnMut(Variant, u64, f64),
) -> Result<AblationReport> {
    if variants.is_empty() || seeds.is_empty() {
        return Err(Error::Usage("ablation needs at least one variant and one seed".into()));
    }
    let mut rows = Vec::with_capacity(variants.len());
    for &variant in variants {
        let (mut ch, mut iou, mut mc) = (Vec::new(), Vec::new(), Vec::new());
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.variant = variant;
            cfg.seed = seed;
            let report = run_training_on(&cfg, data, None)?.report;
            progress(variant, seed, report.challenge_iou);
            ch.push(report.challenge_iou);
            iou.push(report.iou);
            mc.push(report.mc_iou);
        }
        rows.push(AblationRow {
            variant,
            seeds: seeds.to_vec(),
            median_challenge_iou: median(&ch),
            median_iou: median(&iou),
            median_mc_iou: median(&mc),
            challenge_iou: ch,
            iou,
            mc_iou: mc,
        });
    }
    Ok(AblationReport { steps: base.steps, rows })
}

impl AblationReport {
    /// Aligned text table of the medians.
    pub fn table(&self) -> String {
        let width = self.rows.iter().map(|r| r.variant.to_string().len()).max().unwrap_or(0).max(7);
        let mut out = format!(
            "{:<width$}  {:>13}  {:>8}  {:>8}\n",
            "variant", "challenge_iou", "iou", "mc_iou"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<width$}  {:>13.4}  {:>8.4}  {:>8.4}",
                r.variant.to_string(),
                r.median_challenge_iou,
                r.median_iou,
                r.median_mc_iou
            );
        }
        out
    }
}
