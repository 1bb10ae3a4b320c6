//! Dataset-level confusion matrix, per-class IoU / mIoU, and the
//! strip-convolution cost accounting report.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::encoder::{strip_param_count, EncoderConfig};
use crate::error::{FamError, Result};
use crate::model::ModelConfig;
use crate::nn::ParamStore;

/// C×C pixel tally; `counts[gt][pred]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix { classes, counts: vec![0; classes * classes] }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accumulate(&mut self, gt: &[u8], pred: &[u8]) -> Result<()> {
        if gt.len() != pred.len() {
            return Err(FamError::Shape {
                op: "confusion_accumulate",
                detail: format!("gt {} pixels vs pred {}", gt.len(), pred.len()),
            });
        }
        let c = self.classes;
        for (&g, &p) in gt.iter().zip(pred) {
            if g as usize >= c || p as usize >= c {
                return Err(FamError::Invalid {
                    op: "confusion_accumulate",
                    detail: format!("class {} out of range for {} classes", g.max(p), c),
                });
            }
            self.counts[g as usize * c + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        debug_assert_eq!(self.classes, other.classes);
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    /// Transposed copy (gt and pred roles swapped).
    pub fn transposed(&self) -> ConfusionMatrix {
        let c = self.classes;
        let mut t = ConfusionMatrix::new(c);
        for g in 0..c {
            for p in 0..c {
                t.counts[p * c + g] = self.counts[g * c + p];
            }
        }
        t
    }

    /// Per-class IoU (None for classes absent from both gt and pred, which
    /// are excluded from the mean) and the unweighted mIoU over the rest.
    pub fn iou(&self) -> Result<(Vec<Option<f64>>, f64)> {
        if self.total() == 0 {
            return Err(FamError::Invalid { op: "iou", detail: "empty confusion matrix".into() });
        }
        let c = self.classes;
        let mut per_class = Vec::with_capacity(c);
        let mut sum = 0.0;
        let mut present = 0;
        for k in 0..c {
            let diag = self.counts[k * c + k];
            let row: u64 = (0..c).map(|j| self.counts[k * c + j]).sum();
            let col: u64 = (0..c).map(|i| self.counts[i * c + k]).sum();
            let union = row + col - diag;
            if union == 0 {
                per_class.push(None);
            } else {
                let v = diag as f64 / union as f64;
                per_class.push(Some(v));
                sum += v;
                present += 1;
            }
        }
        if present == 0 {
            return Err(FamError::Invalid { op: "iou", detail: "no class present in gt or pred".into() });
        }
        Ok((per_class, sum / present as f64))
    }
}

pub const CLASS_NAMES: [&str; 3] = ["BG", "FL", "FB"];

/// Evaluation table: one column per class in BG/FL/FB order plus mIoU,
/// computed from the dataset-level confusion matrix.
pub fn format_report(cm: &ConfusionMatrix, title: &str) -> Result<String> {
    let (per_class, miou) = cm.iou()?;
    let mut out = String::new();
    let _ = writeln!(out, "# {title} (dataset-level IoU, classes absent from gt and pred excluded)");
    let names: Vec<String> = if cm.classes() == 3 {
        CLASS_NAMES.iter().map(|s| s.to_string()).collect()
    } else {
        (0..cm.classes()).map(|i| format!("C{i}")).collect()
    };
    let _ = writeln!(out, "{:>8} {}", "", names.iter().map(|n| format!("{n:>8}")).collect::<String>());
    let row: String = per_class
        .iter()
        .map(|v| match v {
            Some(v) => format!("{:>8.4}", v),
            None => format!("{:>8}", "-"),
        })
        .collect();
    let _ = writeln!(out, "{:>8} {row}", "IoU");
    let _ = writeln!(out, "{:>8} {:>8.4}", "mIoU", miou);
    Ok(out)
}

/// Machine-readable evaluation record, one line per class plus the mean.
pub fn report_records(cm: &ConfusionMatrix) -> Result<Vec<String>> {
    let (per_class, miou) = cm.iou()?;
    let mut lines = Vec::new();
    for (i, v) in per_class.iter().enumerate() {
        let name = if cm.classes() == 3 { CLASS_NAMES[i].to_string() } else { format!("C{i}") };
        match v {
            Some(v) => lines.push(format!("iou\t{name}\t{v:.6}")),
            None => lines.push(format!("iou\t{name}\tabsent")),
        }
    }
    lines.push(format!("miou\t-\t{miou:.6}"));
    Ok(lines)
}

#[derive(Clone, Debug)]
pub struct StripCostRow {
    pub stage: usize,
    pub block: usize,
    pub kernel: u64,
    pub out_h: u64,
    pub out_w: u64,
    pub standard: u64,
    pub strip_pair: u64,
}

#[derive(Clone, Debug)]
pub struct CostReport {
    pub rows: Vec<StripCostRow>,
    pub total_params: usize,
}

impl CostReport {
    pub fn format(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:>5} {:>5} {:>3} {:>5} {:>5} {:>12} {:>12} {:>8}",
            "stage", "block", "K", "Ho", "Wo", "standard", "strip-pair", "ratio"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:>5} {:>5} {:>3} {:>5} {:>5} {:>12} {:>12} {:>8}",
                r.stage,
                r.block,
                r.kernel,
                r.out_h,
                r.out_w,
                r.standard,
                r.strip_pair,
                format_args!("2/{}", r.kernel),
            );
        }
        let _ = writeln!(out, "unit-cost reference rows (Ho = Wo = 1):");
        for k in [7u64, 3] {
            let (std_cost, ours) = strip_param_count(k, 1, 1);
            let _ = writeln!(out, "  K={k}: strip pair {ours} vs standard {std_cost}");
        }
        // cost of standing in a 3x3 pair for the same output grid
        let pair_3x3 = 2 * 9;
        let _ = writeln!(out, "  3x3 pair replacement: 2*Ho*Wo*9 = {pair_3x3}");
        let _ = writeln!(out, "total model parameters: {}", self.total_params);
        out
    }
}

/// Per-strip-block multiply/parameter counts for a model at the given input
/// size, with the standard K×K convolution each pair replaces.
pub fn cost_report(cfg: &ModelConfig, image_hw: (usize, usize), store: &ParamStore) -> Result<CostReport> {
    cfg.encoder.validate()?;
    if image_hw.0 % 32 != 0 || image_hw.1 % 32 != 0 {
        return Err(FamError::Invalid {
            op: "cost_report",
            detail: format!("image {}x{} not divisible by 32", image_hw.0, image_hw.1),
        });
    }
    let mut rows = Vec::new();
    for stage in 0..cfg.encoder.strip_stages {
        let stride = EncoderConfig::stage_stride(stage) as u64;
        let (ho, wo) = (image_hw.0 as u64 / stride, image_hw.1 as u64 / stride);
        for block in 0..cfg.encoder.stage_depths[stage] {
            for &k in &cfg.encoder.branch_kernels {
                let (standard, strip_pair) = strip_param_count(k as u64, ho, wo);
                rows.push(StripCostRow { stage: stage + 1, block, kernel: k as u64, out_h: ho, out_w: wo, standard, strip_pair });
            }
        }
    }
    Ok(CostReport { rows, total_params: store.num_scalars() })
}
