//! Binary change-detection scores. Changed is the positive class.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    fn merge(self, o: Self) -> Self {
        ConfusionMatrix {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

/// Counts predictions against truth. Points with `exclude[i] == true` (for
/// instance a ground mask) are not scored.
pub fn confusion(pred: &[bool], truth: &[bool], exclude: Option<&[bool]>) -> Result<ConfusionMatrix> {
    if pred.len() != truth.len() {
        return Err(Error::LengthMismatch {
            what: "predictions vs ground truth",
            left: pred.len(),
            right: truth.len(),
        });
    }
    if let Some(m) = exclude {
        if m.len() != pred.len() {
            return Err(Error::LengthMismatch {
                what: "exclusion mask vs predictions",
                left: m.len(),
                right: pred.len(),
            });
        }
    }
    const CHUNK: usize = 1 << 16;
    let chunks = pred.len().div_ceil(CHUNK);
    let parts = crate::par::map_range(chunks, |c| {
        let mut m = ConfusionMatrix::default();
        for i in c * CHUNK..((c + 1) * CHUNK).min(pred.len()) {
            if exclude.is_some_and(|e| e[i]) {
                continue;
            }
            match (pred[i], truth[i]) {
                (true, true) => m.tp += 1,
                (true, false) => m.fp += 1,
                (false, true) => m.fn_ += 1,
                (false, false) => m.tn += 1,
            }
        }
        m
    });
    Ok(parts.into_iter().fold(ConfusionMatrix::default(), ConfusionMatrix::merge))
}

/// Scores in percent.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scores {
    /// Mean of the per-class recalls.
    pub macc: f64,
    pub miou: f64,
    pub iou_unchanged: f64,
    pub iou_changed: f64,
}

pub const CSV_HEADER: &str = "mAcc,mIoU,IoU_unchanged,IoU_changed";

pub fn scores(m: &ConfusionMatrix) -> Result<Scores> {
    if m.tp + m.fn_ == 0 {
        return Err(Error::Degenerate("ground truth has no changed points"));
    }
    if m.tn + m.fp == 0 {
        return Err(Error::Degenerate("ground truth has no unchanged points"));
    }
    let r = |a: u64, b: u64| a as f64 / (a + b) as f64;
    let iou_changed = 100.0 * r(m.tp, m.fp + m.fn_);
    let iou_unchanged = 100.0 * r(m.tn, m.fp + m.fn_);
    Ok(Scores {
        macc: 50.0 * (r(m.tp, m.fn_) + r(m.tn, m.fp)),
        miou: 0.5 * (iou_changed + iou_unchanged),
        iou_unchanged,
        iou_changed,
    })
}

impl Scores {
    pub fn csv_line(&self) -> String {
        format!("{:.4},{:.4},{:.4},{:.4}", self.macc, self.miou, self.iou_unchanged, self.iou_changed)
    }
}

impl fmt::Display for Scores {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<14}{:>9}", "metric", "%")?;
        writeln!(f, "{:<14}{:>9.2}", "mAcc", self.macc)?;
        writeln!(f, "{:<14}{:>9.2}", "mIoU", self.miou)?;
        writeln!(f, "{:<14}{:>9.2}", "IoU unchanged", self.iou_unchanged)?;
        write!(f, "{:<14}{:>9.2}", "IoU changed", self.iou_changed)
    }
}
