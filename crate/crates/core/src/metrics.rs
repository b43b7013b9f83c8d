//! Voxelwise confusion counts and overlap scores for binary masks.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Real;

const CHUNK: usize = 1 << 16;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    fn merge(self, o: Confusion) -> Confusion {
        Confusion {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegMetrics {
    pub counts: Confusion,
    pub dice: f64,
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// `num / den`, or 1.0 when the denominator vanishes because both masks
/// are empty for this score and 0.0 when only one is.
fn ratio(num: u64, den: u64, both_empty: bool) -> f64 {
    if den == 0 {
        if both_empty {
            1.0
        } else {
            0.0
        }
    } else {
        num as f64 / den as f64
    }
}

impl SegMetrics {
    pub fn from_counts(c: Confusion) -> Self {
        let pred_empty = c.tp + c.fp == 0;
        let truth_empty = c.tp + c.fn_ == 0;
        let both = pred_empty && truth_empty;
        let precision = ratio(c.tp, c.tp + c.fp, both);
        let recall = ratio(c.tp, c.tp + c.fn_, both);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        SegMetrics {
            counts: c,
            dice: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_, both),
            iou: ratio(c.tp, c.tp + c.fp + c.fn_, both),
            precision,
            recall,
            f1,
        }
    }

    pub const CSV_HEADER: &'static str = "case_id,dice,iou,precision,recall,f1,tp,fp,fn,tn";

    pub fn csv_row(&self, case_id: &str) -> String {
        let c = &self.counts;
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{},{},{},{}",
            csv_field(case_id),
            self.dice,
            self.iou,
            self.precision,
            self.recall,
            self.f1,
            c.tp,
            c.fp,
            c.fn_,
            c.tn
        )
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Counts agreement of two masks. A voxel is foreground when nonzero.
pub fn confusion_counts<T: Real>(pred: &[T], truth: &[T]) -> Result<Confusion> {
    if pred.len() != truth.len() {
        return Err(Error::shape("confusion", pred.len(), truth.len()));
    }
    let chunks = pred.len().div_ceil(CHUNK);
    let parts = par::map_range(chunks, |i| {
        let r = i * CHUNK..((i + 1) * CHUNK).min(pred.len());
        let mut c = Confusion::default();
        for (&p, &t) in pred[r.clone()].iter().zip(&truth[r]) {
            match (p != T::ZERO, t != T::ZERO) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    });
    Ok(parts.into_iter().fold(Confusion::default(), Confusion::merge))
}

pub fn confusion<T: Real>(pred: &[T], truth: &[T]) -> Result<SegMetrics> {
    Ok(SegMetrics::from_counts(confusion_counts(pred, truth)?))
}

/// Per-case rows followed by a `mean` row (scores averaged over cases,
/// counts summed) and a `pooled` row (scores from the summed counts).
pub fn metrics_csv(cases: &[(String, SegMetrics)]) -> String {
    let mut out = String::new();
    writeln!(out, "{}", SegMetrics::CSV_HEADER).unwrap();
    for (id, m) in cases {
        writeln!(out, "{}", m.csv_row(id)).unwrap();
    }
    if cases.is_empty() {
        return out;
    }
    let summed = cases.iter().fold(Confusion::default(), |a, (_, m)| a.merge(m.counts));
    let n = cases.len() as f64;
    let avg = |f: fn(&SegMetrics) -> f64| cases.iter().map(|(_, m)| f(m)).sum::<f64>() / n;
    let mean = SegMetrics {
        counts: summed,
        dice: avg(|m| m.dice),
        iou: avg(|m| m.iou),
        precision: avg(|m| m.precision),
        recall: avg(|m| m.recall),
        f1: avg(|m| m.f1),
    };
    writeln!(out, "{}", mean.csv_row("mean")).unwrap();
    writeln!(out, "{}", SegMetrics::from_counts(summed).csv_row("pooled")).unwrap();
    out
}
