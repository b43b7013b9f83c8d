//! Per-case segmentation metrics for a model or the oracle short-circuit.

use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::metrics::{confusion, metrics_csv, SegMetrics};
use crate::pipeline::preprocess::TARGET_SPACING;
use crate::pipeline::{binarize, infer_volume, read_mask, read_volume, resample_nearest};
use crate::pipeline::{PatchModel, Volume, VolumeKind};

pub enum Predictor<'a> {
    Model(&'a dyn PatchModel),
    /// Uses the resampled truth mask as the probability map.
    Oracle,
}

/// Probability volume on the 1 mm grid and the truth resampled onto it.
pub fn predict_case(pred: &Predictor<'_>, image: &Volume, truth: &Volume) -> Result<(Volume, Volume)> {
    let truth = resample_nearest(truth, TARGET_SPACING)?;
    let prob = match pred {
        Predictor::Model(m) => {
            let prob = infer_volume(image, *m)?;
            if prob.dims() != truth.dims() {
                return Err(Error::shape("image vs truth grid", prob.dims(), truth.dims()));
            }
            prob
        }
        Predictor::Oracle => truth.with_data(truth.data().to_vec(), VolumeKind::Probability)?,
    };
    Ok((prob, truth))
}

pub fn evaluate_case(pred: &Predictor<'_>, image: &Volume, truth: &Volume, threshold: f64) -> Result<SegMetrics> {
    let (prob, truth) = predict_case(pred, image, truth)?;
    confusion(binarize(&prob, threshold)?.data(), truth.data())
}

#[derive(Clone, Debug)]
pub struct CaseSource {
    pub id: String,
    pub image: PathBuf,
    pub mask: PathBuf,
}

#[derive(Clone, Debug, Default)]
pub struct EvalReport {
    pub rows: Vec<(String, SegMetrics)>,
    /// Cases that could not be read or evaluated, with the reason.
    pub failures: Vec<(String, String)>,
}

impl EvalReport {
    pub fn csv(&self) -> String {
        metrics_csv(&self.rows)
    }

    pub fn mean_dice(&self) -> Option<f64> {
        (!self.rows.is_empty()).then(|| self.rows.iter().map(|(_, m)| m.dice).sum::<f64>() / self.rows.len() as f64)
    }
}

/// Evaluates every readable case; failures are collected, not fatal.
pub fn evaluate(pred: &Predictor<'_>, cases: &[CaseSource], threshold: f64) -> EvalReport {
    let mut report = EvalReport::default();
    for c in cases {
        let run = || -> Result<SegMetrics> {
            let image = read_volume(&c.image)?;
            let truth = read_mask(&c.mask)?;
            evaluate_case(pred, &image, &truth, threshold)
        };
        match run() {
            Ok(m) => report.rows.push((c.id.clone(), m)),
            Err(e) => {
                log::error!("case {}: {e}", c.id);
                report.failures.push((c.id.clone(), e.to_string()));
            }
        }
    }
    report
}

/// Mean value inside and outside a mask, pooled over any number of cases.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RegionTally {
    pub inside: f64,
    pub n_inside: u64,
    pub outside: f64,
    pub n_outside: u64,
}

impl RegionTally {
    pub fn add(&mut self, values: &[f32], mask: &[f32]) -> Result<()> {
        if values.len() != mask.len() {
            return Err(Error::shape("values vs mask", values.len(), mask.len()));
        }
        for (&v, &m) in values.iter().zip(mask) {
            if m != 0.0 {
                self.inside += v as f64;
                self.n_inside += 1;
            } else {
                self.outside += v as f64;
                self.n_outside += 1;
            }
        }
        Ok(())
    }

    pub fn mean_inside(&self) -> f64 {
        self.inside / self.n_inside as f64
    }

    pub fn mean_outside(&self) -> f64 {
        self.outside / self.n_outside as f64
    }

    /// Inside mean over outside mean; NaN when either region is empty or
    /// both means are zero.
    pub fn ratio(&self) -> f64 {
        self.mean_inside() / self.mean_outside()
    }
}
