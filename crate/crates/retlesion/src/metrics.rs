//! Evaluation criteria: per-lesion pixel-wise F1, per-lesion image-wise F1
//! (counts micro-pooled over the whole evaluation set) and quadratic
//! weighted kappa for grading.

use crate::error::{Error, Result};
use crate::types::{DRGrade, LesionMaskStack, LesionPresenceVector};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn add(&mut self, pred: bool, truth: bool) {
        match (pred, truth) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }

    /// F1 = 2 TP / (2 TP + FP + FN); the degenerate all-negative case
    /// (nothing to find, nothing predicted) reports 1.0.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            1.0
        } else {
            2.0 * self.tp as f64 / denom as f64
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct F1Report {
    pub per_lesion: Vec<f64>,
    pub mean: f64,
    pub counts: Vec<ConfusionCounts>,
}

fn f1_report(counts: Vec<ConfusionCounts>) -> F1Report {
    let per_lesion: Vec<f64> = counts.iter().map(|c| c.f1()).collect();
    let mean = per_lesion.iter().sum::<f64>() / per_lesion.len() as f64;
    F1Report {
        per_lesion,
        mean,
        counts,
    }
}

/// Pixel-wise F1 per lesion, counts pooled over all pixels of all images.
pub fn pixel_f1(pred: &[LesionMaskStack], truth: &[LesionMaskStack]) -> Result<F1Report> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::Shape("pixel_f1 batch mismatch or empty".into()));
    }
    let m = pred[0].m();
    let mut counts = vec![ConfusionCounts::default(); m];
    for (p, t) in pred.iter().zip(truth) {
        if !p.masks.same_shape(&t.masks) || p.m() != m {
            return Err(Error::Shape("pixel_f1 stack shape mismatch".into()));
        }
        for (pp, tp) in p.masks.data.chunks_exact(m).zip(t.masks.data.chunks_exact(m)) {
            for ch in 0..m {
                counts[ch].add(pp[ch] != 0.0, tp[ch] != 0.0);
            }
        }
    }
    Ok(f1_report(counts))
}

/// Image-wise F1 per lesion over binary presence vectors.
pub fn image_f1(pred: &[LesionPresenceVector], truth: &[LesionPresenceVector]) -> Result<F1Report> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::Shape("image_f1 batch mismatch or empty".into()));
    }
    let m = pred[0].values.len();
    let mut counts = vec![ConfusionCounts::default(); m];
    for (p, t) in pred.iter().zip(truth) {
        if p.values.len() != m || t.values.len() != m {
            return Err(Error::Shape("image_f1 vector length mismatch".into()));
        }
        if !p.is_binary() || !t.is_binary() {
            return Err(Error::InvalidInput(
                "image_f1 requires binary (pre-thresholded) inputs".into(),
            ));
        }
        for ch in 0..m {
            counts[ch].add(p.values[ch] != 0.0, t.values[ch] != 0.0);
        }
    }
    Ok(f1_report(counts))
}

/// Quadratic weighted kappa over 5 grades: 1 - sum(W.O)/sum(W.E) with
/// W_ij = (i-j)^2/16, O the normalized confusion matrix and E the outer
/// product of its marginals. All-diagonal mass with zero expected
/// disagreement returns 1.
pub fn quadratic_weighted_kappa(true_grades: &[DRGrade], pred_grades: &[DRGrade]) -> Result<f64> {
    if true_grades.len() != pred_grades.len() || true_grades.is_empty() {
        return Err(Error::InvalidInput("kappa needs non-empty equal-length lists".into()));
    }
    let n = true_grades.len() as f64;
    let mut observed = [[0.0f64; 5]; 5];
    for (t, p) in true_grades.iter().zip(pred_grades) {
        observed[t.value() as usize][p.value() as usize] += 1.0 / n;
    }
    let mut row = [0.0f64; 5];
    let mut col = [0.0f64; 5];
    for i in 0..5 {
        for j in 0..5 {
            row[i] += observed[i][j];
            col[j] += observed[i][j];
        }
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..5 {
        for j in 0..5 {
            let w = ((i as f64 - j as f64) * (i as f64 - j as f64)) / 16.0;
            num += w * observed[i][j];
            den += w * row[i] * col[j];
        }
    }
    if den == 0.0 {
        // marginals concentrated on one grade; observed mass is diagonal
        return Ok(1.0);
    }
    Ok(1.0 - num / den)
}
