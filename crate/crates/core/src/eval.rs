//! Scoring, thresholding and the point-adjusted evaluation protocol.

use crate::adnm::row_mse;
use crate::data::ceil_count;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-timestamp mean squared difference across channels.
pub fn anomaly_score(original: &Tensor, reconstructed: &Tensor) -> Result<Vec<f64>> {
    if original.shape() != reconstructed.shape() || original.shape().len() != 2 {
        return Err(Error::invalid(format!(
            "cannot score {:?} against {:?}",
            original.shape(),
            reconstructed.shape()
        )));
    }
    Ok(row_mse(original, reconstructed))
}

/// Lays window scores onto a series of length `len`. Windows are applied in
/// order, so positions covered twice keep the later window's value.
pub fn assemble_scores(len: usize, offsets: &[usize], window_scores: &[Vec<f64>]) -> Result<Vec<f64>> {
    if offsets.len() != window_scores.len() {
        return Err(Error::invalid(format!(
            "{} offsets for {} score windows",
            offsets.len(),
            window_scores.len()
        )));
    }
    let mut out = vec![f64::NAN; len];
    for (&start, scores) in offsets.iter().zip(window_scores) {
        let end = start + scores.len();
        if end > len {
            return Err(Error::invalid(format!("window [{start}, {end}) exceeds series length {len}")));
        }
        out[start..end].copy_from_slice(scores);
    }
    if let Some(gap) = out.iter().position(|v| v.is_nan()) {
        return Err(Error::invalid(format!("timestamp {gap} received no score")));
    }
    Ok(out)
}

/// Nearest-rank quantile: the ⌈(1−r)·n⌉-th smallest score.
pub fn select_threshold(scores: &[f64], ratio: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::invalid("cannot pick a threshold from no scores"));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::invalid(format!("anomaly ratio must lie in (0, 1), got {ratio}")));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::invalid("scores must be finite"));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ceil_count((1.0 - ratio) * sorted.len() as f64).clamp(1, sorted.len());
    Ok(sorted[rank - 1])
}

/// Flags scores strictly above the threshold.
pub fn flag(scores: &[f64], threshold: f64) -> Vec<bool> {
    scores.iter().map(|&s| s > threshold).collect()
}

fn check_lengths(preds: &[bool], labels: &[bool]) -> Result<()> {
    if preds.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    Ok(())
}

/// Marks a whole labeled segment as detected when any of its points is.
pub fn point_adjust(preds: &[bool], labels: &[bool]) -> Result<Vec<bool>> {
    check_lengths(preds, labels)?;
    let mut out = preds.to_vec();
    let mut start = 0;
    while start < labels.len() {
        if !labels[start] {
            start += 1;
            continue;
        }
        let end = start + labels[start..].iter().take_while(|&&l| l).count();
        if preds[start..end].iter().any(|&p| p) {
            out[start..end].iter_mut().for_each(|p| *p = true);
        }
        start = end;
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EvalCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl EvalCounts {
    pub fn tally(preds: &[bool], labels: &[bool]) -> Result<Self> {
        check_lengths(preds, labels)?;
        let mut c = Self::default();
        for (&p, &l) in preds.iter().zip(labels) {
            match (p, l) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn metrics(&self) -> Metrics {
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let precision = ratio(self.tp, self.tp + self.fp);
        let recall = ratio(self.tp, self.tp + self.fn_);
        Metrics {
            precision,
            recall,
            f1: f1_score(precision, recall),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Harmonic mean of precision and recall, 0 when both are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    let den = precision + recall;
    if den == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / den
    }
}

pub fn prf1(adjusted: &[bool], labels: &[bool]) -> Result<Metrics> {
    Ok(EvalCounts::tally(adjusted, labels)?.metrics())
}
