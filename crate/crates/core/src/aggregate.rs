//! Logit-sum voting from frames to views to studies, and majority-class
//! frame subsampling for training.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::{Artery, Dominance};

#[derive(Debug, Error, PartialEq)]
pub enum AggregateError {
    #[error("cannot predict from an empty frame list")]
    NoFrames,
    #[error("study has no RCA views")]
    NoRcaViews,
    #[error("non-finite logits {0:?}")]
    NonFinite([f64; 2]),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameLogits(pub [f64; 2]);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewPrediction {
    pub summed_logits: [f64; 2],
    pub predicted: Dominance,
    pub n_frames_used: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StudyPrediction {
    pub summed_logits: [f64; 2],
    pub predicted: Dominance,
    pub n_views_used: usize,
}

/// Argmax over (Left, Right); exact ties go to Right.
pub fn decide(logits: [f64; 2]) -> Dominance {
    if logits[0] > logits[1] {
        Dominance::Left
    } else {
        Dominance::Right
    }
}

/// Order-independent sum: values are added in sorted order so any
/// permutation of the input yields the same bits.
fn sorted_sum(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    values.into_iter().sum()
}

fn sum_logits(logits: impl Iterator<Item = [f64; 2]>) -> Result<[f64; 2], AggregateError> {
    let (mut left, mut right) = (Vec::new(), Vec::new());
    for l in logits {
        if !l.iter().all(|v| v.is_finite()) {
            return Err(AggregateError::NonFinite(l));
        }
        left.push(l[0]);
        right.push(l[1]);
    }
    Ok([sorted_sum(left), sorted_sum(right)])
}

/// Unweighted sum of frame logits followed by argmax.
pub fn view_predict(frames: &[FrameLogits]) -> Result<ViewPrediction, AggregateError> {
    if frames.is_empty() {
        return Err(AggregateError::NoFrames);
    }
    let summed_logits = sum_logits(frames.iter().map(|f| f.0))?;
    Ok(ViewPrediction {
        summed_logits,
        predicted: decide(summed_logits),
        n_frames_used: frames.len(),
    })
}

/// Sums the view-level logit sums of every RCA view; LCA views are ignored.
pub fn study_predict(views: &[(Artery, ViewPrediction)]) -> Result<StudyPrediction, AggregateError> {
    let rca: Vec<[f64; 2]> = views
        .iter()
        .filter(|(a, _)| *a == Artery::Rca)
        .map(|(_, v)| v.summed_logits)
        .collect();
    if rca.is_empty() {
        return Err(AggregateError::NoRcaViews);
    }
    let summed_logits = sum_logits(rca.iter().copied())?;
    Ok(StudyPrediction {
        summed_logits,
        predicted: decide(summed_logits),
        n_views_used: rca.len(),
    })
}

/// Keeps every second gated index for right-dominant views; left-dominant
/// views are returned unchanged.
pub fn subsample_majority(indices: &[usize], label: Dominance) -> Vec<usize> {
    match label {
        Dominance::Right => indices.iter().step_by(2).copied().collect(),
        Dominance::Left => indices.to_vec(),
    }
}
