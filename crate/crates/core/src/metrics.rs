//! Confusion-based binary metrics, rank ROC AUC and Student-t margins.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::Dominance;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("length mismatch: {0} predictions vs {1} truths")]
    LengthMismatch(usize, usize),
    #[error("empty input")]
    Empty,
    #[error("ROC AUC needs both classes present")]
    SingleClass,
    #[error("non-finite score at index {0}")]
    NonFiniteScore(usize),
    #[error("need at least 2 samples for a confidence margin, got {0}")]
    TooFewSamples(usize),
    #[error("unsupported confidence level {0} (supported: 0.90, 0.95, 0.99)")]
    UnsupportedLevel(f64),
}

/// A ratio that may have had a zero denominator. Degenerate ratios are
/// reported as 0 with the flag set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ratio {
    pub value: f64,
    pub degenerate: bool,
}

impl Ratio {
    fn of(num: f64, den: f64) -> Ratio {
        if den == 0.0 {
            Ratio {
                value: 0.0,
                degenerate: true,
            }
        } else {
            Ratio {
                value: num / den,
                degenerate: false,
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub positive: Dominance,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// Same sample with the other class taken as positive.
    pub fn swapped(&self) -> ConfusionCounts {
        ConfusionCounts {
            tp: self.tn,
            fp: self.fn_,
            tn: self.tp,
            fn_: self.fp,
            positive: self.positive.other(),
        }
    }

    pub fn recall(&self) -> Ratio {
        Ratio::of(self.tp as f64, (self.tp + self.fn_) as f64)
    }

    pub fn precision(&self) -> Ratio {
        Ratio::of(self.tp as f64, (self.tp + self.fp) as f64)
    }

    /// `2 TP / (2 TP + FP + FN)`, algebraically equal to the harmonic mean of
    /// precision and recall.
    pub fn f1(&self) -> Ratio {
        Ratio::of(
            2.0 * self.tp as f64,
            (2 * self.tp + self.fp + self.fn_) as f64,
        )
    }

    pub fn accuracy(&self) -> Ratio {
        Ratio::of((self.tp + self.tn) as f64, self.total() as f64)
    }

    /// Matthews correlation coefficient; 0 when any marginal is empty.
    pub fn mcc(&self) -> f64 {
        let (tp, fp, tn, fn_) = (
            self.tp as f64,
            self.fp as f64,
            self.tn as f64,
            self.fn_ as f64,
        );
        let den = (tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_);
        if den == 0.0 {
            return 0.0;
        }
        ((tp * tn - fp * fn_) / den.sqrt()).clamp(-1.0, 1.0)
    }
}

pub fn confusion(
    predictions: &[Dominance],
    truths: &[Dominance],
    positive: Dominance,
) -> Result<ConfusionCounts, MetricsError> {
    if predictions.len() != truths.len() {
        return Err(MetricsError::LengthMismatch(predictions.len(), truths.len()));
    }
    if predictions.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut c = ConfusionCounts {
        tp: 0,
        fp: 0,
        tn: 0,
        fn_: 0,
        positive,
    };
    for (&p, &t) in predictions.iter().zip(truths) {
        match (p == positive, t == positive) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

pub fn recall_macro(recall_left: f64, recall_right: f64) -> f64 {
    (recall_left + recall_right) / 2.0
}

pub fn f1_macro(f1_left: f64, f1_right: f64) -> f64 {
    (f1_left + f1_right) / 2.0
}

/// F1 from precision and recall (harmonic mean), 0 when both are 0.
pub fn f1_from(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// ROC AUC as the Mann-Whitney statistic, using average ranks for ties.
/// `truths[i]` is true for the positive class.
pub fn roc_auc(scores: &[f64], truths: &[bool]) -> Result<f64, MetricsError> {
    if scores.len() != truths.len() {
        return Err(MetricsError::LengthMismatch(scores.len(), truths.len()));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(MetricsError::NonFiniteScore(i));
    }
    let n_pos = truths.iter().filter(|&&t| t).count();
    let n_neg = truths.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricsError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // sum of (1-based) positive ranks, doubled to keep tie averages integral
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share the average (i + j + 2) / 2
        let twice_avg = (i + j + 2) as u128;
        let pos_in_group = order[i..=j].iter().filter(|&&k| truths[k]).count() as u128;
        twice_rank_sum += twice_avg * pos_in_group;
        i = j + 1;
    }
    let n_pos = n_pos as u128;
    let twice_u = twice_rank_sum - n_pos * (n_pos + 1);
    Ok(twice_u as f64 / (2.0 * n_pos as f64 * n_neg as f64))
}

/// Per-class and macro metrics for one evaluation unit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub recall_left: f64,
    pub recall_right: f64,
    pub precision_left: f64,
    pub precision_right: f64,
    pub f1_left: f64,
    pub f1_right: f64,
    pub f1_macro: f64,
    pub recall_macro: f64,
    pub accuracy: f64,
    pub mcc: f64,
    /// Frame-level ROC AUC with Right as positive; `None` when the frames
    /// contain a single class.
    pub roc_auc_frames: Option<f64>,
    /// Set when any ratio had a zero denominator.
    pub degenerate: bool,
}

impl MetricsReport {
    pub const FIELDS: [&'static str; 11] = [
        "recall_left",
        "recall_right",
        "precision_left",
        "precision_right",
        "f1_left",
        "f1_right",
        "f1_macro",
        "recall_macro",
        "accuracy",
        "mcc",
        "roc_auc_frames",
    ];

    pub fn from_counts(right_positive: &ConfusionCounts, roc_auc_frames: Option<f64>) -> Self {
        let right = if right_positive.positive == Dominance::Right {
            *right_positive
        } else {
            right_positive.swapped()
        };
        let left = right.swapped();
        let ratios = [
            left.recall(),
            right.recall(),
            left.precision(),
            right.precision(),
            left.f1(),
            right.f1(),
        ];
        let degenerate = ratios.iter().any(|r| r.degenerate);
        let [rl, rr, pl, pr, fl, fr] = ratios.map(|r| r.value);
        MetricsReport {
            recall_left: rl,
            recall_right: rr,
            precision_left: pl,
            precision_right: pr,
            f1_left: fl,
            f1_right: fr,
            f1_macro: f1_macro(fl, fr),
            recall_macro: recall_macro(rl, rr),
            accuracy: right.accuracy().value,
            mcc: right.mcc(),
            roc_auc_frames,
            degenerate,
        }
    }

    /// View-level metrics from predictions plus frame-level AUC from
    /// (prob_right, truth) pairs.
    pub fn compute(
        predictions: &[Dominance],
        truths: &[Dominance],
        frame_scores: &[f64],
        frame_truths: &[Dominance],
    ) -> Result<Self, MetricsError> {
        let counts = confusion(predictions, truths, Dominance::Right)?;
        let positives: Vec<bool> = frame_truths.iter().map(|&t| t == Dominance::Right).collect();
        let auc = match roc_auc(frame_scores, &positives) {
            Ok(v) => Some(v),
            Err(MetricsError::SingleClass) => None,
            Err(e) => return Err(e),
        };
        Ok(Self::from_counts(&counts, auc))
    }

    pub fn get(&self, field: &str) -> Option<f64> {
        Some(match field {
            "recall_left" => self.recall_left,
            "recall_right" => self.recall_right,
            "precision_left" => self.precision_left,
            "precision_right" => self.precision_right,
            "f1_left" => self.f1_left,
            "f1_right" => self.f1_right,
            "f1_macro" => self.f1_macro,
            "recall_macro" => self.recall_macro,
            "accuracy" => self.accuracy,
            "mcc" => self.mcc,
            "roc_auc_frames" => return self.roc_auc_frames,
            _ => return None,
        })
    }
}

/// Mean with both margin styles: `t·σ` (spread of individual runs) and
/// `t·σ/√n` (uncertainty of the mean).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntervalEstimate {
    pub mean: f64,
    pub std: f64,
    pub spread_margin: f64,
    pub mean_margin: f64,
    pub n: usize,
    pub level: f64,
}

// two-sided critical values t_{1-(1-level)/2, df} for df = 1..=30
const T_90: [f64; 30] = [
    6.313752, 2.919986, 2.353363, 2.131847, 2.015048, 1.943180, 1.894579, 1.859548, 1.833113,
    1.812461, 1.795885, 1.782288, 1.770933, 1.761310, 1.753050, 1.745884, 1.739607, 1.734064,
    1.729133, 1.724718, 1.720743, 1.717144, 1.713872, 1.710882, 1.708141, 1.705618, 1.703288,
    1.701131, 1.699127, 1.697261,
];
const T_95: [f64; 30] = [
    12.706205, 4.302653, 3.182446, 2.776445, 2.570582, 2.446912, 2.364624, 2.306004, 2.262157,
    2.228139, 2.200985, 2.178813, 2.160369, 2.144787, 2.131450, 2.119905, 2.109816, 2.100922,
    2.093024, 2.085963, 2.079614, 2.073873, 2.068658, 2.063899, 2.059539, 2.055529, 2.051831,
    2.048407, 2.045230, 2.042272,
];
const T_99: [f64; 30] = [
    63.656741, 9.924843, 5.840909, 4.604095, 4.032143, 3.707428, 3.499483, 3.355387, 3.249836,
    3.169273, 3.105807, 3.054540, 3.012276, 2.976843, 2.946713, 2.920782, 2.898231, 2.878440,
    2.860935, 2.845340, 2.831360, 2.818756, 2.807336, 2.796940, 2.787436, 2.778715, 2.770683,
    2.763262, 2.756386, 2.749996,
];

/// Two-sided Student-t critical value. Table lookup up to 30 degrees of
/// freedom, Cornish-Fisher expansion around the normal quantile beyond.
pub fn t_critical(df: usize, level: f64) -> Result<f64, MetricsError> {
    let (table, z) = if (level - 0.95).abs() < 1e-12 {
        (&T_95, 1.959963984540054)
    } else if (level - 0.90).abs() < 1e-12 {
        (&T_90, 1.6448536269514722)
    } else if (level - 0.99).abs() < 1e-12 {
        (&T_99, 2.5758293035489004)
    } else {
        return Err(MetricsError::UnsupportedLevel(level));
    };
    if df == 0 {
        return Err(MetricsError::TooFewSamples(1));
    }
    if df <= table.len() {
        return Ok(table[df - 1]);
    }
    let v = df as f64;
    let z3 = z * z * z;
    let z5 = z3 * z * z;
    Ok(z + (z3 + z) / (4.0 * v) + (5.0 * z5 + 16.0 * z3 + 3.0 * z) / (96.0 * v * v))
}

pub fn ci_margin(samples: &[f64], level: f64) -> Result<IntervalEstimate, MetricsError> {
    let n = samples.len();
    if n < 2 {
        return Err(MetricsError::TooFewSamples(n));
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let std = var.sqrt();
    let t = t_critical(n - 1, level)?;
    let spread_margin = t * std;
    Ok(IntervalEstimate {
        mean,
        std,
        spread_margin,
        mean_margin: spread_margin / (n as f64).sqrt(),
        n,
        level,
    })
}
