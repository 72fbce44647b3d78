//! Class-weighted loss family for binary dominance classification: cross
//! entropy (optionally label-smoothed), normalized CE, reverse CE and their
//! symmetric combinations, with analytic gradients with respect to logits.
//!
//! All losses are non-negative quantities to minimize. Probabilities are
//! clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before any logarithm.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::Dominance;

pub const NUM_CLASSES: usize = 2;
pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("non-finite logits {0:?}")]
    NonFinite([f64; 2]),
    #[error("invalid probability vector {0:?}")]
    InvalidProbs([f64; 2]),
    #[error("class weights must be strictly positive, got {0:?}")]
    InvalidWeights([f64; 2]),
    #[error("invalid loss config: {0}")]
    InvalidConfig(String),
    #[error("unknown loss {0:?} (expected CE, SCE or NSCE)")]
    UnknownLoss(String),
}

/// Estimated class probabilities `p(k|x)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbVector([f64; 2]);

impl ProbVector {
    pub fn new(probs: [f64; 2]) -> Result<Self, LossError> {
        let ok = probs.iter().all(|p| p.is_finite() && *p >= 0.0)
            && ((probs[0] + probs[1]) - 1.0).abs() <= 1e-9;
        if !ok {
            return Err(LossError::InvalidProbs(probs));
        }
        Ok(ProbVector(probs))
    }

    pub fn probs(&self) -> [f64; 2] {
        self.0
    }

    pub fn get(&self, class: usize) -> f64 {
        self.0[class]
    }

    fn clamped(&self) -> [f64; 2] {
        self.0.map(|p| p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP))
    }
}

/// Target distribution `q(k|x)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetDist {
    probs: [f64; 2],
    one_hot: bool,
}

impl TargetDist {
    pub fn one_hot(class: Dominance) -> Self {
        let mut probs = [0.0; 2];
        probs[class.index()] = 1.0;
        TargetDist {
            probs,
            one_hot: true,
        }
    }

    /// Label smoothing: the true class keeps `1 - eps + eps/K`, the rest share `eps/K`.
    pub fn smoothed(class: Dominance, eps: f64) -> Self {
        if eps == 0.0 {
            return Self::one_hot(class);
        }
        let off = eps / NUM_CLASSES as f64;
        let mut probs = [off; 2];
        probs[class.index()] = 1.0 - eps + off;
        TargetDist {
            probs,
            one_hot: false,
        }
    }

    pub fn new(probs: [f64; 2]) -> Result<Self, LossError> {
        ProbVector::new(probs)?;
        let one_hot = probs.contains(&1.0);
        Ok(TargetDist { probs, one_hot })
    }

    pub fn probs(&self) -> [f64; 2] {
        self.probs
    }

    pub fn is_one_hot(&self) -> bool {
        self.one_hot
    }
}

/// Per-class weights `ω_k`, indexed Left, Right.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights([f64; 2]);

impl ClassWeights {
    pub const UNIT: ClassWeights = ClassWeights([1.0, 1.0]);

    pub fn new(left: f64, right: f64) -> Result<Self, LossError> {
        if !(left > 0.0 && right > 0.0 && left.is_finite() && right.is_finite()) {
            return Err(LossError::InvalidWeights([left, right]));
        }
        Ok(ClassWeights([left, right]))
    }

    pub fn weights(&self) -> [f64; 2] {
        self.0
    }

    fn norm(&self, q: &TargetDist) -> f64 {
        self.0[0] * q.probs[0] + self.0[1] * q.probs[1]
    }

    /// `ω_k / ω_norm`; dividing first makes the true-class factor exactly 1
    /// for one-hot targets.
    fn normalized(&self, q: &TargetDist) -> [f64; 2] {
        let norm = self.norm(q);
        self.0.map(|w| w / norm)
    }
}

impl Default for ClassWeights {
    fn default() -> Self {
        ClassWeights([0.72, 0.28])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Coefficient of the (normalized) cross-entropy term.
    pub alpha: f64,
    /// Coefficient of the reverse cross-entropy term.
    pub beta: f64,
    /// Substitute for zero target probabilities inside the RCE logarithm.
    pub q_floor: f64,
    /// Label-smoothing epsilon applied to targets before any loss.
    pub smoothing: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.3,
            beta: 0.7,
            q_floor: (-4.0f64).exp(),
            smoothing: 0.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(LossError::InvalidConfig(
                "alpha and beta must be non-negative".into(),
            ));
        }
        if !(self.q_floor > 0.0 && self.q_floor < 1.0) {
            return Err(LossError::InvalidConfig("q_floor must be in (0,1)".into()));
        }
        if !(self.smoothing >= 0.0 && self.smoothing < 0.5) {
            return Err(LossError::InvalidConfig(
                "smoothing must be in [0,0.5)".into(),
            ));
        }
        Ok(())
    }

    pub fn target(&self, class: Dominance) -> TargetDist {
        TargetDist::smoothed(class, self.smoothing)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LossKind {
    #[serde(rename = "CE")]
    Ce,
    #[serde(rename = "NCE")]
    Nce,
    #[serde(rename = "RCE")]
    Rce,
    #[serde(rename = "SCE")]
    Sce,
    #[serde(rename = "NSCE")]
    Nsce,
}

impl LossKind {
    /// The three losses compared in the ablation, in table order.
    pub const ABLATION: [LossKind; 3] = [LossKind::Ce, LossKind::Sce, LossKind::Nsce];

    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Ce => "CE",
            LossKind::Nce => "NCE",
            LossKind::Rce => "RCE",
            LossKind::Sce => "SCE",
            LossKind::Nsce => "NSCE",
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for LossKind {
    type Err = LossError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "CE" => Ok(LossKind::Ce),
            "NCE" => Ok(LossKind::Nce),
            "RCE" => Ok(LossKind::Rce),
            "SCE" => Ok(LossKind::Sce),
            "NSCE" => Ok(LossKind::Nsce),
            _ => Err(LossError::UnknownLoss(s.to_string())),
        }
    }
}

/// Numerically stable softmax over two logits.
pub fn softmax(logits: [f64; 2]) -> Result<ProbVector, LossError> {
    if !logits.iter().all(|z| z.is_finite()) {
        return Err(LossError::NonFinite(logits));
    }
    let m = logits[0].max(logits[1]);
    let e = logits.map(|z| (z - m).exp());
    let s = e[0] + e[1];
    Ok(ProbVector([e[0] / s, e[1] / s]))
}

/// Weighted cross entropy `-(1/ω_norm) Σ ω_k q_k ln p_k`.
pub fn ce(p: &ProbVector, q: &TargetDist, w: &ClassWeights) -> f64 {
    let pc = p.clamped();
    let wn = w.normalized(q);
    -(0..NUM_CLASSES)
        .map(|k| wn[k] * q.probs[k] * pc[k].ln())
        .sum::<f64>()
}

/// Weighted normalized cross entropy. The denominator `Σ_j Σ_k q_j(k) ln p_k`
/// over one-hot vectors `q_j` collapses to `Σ_k ln p_k`.
pub fn nce(p: &ProbVector, q: &TargetDist, w: &ClassWeights) -> f64 {
    let pc = p.clamped();
    let wn = w.normalized(q);
    let num: f64 = (0..NUM_CLASSES)
        .map(|k| wn[k] * q.probs[k] * pc[k].ln())
        .sum();
    let den: f64 = pc.iter().map(|pk| pk.ln()).sum();
    num / den
}

/// Weighted reverse cross entropy `-(1/ω_norm) Σ ω_k p_k ln max(q_k, q_floor)`.
pub fn rce(p: &ProbVector, q: &TargetDist, w: &ClassWeights, q_floor: f64) -> f64 {
    let pc = p.clamped();
    let wn = w.normalized(q);
    -(0..NUM_CLASSES)
        .map(|k| wn[k] * pc[k] * q.probs[k].max(q_floor).ln())
        .sum::<f64>()
}

pub fn sce(p: &ProbVector, q: &TargetDist, w: &ClassWeights, cfg: &LossConfig) -> f64 {
    cfg.alpha * ce(p, q, w) + cfg.beta * rce(p, q, w, cfg.q_floor)
}

pub fn nsce(p: &ProbVector, q: &TargetDist, w: &ClassWeights, cfg: &LossConfig) -> f64 {
    cfg.alpha * nce(p, q, w) + cfg.beta * rce(p, q, w, cfg.q_floor)
}

pub fn loss_value(
    kind: LossKind,
    p: &ProbVector,
    q: &TargetDist,
    w: &ClassWeights,
    cfg: &LossConfig,
) -> f64 {
    match kind {
        LossKind::Ce => ce(p, q, w),
        LossKind::Nce => nce(p, q, w),
        LossKind::Rce => rce(p, q, w, cfg.q_floor),
        LossKind::Sce => sce(p, q, w, cfg),
        LossKind::Nsce => nsce(p, q, w, cfg),
    }
}

// dL/dp_k for each term; the probability chain is applied in `loss_grad`.

fn ce_dp(p: &[f64; 2], q: &TargetDist, w: &ClassWeights) -> [f64; 2] {
    let wn = w.normalized(q);
    [0, 1].map(|k| -wn[k] * q.probs[k] / p[k])
}

fn nce_dp(p: &[f64; 2], q: &TargetDist, w: &ClassWeights) -> [f64; 2] {
    let wn = w.normalized(q);
    let num: f64 = (0..NUM_CLASSES)
        .map(|k| wn[k] * q.probs[k] * p[k].ln())
        .sum();
    let den: f64 = p.iter().map(|pk| pk.ln()).sum();
    [0, 1].map(|k| (wn[k] * q.probs[k]) / (den * p[k]) - num / (den * den * p[k]))
}

fn rce_dp(q: &TargetDist, w: &ClassWeights, q_floor: f64) -> [f64; 2] {
    let wn = w.normalized(q);
    [0, 1].map(|k| -wn[k] * q.probs[k].max(q_floor).ln())
}

/// Gradient of `kind ∘ softmax` with respect to the logits.
pub fn loss_grad(
    kind: LossKind,
    logits: [f64; 2],
    q: &TargetDist,
    w: &ClassWeights,
    cfg: &LossConfig,
) -> Result<[f64; 2], LossError> {
    let p = softmax(logits)?.clamped();
    let scale = |g: [f64; 2], c: f64| g.map(|x| x * c);
    let add = |a: [f64; 2], b: [f64; 2]| [a[0] + b[0], a[1] + b[1]];
    let g = match kind {
        LossKind::Ce => ce_dp(&p, q, w),
        LossKind::Nce => nce_dp(&p, q, w),
        LossKind::Rce => rce_dp(q, w, cfg.q_floor),
        LossKind::Sce => add(
            scale(ce_dp(&p, q, w), cfg.alpha),
            scale(rce_dp(q, w, cfg.q_floor), cfg.beta),
        ),
        LossKind::Nsce => add(
            scale(nce_dp(&p, q, w), cfg.alpha),
            scale(rce_dp(q, w, cfg.q_floor), cfg.beta),
        ),
    };
    // softmax Jacobian: dz_j = p_j (g_j - Σ_k g_k p_k); for K=2 this is ±p0 p1 (g0 - g1)
    let d = p[0] * p[1] * (g[0] - g[1]);
    Ok([d, -d])
}

pub fn nsce_grad(
    logits: [f64; 2],
    q: &TargetDist,
    w: &ClassWeights,
    cfg: &LossConfig,
) -> Result<[f64; 2], LossError> {
    loss_grad(LossKind::Nsce, logits, q, w, cfg)
}
