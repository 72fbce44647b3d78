//! Which frames of a view take part in training and voting: a learned
//! informativeness score with per-class (train) and unified (test)
//! thresholds, plus the SSIM peak, discard-first and all-frames baselines.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::{CineView, Dominance, Frame};
use crate::losses::{self, ClassWeights, LossKind};
use crate::nnet::{self, AugmentConfig, Engine, ModelParams, NnetError, TrainConfig, TrainSample};

#[derive(Debug, Error)]
pub enum SelectError {
    #[error("no labeled frames to train the quality scorer")]
    EmptyTrainingSet,
    #[error("quality scorer training set is single-class")]
    SingleClass,
    #[error("view {0} has no informativeness truth")]
    MissingTruth(String),
    #[error("frame dimensions differ: {0:?} vs {1:?}")]
    DimensionMismatch((usize, usize), (usize, usize)),
    #[error("frames of {found:?} are smaller than the {window}x{window} SSIM window")]
    TooSmallForWindow { window: usize, found: (usize, usize) },
    #[error("invalid selection config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Nnet(#[from] NnetError),
}

/// What happens when no frame clears the test threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fallback {
    /// Keep the single highest-scoring frame.
    TopOne,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GatingPolicy {
    pub train_threshold_right: f64,
    pub train_threshold_left: f64,
    pub test_threshold: f64,
    pub fallback: Fallback,
}

impl Default for GatingPolicy {
    fn default() -> Self {
        GatingPolicy {
            train_threshold_right: 0.6,
            train_threshold_left: 0.3,
            test_threshold: 0.55,
            fallback: Fallback::TopOne,
        }
    }
}

impl GatingPolicy {
    pub fn validate(&self) -> Result<(), SelectError> {
        for (name, t) in [
            ("train_threshold_right", self.train_threshold_right),
            ("train_threshold_left", self.train_threshold_left),
            ("test_threshold", self.test_threshold),
        ] {
            if !(t > 0.0 && t < 1.0) {
                return Err(SelectError::InvalidConfig(format!("{name} = {t} outside (0, 1)")));
            }
        }
        Ok(())
    }

    pub fn train_threshold(&self, label: Dominance) -> f64 {
        match label {
            Dominance::Right => self.train_threshold_right,
            Dominance::Left => self.train_threshold_left,
        }
    }
}

/// Train-time gating with the label's threshold. May return nothing, in
/// which case the view is skipped.
pub fn gate_train(label: Dominance, scores: &[f64], policy: &GatingPolicy) -> Vec<usize> {
    let t = policy.train_threshold(label);
    (0..scores.len()).filter(|&i| scores[i] >= t).collect()
}

/// Test-time gating with the unified threshold. Never empty for a non-empty
/// view.
pub fn gate_test(scores: &[f64], policy: &GatingPolicy) -> Vec<usize> {
    let picked: Vec<usize> = (0..scores.len())
        .filter(|&i| scores[i] >= policy.test_threshold)
        .collect();
    if !picked.is_empty() || scores.is_empty() {
        return picked;
    }
    match policy.fallback {
        Fallback::TopOne => {
            let best = (1..scores.len()).fold(0, |b, i| if scores[i] > scores[b] { i } else { b });
            vec![best]
        }
    }
}

// ---------------------------------------------------------------------------
// Quality scorer

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityConfig {
    pub train: TrainConfig,
    /// Use every `frame_stride`-th frame of each view for training.
    pub frame_stride: usize,
}

impl Default for QualityConfig {
    fn default() -> Self {
        QualityConfig {
            train: TrainConfig {
                loss: LossKind::Ce,
                class_weights: ClassWeights::UNIT,
                ..TrainConfig::default()
            },
            frame_stride: 1,
        }
    }
}

impl QualityConfig {
    pub fn with_augment(mut self, augment: AugmentConfig) -> Self {
        self.train.augment = augment;
        self
    }
}

/// Frame classifier whose second output means "informative".
#[derive(Debug, Clone, PartialEq)]
pub struct QualityModel {
    pub params: ModelParams,
}

/// Trains the scorer on every frame (subject to the stride) of views that
/// carry informativeness truth.
pub fn train_quality_scorer(
    views: &[&CineView],
    cfg: &QualityConfig,
    seed: u64,
) -> Result<QualityModel, SelectError> {
    if cfg.frame_stride == 0 {
        return Err(SelectError::InvalidConfig("frame_stride must be positive".into()));
    }
    let mut samples = Vec::new();
    for view in views {
        let truth = view
            .informative_truth
            .as_ref()
            .ok_or_else(|| SelectError::MissingTruth(view.view_id.clone()))?;
        for i in (0..view.len()).step_by(cfg.frame_stride) {
            samples.push(TrainSample {
                frame: &view.frames[i],
                // class index 1 carries "informative"
                class: if truth[i] { Dominance::Right } else { Dominance::Left },
            });
        }
    }
    let first = samples.first().ok_or(SelectError::EmptyTrainingSet)?;
    if samples.iter().all(|s| s.class == first.class) {
        return Err(SelectError::SingleClass);
    }
    let (w, h) = first.frame.dims();
    let (params, _) = nnet::train(&samples, h, w, &cfg.train, seed)?;
    Ok(QualityModel { params })
}

impl QualityModel {
    pub fn scorer(&self) -> QualityScorer {
        QualityScorer {
            engine: Engine::new(&self.params),
        }
    }
}

/// Reusable scoring engine of a quality model.
pub struct QualityScorer {
    engine: Engine,
}

impl QualityScorer {
    pub fn score(&mut self, frame: &Frame) -> Result<f64, SelectError> {
        let z = self.engine.logits(frame)?;
        Ok(losses::softmax(z).map_err(NnetError::from)?.get(1))
    }

    pub fn score_view(&mut self, view: &CineView) -> Result<Vec<f64>, SelectError> {
        view.frames.iter().map(|f| self.score(f)).collect()
    }
}

/// Informativeness score of every frame, in order.
pub fn score_frames(model: &QualityModel, view: &CineView) -> Result<Vec<f64>, SelectError> {
    model.scorer().score_view(view)
}

// ---------------------------------------------------------------------------
// Baselines

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsimConfig {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
    /// Frames kept on each side of the peak.
    pub peak_window: usize,
}

impl Default for SsimConfig {
    fn default() -> Self {
        SsimConfig {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 255.0,
            peak_window: 4,
        }
    }
}

impl SsimConfig {
    pub fn validate(&self) -> Result<(), SelectError> {
        if self.window % 2 == 0 || self.window == 0 {
            return Err(SelectError::InvalidConfig(format!("ssim window {} must be odd", self.window)));
        }
        if !(self.sigma > 0.0 && self.k1 > 0.0 && self.k2 > 0.0 && self.dynamic_range > 0.0) {
            return Err(SelectError::InvalidConfig("ssim sigma, k1, k2 and range must be positive".into()));
        }
        Ok(())
    }

    fn kernel(&self) -> Vec<f64> {
        let c = (self.window / 2) as f64;
        let g: Vec<f64> = (0..self.window)
            .map(|i| (-(i as f64 - c).powi(2) / (2.0 * self.sigma * self.sigma)).exp())
            .collect();
        let s: f64 = g.iter().sum();
        g.into_iter().map(|v| v / s).collect()
    }
}

/// Separable Gaussian filter over the valid region.
fn filter_valid(img: &[f64], w: usize, h: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (ow, oh) = (w + 1 - n, h + 1 - n);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * img[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    (out, ow, oh)
}

/// Mean structural similarity over all valid Gaussian-weighted windows.
pub fn ssim(a: &Frame, b: &Frame, cfg: &SsimConfig) -> Result<f64, SelectError> {
    cfg.validate()?;
    if a.dims() != b.dims() {
        return Err(SelectError::DimensionMismatch(a.dims(), b.dims()));
    }
    let (w, h) = a.dims();
    if w < cfg.window || h < cfg.window {
        return Err(SelectError::TooSmallForWindow {
            window: cfg.window,
            found: a.dims(),
        });
    }
    let k = cfg.kernel();
    let fa: Vec<f64> = a.pixels().iter().map(|&p| p as f64).collect();
    let fb: Vec<f64> = b.pixels().iter().map(|&p| p as f64).collect();
    let prod = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| p * q).collect() };
    let (mu_a, ow, oh) = filter_valid(&fa, w, h, &k);
    let (mu_b, ..) = filter_valid(&fb, w, h, &k);
    let (aa, ..) = filter_valid(&prod(&fa, &fa), w, h, &k);
    let (bb, ..) = filter_valid(&prod(&fb, &fb), w, h, &k);
    let (ab, ..) = filter_valid(&prod(&fa, &fb), w, h, &k);
    let c1 = (cfg.k1 * cfg.dynamic_range).powi(2);
    let c2 = (cfg.k2 * cfg.dynamic_range).powi(2);
    let mut total = 0.0;
    for i in 0..ow * oh {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok((total / (ow * oh) as f64).clamp(-1.0, 1.0))
}

/// Frames around the contrast peak, taken as the frame least similar to the
/// first one.
pub fn ssim_select(view: &CineView, cfg: &SsimConfig) -> Result<Vec<usize>, SelectError> {
    let n = view.len();
    if n < 2 {
        return Ok((0..n).collect());
    }
    let reference = &view.frames[0];
    let mut peak = 1;
    let mut lowest = f64::INFINITY;
    for t in 1..n {
        let s = ssim(reference, &view.frames[t], cfg)?;
        if s < lowest {
            lowest = s;
            peak = t;
        }
    }
    Ok(window_around(peak, cfg.peak_window, n))
}

/// Indices `[peak - half, peak + half]` clipped to `0..n`.
pub fn window_around(peak: usize, half: usize, n: usize) -> Vec<usize> {
    (peak.saturating_sub(half)..=(peak + half).min(n - 1)).collect()
}

/// Indices `n..len`, or every index when the view is too short.
pub fn discard_first(len: usize, n: usize) -> Vec<usize> {
    if len > n {
        (n..len).collect()
    } else {
        (0..len).collect()
    }
}

pub fn all_frames(len: usize) -> Vec<usize> {
    (0..len).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameMethod {
    Quality,
    Ssim,
    Discard20,
    All,
}

impl FrameMethod {
    pub const ALL: [FrameMethod; 4] = [
        FrameMethod::Quality,
        FrameMethod::Ssim,
        FrameMethod::Discard20,
        FrameMethod::All,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FrameMethod::Quality => "quality",
            FrameMethod::Ssim => "ssim",
            FrameMethod::Discard20 => "discard20",
            FrameMethod::All => "all",
        }
    }
}

impl std::fmt::Display for FrameMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for FrameMethod {
    type Err = SelectError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        FrameMethod::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                SelectError::InvalidConfig(format!(
                    "unknown frame method {s:?} (expected quality, ssim, discard20 or all)"
                ))
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::Artery;

    const FIG: [f64; 4] = [0.104, 0.435, 0.759, 0.999];

    #[test]
    fn gating_examples() {
        let p = GatingPolicy::default();
        assert_eq!(gate_train(Dominance::Left, &FIG, &p), vec![1, 2, 3]);
        assert_eq!(gate_train(Dominance::Right, &FIG, &p), vec![2, 3]);
        assert!(gate_train(Dominance::Right, &[0.0; 5], &p).is_empty());
        assert_eq!(gate_test(&FIG, &p), vec![2, 3]);
        assert_eq!(gate_test(&[0.1, 0.2], &p), vec![1]);
        assert_eq!(gate_test(&[0.6, 0.9, 0.55], &p), vec![0, 1, 2]);
    }

    #[test]
    fn baseline_windows() {
        assert_eq!(window_around(10, 4, 30), (6..=14).collect::<Vec<_>>());
        assert_eq!(window_around(1, 4, 2), vec![0, 1]);
        assert_eq!(discard_first(60, 20), (20..60).collect::<Vec<_>>());
        assert_eq!(discard_first(10, 20), (0..10).collect::<Vec<_>>());
        assert_eq!(discard_first(7, 0), all_frames(7));
    }

    fn ramp_view(n: usize) -> CineView {
        let frames = (0..n)
            .map(|t| {
                let mut f = Frame::filled(16, 16, 170);
                for y in 0..16 {
                    for x in 6..10 {
                        f.set_pixel(x, y, (170 - 12 * t) as u8);
                    }
                }
                f
            })
            .collect();
        CineView {
            view_id: "v".into(),
            artery: Artery::Rca,
            fps: 15,
            frames,
            informative_truth: None,
        }
    }

    #[test]
    fn ssim_properties() {
        let cfg = SsimConfig::default();
        let v = ramp_view(5);
        let s = ssim(&v.frames[0], &v.frames[0], &cfg).unwrap();
        assert!((s - 1.0).abs() < 1e-12);
        let ab = ssim(&v.frames[1], &v.frames[3], &cfg).unwrap();
        let ba = ssim(&v.frames[3], &v.frames[1], &cfg).unwrap();
        assert_eq!(ab, ba);
        assert!(ab < 1.0);
        assert!(ssim(&Frame::filled(8, 8, 0), &Frame::filled(8, 8, 0), &cfg).is_err());
    }

    #[test]
    fn monotone_ramp_peaks_last() {
        let v = ramp_view(12);
        assert_eq!(ssim_select(&v, &SsimConfig::default()).unwrap(), vec![7, 8, 9, 10, 11]);
        let two = ramp_view(2);
        assert_eq!(ssim_select(&two, &SsimConfig::default()).unwrap(), vec![0, 1]);
    }

    #[test]
    fn method_names_round_trip() {
        for m in FrameMethod::ALL {
            assert_eq!(m.as_str().parse::<FrameMethod>().unwrap(), m);
        }
        assert!("best".parse::<FrameMethod>().is_err());
    }

    #[test]
    fn scorer_rejects_single_class() {
        let mut v = ramp_view(4);
        v.informative_truth = Some(vec![true; 4]);
        let r = train_quality_scorer(&[&v], &QualityConfig::default(), 1);
        assert!(matches!(r, Err(SelectError::SingleClass)));
        v.informative_truth = None;
        assert!(matches!(
            train_quality_scorer(&[&v], &QualityConfig::default(), 1),
            Err(SelectError::MissingTruth(_))
        ));
    }
}
