//! Deterministic synthetic cine sequences with a planted dominance signal.
//!
//! Each RCA view is a smooth vessel tree drawn dark on a bright background.
//! Right-dominant studies get a thicker trunk and a distal PDA-like branch;
//! left-dominant ones get neither. Contrast rises, holds and washes out over
//! the view, and frames whose contrast clears a threshold are marked
//! informative.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::{self, Artery, CineView, DataError, Dataset, Dominance, Frame, Study};
use crate::rng::rng_for;

pub const TRUTH_FILE: &str = "truth.json";
pub const TRUTH_FORMAT: &str = "domvote-truth";

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    InvalidConfig(String),
    #[error("invalid label noise spec: {0}")]
    InvalidNoise(String),
    #[error("flip log does not match dataset: {0}")]
    LogMismatch(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("truth sidecar {path}: {reason}")]
    Truth { path: PathBuf, reason: String },
}

/// Fractions of a view spent in each contrast phase. They must sum to one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContrastProfile {
    /// Leading frames with no contrast at all.
    pub baseline: f64,
    pub ramp: f64,
    pub plateau: f64,
    pub washout: f64,
}

impl Default for ContrastProfile {
    fn default() -> Self {
        ContrastProfile {
            baseline: 0.0,
            ramp: 0.2,
            plateau: 0.5,
            washout: 0.3,
        }
    }
}

impl ContrastProfile {
    /// Phase lengths for a view of `n` frames; the plateau always gets at
    /// least one frame.
    fn phase_lengths(&self, n: usize) -> [usize; 4] {
        let nf = n as f64;
        let nb = (self.baseline * nf).round() as usize;
        let nr = (self.ramp * nf).round() as usize;
        let np = ((self.plateau * nf).round() as usize).max(1);
        let nb = nb.min(n - np);
        let nr = nr.min(n - np - nb);
        [nb, nr, np, n - nb - nr - np]
    }

    /// Contrast level of every frame of an `n`-frame view. The ramp starts at
    /// zero and the washout ends at zero.
    pub fn levels(&self, n: usize) -> Vec<f64> {
        let [nb, nr, np, nw] = self.phase_lengths(n);
        let mut out = Vec::with_capacity(n);
        out.extend(std::iter::repeat_n(0.0, nb));
        out.extend((0..nr).map(|i| i as f64 / nr as f64));
        out.extend(std::iter::repeat_n(1.0, np));
        out.extend((0..nw).map(|i| 1.0 - (i + 1) as f64 / nw as f64));
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_studies: usize,
    pub left_fraction: f64,
    pub image_size: usize,
    pub frames_min: usize,
    pub frames_max: usize,
    /// Mean RCA views per study, (left, right).
    pub views_mean: [f64; 2],
    /// Mean trunk width in pixels, (left, right).
    pub width_mean: [f64; 2],
    /// Half-range of the per-study uniform width jitter.
    pub width_jitter: f64,
    pub profile: ContrastProfile,
    /// Frames with contrast at or above this level are informative.
    pub informative_threshold: f64,
    pub noise_sigma: f64,
    pub background: f64,
    /// Darkening of a fully covered vessel pixel at full contrast.
    pub vessel_depth: f64,
    pub occlusion_fraction: f64,
    /// Adds one short placeholder LCA view per study.
    pub lca_views: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_studies: 200,
            left_fraction: 0.232,
            image_size: 64,
            frames_min: 30,
            frames_max: 60,
            views_mean: [1.2, 2.0],
            width_mean: [2.0, 3.0],
            width_jitter: 0.3,
            profile: ContrastProfile::default(),
            informative_threshold: 0.2,
            noise_sigma: 8.0,
            background: 170.0,
            vessel_depth: 90.0,
            occlusion_fraction: 0.0,
            lca_views: true,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidConfig(m));
        if self.num_studies == 0 {
            return bad("num_studies must be positive".into());
        }
        if !(self.left_fraction > 0.0 && self.left_fraction < 1.0) {
            return bad(format!("left_fraction {} outside (0, 1)", self.left_fraction));
        }
        if self.image_size < 8 {
            return bad(format!("image_size {} below 8", self.image_size));
        }
        if self.frames_min < 2 || self.frames_min > self.frames_max {
            return bad(format!(
                "frames range {}..={} invalid (min >= 2, min <= max)",
                self.frames_min, self.frames_max
            ));
        }
        for (i, &m) in self.views_mean.iter().enumerate() {
            if !(1.0..=3.0).contains(&m) {
                return bad(format!("views_mean[{i}] = {m} outside [1, 3]"));
            }
        }
        let [wl, wr] = self.width_mean;
        if !(wl > 0.0 && wr > wl) {
            return bad(format!("width means must satisfy 0 < left ({wl}) < right ({wr})"));
        }
        // recentring can move a width by up to twice the jitter
        if !(self.width_jitter >= 0.0 && 2.0 * self.width_jitter < wl) {
            return bad(format!("width_jitter {} must be in [0, left width / 2)", self.width_jitter));
        }
        let p = self.profile;
        let parts = [p.baseline, p.ramp, p.plateau, p.washout];
        if parts.iter().any(|&f| !(0.0..=1.0).contains(&f)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad(format!("contrast profile {parts:?} must be fractions summing to 1"));
        }
        if p.plateau <= 0.0 {
            return bad("plateau fraction must be positive".into());
        }
        if !(self.informative_threshold > 0.0 && self.informative_threshold <= 1.0) {
            return bad(format!("informative_threshold {} outside (0, 1]", self.informative_threshold));
        }
        if !(self.noise_sigma >= 0.0 && self.background >= 0.0 && self.background <= 255.0) {
            return bad("noise_sigma must be >= 0 and background in [0, 255]".into());
        }
        if !(self.vessel_depth > 0.0 && self.vessel_depth <= self.background) {
            return bad(format!("vessel_depth {} must be in (0, background]", self.vessel_depth));
        }
        if !(0.0..1.0).contains(&self.occlusion_fraction) {
            return bad(format!("occlusion_fraction {} outside [0, 1)", self.occlusion_fraction));
        }
        let (n_left, n_occ) = (self.left_count(), self.occluded_count());
        if n_left == 0 || n_left == self.num_studies {
            return bad(format!("{} studies with left_fraction {} leave a class empty", self.num_studies, self.left_fraction));
        }
        if n_occ > self.num_studies - n_left {
            return bad(format!("{n_occ} occlusions exceed the right-dominant count"));
        }
        Ok(())
    }

    pub fn left_count(&self) -> usize {
        (self.left_fraction * self.num_studies as f64).round() as usize
    }

    pub fn occluded_count(&self) -> usize {
        (self.occlusion_fraction * self.num_studies as f64).round() as usize
    }
}

// ---------------------------------------------------------------------------
// Geometry and rendering

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub a: [f64; 2],
    pub b: [f64; 2],
    pub width: f64,
}

impl Segment {
    fn distance(&self, p: [f64; 2]) -> f64 {
        let d = [self.b[0] - self.a[0], self.b[1] - self.a[1]];
        let len2 = d[0] * d[0] + d[1] * d[1];
        let t = if len2 == 0.0 {
            0.0
        } else {
            (((p[0] - self.a[0]) * d[0] + (p[1] - self.a[1]) * d[1]) / len2).clamp(0.0, 1.0)
        };
        let q = [self.a[0] + t * d[0] - p[0], self.a[1] + t * d[1] - p[1]];
        (q[0] * q[0] + q[1] * q[1]).sqrt()
    }

    fn length(&self) -> f64 {
        ((self.b[0] - self.a[0]).powi(2) + (self.b[1] - self.a[1]).powi(2)).sqrt()
    }
}

/// Vessel tree of one view in pixel coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VesselGeometry {
    pub size: usize,
    pub trunk: Vec<Segment>,
    pub branches: Vec<Vec<Segment>>,
    pub pda: Option<Vec<Segment>>,
}

impl VesselGeometry {
    pub fn segments(&self) -> impl Iterator<Item = &Segment> {
        self.trunk
            .iter()
            .chain(self.branches.iter().flatten())
            .chain(self.pda.iter().flatten())
    }

    /// Length-weighted mean width along the trunk.
    pub fn trunk_width(&self) -> f64 {
        let total: f64 = self.trunk.iter().map(Segment::length).sum();
        self.trunk.iter().map(|s| s.width * s.length()).sum::<f64>() / total
    }

    /// Antialiased vessel coverage in `[0, 1]` per pixel.
    pub fn coverage(&self) -> Vec<f64> {
        let n = self.size;
        let mut cov = vec![0.0f64; n * n];
        for seg in self.segments() {
            let r = seg.width / 2.0 + 0.5;
            let lo = |v: f64| ((v - r).floor().max(0.0)) as usize;
            let hi = |v: f64| ((v + r).ceil().max(0.0) as usize).min(n - 1);
            for y in lo(seg.a[1].min(seg.b[1]))..=hi(seg.a[1].max(seg.b[1])) {
                for x in lo(seg.a[0].min(seg.b[0]))..=hi(seg.a[0].max(seg.b[0])) {
                    let d = seg.distance([x as f64 + 0.5, y as f64 + 0.5]);
                    let c = (r - d).clamp(0.0, 1.0);
                    let slot = &mut cov[y * n + x];
                    *slot = slot.max(c);
                }
            }
        }
        cov
    }
}

/// Intensity model shared by every frame of a dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderStyle {
    pub background: f64,
    pub vessel_depth: f64,
    pub noise_sigma: f64,
}

impl From<&SynthConfig> for RenderStyle {
    fn from(c: &SynthConfig) -> Self {
        RenderStyle {
            background: c.background,
            vessel_depth: c.vessel_depth,
            noise_sigma: c.noise_sigma,
        }
    }
}

fn render_with_coverage(
    size: usize,
    coverage: &[f64],
    contrast: f64,
    style: &RenderStyle,
    rng: &mut impl Rng,
) -> Frame {
    let contrast = if contrast.is_finite() { contrast.clamp(0.0, 1.0) } else { 0.0 };
    let noise = Normal::new(0.0, style.noise_sigma.max(0.0)).expect("finite sigma");
    let pixels = coverage
        .iter()
        .map(|&c| {
            let mut v = style.background - style.vessel_depth * contrast * c;
            if style.noise_sigma > 0.0 {
                v += noise.sample(rng);
            }
            v.round().clamp(0.0, 255.0) as u8
        })
        .collect();
    Frame::new(size, size, pixels).expect("square frame")
}

/// Draws one frame: vessels darkened in proportion to `contrast`, plus
/// Gaussian pixel noise.
pub fn render_frame(
    geometry: &VesselGeometry,
    contrast: f64,
    style: &RenderStyle,
    rng: &mut impl Rng,
) -> Frame {
    render_with_coverage(geometry.size, &geometry.coverage(), contrast, style, rng)
}

/// Smooth random-walk polyline.
fn polyline(
    start: [f64; 2],
    heading: f64,
    length: f64,
    n_seg: usize,
    width: f64,
    wiggle: f64,
    size: usize,
    rng: &mut impl Rng,
) -> Vec<Segment> {
    let (lo, hi) = (0.06 * size as f64, 0.94 * size as f64);
    let step = length / n_seg as f64;
    let mut p = start;
    let mut h = heading;
    let mut out = Vec::with_capacity(n_seg);
    for _ in 0..n_seg {
        h += rng.random_range(-wiggle..=wiggle);
        let q = [
            (p[0] + step * h.cos()).clamp(lo, hi),
            (p[1] + step * h.sin()).clamp(lo, hi),
        ];
        out.push(Segment { a: p, b: q, width });
        p = q;
    }
    out
}

fn heading_of(seg: &Segment) -> f64 {
    (seg.b[1] - seg.a[1]).atan2(seg.b[0] - seg.a[0])
}

/// Trunk point and heading at arc-length fraction `t`.
fn point_along(trunk: &[Segment], t: f64) -> ([f64; 2], f64) {
    let total: f64 = trunk.iter().map(Segment::length).sum();
    let mut remaining = t * total;
    for seg in trunk {
        let l = seg.length();
        if remaining <= l && l > 0.0 {
            let f = remaining / l;
            return (
                [seg.a[0] + f * (seg.b[0] - seg.a[0]), seg.a[1] + f * (seg.b[1] - seg.a[1])],
                heading_of(seg),
            );
        }
        remaining -= l;
    }
    let last = trunk.last().expect("non-empty trunk");
    (last.b, heading_of(last))
}

/// Keeps the first `t` fraction (by arc length) of the trunk.
fn truncate(trunk: &[Segment], t: f64) -> Vec<Segment> {
    let total: f64 = trunk.iter().map(Segment::length).sum();
    let mut remaining = t * total;
    let mut out = Vec::new();
    for seg in trunk {
        let l = seg.length();
        if remaining >= l {
            out.push(*seg);
            remaining -= l;
        } else {
            let f = remaining / l;
            out.push(Segment {
                a: seg.a,
                b: [seg.a[0] + f * (seg.b[0] - seg.a[0]), seg.a[1] + f * (seg.b[1] - seg.a[1])],
                width: seg.width,
            });
            break;
        }
    }
    out
}

/// Random vessel tree. `occlude_at` cuts the trunk at that arc-length
/// fraction and drops everything distal to it.
pub fn random_geometry(
    size: usize,
    width: f64,
    with_pda: bool,
    occlude_at: Option<f64>,
    rng: &mut impl Rng,
) -> VesselGeometry {
    let s = size as f64;
    let start = [rng.random_range(0.25..0.75) * s, 0.08 * s];
    let heading = PI / 2.0 + rng.random_range(-0.4..0.4);
    let trunk = polyline(start, heading, 0.75 * s, 8, width, 0.25, size, rng);

    let n_branches = rng.random_range(2..=5);
    let mut branches = Vec::with_capacity(n_branches);
    let mut origins = Vec::with_capacity(n_branches);
    for _ in 0..n_branches {
        let t = rng.random_range(0.2..0.8);
        let (p, h) = point_along(&trunk, t);
        let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let h = h + side * rng.random_range(0.5..1.1);
        let len = rng.random_range(0.15..0.3) * s;
        branches.push(polyline(p, h, len, 3, 0.55 * width, 0.2, size, rng));
        origins.push(t);
    }

    let pda = with_pda.then(|| {
        let end = trunk.last().expect("trunk");
        let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let h = heading_of(end) + side * rng.random_range(1.2..1.7);
        polyline(end.b, h, 0.3 * s, 4, 0.75 * width, 0.15, size, rng)
    });

    match occlude_at {
        None => VesselGeometry { size, trunk, branches, pda },
        Some(cut) => VesselGeometry {
            size,
            trunk: truncate(&trunk, cut),
            branches: branches
                .into_iter()
                .zip(origins)
                .filter(|(_, t)| *t <= cut)
                .map(|(b, _)| b)
                .collect(),
            pda: None,
        },
    }
}

// ---------------------------------------------------------------------------
// Dataset generation

/// Hidden per-study facts, written next to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyTruth {
    pub study_id: String,
    pub dominance: Dominance,
    pub occluded: bool,
    pub trunk_width: f64,
    pub has_pda: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthTruth {
    pub format: String,
    pub config: SynthConfig,
    pub studies: Vec<StudyTruth>,
}

impl SynthTruth {
    pub fn occluded_ids(&self) -> Vec<String> {
        self.studies.iter().filter(|s| s.occluded).map(|s| s.study_id.clone()).collect()
    }

    pub fn get(&self, study_id: &str) -> Option<&StudyTruth> {
        self.studies.iter().find(|s| s.study_id == study_id)
    }

    /// Mean planted trunk width of a class.
    pub fn mean_width(&self, class: Dominance) -> f64 {
        let w: Vec<f64> = self
            .studies
            .iter()
            .filter(|s| s.dominance == class)
            .map(|s| s.trunk_width)
            .collect();
        w.iter().sum::<f64>() / w.len() as f64
    }
}

pub fn study_id(index: usize) -> String {
    format!("s{index:04}")
}

/// Per-study widths of one class: uniform jitter recentred so the class
/// mean is exactly the configured mean.
fn class_widths(mean: f64, jitter: f64, n: usize, rng: &mut impl Rng) -> Vec<f64> {
    if n == 0 {
        return Vec::new();
    }
    let raw: Vec<f64> = (0..n)
        .map(|_| if jitter > 0.0 { rng.random_range(-jitter..=jitter) } else { 0.0 })
        .collect();
    let centre = raw.iter().sum::<f64>() / n as f64;
    raw.iter().map(|j| mean + j - centre).collect()
}

fn synth_view(
    view_id: String,
    artery: Artery,
    geometry: &VesselGeometry,
    n_frames: usize,
    cfg: &SynthConfig,
    rng: &mut ChaCha8Rng,
) -> CineView {
    let coverage = geometry.coverage();
    let style = RenderStyle::from(cfg);
    let levels = cfg.profile.levels(n_frames);
    let frames = levels
        .iter()
        .map(|&c| render_with_coverage(cfg.image_size, &coverage, c, &style, rng))
        .collect();
    CineView {
        view_id,
        artery,
        fps: dataio::DEFAULT_FPS,
        frames,
        informative_truth: Some(levels.iter().map(|&c| c >= cfg.informative_threshold).collect()),
    }
}

/// Builds the dataset in memory.
pub fn synthesize(cfg: &SynthConfig) -> Result<(Dataset, SynthTruth), SynthError> {
    cfg.validate()?;
    let n = cfg.num_studies;
    let n_left = cfg.left_count();

    let mut labels: Vec<Dominance> = (0..n)
        .map(|i| if i < n_left { Dominance::Left } else { Dominance::Right })
        .collect();
    labels.shuffle(&mut rng_for(cfg.seed, &[1]));

    let mut right_ids: Vec<usize> = (0..n).filter(|&i| labels[i] == Dominance::Right).collect();
    right_ids.shuffle(&mut rng_for(cfg.seed, &[2]));
    let mut occluded = vec![false; n];
    for &i in right_ids.iter().take(cfg.occluded_count()) {
        occluded[i] = true;
    }

    let mut widths = vec![0.0; n];
    for class in [Dominance::Left, Dominance::Right] {
        let idx: Vec<usize> = (0..n).filter(|&i| labels[i] == class).collect();
        let w = class_widths(
            cfg.width_mean[class.index()],
            cfg.width_jitter,
            idx.len(),
            &mut rng_for(cfg.seed, &[3, class.index() as u64]),
        );
        for (i, w) in idx.into_iter().zip(w) {
            widths[i] = w;
        }
    }

    let mut studies = Vec::with_capacity(n);
    let mut truths = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = rng_for(cfg.seed, &[4, i as u64]);
        let class = labels[i];
        let p = (cfg.views_mean[class.index()] - 1.0) / 2.0;
        let n_views = 1 + Binomial::new(2, p).expect("p in [0,1]").sample(&mut rng) as usize;
        let has_pda = class == Dominance::Right && !occluded[i];
        let cut = occluded[i].then(|| rng.random_range(0.15..0.35));
        let sid = study_id(i);

        let mut views = Vec::with_capacity(n_views + 1);
        for v in 0..n_views {
            let geom = random_geometry(cfg.image_size, widths[i], class == Dominance::Right, cut, &mut rng);
            let len = rng.random_range(cfg.frames_min..=cfg.frames_max);
            views.push(synth_view(format!("rca{v}"), Artery::Rca, &geom, len, cfg, &mut rng));
        }
        if cfg.lca_views {
            let w = (cfg.width_mean[0] + cfg.width_mean[1]) / 2.0;
            let geom = random_geometry(cfg.image_size, w, false, None, &mut rng);
            views.push(synth_view("lca0".into(), Artery::Lca, &geom, cfg.frames_min.min(4), cfg, &mut rng));
        }
        studies.push(Study {
            study_id: sid.clone(),
            dominance: class,
            views,
        });
        truths.push(StudyTruth {
            study_id: sid,
            dominance: class,
            occluded: occluded[i],
            trunk_width: widths[i],
            has_pda,
        });
    }
    let dataset = Dataset::new(studies)?;
    Ok((
        dataset,
        SynthTruth {
            format: TRUTH_FORMAT.into(),
            config: cfg.clone(),
            studies: truths,
        },
    ))
}

/// Writes the dataset (manifest, frames and `truth.json`) under `out`.
/// Returns the manifest path.
pub fn generate_dataset(cfg: &SynthConfig, out: impl AsRef<Path>) -> Result<(Dataset, SynthTruth, PathBuf), SynthError> {
    let out = out.as_ref();
    let (dataset, truth) = synthesize(cfg)?;
    let manifest = dataio::save_dataset(&dataset, out)?;
    write_truth(&truth, out.join(TRUTH_FILE))?;
    Ok((dataset, truth, manifest))
}

pub fn write_truth(truth: &SynthTruth, path: impl AsRef<Path>) -> Result<(), SynthError> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(truth).expect("truth serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| SynthError::Truth {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

pub fn read_truth(path: impl AsRef<Path>) -> Result<SynthTruth, SynthError> {
    let path = path.as_ref();
    let err = |reason: String| SynthError::Truth {
        path: path.to_path_buf(),
        reason,
    };
    let text = fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
    let truth: SynthTruth = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
    if truth.format != TRUTH_FORMAT {
        return Err(err(format!("unexpected format {:?}", truth.format)));
    }
    Ok(truth)
}

// ---------------------------------------------------------------------------
// Label noise

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    ExactCount,
    Bernoulli,
}

impl std::str::FromStr for NoiseMode {
    type Err = SynthError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "exact_count" => Ok(NoiseMode::ExactCount),
            "bernoulli" => Ok(NoiseMode::Bernoulli),
            other => Err(SynthError::InvalidNoise(format!(
                "unknown mode {other:?} (expected exact_count or bernoulli)"
            ))),
        }
    }
}

impl NoiseMode {
    pub fn as_str(self) -> &'static str {
        match self {
            NoiseMode::ExactCount => "exact_count",
            NoiseMode::Bernoulli => "bernoulli",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelNoiseSpec {
    pub flip_rate: f64,
    pub mode: NoiseMode,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlipEntry {
    pub study_id: String,
    pub original: Dominance,
}

/// Studies whose labels were flipped, with their original labels.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlipLog {
    pub entries: Vec<FlipEntry>,
}

impl FlipLog {
    pub fn contains(&self, study_id: &str) -> bool {
        self.entries.iter().any(|e| e.study_id == study_id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Flips dominance labels. In exact-count mode exactly
/// `round(flip_rate * N)` studies are flipped.
pub fn inject_label_noise(dataset: &Dataset, spec: &LabelNoiseSpec) -> Result<(Dataset, FlipLog), SynthError> {
    if !(0.0..=0.5).contains(&spec.flip_rate) {
        return Err(SynthError::InvalidNoise(format!(
            "flip_rate {} outside [0, 0.5]",
            spec.flip_rate
        )));
    }
    let n = dataset.len();
    let mut rng = rng_for(spec.seed, &[0x0f11b]);
    let mut chosen: Vec<usize> = match spec.mode {
        NoiseMode::ExactCount => {
            let k = (spec.flip_rate * n as f64).round() as usize;
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng);
            idx.truncate(k);
            idx
        }
        NoiseMode::Bernoulli => (0..n).filter(|_| rng.random_bool(spec.flip_rate)).collect(),
    };
    chosen.sort_unstable();
    let mut out = dataset.clone();
    let mut log = FlipLog::default();
    for i in chosen {
        let study = &mut out.studies[i];
        log.entries.push(FlipEntry {
            study_id: study.study_id.clone(),
            original: study.dominance,
        });
        study.dominance = study.dominance.other();
    }
    Ok((out, log))
}

/// Restores the labels recorded in `log`.
pub fn revert_label_noise(dataset: &Dataset, log: &FlipLog) -> Result<Dataset, SynthError> {
    let mut out = dataset.clone();
    for entry in &log.entries {
        let study = out
            .studies
            .iter_mut()
            .find(|s| s.study_id == entry.study_id)
            .ok_or_else(|| SynthError::LogMismatch(format!("unknown study {}", entry.study_id)))?;
        if study.dominance != entry.original.other() {
            return Err(SynthError::LogMismatch(format!(
                "study {} is not flipped",
                entry.study_id
            )));
        }
        study.dominance = entry.original;
    }
    Ok(out)
}
