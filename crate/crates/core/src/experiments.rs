//! Stratified k-fold cross-validation and the experiment designs built on
//! it: saturation, loss and frame-selection ablations, ensemble hard-case
//! mining and the exclusion rerun.
//!
//! Every training job is keyed by (plan seed, split, validation split,
//! fold). Jobs run on a rayon pool and their results are merged in key
//! order, so outputs do not depend on the number of workers.

use std::collections::{BTreeSet, HashMap};
use std::sync::{Arc, Mutex};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregate::{self, AggregateError, FrameLogits};
use crate::dataio::{CineView, Dataset, Dominance, Study};
use crate::frameselect::{
    self, all_frames, discard_first, gate_test, gate_train, ssim_select, FrameMethod, GatingPolicy,
    QualityConfig, QualityModel, QualityScorer, SelectError, SsimConfig,
};
use crate::losses::{self, ClassWeights, LossConfig, LossError, LossKind};
use crate::nnet::{self, Engine, ModelParams, NnetError, TrainConfig, TrainSample};
use crate::report::{
    self, Experiment, ExperimentKind, FrameRow, HardCaseReport, Part, ReportError, TagRow, ViewRow,
};
use crate::rng::{derive_seed, fnv1a, rng_for};
use crate::synthgen::{inject_label_noise, FlipLog, LabelNoiseSpec, NoiseMode, SynthError, SynthTruth};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error("dataset too small: {0}")]
    TooSmall(String),
    #[error("ensemble too small: need at least 2 members, got {0}")]
    EnsembleTooSmall(usize),
    #[error("unknown study id {0}")]
    UnknownStudy(String),
    #[error("excluding the hard cases leaves no {0}-dominant studies")]
    EmptyClass(Dominance),
    #[error("no training frames survived selection in fold {0}")]
    NoTrainingFrames(usize),
    #[error("study {0} is in both the training and the test set")]
    Leakage(String),
    #[error("dataset views have inconsistent frame sizes")]
    MixedDims,
    #[error("thread pool: {0}")]
    Pool(String),
    #[error(transparent)]
    Select(#[from] SelectError),
    #[error(transparent)]
    Nnet(#[from] NnetError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Aggregate(#[from] AggregateError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Report(#[from] ReportError),
}

// seed path tags
const SPLIT: u64 = 0x5b1;
const VAL: u64 = 0x7a1;
const SCORER: u64 = 0x5c0;
const INIT: u64 = 0x1417;
const SUBSAMPLE: u64 = 0x5ab;
const REPEAT: u64 = 0x4e9;
const NOISE: u64 = 0x0f11;
const MEMBER: u64 = 0xe45;

/// Study-to-fold assignment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub k: usize,
    pub seed: u64,
    /// (study id, fold) sorted by study id.
    pub assignment: Vec<(String, usize)>,
}

impl FoldSplit {
    pub fn fold_of(&self, study_id: &str) -> Option<usize> {
        self.assignment
            .binary_search_by(|(id, _)| id.as_str().cmp(study_id))
            .ok()
            .map(|i| self.assignment[i].1)
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for (_, f) in &self.assignment {
            sizes[*f] += 1;
        }
        sizes
    }

    pub fn fold_ids(&self, fold: usize) -> Vec<&str> {
        self.assignment
            .iter()
            .filter(|(_, f)| *f == fold)
            .map(|(id, _)| id.as_str())
            .collect()
    }
}

fn shuffled_by_class<'a>(studies: &[&'a Study], seed: u64, tag: u64) -> [Vec<&'a Study>; 2] {
    let mut out: [Vec<&Study>; 2] = [Vec::new(), Vec::new()];
    for s in studies {
        out[s.dominance.index()].push(s);
    }
    for (c, group) in out.iter_mut().enumerate() {
        group.sort_by(|a, b| a.study_id.cmp(&b.study_id));
        group.shuffle(&mut rng_for(seed, &[tag, c as u64]));
    }
    out
}

/// Stratified assignment: each class is shuffled, the classes are
/// concatenated (left first) and dealt round-robin, so fold sizes and
/// per-fold left counts each differ by at most one.
pub fn kfold_split(studies: &[&Study], k: usize, seed: u64) -> Result<FoldSplit, ExperimentError> {
    if k < 2 {
        return Err(ExperimentError::InvalidPlan(format!("k must be at least 2, got {k}")));
    }
    if k > studies.len() {
        return Err(ExperimentError::TooSmall(format!(
            "{} studies cannot fill {k} folds",
            studies.len()
        )));
    }
    let [left, right] = shuffled_by_class(studies, seed, 1);
    let mut assignment: Vec<(String, usize)> = left
        .iter()
        .chain(right.iter())
        .enumerate()
        .map(|(i, s)| (s.study_id.clone(), i % k))
        .collect();
    assignment.sort();
    if assignment.windows(2).any(|w| w[0].0 == w[1].0) {
        return Err(ExperimentError::InvalidPlan("duplicate study ids".into()));
    }
    Ok(FoldSplit { k, seed, assignment })
}

/// Stratified holdout: `round(fraction·n_c)` studies of each class go to
/// the second part.
pub fn stratified_holdout<'a>(
    studies: &[&'a Study],
    fraction: f64,
    seed: u64,
) -> (Vec<&'a Study>, Vec<&'a Study>) {
    let (mut keep, mut held) = (Vec::new(), Vec::new());
    for group in shuffled_by_class(studies, seed, 2) {
        let n = (fraction * group.len() as f64).round() as usize;
        held.extend_from_slice(&group[..n]);
        keep.extend_from_slice(&group[n..]);
    }
    keep.sort_by(|a, b| a.study_id.cmp(&b.study_id));
    held.sort_by(|a, b| a.study_id.cmp(&b.study_id));
    (keep, held)
}

/// Keeps `round(fraction·n_c)` studies of each class (at least one of any
/// class that is present).
pub fn stratified_subsample<'a>(studies: &[&'a Study], fraction: f64, seed: u64) -> Vec<&'a Study> {
    let mut out = Vec::new();
    for group in shuffled_by_class(studies, seed, 3) {
        if group.is_empty() {
            continue;
        }
        let n = ((fraction * group.len() as f64).round() as usize).clamp(1, group.len());
        out.extend_from_slice(&group[..n]);
    }
    out.sort_by(|a, b| a.study_id.cmp(&b.study_id));
    out
}

/// Class weights used by the dominance model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum WeightMode {
    Fixed(ClassWeights),
    /// Proportional to the square root of each class's training frame
    /// count, normalized to sum to one. Under per-sample normalization this
    /// equalizes the reverse-entropy pull of the two classes.
    Balanced,
}

impl WeightMode {
    pub fn resolve(&self, counts: [usize; 2]) -> Result<ClassWeights, LossError> {
        match self {
            WeightMode::Fixed(w) => Ok(*w),
            WeightMode::Balanced => {
                let [l, r] = counts.map(|c| (c.max(1) as f64).sqrt());
                ClassWeights::new(l / (l + r), r / (l + r))
            }
        }
    }
}

/// Whether majority-class subsampling acts on the gated frames or on the
/// raw frame list before gating.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SubsampleOrder {
    AfterGating,
    BeforeGating,
}

impl SubsampleOrder {
    pub fn as_str(self) -> &'static str {
        match self {
            SubsampleOrder::AfterGating => "after",
            SubsampleOrder::BeforeGating => "before",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    /// Each seed draws its own label noise and fold splits.
    pub seeds: Vec<u64>,
    pub k: usize,
    /// Independent k-fold splits per seed.
    pub splits: usize,
    /// Train/validation splits per fold.
    pub val_splits: usize,
    pub val_fraction: f64,
    /// Data fraction for a plain cross-validation run.
    pub fraction: f64,
    pub loss: LossKind,
    pub loss_config: LossConfig,
    pub class_weights: WeightMode,
    /// Schedule, batch size, optimizer and augmentation of the dominance
    /// model; its loss fields are replaced by the ones above.
    pub train: TrainConfig,
    pub frame_method: FrameMethod,
    pub gating: GatingPolicy,
    pub ssim: SsimConfig,
    pub discard_n: usize,
    pub subsample: SubsampleOrder,
    pub quality: QualityConfig,
    pub fractions: Vec<f64>,
    /// Saturation repeats are `max(min_repeats, round(repeat_scale / f))`.
    pub repeat_scale: f64,
    pub min_repeats: usize,
    pub ablation_fractions: Vec<f64>,
    pub ensemble_size: usize,
    pub noise_rate: f64,
    pub noise_mode: NoiseMode,
    pub level: f64,
    /// Worker threads; 0 picks rayon's default.
    pub jobs: usize,
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        ExperimentPlan {
            seeds: vec![0],
            k: 5,
            splits: 2,
            val_splits: 2,
            val_fraction: 0.2,
            fraction: 1.0,
            loss: LossKind::Nsce,
            loss_config: LossConfig::default(),
            class_weights: WeightMode::Fixed(ClassWeights::default()),
            train: TrainConfig::default(),
            frame_method: FrameMethod::Quality,
            gating: GatingPolicy::default(),
            ssim: SsimConfig::default(),
            discard_n: 20,
            subsample: SubsampleOrder::AfterGating,
            quality: QualityConfig::default(),
            fractions: vec![0.2, 0.25, 0.3, 0.4, 0.5, 0.75, 1.0],
            repeat_scale: 5.6,
            min_repeats: 4,
            ablation_fractions: vec![0.4, 0.75, 1.0],
            ensemble_size: 5,
            noise_rate: 0.0,
            noise_mode: NoiseMode::ExactCount,
            level: 0.95,
            jobs: 1,
        }
    }
}

fn check_fraction(name: &str, f: f64) -> Result<(), ExperimentError> {
    if f > 0.0 && f <= 1.0 {
        Ok(())
    } else {
        Err(ExperimentError::InvalidPlan(format!("{name} must be in (0, 1], got {f}")))
    }
}

impl ExperimentPlan {
    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::InvalidPlan(m));
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        if self.k < 2 {
            return bad(format!("k must be at least 2, got {}", self.k));
        }
        if self.splits == 0 || self.val_splits == 0 {
            return bad("splits and val_splits must be positive".into());
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!("val_fraction must be in [0, 1), got {}", self.val_fraction));
        }
        check_fraction("fraction", self.fraction)?;
        for &f in self.fractions.iter().chain(&self.ablation_fractions) {
            check_fraction("fractions", f)?;
        }
        if self.fractions.windows(2).any(|w| w[0] >= w[1]) {
            return bad("fractions must be strictly ascending".into());
        }
        if !(self.repeat_scale > 0.0) {
            return bad(format!("repeat_scale must be positive, got {}", self.repeat_scale));
        }
        if !(0.0..=0.5).contains(&self.noise_rate) {
            return bad(format!("noise_rate must be in [0, 0.5], got {}", self.noise_rate));
        }
        crate::metrics::t_critical(1, self.level)
            .map_err(|e| ExperimentError::InvalidPlan(e.to_string()))?;
        self.loss_config.validate()?;
        self.train.validate()?;
        self.quality.train.validate()?;
        self.gating.validate()?;
        if self.frame_method == FrameMethod::Ssim {
            self.ssim.validate()?;
        }
        Ok(())
    }

    /// Repeat count of one saturation fraction.
    pub fn repeats_for(&self, fraction: f64) -> usize {
        ((self.repeat_scale / fraction).round() as usize).max(self.min_repeats).max(1)
    }

    fn dominance_config(&self, weights: ClassWeights) -> TrainConfig {
        TrainConfig {
            loss: self.loss,
            loss_config: self.loss_config,
            class_weights: weights,
            ..self.train
        }
    }
}

// ---------------------------------------------------------------------------
// Runner

/// One cross-validation over a fixed study pool.
struct CvTask<'d> {
    run: String,
    /// Plan seed reported in the rows.
    seed: u64,
    /// Root of every seed derived for this task.
    base: u64,
    plan: ExperimentPlan,
    studies: Vec<&'d Study>,
    clean: &'d HashMap<String, Dominance>,
}

struct Job {
    task: usize,
    split: usize,
    val: usize,
    fold: usize,
}

struct JobOutput {
    rows: Vec<ViewRow>,
    frames: Vec<FrameRow>,
}

struct Runner {
    dims: (usize, usize),
    pool: rayon::ThreadPool,
    scorers: Mutex<HashMap<u64, Arc<QualityModel>>>,
    ssim: Mutex<HashMap<(String, String), Arc<Vec<usize>>>>,
}

fn dataset_dims(dataset: &Dataset) -> Result<(usize, usize), ExperimentError> {
    let mut dims = None;
    for v in dataset.studies.iter().flat_map(|s| s.views.iter()) {
        if let Some((w, h)) = v.dims() {
            match dims {
                None => dims = Some((h, w)),
                Some(d) if d != (h, w) => return Err(ExperimentError::MixedDims),
                _ => {}
            }
        }
    }
    dims.ok_or_else(|| ExperimentError::TooSmall("dataset has no frames".into()))
}

impl Runner {
    fn new(dataset: &Dataset, plan: &ExperimentPlan) -> Result<Self, ExperimentError> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(plan.jobs)
            .build()
            .map_err(|e| ExperimentError::Pool(e.to_string()))?;
        Ok(Runner {
            dims: dataset_dims(dataset)?,
            pool,
            scorers: Mutex::new(HashMap::new()),
            ssim: Mutex::new(HashMap::new()),
        })
    }

    /// Runs every task; rows come back ordered by task, then job key.
    fn run(&self, tasks: &[CvTask<'_>]) -> Result<(Vec<ViewRow>, Vec<FrameRow>), ExperimentError> {
        let mut folds = Vec::new();
        let mut jobs = Vec::new();
        for (t, task) in tasks.iter().enumerate() {
            let mut per_split = Vec::new();
            for split in 0..task.plan.splits {
                let fs = kfold_split(&task.studies, task.plan.k, derive_seed(task.base, &[SPLIT, split as u64]))?;
                for val in 0..task.plan.val_splits {
                    for fold in 0..task.plan.k {
                        jobs.push(Job { task: t, split, val, fold });
                    }
                }
                per_split.push(fs);
            }
            folds.push(per_split);
        }
        let outputs: Vec<Result<JobOutput, ExperimentError>> = self.pool.install(|| {
            jobs.par_iter()
                .map(|j| self.run_job(&tasks[j.task], &folds[j.task][j.split], j))
                .collect()
        });
        let (mut rows, mut frames) = (Vec::new(), Vec::new());
        for o in outputs {
            let o = o?;
            rows.extend(o.rows);
            frames.extend(o.frames);
        }
        Ok((rows, frames))
    }

    fn run_job(&self, task: &CvTask<'_>, folds: &FoldSplit, job: &Job) -> Result<JobOutput, ExperimentError> {
        let plan = &task.plan;
        let split_seed = folds.seed;
        let path = [job.val as u64, job.fold as u64];
        let (pool, test): (Vec<&Study>, Vec<&Study>) = task
            .studies
            .iter()
            .partition(|s| folds.fold_of(&s.study_id) != Some(job.fold));
        let (train, val) = stratified_holdout(&pool, plan.val_fraction, derive_seed(split_seed, &[VAL, path[0], path[1]]));
        if let Some(t) = test.iter().find(|t| train.iter().any(|s| s.study_id == t.study_id)) {
            return Err(ExperimentError::Leakage(t.study_id.clone()));
        }

        let scorer_model = if plan.frame_method == FrameMethod::Quality {
            Some(self.scorer(&train, plan, derive_seed(split_seed, &[SCORER, path[0], path[1]]))?)
        } else {
            None
        };
        let mut scorer = scorer_model.as_ref().map(|m| m.scorer());

        let mut samples = Vec::new();
        for study in &train {
            for view in study.rca_views() {
                for i in self.train_indices(study, view, plan, scorer.as_mut())? {
                    samples.push(TrainSample {
                        frame: &view.frames[i],
                        class: study.dominance,
                    });
                }
            }
        }
        if samples.is_empty() {
            return Err(ExperimentError::NoTrainingFrames(job.fold));
        }
        let mut counts = [0usize; 2];
        for s in &samples {
            counts[s.class.index()] += 1;
        }
        let cfg = plan.dominance_config(plan.class_weights.resolve(counts)?);
        let (h, w) = self.dims;
        let (params, _) = nnet::train(&samples, h, w, &cfg, derive_seed(split_seed, &[INIT, path[0], path[1]]))?;

        let mut engine = Engine::new(&params);
        let mut out = JobOutput {
            rows: Vec::new(),
            frames: Vec::new(),
        };
        for (part, studies) in [(Part::Test, &test), (Part::Val, &val)] {
            for study in studies.iter() {
                let truth = task.clean.get(&study.study_id).copied().unwrap_or(study.dominance);
                for view in study.rca_views() {
                    let idx = self.test_indices(study, view, plan, scorer.as_mut())?;
                    let mut logits = Vec::with_capacity(idx.len());
                    for &i in &idx {
                        let z = engine.logits(&view.frames[i])?;
                        if part == Part::Test {
                            out.frames.push(FrameRow {
                                run: task.run.clone(),
                                seed: task.seed,
                                split: job.split,
                                val_split: job.val,
                                fold: job.fold,
                                study_id: study.study_id.clone(),
                                view_id: view.view_id.clone(),
                                frame: i,
                                prob_right: losses::softmax(z)?.get(1),
                                truth,
                            });
                        }
                        logits.push(FrameLogits(z));
                    }
                    let vp = aggregate::view_predict(&logits)?;
                    out.rows.push(ViewRow {
                        run: task.run.clone(),
                        seed: task.seed,
                        split: job.split,
                        val_split: job.val,
                        fold: job.fold,
                        part,
                        study_id: study.study_id.clone(),
                        view_id: view.view_id.clone(),
                        n_frames: vp.n_frames_used,
                        sum_left: vp.summed_logits[0],
                        sum_right: vp.summed_logits[1],
                        predicted: vp.predicted,
                        truth,
                        observed: study.dominance,
                    });
                }
            }
        }
        Ok(out)
    }

    /// Quality scorer for a training pool, shared between runs that use
    /// the same studies and seed (the scorer never sees dominance labels).
    fn scorer(&self, train: &[&Study], plan: &ExperimentPlan, seed: u64) -> Result<Arc<QualityModel>, ExperimentError> {
        let ids: Vec<&str> = train.iter().map(|s| s.study_id.as_str()).collect();
        let key = derive_seed(seed, &[fnv1a(ids.join("\n").as_bytes())]);
        if let Some(m) = self.scorers.lock().expect("scorer cache poisoned").get(&key) {
            return Ok(m.clone());
        }
        let views: Vec<&CineView> = train.iter().flat_map(|s| s.views.iter()).collect();
        let model = Arc::new(frameselect::train_quality_scorer(&views, &plan.quality, seed)?);
        self.scorers
            .lock()
            .expect("scorer cache poisoned")
            .entry(key)
            .or_insert(model.clone());
        Ok(model)
    }

    fn ssim_indices(&self, study: &Study, view: &CineView, cfg: &SsimConfig) -> Result<Arc<Vec<usize>>, ExperimentError> {
        let key = (study.study_id.clone(), view.view_id.clone());
        if let Some(v) = self.ssim.lock().expect("ssim cache poisoned").get(&key) {
            return Ok(v.clone());
        }
        let idx = Arc::new(ssim_select(view, cfg)?);
        self.ssim.lock().expect("ssim cache poisoned").insert(key, idx.clone());
        Ok(idx)
    }

    fn method_indices(
        &self,
        study: &Study,
        view: &CineView,
        plan: &ExperimentPlan,
    ) -> Result<Vec<usize>, ExperimentError> {
        Ok(match plan.frame_method {
            FrameMethod::Ssim => self.ssim_indices(study, view, &plan.ssim)?.to_vec(),
            FrameMethod::Discard20 => discard_first(view.len(), plan.discard_n),
            FrameMethod::All | FrameMethod::Quality => all_frames(view.len()),
        })
    }

    fn train_indices(
        &self,
        study: &Study,
        view: &CineView,
        plan: &ExperimentPlan,
        scorer: Option<&mut QualityScorer>,
    ) -> Result<Vec<usize>, ExperimentError> {
        let label = study.dominance;
        match (plan.frame_method, scorer) {
            (FrameMethod::Quality, Some(scorer)) => {
                let scores = scorer.score_view(view)?;
                Ok(match plan.subsample {
                    SubsampleOrder::AfterGating => {
                        aggregate::subsample_majority(&gate_train(label, &scores, &plan.gating), label)
                    }
                    SubsampleOrder::BeforeGating => {
                        let t = plan.gating.train_threshold(label);
                        aggregate::subsample_majority(&all_frames(view.len()), label)
                            .into_iter()
                            .filter(|&i| scores[i] >= t)
                            .collect()
                    }
                })
            }
            _ => Ok(aggregate::subsample_majority(&self.method_indices(study, view, plan)?, label)),
        }
    }

    fn test_indices(
        &self,
        study: &Study,
        view: &CineView,
        plan: &ExperimentPlan,
        scorer: Option<&mut QualityScorer>,
    ) -> Result<Vec<usize>, ExperimentError> {
        match (plan.frame_method, scorer) {
            (FrameMethod::Quality, Some(scorer)) => Ok(gate_test(&scorer.score_view(view)?, &plan.gating)),
            _ => self.method_indices(study, view, plan),
        }
    }
}

/// Hidden tags: occlusions from the generator truth, flips from the noise
/// log of the first seed.
fn tags(dataset: &Dataset, truth: Option<&SynthTruth>, flips: Option<&FlipLog>) -> Vec<TagRow> {
    if truth.is_none() && flips.is_none_or(|f| f.is_empty()) {
        return Vec::new();
    }
    dataset
        .studies
        .iter()
        .map(|s| TagRow {
            study_id: s.study_id.clone(),
            occluded: truth.and_then(|t| t.get(&s.study_id)).is_some_and(|t| t.occluded),
            flipped: flips.is_some_and(|f| f.contains(&s.study_id)),
        })
        .collect()
}

/// Per-seed observed datasets (noisy when the plan asks for it) plus the
/// clean labels used for evaluation.
struct Labels {
    clean: HashMap<String, Dominance>,
    observed: Vec<(u64, Dataset, FlipLog)>,
}

impl Labels {
    fn new(dataset: &Dataset, plan: &ExperimentPlan) -> Result<Self, ExperimentError> {
        let clean = dataset
            .studies
            .iter()
            .map(|s| (s.study_id.clone(), s.dominance))
            .collect();
        let mut observed = Vec::new();
        for &seed in &plan.seeds {
            if plan.noise_rate > 0.0 {
                let spec = LabelNoiseSpec {
                    flip_rate: plan.noise_rate,
                    mode: plan.noise_mode,
                    seed: derive_seed(seed, &[NOISE]),
                };
                let (ds, log) = inject_label_noise(dataset, &spec)?;
                observed.push((seed, ds, log));
            } else {
                observed.push((seed, dataset.clone(), FlipLog::default()));
            }
        }
        Ok(Labels { clean, observed })
    }

    fn first_flips(&self) -> Option<&FlipLog> {
        self.observed.first().map(|o| &o.2)
    }
}

fn all_studies(dataset: &Dataset) -> Vec<&Study> {
    dataset.studies.iter().collect()
}

fn check_size(studies: &[&Study], plan: &ExperimentPlan, fraction: f64) -> Result<(), ExperimentError> {
    let n = (fraction * studies.len() as f64).round() as usize;
    if n < plan.k {
        return Err(ExperimentError::TooSmall(format!(
            "fraction {fraction} of {} studies leaves {n}, fewer than k = {}",
            studies.len(),
            plan.k
        )));
    }
    Ok(())
}

fn fraction_label(f: f64) -> String {
    format!("{f:.2}")
}

fn subsample_for<'a>(studies: &[&'a Study], fraction: f64, base: u64) -> Vec<&'a Study> {
    if fraction >= 1.0 {
        studies.to_vec()
    } else {
        stratified_subsample(studies, fraction, derive_seed(base, &[SUBSAMPLE, fraction.to_bits()]))
    }
}

fn finish(
    kind: ExperimentKind,
    plan: &ExperimentPlan,
    runs: Vec<String>,
    (rows, frames): (Vec<ViewRow>, Vec<FrameRow>),
    tags: Vec<TagRow>,
) -> Experiment {
    Experiment {
        kind,
        level: plan.level,
        runs,
        rows,
        frames,
        tags,
    }
}

fn cv_tasks<'d>(
    labels: &'d Labels,
    plan: &ExperimentPlan,
    run: &str,
    fraction: f64,
    repeat: usize,
) -> Result<Vec<CvTask<'d>>, ExperimentError> {
    labels
        .observed
        .iter()
        .map(|(seed, ds, _)| {
            let base = if repeat == 0 {
                *seed
            } else {
                derive_seed(*seed, &[REPEAT, repeat as u64])
            };
            let all = all_studies(ds);
            check_size(&all, plan, fraction)?;
            Ok(CvTask {
                run: run.to_string(),
                seed: *seed,
                base,
                plan: plan.clone(),
                studies: subsample_for(&all, fraction, base),
                clean: &labels.clean,
            })
        })
        .collect()
}

/// k-fold cross-validation of the plan on `dataset` (subsampled to
/// `plan.fraction`), repeated for every seed, split and validation split.
pub fn run_crossval(
    dataset: &Dataset,
    truth: Option<&SynthTruth>,
    plan: &ExperimentPlan,
) -> Result<Experiment, ExperimentError> {
    plan.validate()?;
    let labels = Labels::new(dataset, plan)?;
    let runner = Runner::new(dataset, plan)?;
    let run = format!("fraction={}", fraction_label(plan.fraction));
    let tasks = cv_tasks(&labels, plan, &run, plan.fraction, 0)?;
    let out = runner.run(&tasks)?;
    Ok(finish(ExperimentKind::Crossval, plan, vec![run], out, tags(dataset, truth, labels.first_flips())))
}

/// Cross-validation on repeated stratified subsamples for every fraction.
/// Repeat 0 of fraction 1.0 is identical to [`run_crossval`].
pub fn run_saturation(
    dataset: &Dataset,
    truth: Option<&SynthTruth>,
    plan: &ExperimentPlan,
) -> Result<Experiment, ExperimentError> {
    plan.validate()?;
    let labels = Labels::new(dataset, plan)?;
    let runner = Runner::new(dataset, plan)?;
    let mut runs = Vec::new();
    let mut tasks = Vec::new();
    for &f in &plan.fractions {
        for r in 0..plan.repeats_for(f) {
            let run = format!("fraction={}/repeat={r}", fraction_label(f));
            tasks.extend(cv_tasks(&labels, plan, &run, f, r)?);
            runs.push(run);
        }
    }
    let out = runner.run(&tasks)?;
    Ok(finish(ExperimentKind::Saturation, plan, runs, out, tags(dataset, truth, labels.first_flips())))
}

/// CE, SCE and NSCE at every ablation fraction. Splits, initializations and
/// quality scorers are shared across losses so the comparison is paired.
pub fn run_loss_ablation(
    dataset: &Dataset,
    truth: Option<&SynthTruth>,
    plan: &ExperimentPlan,
) -> Result<Experiment, ExperimentError> {
    plan.validate()?;
    let labels = Labels::new(dataset, plan)?;
    let runner = Runner::new(dataset, plan)?;
    let mut runs = Vec::new();
    let mut tasks = Vec::new();
    for &f in &plan.ablation_fractions {
        for loss in [LossKind::Ce, LossKind::Sce, LossKind::Nsce] {
            let run = format!("loss={}/fraction={}", loss.as_str(), fraction_label(f));
            let p = ExperimentPlan { loss, ..plan.clone() };
            tasks.extend(cv_tasks(&labels, &p, &run, f, 0)?);
            runs.push(run);
        }
    }
    let out = runner.run(&tasks)?;
    Ok(finish(ExperimentKind::AblateLoss, plan, runs, out, tags(dataset, truth, labels.first_flips())))
}

/// Cross-validation once per frame-selection method with shared splits.
pub fn run_frame_ablation(
    dataset: &Dataset,
    truth: Option<&SynthTruth>,
    plan: &ExperimentPlan,
) -> Result<Experiment, ExperimentError> {
    plan.validate()?;
    let labels = Labels::new(dataset, plan)?;
    let runner = Runner::new(dataset, plan)?;
    let mut runs = Vec::new();
    let mut tasks = Vec::new();
    for method in FrameMethod::ALL {
        let run = format!("method={}", method.as_str());
        let p = ExperimentPlan {
            frame_method: method,
            ..plan.clone()
        };
        p.validate()?;
        tasks.extend(cv_tasks(&labels, &p, &run, plan.fraction, 0)?);
        runs.push(run);
    }
    let out = runner.run(&tasks)?;
    Ok(finish(ExperimentKind::AblateFrames, plan, runs, out, tags(dataset, truth, labels.first_flips())))
}

/// Trains `ensemble_size` members, each a single k-fold split with its own
/// seed, and flags studies every member mispredicts. Only the first plan
/// seed is used.
pub fn mine_hard_cases(
    dataset: &Dataset,
    truth: Option<&SynthTruth>,
    plan: &ExperimentPlan,
) -> Result<(Experiment, HardCaseReport), ExperimentError> {
    if plan.ensemble_size < 2 {
        return Err(ExperimentError::EnsembleTooSmall(plan.ensemble_size));
    }
    plan.validate()?;
    let plan = ExperimentPlan {
        seeds: vec![plan.seeds[0]],
        splits: 1,
        val_splits: 1,
        ..plan.clone()
    };
    let labels = Labels::new(dataset, &plan)?;
    let runner = Runner::new(dataset, &plan)?;
    let (seed, observed, flips) = &labels.observed[0];
    let all = all_studies(observed);
    check_size(&all, &plan, plan.fraction)?;
    let mut runs = Vec::new();
    let mut tasks = Vec::new();
    for m in 0..plan.ensemble_size {
        let run = format!("member={m}");
        let base = derive_seed(*seed, &[MEMBER, m as u64]);
        tasks.push(CvTask {
            run: run.clone(),
            seed: *seed,
            base,
            plan: plan.clone(),
            studies: subsample_for(&all, plan.fraction, *seed),
            clean: &labels.clean,
        });
        runs.push(run);
    }
    let out = runner.run(&tasks)?;
    let exp = finish(ExperimentKind::MineHard, &plan, runs, out, tags(dataset, truth, Some(flips)));
    let report = report::hard_cases(&exp)?;
    Ok((exp, report))
}

/// Cross-validation with and without the given studies, sharing seeds.
pub fn exclude_and_rerun(
    dataset: &Dataset,
    truth: Option<&SynthTruth>,
    hard_ids: &[String],
    plan: &ExperimentPlan,
) -> Result<Experiment, ExperimentError> {
    plan.validate()?;
    let excluded: BTreeSet<&str> = hard_ids.iter().map(String::as_str).collect();
    for id in &excluded {
        if dataset.study(id).is_none() {
            return Err(ExperimentError::UnknownStudy(id.to_string()));
        }
    }
    let labels = Labels::new(dataset, plan)?;
    let runner = Runner::new(dataset, plan)?;
    let mut tasks = Vec::new();
    for (set, drop) in [("with", false), ("without", true)] {
        let run = format!("set={set}");
        let mut t = cv_tasks(&labels, plan, &run, plan.fraction, 0)?;
        if drop {
            for task in &mut t {
                task.studies.retain(|s| !excluded.contains(s.study_id.as_str()));
                for d in Dominance::ALL {
                    if !task.studies.iter().any(|s| s.dominance == d) {
                        return Err(ExperimentError::EmptyClass(d));
                    }
                }
                check_size(&task.studies, plan, 1.0)?;
            }
        }
        tasks.extend(t);
    }
    let runs = vec!["set=with".to_string(), "set=without".to_string()];
    let out = runner.run(&tasks)?;
    Ok(finish(ExperimentKind::ExcludeRerun, plan, runs, out, tags(dataset, truth, labels.first_flips())))
}

/// Runs the experiment of the given kind. Exclusion reruns without explicit
/// ids mine the hard cases first with the same plan.
pub fn run_kind(
    kind: ExperimentKind,
    dataset: &Dataset,
    truth: Option<&SynthTruth>,
    plan: &ExperimentPlan,
    hard_ids: Option<&[String]>,
) -> Result<Experiment, ExperimentError> {
    match kind {
        ExperimentKind::Crossval => run_crossval(dataset, truth, plan),
        ExperimentKind::Saturation => run_saturation(dataset, truth, plan),
        ExperimentKind::AblateLoss => run_loss_ablation(dataset, truth, plan),
        ExperimentKind::AblateFrames => run_frame_ablation(dataset, truth, plan),
        ExperimentKind::MineHard => mine_hard_cases(dataset, truth, plan).map(|(e, _)| e),
        ExperimentKind::ExcludeRerun => match hard_ids {
            Some(ids) => exclude_and_rerun(dataset, truth, ids, plan),
            None => {
                let (_, hc) = mine_hard_cases(dataset, truth, plan)?;
                exclude_and_rerun(dataset, truth, &hc.hard_study_ids, plan)
            }
        },
    }
}

/// Models trained on the whole dataset with the plan's settings.
#[derive(Debug, Clone)]
pub struct TrainedModels {
    pub dominance: ModelParams,
    pub quality: Option<QualityModel>,
    pub class_weights: ClassWeights,
    pub epoch_loss: Vec<f64>,
}

/// Fits the quality scorer (when gating is on) and the dominance model on
/// every study, using the first plan seed.
pub fn train_full(dataset: &Dataset, plan: &ExperimentPlan) -> Result<TrainedModels, ExperimentError> {
    plan.validate()?;
    let runner = Runner::new(dataset, plan)?;
    let seed = plan.seeds[0];
    let studies = all_studies(dataset);
    let quality = if plan.frame_method == FrameMethod::Quality {
        Some(runner.scorer(&studies, plan, derive_seed(seed, &[SCORER]))?)
    } else {
        None
    };
    let mut scorer = quality.as_ref().map(|m| m.scorer());
    let mut samples = Vec::new();
    for study in &studies {
        for view in study.rca_views() {
            for i in runner.train_indices(study, view, plan, scorer.as_mut())? {
                samples.push(TrainSample {
                    frame: &view.frames[i],
                    class: study.dominance,
                });
            }
        }
    }
    if samples.is_empty() {
        return Err(ExperimentError::NoTrainingFrames(0));
    }
    let mut counts = [0usize; 2];
    for s in &samples {
        counts[s.class.index()] += 1;
    }
    let class_weights = plan.class_weights.resolve(counts)?;
    let (h, w) = runner.dims;
    let (dominance, log) = nnet::train(&samples, h, w, &plan.dominance_config(class_weights), derive_seed(seed, &[INIT]))?;
    Ok(TrainedModels {
        dominance,
        quality: quality.map(|q| (*q).clone()),
        class_weights,
        epoch_loss: log.epoch_loss,
    })
}
