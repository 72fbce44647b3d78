//! Experiment records, their CSV/JSON persistence, and every table derived
//! from them. Reports are always recomputed from the stored rows so a
//! directory written by a run and one regenerated from disk match exactly.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregate::{self, AggregateError, ViewPrediction};
use crate::dataio::{Artery, Dominance};
use crate::metrics::{ci_margin, IntervalEstimate, MetricsError, MetricsReport};

pub const PREDICTIONS_FILE: &str = "predictions.csv";
pub const FRAMES_FILE: &str = "frames.csv";
pub const TAGS_FILE: &str = "tags.csv";
pub const EXPERIMENT_FILE: &str = "experiment.json";
pub const REPORT_CSV: &str = "report.csv";
pub const FOLDS_CSV: &str = "folds.csv";
pub const REPORT_MD: &str = "report.md";
pub const SATURATION_SVG: &str = "saturation.svg";
pub const HARDCASES_FILE: &str = "hardcases.json";

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error in {path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
    #[error("json error in {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("malformed records: {0}")]
    Malformed(String),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Aggregate(#[from] AggregateError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Crossval,
    Saturation,
    AblateLoss,
    AblateFrames,
    MineHard,
    ExcludeRerun,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 6] = [
        ExperimentKind::Crossval,
        ExperimentKind::Saturation,
        ExperimentKind::AblateLoss,
        ExperimentKind::AblateFrames,
        ExperimentKind::MineHard,
        ExperimentKind::ExcludeRerun,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentKind::Crossval => "crossval",
            ExperimentKind::Saturation => "saturation",
            ExperimentKind::AblateLoss => "ablate-loss",
            ExperimentKind::AblateFrames => "ablate-frames",
            ExperimentKind::MineHard => "mine-hard",
            ExperimentKind::ExcludeRerun => "exclude-rerun",
        }
    }
}

impl std::str::FromStr for ExperimentKind {
    type Err = ReportError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| ReportError::Malformed(format!("unknown experiment kind {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Part {
    Test,
    Val,
}

/// One evaluated view of one trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewRow {
    pub run: String,
    pub seed: u64,
    pub split: usize,
    pub val_split: usize,
    pub fold: usize,
    pub part: Part,
    pub study_id: String,
    pub view_id: String,
    pub n_frames: usize,
    pub sum_left: f64,
    pub sum_right: f64,
    pub predicted: Dominance,
    /// Clean label used for evaluation.
    pub truth: Dominance,
    /// Label the model was trained against (differs from `truth` under
    /// injected noise).
    pub observed: Dominance,
}

/// Right-class probability of one selected test frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRow {
    pub run: String,
    pub seed: u64,
    pub split: usize,
    pub val_split: usize,
    pub fold: usize,
    pub study_id: String,
    pub view_id: String,
    pub frame: usize,
    pub prob_right: f64,
    pub truth: Dominance,
}

/// Hidden synthetic tags for cross-tabulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TagRow {
    pub study_id: String,
    pub occluded: bool,
    pub flipped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ExperimentMeta {
    kind: ExperimentKind,
    level: f64,
    runs: Vec<String>,
}

/// Everything an experiment produced, in deterministic order.
#[derive(Debug, Clone, PartialEq)]
pub struct Experiment {
    pub kind: ExperimentKind,
    pub level: f64,
    /// Run labels in execution order, e.g. `loss=ce/fraction=0.4`.
    pub runs: Vec<String>,
    pub rows: Vec<ViewRow>,
    pub frames: Vec<FrameRow>,
    pub tags: Vec<TagRow>,
}

/// Parses `a=1/b=x` into its key/value pairs.
pub fn run_params(run: &str) -> BTreeMap<String, String> {
    run.split('/')
        .filter_map(|kv| kv.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

/// Evaluation unit: one trained model.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct UnitKey {
    pub run: String,
    pub seed: u64,
    pub split: usize,
    pub val_split: usize,
    pub fold: usize,
}

impl UnitKey {
    fn of_view(r: &ViewRow) -> Self {
        UnitKey {
            run: r.run.clone(),
            seed: r.seed,
            split: r.split,
            val_split: r.val_split,
            fold: r.fold,
        }
    }

    fn of_frame(r: &FrameRow) -> Self {
        UnitKey {
            run: r.run.clone(),
            seed: r.seed,
            split: r.split,
            val_split: r.val_split,
            fold: r.fold,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub key: UnitKey,
    pub view: MetricsReport,
    /// Study-level metrics from logit sums over each study's RCA views.
    pub study: MetricsReport,
}

/// View- and study-level metrics of every held-out fold, in key order.
pub fn fold_metrics(exp: &Experiment) -> Result<Vec<FoldMetrics>, ReportError> {
    let mut views: BTreeMap<UnitKey, Vec<&ViewRow>> = BTreeMap::new();
    for r in exp.rows.iter().filter(|r| r.part == Part::Test) {
        views.entry(UnitKey::of_view(r)).or_default().push(r);
    }
    let mut frames: BTreeMap<UnitKey, (Vec<f64>, Vec<Dominance>)> = BTreeMap::new();
    for f in &exp.frames {
        let e = frames.entry(UnitKey::of_frame(f)).or_default();
        e.0.push(f.prob_right);
        e.1.push(f.truth);
    }
    let mut out = Vec::with_capacity(views.len());
    for (key, rows) in views {
        let preds: Vec<Dominance> = rows.iter().map(|r| r.predicted).collect();
        let truths: Vec<Dominance> = rows.iter().map(|r| r.truth).collect();
        let (scores, ftruth) = frames.remove(&key).unwrap_or_default();
        let view = MetricsReport::compute(&preds, &truths, &scores, &ftruth)?;
        let studies = study_predictions(&rows)?;
        let sp: Vec<Dominance> = studies.values().map(|s| s.0).collect();
        let st: Vec<Dominance> = studies.values().map(|s| s.1).collect();
        let study = MetricsReport::compute(&sp, &st, &[], &[])?;
        out.push(FoldMetrics { key, view, study });
    }
    Ok(out)
}

/// (predicted, truth, observed) per study from its view rows.
fn study_predictions(
    rows: &[&ViewRow],
) -> Result<BTreeMap<String, (Dominance, Dominance, Dominance)>, ReportError> {
    let mut grouped: BTreeMap<&str, Vec<&ViewRow>> = BTreeMap::new();
    for r in rows {
        grouped.entry(&r.study_id).or_default().push(r);
    }
    let mut out = BTreeMap::new();
    for (id, vs) in grouped {
        let preds: Vec<(Artery, ViewPrediction)> = vs
            .iter()
            .map(|r| {
                let summed_logits = [r.sum_left, r.sum_right];
                (
                    Artery::Rca,
                    ViewPrediction {
                        summed_logits,
                        predicted: aggregate::decide(summed_logits),
                        n_frames_used: r.n_frames,
                    },
                )
            })
            .collect();
        let p = aggregate::study_predict(&preds)?;
        out.insert(id.to_string(), (p.predicted, vs[0].truth, vs[0].observed));
    }
    Ok(out)
}

/// Mean and margins; with fewer than two samples the margins are NaN.
pub fn interval(samples: &[f64], level: f64) -> Result<IntervalEstimate, ReportError> {
    if samples.len() >= 2 {
        return Ok(ci_margin(samples, level)?);
    }
    let mean = samples.first().copied().unwrap_or(f64::NAN);
    Ok(IntervalEstimate {
        mean,
        std: f64::NAN,
        spread_margin: f64::NAN,
        mean_margin: f64::NAN,
        n: samples.len(),
        level,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run: String,
    pub units: usize,
    /// View-level metric name to estimate; metrics with no defined value in
    /// any unit are omitted.
    pub view: BTreeMap<String, IntervalEstimate>,
    pub study_accuracy: IntervalEstimate,
    pub study_recall_macro: IntervalEstimate,
}

fn summarize(run: &str, units: &[&FoldMetrics], level: f64) -> Result<RunSummary, ReportError> {
    let mut view = BTreeMap::new();
    for field in MetricsReport::FIELDS {
        let vals: Vec<f64> = units.iter().filter_map(|u| u.view.get(field)).collect();
        if !vals.is_empty() {
            view.insert(field.to_string(), interval(&vals, level)?);
        }
    }
    let acc: Vec<f64> = units.iter().map(|u| u.study.accuracy).collect();
    let rec: Vec<f64> = units.iter().map(|u| u.study.recall_macro).collect();
    Ok(RunSummary {
        run: run.to_string(),
        units: units.len(),
        view,
        study_accuracy: interval(&acc, level)?,
        study_recall_macro: interval(&rec, level)?,
    })
}

/// Per-run summaries in the experiment's run order.
pub fn run_summaries(exp: &Experiment, folds: &[FoldMetrics]) -> Result<Vec<RunSummary>, ReportError> {
    exp.runs
        .iter()
        .map(|run| {
            let units: Vec<&FoldMetrics> = folds.iter().filter(|f| &f.key.run == run).collect();
            summarize(run, &units, exp.level)
        })
        .collect()
}

/// Summaries pooled over every run sharing one parameter value, in order
/// of first appearance.
pub fn group_summaries(
    exp: &Experiment,
    folds: &[FoldMetrics],
    param: &str,
) -> Result<Vec<(String, usize, RunSummary)>, ReportError> {
    let mut order: Vec<String> = Vec::new();
    let mut runs_per: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for run in &exp.runs {
        let v = run_params(run).get(param).cloned().unwrap_or_default();
        if !order.contains(&v) {
            order.push(v.clone());
        }
        runs_per.entry(v).or_default().insert(run.clone());
    }
    order
        .into_iter()
        .map(|v| {
            let runs = &runs_per[&v];
            let units: Vec<&FoldMetrics> = folds.iter().filter(|f| runs.contains(&f.key.run)).collect();
            Ok((v.clone(), runs.len(), summarize(&v, &units, exp.level)?))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaturationPoint {
    pub fraction: f64,
    pub repeats: usize,
    pub recall_macro: IntervalEstimate,
}

/// One point per fraction, pooling the folds of every repeat.
pub fn saturation_table(exp: &Experiment, folds: &[FoldMetrics]) -> Result<Vec<SaturationPoint>, ReportError> {
    group_summaries(exp, folds, "fraction")?
        .into_iter()
        .map(|(v, repeats, s)| {
            let fraction = v
                .parse()
                .map_err(|_| ReportError::Malformed(format!("fraction value {v:?}")))?;
            let recall_macro = *s
                .view
                .get("recall_macro")
                .ok_or_else(|| ReportError::Malformed("no recall_macro".into()))?;
            Ok(SaturationPoint {
                fraction,
                repeats,
                recall_macro,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyVotes {
    pub study_id: String,
    pub observed: Dominance,
    pub truth: Dominance,
    pub member_predictions: Vec<Dominance>,
    pub occluded: bool,
    pub flipped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TagCrossTab {
    pub occluded_total: usize,
    pub occluded_flagged: usize,
    pub flipped_total: usize,
    pub flipped_flagged: usize,
    /// Flagged studies carrying neither tag.
    pub untagged_flagged: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardCaseReport {
    pub ensemble_size: usize,
    pub hard_study_ids: Vec<String>,
    pub studies: Vec<StudyVotes>,
    /// Present when the experiment carries hidden tags.
    pub crosstab: Option<TagCrossTab>,
}

impl HardCaseReport {
    pub fn occluded_flag_rate(&self) -> Option<f64> {
        let c = self.crosstab.as_ref()?;
        (c.occluded_total > 0).then(|| c.occluded_flagged as f64 / c.occluded_total as f64)
    }
}

/// Flags studies that every ensemble member (one run per member) predicted
/// differently from the label it was trained on.
pub fn hard_cases(exp: &Experiment) -> Result<HardCaseReport, ReportError> {
    let mut votes: BTreeMap<String, StudyVotes> = BTreeMap::new();
    let tags: BTreeMap<&str, &TagRow> = exp.tags.iter().map(|t| (t.study_id.as_str(), t)).collect();
    for run in &exp.runs {
        let rows: Vec<&ViewRow> = exp
            .rows
            .iter()
            .filter(|r| &r.run == run && r.part == Part::Test)
            .collect();
        let mut by_unit: BTreeMap<UnitKey, Vec<&ViewRow>> = BTreeMap::new();
        for r in rows {
            by_unit.entry(UnitKey::of_view(r)).or_default().push(r);
        }
        let mut seen = BTreeSet::new();
        for unit_rows in by_unit.values() {
            for (id, (pred, truth, observed)) in study_predictions(unit_rows)? {
                if !seen.insert(id.clone()) {
                    return Err(ReportError::Malformed(format!(
                        "study {id} tested more than once in member {run}"
                    )));
                }
                let tag = tags.get(id.as_str());
                votes
                    .entry(id.clone())
                    .or_insert_with(|| StudyVotes {
                        study_id: id,
                        observed,
                        truth,
                        member_predictions: Vec::new(),
                        occluded: tag.is_some_and(|t| t.occluded),
                        flipped: tag.is_some_and(|t| t.flipped),
                    })
                    .member_predictions
                    .push(pred);
            }
        }
    }
    let size = exp.runs.len();
    let hard: Vec<String> = votes
        .values()
        .filter(|v| v.member_predictions.len() == size && v.member_predictions.iter().all(|&p| p != v.observed))
        .map(|v| v.study_id.clone())
        .collect();
    let crosstab = (!exp.tags.is_empty()).then(|| {
        let flagged: BTreeSet<&str> = hard.iter().map(String::as_str).collect();
        let mut c = TagCrossTab {
            occluded_total: 0,
            occluded_flagged: 0,
            flipped_total: 0,
            flipped_flagged: 0,
            untagged_flagged: 0,
        };
        for t in &exp.tags {
            let f = flagged.contains(t.study_id.as_str());
            c.occluded_total += t.occluded as usize;
            c.occluded_flagged += (t.occluded && f) as usize;
            c.flipped_total += t.flipped as usize;
            c.flipped_flagged += (t.flipped && f) as usize;
            c.untagged_flagged += (!t.occluded && !t.flipped && f) as usize;
        }
        c
    });
    Ok(HardCaseReport {
        ensemble_size: size,
        hard_study_ids: hard,
        studies: votes.into_values().collect(),
        crosstab,
    })
}

// ---------------------------------------------------------------------------
// Persistence

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ReportError + '_ {
    move |source| ReportError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> ReportError + '_ {
    move |source| ReportError::Csv {
        path: path.display().to_string(),
        source,
    }
}

fn json_err(path: &Path) -> impl FnOnce(serde_json::Error) -> ReportError + '_ {
    move |source| ReportError::Json {
        path: path.display().to_string(),
        source,
    }
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), ReportError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    for r in rows {
        w.serialize(r).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, ReportError> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    r.deserialize().collect::<Result<Vec<T>, _>>().map_err(csv_err(path))
}

fn write_text(path: &Path, text: &str) -> Result<(), ReportError> {
    fs::write(path, text).map_err(io_err(path))
}

/// Writes the raw records and every derived report into `dir`.
pub fn write_experiment(exp: &Experiment, dir: impl AsRef<Path>) -> Result<(), ReportError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_csv(&dir.join(PREDICTIONS_FILE), &exp.rows)?;
    write_csv(&dir.join(FRAMES_FILE), &exp.frames)?;
    write_csv(&dir.join(TAGS_FILE), &exp.tags)?;
    let meta = ExperimentMeta {
        kind: exp.kind,
        level: exp.level,
        runs: exp.runs.clone(),
    };
    let path = dir.join(EXPERIMENT_FILE);
    let text = serde_json::to_string_pretty(&meta).map_err(json_err(&path))?;
    write_text(&path, &(text + "\n"))?;
    write_reports(exp, dir)
}

/// Loads the raw records written by [`write_experiment`].
pub fn read_experiment(dir: impl AsRef<Path>) -> Result<Experiment, ReportError> {
    let dir = dir.as_ref();
    let path = dir.join(EXPERIMENT_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let meta: ExperimentMeta = serde_json::from_str(&text).map_err(json_err(&path))?;
    Ok(Experiment {
        kind: meta.kind,
        level: meta.level,
        runs: meta.runs,
        rows: read_csv(&dir.join(PREDICTIONS_FILE))?,
        frames: read_csv(&dir.join(FRAMES_FILE))?,
        tags: read_csv(&dir.join(TAGS_FILE))?,
    })
}

#[derive(Debug, Serialize)]
struct SummaryRecord<'a> {
    run: &'a str,
    scope: &'a str,
    metric: &'a str,
    n: usize,
    mean: f64,
    std: f64,
    spread_margin: f64,
    mean_margin: f64,
}

/// Regenerates report.csv, folds.csv, report.md and the kind-specific
/// artifacts (saturation.svg, hardcases.json) from the records alone.
pub fn write_reports(exp: &Experiment, dir: impl AsRef<Path>) -> Result<(), ReportError> {
    let dir = dir.as_ref();
    let folds = fold_metrics(exp)?;
    let summaries = run_summaries(exp, &folds)?;

    let mut records = Vec::new();
    for s in &summaries {
        for (metric, e) in &s.view {
            records.push(summary_record(&s.run, "view", metric, e));
        }
        records.push(summary_record(&s.run, "study", "accuracy", &s.study_accuracy));
        records.push(summary_record(&s.run, "study", "recall_macro", &s.study_recall_macro));
    }
    write_csv(&dir.join(REPORT_CSV), &records)?;

    // optional metrics leave an empty cell
    let path = dir.join(FOLDS_CSV);
    let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
    let mut header = vec!["run", "seed", "split", "val_split", "fold", "scope", "degenerate"];
    header.extend(MetricsReport::FIELDS);
    w.write_record(&header).map_err(csv_err(&path))?;
    for f in &folds {
        for (scope, m) in [("view", &f.view), ("study", &f.study)] {
            let mut rec = vec![
                f.key.run.clone(),
                f.key.seed.to_string(),
                f.key.split.to_string(),
                f.key.val_split.to_string(),
                f.key.fold.to_string(),
                scope.to_string(),
                m.degenerate.to_string(),
            ];
            rec.extend(
                MetricsReport::FIELDS
                    .iter()
                    .map(|k| m.get(k).map(|v| v.to_string()).unwrap_or_default()),
            );
            w.write_record(&rec).map_err(csv_err(&path))?;
        }
    }
    w.flush().map_err(io_err(&path))?;

    let mut md = render_markdown(exp, &folds, &summaries)?;
    if exp.kind == ExperimentKind::Saturation {
        let table = saturation_table(exp, &folds)?;
        write_text(&dir.join(SATURATION_SVG), &saturation_svg(&table))?;
    }
    if exp.kind == ExperimentKind::MineHard {
        let report = hard_cases(exp)?;
        let path = dir.join(HARDCASES_FILE);
        let text = serde_json::to_string_pretty(&report).map_err(json_err(&path))?;
        write_text(&path, &(text + "\n"))?;
        md.push_str(&render_hard_cases(&report));
    }
    write_text(&dir.join(REPORT_MD), &md)
}

fn summary_record<'a>(run: &'a str, scope: &'a str, metric: &'a str, e: &IntervalEstimate) -> SummaryRecord<'a> {
    SummaryRecord {
        run,
        scope,
        metric,
        n: e.n,
        mean: e.mean,
        std: e.std,
        spread_margin: e.spread_margin,
        mean_margin: e.mean_margin,
    }
}

// ---------------------------------------------------------------------------
// Rendering

fn pct(e: Option<&IntervalEstimate>, spread: bool) -> String {
    match e {
        Some(e) => {
            let m = if spread { e.spread_margin } else { e.mean_margin };
            if m.is_finite() {
                format!("{:.1} ± {:.1}", 100.0 * e.mean, 100.0 * m)
            } else {
                format!("{:.1}", 100.0 * e.mean)
            }
        }
        None => "n/a".to_string(),
    }
}

fn render_markdown(
    exp: &Experiment,
    folds: &[FoldMetrics],
    summaries: &[RunSummary],
) -> Result<String, ReportError> {
    let mut md = String::new();
    let level = 100.0 * exp.level;
    let _ = writeln!(md, "# {} report\n", exp.kind.as_str());
    let _ = writeln!(
        md,
        "Values in percent. `±` is the t-margin at {level:.0}%: spread of individual models (t·σ) in the per-run tables, uncertainty of the mean (t·σ/√n) in the comparison tables.\n"
    );
    match exp.kind {
        ExperimentKind::Saturation => {
            let table = saturation_table(exp, folds)?;
            md.push_str("| Fraction | Repeats | Models | Macro recall (± mean margin) |\n|---|---|---|---|\n");
            for p in &table {
                let _ = writeln!(
                    md,
                    "| {:.2} | {} | {} | {} |",
                    p.fraction,
                    p.repeats,
                    p.recall_macro.n,
                    pct(Some(&p.recall_macro), false)
                );
            }
            md.push('\n');
        }
        ExperimentKind::AblateLoss => {
            let cells = summaries_by(summaries, "loss", "fraction");
            for (title, metric) in [("Frame-level ROC AUC", "roc_auc_frames"), ("View-level macro recall", "recall_macro")] {
                let _ = writeln!(md, "## {title}\n");
                md.push_str(&grid(&cells, metric));
            }
        }
        ExperimentKind::AblateFrames => {
            md.push_str("| Method | Macro recall | Accuracy | Macro F1 | ROC AUC |\n|---|---|---|---|---|\n");
            for s in summaries {
                let method = run_params(&s.run).get("method").cloned().unwrap_or_else(|| s.run.clone());
                let _ = writeln!(
                    md,
                    "| {method} | {} | {} | {} | {} |",
                    pct(s.view.get("recall_macro"), false),
                    pct(s.view.get("accuracy"), false),
                    pct(s.view.get("f1_macro"), false),
                    pct(s.view.get("roc_auc_frames"), false)
                );
            }
            md.push('\n');
        }
        ExperimentKind::ExcludeRerun => {
            md.push_str("| Set | Studies | View accuracy | View macro recall | Study accuracy |\n|---|---|---|---|---|\n");
            for s in summaries {
                let set = run_params(&s.run).get("set").cloned().unwrap_or_else(|| s.run.clone());
                let studies: BTreeSet<&str> = exp
                    .rows
                    .iter()
                    .filter(|r| r.run == s.run && r.part == Part::Test)
                    .map(|r| r.study_id.as_str())
                    .collect();
                let _ = writeln!(
                    md,
                    "| {set} | {} | {} | {} | {} |",
                    studies.len(),
                    pct(s.view.get("accuracy"), false),
                    pct(s.view.get("recall_macro"), false),
                    pct(Some(&s.study_accuracy), false)
                );
            }
            md.push('\n');
        }
        ExperimentKind::Crossval | ExperimentKind::MineHard => {}
    }
    for s in summaries {
        let _ = writeln!(md, "## Run `{}` ({} models)\n", s.run, s.units);
        md.push_str("| Class | Recall | Precision | F1 |\n|---|---|---|---|\n");
        for class in ["left", "right"] {
            let get = |m: &str| s.view.get(&format!("{m}_{class}"));
            let _ = writeln!(
                md,
                "| {class} | {} | {} | {} |",
                pct(get("recall"), true),
                pct(get("precision"), true),
                pct(get("f1"), true)
            );
        }
        md.push_str("\n| Macro recall | Macro F1 | Accuracy | MCC | ROC AUC | Study accuracy |\n|---|---|---|---|---|---|\n");
        let _ = writeln!(
            md,
            "| {} | {} | {} | {} | {} | {} |\n",
            pct(s.view.get("recall_macro"), true),
            pct(s.view.get("f1_macro"), true),
            pct(s.view.get("accuracy"), true),
            pct(s.view.get("mcc"), true),
            pct(s.view.get("roc_auc_frames"), true),
            pct(Some(&s.study_accuracy), true)
        );
    }
    Ok(md)
}

type Cells = (Vec<String>, Vec<String>, BTreeMap<(String, String), RunSummary>);

fn summaries_by(summaries: &[RunSummary], row: &str, col: &str) -> Cells {
    let (mut rows, mut cols, mut cells) = (Vec::new(), Vec::new(), BTreeMap::new());
    for s in summaries {
        let p = run_params(&s.run);
        let r = p.get(row).cloned().unwrap_or_default();
        let c = p.get(col).cloned().unwrap_or_default();
        if !rows.contains(&r) {
            rows.push(r.clone());
        }
        if !cols.contains(&c) {
            cols.push(c.clone());
        }
        cells.insert((r, c), s.clone());
    }
    (rows, cols, cells)
}

fn grid((rows, cols, cells): &Cells, metric: &str) -> String {
    let mut md = String::from("| |");
    for c in cols {
        let _ = write!(md, " {c} |");
    }
    md.push_str("\n|---|");
    md.push_str(&"---|".repeat(cols.len()));
    md.push('\n');
    for r in rows {
        let _ = write!(md, "| {r} |");
        for c in cols {
            let v = cells.get(&(r.clone(), c.clone())).and_then(|s| s.view.get(metric));
            let _ = write!(md, " {} |", pct(v, false));
        }
        md.push('\n');
    }
    md.push('\n');
    md
}

fn render_hard_cases(r: &HardCaseReport) -> String {
    let mut md = format!(
        "## Hard cases\n\n{} of {} studies mispredicted by all {} members.\n\n",
        r.hard_study_ids.len(),
        r.studies.len(),
        r.ensemble_size
    );
    if let Some(c) = &r.crosstab {
        md.push_str("| Tag | Tagged | Flagged |\n|---|---|---|\n");
        let _ = writeln!(md, "| occluded | {} | {} |", c.occluded_total, c.occluded_flagged);
        let _ = writeln!(md, "| flipped | {} | {} |", c.flipped_total, c.flipped_flagged);
        let _ = writeln!(md, "| neither | | {} |\n", c.untagged_flagged);
    }
    if !r.hard_study_ids.is_empty() {
        md.push_str("| Study | Label | Occluded | Flipped |\n|---|---|---|---|\n");
        for v in r.studies.iter().filter(|v| r.hard_study_ids.contains(&v.study_id)) {
            let _ = writeln!(md, "| {} | {} | {} | {} |", v.study_id, v.observed, v.occluded, v.flipped);
        }
        md.push('\n');
    }
    md
}

/// Line plot of mean macro recall against data fraction with a shaded band
/// of ± the mean margin.
pub fn saturation_svg(points: &[SaturationPoint]) -> String {
    const W: f64 = 480.0;
    const H: f64 = 320.0;
    const PAD: f64 = 48.0;
    let finite = |v: f64| if v.is_finite() { v } else { 0.0 };
    let lo_y = points
        .iter()
        .map(|p| p.recall_macro.mean - finite(p.recall_macro.mean_margin))
        .fold(1.0f64, f64::min)
        .clamp(0.0, 1.0);
    let lo_y = (lo_y * 10.0).floor() / 10.0;
    let hi_y = 1.0;
    let x = |f: f64| PAD + f * (W - 2.0 * PAD);
    let y = |v: f64| H - PAD - (v.clamp(lo_y, hi_y) - lo_y) / (hi_y - lo_y).max(1e-9) * (H - 2.0 * PAD);
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<line x1="{PAD}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/><line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{b}" stroke="black"/>"#,
        b = H - PAD,
        r = W - PAD
    );
    for t in 0..=4 {
        let f = t as f64 / 4.0;
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="middle">{:.0}%</text>"#,
            x(f),
            H - PAD + 16.0,
            100.0 * f
        );
        let v = lo_y + f * (hi_y - lo_y);
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="end">{:.2}</text>"#,
            PAD - 6.0,
            y(v) + 4.0,
            v
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" font-size="12" text-anchor="middle">training data fraction</text>"#,
        W / 2.0,
        H - 10.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="14" y="{:.1}" font-size="12" text-anchor="middle" transform="rotate(-90 14 {:.1})">mean macro recall</text>"#,
        H / 2.0,
        H / 2.0
    );
    if !points.is_empty() {
        let upper: Vec<String> = points
            .iter()
            .map(|p| format!("{:.2},{:.2}", x(p.fraction), y(p.recall_macro.mean + finite(p.recall_macro.mean_margin))))
            .collect();
        let lower: Vec<String> = points
            .iter()
            .rev()
            .map(|p| format!("{:.2},{:.2}", x(p.fraction), y(p.recall_macro.mean - finite(p.recall_macro.mean_margin))))
            .collect();
        let _ = writeln!(
            svg,
            r##"<polygon points="{} {}" fill="#4c78a8" fill-opacity="0.25" stroke="none"/>"##,
            upper.join(" "),
            lower.join(" ")
        );
        let line: Vec<String> = points
            .iter()
            .map(|p| format!("{:.2},{:.2}", x(p.fraction), y(p.recall_macro.mean)))
            .collect();
        let _ = writeln!(
            svg,
            r##"<polyline points="{}" fill="none" stroke="#4c78a8" stroke-width="2"/>"##,
            line.join(" ")
        );
        for p in points {
            let _ = writeln!(
                svg,
                r##"<circle cx="{:.2}" cy="{:.2}" r="3" fill="#4c78a8"/>"##,
                x(p.fraction),
                y(p.recall_macro.mean)
            );
        }
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;
    use Dominance::{Left as L, Right as R};

    fn row(run: &str, fold: usize, study: &str, view: &str, sums: [f64; 2], truth: Dominance) -> ViewRow {
        ViewRow {
            run: run.into(),
            seed: 0,
            split: 0,
            val_split: 0,
            fold,
            part: Part::Test,
            study_id: study.into(),
            view_id: view.into(),
            n_frames: 3,
            sum_left: sums[0],
            sum_right: sums[1],
            predicted: aggregate::decide(sums),
            truth,
            observed: truth,
        }
    }

    fn frame(run: &str, fold: usize, p: f64, truth: Dominance) -> FrameRow {
        FrameRow {
            run: run.into(),
            seed: 0,
            split: 0,
            val_split: 0,
            fold,
            study_id: "s".into(),
            view_id: "v".into(),
            frame: 0,
            prob_right: p,
            truth,
        }
    }

    fn sample() -> Experiment {
        let rows = vec![
            row("member=0", 0, "a", "rca0", [2.0, 1.0], L),
            row("member=0", 0, "b", "rca0", [0.0, 1.0], R),
            row("member=0", 1, "c", "rca0", [0.0, 1.0], L),
            row("member=0", 1, "c", "rca1", [0.5, 0.0], L),
            row("member=0", 1, "d", "rca0", [0.0, 3.0], R),
            row("member=1", 0, "c", "rca0", [0.0, 1.0], L),
            row("member=1", 0, "c", "rca1", [0.0, 0.2], L),
            row("member=1", 0, "a", "rca0", [3.0, 1.0], L),
            row("member=1", 1, "b", "rca0", [0.0, 1.0], R),
            row("member=1", 1, "d", "rca0", [1.0, 0.0], R),
        ];
        let frames = vec![
            frame("member=0", 0, 0.2, L),
            frame("member=0", 0, 0.9, R),
            frame("member=0", 1, 0.7, L),
            frame("member=0", 1, 0.8, R),
        ];
        Experiment {
            kind: ExperimentKind::MineHard,
            level: 0.95,
            runs: vec!["member=0".into(), "member=1".into()],
            rows,
            frames,
            tags: vec![
                TagRow { study_id: "c".into(), occluded: true, flipped: false },
                TagRow { study_id: "d".into(), occluded: true, flipped: false },
            ],
        }
    }

    #[test]
    fn run_params_parse_pairs() {
        let p = run_params("loss=ce/fraction=0.40");
        assert_eq!(p["loss"], "ce");
        assert_eq!(p["fraction"], "0.40");
        assert!(run_params("plain").is_empty());
    }

    #[test]
    fn fold_metrics_follow_rows() {
        let exp = sample();
        let folds = fold_metrics(&exp).unwrap();
        assert_eq!(folds.len(), 4);
        let f0 = &folds[0];
        assert_eq!((f0.key.run.as_str(), f0.key.fold), ("member=0", 0));
        assert_eq!(f0.view.accuracy, 1.0);
        assert_eq!(f0.view.roc_auc_frames, Some(1.0));
        // c: views sum to (0.5, 1.0) → right, truth left
        let f1 = &folds[1];
        assert_eq!(f1.view.accuracy, 2.0 / 3.0);
        assert_eq!(f1.study.accuracy, 0.5);
        assert_eq!(folds[2].view.roc_auc_frames, None);
    }

    #[test]
    fn hard_cases_require_every_member_wrong() {
        let report = hard_cases(&sample()).unwrap();
        // c is wrong in both members, d only in member 1
        assert_eq!(report.hard_study_ids, vec!["c".to_string()]);
        let c = report.crosstab.unwrap();
        assert_eq!((c.occluded_total, c.occluded_flagged, c.untagged_flagged), (2, 1, 0));
    }

    #[test]
    fn summaries_pool_over_parameter() {
        let exp = sample();
        let folds = fold_metrics(&exp).unwrap();
        let runs = run_summaries(&exp, &folds).unwrap();
        assert_eq!(runs.len(), 2);
        assert_eq!(runs[0].units, 2);
        let acc = runs[0].view["accuracy"];
        assert!((acc.mean - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        let pooled = group_summaries(&exp, &folds, "absent").unwrap();
        assert_eq!(pooled.len(), 1);
        assert_eq!(pooled[0].2.units, 4);
    }

    #[test]
    fn roundtrip_and_regeneration_are_identical() {
        let exp = sample();
        let dir = tempfile::tempdir().unwrap();
        write_experiment(&exp, dir.path()).unwrap();
        let back = read_experiment(dir.path()).unwrap();
        assert_eq!(back, exp);
        let md = fs::read(dir.path().join(REPORT_MD)).unwrap();
        let hc = fs::read(dir.path().join(HARDCASES_FILE)).unwrap();
        let again = tempfile::tempdir().unwrap();
        write_reports(&back, again.path()).unwrap();
        assert_eq!(fs::read(again.path().join(REPORT_MD)).unwrap(), md);
        assert_eq!(fs::read(again.path().join(HARDCASES_FILE)).unwrap(), hc);
    }

    #[test]
    fn svg_has_line_band_and_points() {
        let pts: Vec<SaturationPoint> = [(0.2, 0.8), (0.5, 0.85), (1.0, 0.9)]
            .iter()
            .map(|&(f, m)| SaturationPoint {
                fraction: f,
                repeats: 2,
                recall_macro: IntervalEstimate { mean: m, std: 0.1, spread_margin: 0.2, mean_margin: 0.05, n: 4, level: 0.95 },
            })
            .collect();
        let svg = saturation_svg(&pts);
        assert!(svg.starts_with("<svg"));
        assert_eq!(svg.matches("<circle").count(), 3);
        assert_eq!(svg.matches("<polyline").count(), 1);
        assert_eq!(svg.matches("<polygon").count(), 1);
    }
}
