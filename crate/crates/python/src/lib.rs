//! Python bindings: loss and metric primitives plus whole experiment runs
//! driven by a config file.

use std::collections::HashMap;

use domvote::config::RunConfig;
use domvote::dataio::Dominance;
use domvote::frameselect::{gate_test as gate, GatingPolicy};
use domvote::losses::{self, ClassWeights, LossConfig, LossKind, ProbVector};
use domvote::report::{self, ExperimentKind};
use domvote::{experiments, metrics};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn label(s: &str) -> PyResult<Dominance> {
    match s.to_ascii_lowercase().as_str() {
        "left" | "l" | "0" => Ok(Dominance::Left),
        "right" | "r" | "1" => Ok(Dominance::Right),
        other => Err(value_err(format!("unknown label {other:?}"))),
    }
}

/// Loss of one prediction. `p_left` is the predicted Left probability.
#[pyfunction]
#[pyo3(signature = (kind, p_left, target, w_left=0.72, w_right=0.28, alpha=None, beta=None))]
fn loss(kind: &str, p_left: f64, target: &str, w_left: f64, w_right: f64, alpha: Option<f64>, beta: Option<f64>) -> PyResult<f64> {
    let kind: LossKind = kind.parse().map_err(value_err)?;
    let p = ProbVector::new([p_left, 1.0 - p_left]).map_err(value_err)?;
    let w = ClassWeights::new(w_left, w_right).map_err(value_err)?;
    let mut cfg = LossConfig::default();
    cfg.alpha = alpha.unwrap_or(cfg.alpha);
    cfg.beta = beta.unwrap_or(cfg.beta);
    Ok(losses::loss_value(kind, &p, &cfg.target(label(target)?), &w, &cfg))
}

/// Rank-based ROC AUC; ties count half.
#[pyfunction]
fn roc_auc(scores: Vec<f64>, truths: Vec<bool>) -> PyResult<f64> {
    metrics::roc_auc(&scores, &truths).map_err(value_err)
}

#[pyfunction]
fn recall_macro(recall_left: f64, recall_right: f64) -> f64 {
    metrics::recall_macro(recall_left, recall_right)
}

/// Frame indices kept at test time for the given quality scores.
#[pyfunction]
fn gate_test(scores: Vec<f64>) -> Vec<usize> {
    gate(&scores, &GatingPolicy::default())
}

/// Runs one experiment and returns the per-run summaries as JSON.
/// Records and reports are written to `out` when given.
#[pyfunction]
#[pyo3(signature = (kind, config, overrides=None, out=None))]
fn run_experiment(
    py: Python<'_>,
    kind: &str,
    config: &str,
    overrides: Option<HashMap<String, String>>,
    out: Option<&str>,
) -> PyResult<String> {
    let kind: ExperimentKind = kind.parse().map_err(value_err)?;
    let mut cfg = RunConfig::load(config).map_err(value_err)?;
    let mut overrides: Vec<_> = overrides.unwrap_or_default().into_iter().collect();
    overrides.sort();
    for (k, v) in overrides {
        cfg.set(&k, &v).map_err(value_err)?;
    }
    let settings = cfg.settings().map_err(value_err)?;
    let out = out.map(str::to_owned);
    py.detach(move || {
        let (ds, truth) = settings.load_data().map_err(value_err)?;
        let exp = experiments::run_kind(kind, &ds, truth.as_ref(), &settings.plan, None).map_err(value_err)?;
        if let Some(dir) = out {
            report::write_experiment(&exp, &dir).map_err(value_err)?;
        }
        let folds = report::fold_metrics(&exp).map_err(value_err)?;
        let sums = report::run_summaries(&exp, &folds).map_err(value_err)?;
        serde_json::to_string(&sums).map_err(value_err)
    })
}

#[pymodule]
fn domvote_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(loss, m)?)?;
    m.add_function(wrap_pyfunction!(roc_auc, m)?)?;
    m.add_function(wrap_pyfunction!(recall_macro, m)?)?;
    m.add_function(wrap_pyfunction!(gate_test, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
