//! Python module `s2st_py`: thin wrappers over the library entry points
//! that the `s2st` command line uses.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use s2st::config::{load_config_with, RunConfig};
use s2st::data::Category;
use s2st::eval::{self as ev, BleuMode};
use s2st::run::{self, RunError};
use s2st::train::{load_checkpoint, StageKind};

fn runtime(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn value(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn run_err(e: RunError) -> PyErr {
    match e {
        RunError::Config(_) | RunError::Contract(_) => value(e),
        other => runtime(other),
    }
}

fn config(path: PathBuf, overrides: Option<Vec<String>>) -> PyResult<RunConfig> {
    load_config_with(&path, &overrides.unwrap_or_default()).map_err(value)
}

fn paths(v: Vec<PathBuf>) -> Vec<String> {
    v.into_iter().map(|p| p.to_string_lossy().into_owned()).collect()
}

fn stage_kind(name: &str) -> PyResult<StageKind> {
    match name {
        "pretrain" => Ok(StageKind::Pretrain),
        "finetune" => Ok(StageKind::Finetune),
        "mixed" => Ok(StageKind::Mixed),
        "prompt" => Ok(StageKind::Prompt),
        other => Err(value(format!("unknown stage {other:?}"))),
    }
}

fn category(name: Option<&str>) -> PyResult<Option<Category>> {
    match name {
        None => Ok(None),
        Some("primary") => Ok(Some(Category::Primary)),
        Some("secondary") => Ok(Some(Category::Secondary)),
        Some(other) => Err(value(format!("unknown prompt {other:?}"))),
    }
}

/// Resolved run configuration as a JSON string.
#[pyfunction]
#[pyo3(signature = (path, overrides=None))]
fn load_config(path: PathBuf, overrides: Option<Vec<String>>) -> PyResult<String> {
    let cfg = config(path, overrides)?;
    serde_json::to_string(&cfg).map_err(runtime)
}

/// Writes the toy corpus of the config's `[toy]` table; returns the files.
#[pyfunction]
#[pyo3(signature = (config_path, overrides=None))]
fn gen_toy(config_path: PathBuf, overrides: Option<Vec<String>>) -> PyResult<Vec<String>> {
    let cfg = config(config_path, overrides)?;
    run::gen_toy(&cfg).map(paths).map_err(run_err)
}

/// Pseudo-labels `prepare.input` through the configured clients.
#[pyfunction]
#[pyo3(signature = (config_path, overrides=None))]
fn prepare(config_path: PathBuf, overrides: Option<Vec<String>>) -> PyResult<Vec<String>> {
    let cfg = config(config_path, overrides)?;
    run::prepare(&cfg).map(paths).map_err(run_err)
}

/// Trains one stage (`pretrain`, `finetune`, `mixed` or `prompt`) and
/// returns the final checkpoint path.
#[pyfunction]
#[pyo3(signature = (config_path, stage, init=None, overrides=None))]
fn train_stage(
    py: Python<'_>,
    config_path: PathBuf,
    stage: &str,
    init: Option<PathBuf>,
    overrides: Option<Vec<String>>,
) -> PyResult<String> {
    let cfg = config(config_path, overrides)?;
    let kind = stage_kind(stage)?;
    py.detach(|| run::train_stage(&cfg, kind, init.as_deref())).map_err(run_err)?;
    Ok(cfg.final_checkpoint(kind).to_string_lossy().into_owned())
}

/// Translates one WAV file; returns the written WAV and mel paths.
#[pyfunction]
#[pyo3(signature = (checkpoint, input, output, prompt=None, config_path=None))]
fn translate(
    checkpoint: PathBuf,
    input: PathBuf,
    output: PathBuf,
    prompt: Option<&str>,
    config_path: Option<PathBuf>,
) -> PyResult<Vec<String>> {
    let cfg = config_path.map(|p| config(p, None)).transpose()?;
    let eval = match &cfg {
        Some(c) => c.eval.clone(),
        None => ev::EvalConfig::default(),
    };
    let fingerprint = cfg.as_ref().map(|c| c.model.fingerprint());
    let model = load_checkpoint(&checkpoint, fingerprint.as_deref()).map_err(runtime)?.model;
    run::translate(&model, &eval, &input, category(prompt)?, &output)
        .map(paths)
        .map_err(run_err)
}

/// Scores a checkpoint; returns the report as JSON.
#[pyfunction]
#[pyo3(signature = (config_path, checkpoint, manifest=None, out_dir=None))]
fn evaluate(
    py: Python<'_>,
    config_path: PathBuf,
    checkpoint: PathBuf,
    manifest: Option<PathBuf>,
    out_dir: Option<PathBuf>,
) -> PyResult<String> {
    let cfg = config(config_path, None)?;
    let manifest = manifest
        .or_else(|| cfg.paths.eval.clone())
        .ok_or_else(|| value("no manifest given and no paths.eval in the config"))?;
    let model = load_checkpoint(&checkpoint, Some(&cfg.model.fingerprint())).map_err(runtime)?.model;
    let out = out_dir.unwrap_or_else(|| cfg.paths.output_dir.join("eval"));
    let (report, _) = py.detach(|| run::evaluate_run(&cfg, &model, &manifest, &out)).map_err(run_err)?;
    Ok(report.to_json())
}

/// Corpus BLEU; `mode` is `word_ci_detok`, `char` or `phone`.
#[pyfunction]
#[pyo3(signature = (hypotheses, references, mode="word_ci_detok"))]
fn bleu(hypotheses: Vec<String>, references: Vec<String>, mode: &str) -> PyResult<f64> {
    let mode: BleuMode = serde_json::from_value(serde_json::Value::String(mode.into())).map_err(value)?;
    ev::bleu(&hypotheses, &references, mode).map_err(value)
}

#[pyfunction]
fn phoneme_error_rate(reference: Vec<String>, hypothesis: Vec<String>) -> PyResult<f64> {
    ev::phoneme_error_rate(&reference, &hypothesis).map_err(value)
}

/// Finite-difference gradient suite; returns the summary as JSON.
#[pyfunction]
#[pyo3(signature = (seeds=vec![0, 1]))]
fn gradcheck(py: Python<'_>, seeds: Vec<u64>) -> PyResult<String> {
    let summary = py.detach(|| run::gradcheck(&seeds)).map_err(run_err)?;
    serde_json::to_string(&summary).map_err(runtime)
}

#[pymodule]
fn s2st_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(load_config, m)?)?;
    m.add_function(wrap_pyfunction!(gen_toy, m)?)?;
    m.add_function(wrap_pyfunction!(prepare, m)?)?;
    m.add_function(wrap_pyfunction!(train_stage, m)?)?;
    m.add_function(wrap_pyfunction!(translate, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(bleu, m)?)?;
    m.add_function(wrap_pyfunction!(phoneme_error_rate, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
