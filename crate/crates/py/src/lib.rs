//! Python bindings: run configs, pipeline commands, the vocabulary and a
//! candidate scorer backed by a trained checkpoint.

use std::path::PathBuf;

use b2t_core::config::RunConfig;
use b2t_core::corpus::Dataset;
use b2t_core::eval::{metric_at_k as core_metric_at_k, Scorer};
use b2t_core::model::Model;
use b2t_core::pipeline;
use b2t_core::rank::{order_by_cost, perplexity as core_perplexity, ModelScorer};
use b2t_core::textualize::{item_text, Stage, TextualizationConfig};
use b2t_core::tokenizer::Vocabulary;
use b2t_core::Error;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

fn err(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::UnknownAttribute(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn to_py<T: Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

/// Run configuration; every key not given keeps its default.
#[pyclass(name = "Config", module = "b2t", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (json = None))]
    fn new(json: Option<&str>) -> PyResult<Self> {
        let inner = match json {
            Some(j) => RunConfig::from_json(j).map_err(err)?,
            None => RunConfig::default(),
        };
        Ok(PyConfig { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyConfig {
            inner: RunConfig::load(path).map_err(err)?,
        })
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    fn fingerprint(&self) -> String {
        self.inner.fingerprint()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.seed = seed;
    }

    #[getter]
    fn out_dir(&self) -> PathBuf {
        self.inner.paths.out_dir.clone()
    }

    #[setter]
    fn set_out_dir(&mut self, dir: PathBuf) {
        self.inner.paths.out_dir = dir;
    }

    fn __repr__(&self) -> String {
        format!("Config(seed={}, out_dir={:?})", self.inner.seed, self.inner.paths.out_dir)
    }
}

/// Runs a pipeline command with the GIL released and returns its JSON result as Python objects.
fn command<T: Serialize + Send>(
    py: Python<'_>,
    cfg: &PyConfig,
    f: impl FnOnce(&RunConfig) -> b2t_core::Result<T> + Send,
) -> PyResult<Py<PyAny>> {
    let c = cfg.inner.clone();
    let out = py.detach(move || f(&c)).map_err(err)?;
    to_py(py, &out)
}

#[pyfunction]
fn synth(py: Python<'_>, config: &PyConfig) -> PyResult<Py<PyAny>> {
    command(py, config, pipeline::cmd_synth)
}

#[pyfunction]
fn ingest(py: Python<'_>, config: &PyConfig) -> PyResult<Py<PyAny>> {
    command(py, config, pipeline::cmd_ingest)
}

#[pyfunction]
#[pyo3(signature = (config, resume = false))]
fn pretrain(py: Python<'_>, config: &PyConfig, resume: bool) -> PyResult<Py<PyAny>> {
    command(py, config, |c| pipeline::cmd_pretrain(c, resume))
}

#[pyfunction]
#[pyo3(signature = (config, from_scratch = false))]
fn finetune(py: Python<'_>, config: &PyConfig, from_scratch: bool) -> PyResult<Py<PyAny>> {
    command(py, config, |c| pipeline::cmd_finetune(c, from_scratch))
}

#[pyfunction]
fn evaluate(py: Python<'_>, config: &PyConfig) -> PyResult<Py<PyAny>> {
    command(py, config, pipeline::cmd_eval)
}

#[pyfunction]
#[pyo3(signature = (config, from_scratch = false))]
fn zeroshot(py: Python<'_>, config: &PyConfig, from_scratch: bool) -> PyResult<Py<PyAny>> {
    command(py, config, |c| pipeline::cmd_zeroshot(c, from_scratch))
}

#[pyfunction]
fn rerank(py: Python<'_>, config: &PyConfig) -> PyResult<Py<PyAny>> {
    command(py, config, pipeline::cmd_rerank)
}

#[pyfunction]
#[pyo3(signature = (config, from_scratch = false))]
fn robustness(py: Python<'_>, config: &PyConfig, from_scratch: bool) -> PyResult<Py<PyAny>> {
    command(py, config, |c| pipeline::cmd_robustness(c, from_scratch))
}

#[pyfunction]
fn ablate(py: Python<'_>, config: &PyConfig) -> PyResult<Py<PyAny>> {
    command(py, config, pipeline::cmd_ablate)
}

#[pyclass(name = "Vocabulary", module = "b2t")]
struct PyVocabulary {
    inner: Vocabulary,
}

#[pymethods]
impl PyVocabulary {
    #[staticmethod]
    #[pyo3(signature = (texts, min_freq = 1, max_size = 16384))]
    fn build(texts: Vec<String>, min_freq: usize, max_size: usize) -> PyResult<Self> {
        Ok(PyVocabulary {
            inner: Vocabulary::build(&texts, min_freq, max_size).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyVocabulary {
            inner: Vocabulary::load(path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).map_err(err)
    }

    fn encode(&self, text: &str) -> Vec<u32> {
        self.inner.encode(text)
    }

    fn decode(&self, ids: Vec<u32>) -> PyResult<String> {
        self.inner.decode(&ids).map_err(err)
    }

    fn id(&self, token: &str) -> Option<u32> {
        self.inner.id(token)
    }

    fn token(&self, id: u32) -> Option<String> {
        self.inner.token(id).map(String::from)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// Scores candidate items for a history with a trained checkpoint.
#[pyclass(name = "Recommender", module = "b2t")]
struct PyRecommender {
    model: Model<f32>,
    domain: Dataset,
    text: TextualizationConfig,
    vocab: Vocabulary,
}

impl PyRecommender {
    fn costs(&self, history: &[String], candidates: &[String]) -> PyResult<Vec<f64>> {
        ModelScorer::new(&self.model, &self.domain.catalog, &self.text, &self.vocab)
            .costs(history, candidates)
            .map_err(err)
    }
}

#[pymethods]
impl PyRecommender {
    /// Loads the finetuned checkpoint of `config` (or `checkpoint`) for the
    /// target domain (or `domain`). `stage` picks the item text format.
    #[new]
    #[pyo3(signature = (config, checkpoint = None, domain = None, stage = "finetune"))]
    fn new(config: &PyConfig, checkpoint: Option<PathBuf>, domain: Option<String>, stage: &str) -> PyResult<Self> {
        let cfg = &config.inner;
        let stage = match stage {
            "pretrain" => Stage::Pretrain,
            "finetune" => Stage::Finetune,
            other => return Err(PyValueError::new_err(format!("unknown stage `{other}`"))),
        };
        let mut domains = pipeline::load_domains(cfg).map_err(err)?;
        let name = match domain {
            Some(d) => d,
            None => pipeline::target_domain(cfg, &domains).map_err(err)?.domain.clone(),
        };
        let vocab = pipeline::load_or_build_vocab(cfg, &domains).map_err(err)?;
        let domain = domains
            .remove(&name)
            .ok_or_else(|| PyValueError::new_err(format!("unknown domain `{name}`")))?;
        let path = checkpoint.unwrap_or_else(|| cfg.paths.finetuned());
        let model = pipeline::load_model(cfg, &vocab, &path).map_err(err)?;
        let text = cfg.text_config(stage).map_err(err)?;
        Ok(PyRecommender {
            model,
            domain,
            text,
            vocab,
        })
    }

    #[getter]
    fn domain(&self) -> String {
        self.domain.domain.clone()
    }

    /// Item ids of the domain, sorted.
    fn items(&self) -> Vec<String> {
        self.domain.domain_items().into_iter().map(String::from).collect()
    }

    fn item_text(&self, item_id: &str) -> PyResult<String> {
        let item = self
            .domain
            .catalog
            .get(item_id)
            .ok_or_else(|| PyValueError::new_err(format!("unknown item `{item_id}`")))?;
        item_text(item, &self.text).map_err(err)
    }

    /// Perplexity of every candidate; lower is better.
    fn score(&self, py: Python<'_>, history: Vec<String>, candidates: Vec<String>) -> PyResult<Vec<f64>> {
        py.detach(|| self.costs(&history, &candidates))
    }

    /// Candidates from most to least preferred.
    fn rank(&self, py: Python<'_>, history: Vec<String>, candidates: Vec<String>) -> PyResult<Vec<String>> {
        let costs = py.detach(|| self.costs(&history, &candidates))?;
        let pairs: Vec<(&str, f64)> = candidates.iter().map(String::as_str).zip(costs).collect();
        Ok(order_by_cost(&pairs, None))
    }
}

/// `(HR@k, NDCG@k)` for one instance whose positive sits at 1-based `rank`.
#[pyfunction]
fn metric_at_k(rank: usize, k: usize) -> PyResult<(f64, f64)> {
    if rank == 0 {
        return Err(PyValueError::new_err("rank is 1-based"));
    }
    Ok(core_metric_at_k(rank, k))
}

#[pyfunction]
fn perplexity(token_logprobs: Vec<f64>) -> PyResult<f64> {
    if token_logprobs.is_empty() {
        return Err(PyValueError::new_err("no log-probabilities"));
    }
    Ok(core_perplexity(&token_logprobs))
}

#[pymodule]
fn b2t(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyVocabulary>()?;
    m.add_class::<PyRecommender>()?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(ingest, m)?)?;
    m.add_function(wrap_pyfunction!(pretrain, m)?)?;
    m.add_function(wrap_pyfunction!(finetune, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(zeroshot, m)?)?;
    m.add_function(wrap_pyfunction!(rerank, m)?)?;
    m.add_function(wrap_pyfunction!(robustness, m)?)?;
    m.add_function(wrap_pyfunction!(ablate, m)?)?;
    m.add_function(wrap_pyfunction!(metric_at_k, m)?)?;
    m.add_function(wrap_pyfunction!(perplexity, m)?)?;
    Ok(())
}
