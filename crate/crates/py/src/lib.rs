//! Python bindings for razor-core.
//!
//! Structured results (rows, traces, reports) cross the boundary as plain
//! Python dicts and lists built from their JSON form.

use std::time::Duration;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use serde::de::DeserializeOwned;
use serde::Serialize;

use razor_core::corpus::{self, ClassId, LabelFormat, LabelSet, LabeledDocument, Schema, TokenizerConfig};
use razor_core::evalkit::{self, ReportOptions};
use razor_core::rewriter::http::HttpBackend;
use razor_core::rewriter::mock::{MockBackend, MockRules};
use razor_core::rewriter::{BackendKind, RewriteBackend};
use razor_core::surface::{self, CorpusStats};
use razor_core::{attribution, AttributionRecord, RunConfig};

create_exception!(razor, RazorError, PyException);

fn err(e: impl std::fmt::Display) -> PyErr {
    RazorError::new_err(e.to_string())
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(err)?;
    py.import("json")?.call_method1("loads", (text,))
}

fn from_py<T: DeserializeOwned>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(err)
}

fn parse_schema(schema: &str) -> PyResult<Schema> {
    schema.parse().map_err(err)
}

fn context_field(schema: Schema) -> Option<&'static str> {
    match schema {
        Schema::Single => None,
        Schema::ClaimEvidence => Some("evidence"),
        Schema::PremiseHypothesis => Some("premise"),
    }
}

fn mutable_field(schema: Schema) -> &'static str {
    match schema {
        Schema::Single => "text",
        Schema::ClaimEvidence => "claim",
        Schema::PremiseHypothesis => "hypothesis",
    }
}

/// A labeled corpus. Immutable from Python; rewriting returns a new one.
#[pyclass(name = "Dataset", module = "razor", frozen)]
struct PyDataset {
    inner: corpus::Dataset,
}

#[pymethods]
impl PyDataset {
    /// Builds a dataset from dicts shaped like the JSONL records.
    /// `labels` gives class names in id order; record labels may be names
    /// or integer ids.
    #[new]
    #[pyo3(signature = (records, labels, schema = "single"))]
    fn new(records: &Bound<'_, PyList>, labels: Vec<String>, schema: &str) -> PyResult<Self> {
        let schema = parse_schema(schema)?;
        let label_set = LabelSet::from_names(labels).map_err(err)?;
        let tokenizer = TokenizerConfig::default();
        let mut format = LabelFormat::Numeric;
        let mut docs = Vec::with_capacity(records.len());
        for (i, item) in records.iter().enumerate() {
            let record = item.cast::<PyDict>()?;
            let get = |key: &str| -> PyResult<Bound<'_, PyAny>> {
                record
                    .get_item(key)?
                    .ok_or_else(|| err(format!("record {i}: missing field \"{key}\"")))
            };
            let id: String = get("id")?.extract()?;
            let text: String = get(mutable_field(schema))?.extract()?;
            let context = match context_field(schema) {
                Some(key) => Some(get(key)?.extract::<String>()?),
                None => None,
            };
            let label = get("label")?;
            let class = if let Ok(name) = label.extract::<String>() {
                if i == 0 {
                    format = LabelFormat::Named;
                }
                label_set
                    .id_of(&name)
                    .ok_or_else(|| err(format!("record {i}: unknown label \"{name}\"")))?
            } else {
                let id = ClassId(label.extract()?);
                if !label_set.contains(id) {
                    return Err(err(format!("record {i}: unknown label {}", id.0)));
                }
                id
            };
            docs.push(LabeledDocument::new(id, text, context, class, &tokenizer).map_err(err)?);
        }
        let inner = corpus::Dataset::new(docs, label_set, schema, format, tokenizer).map_err(err)?;
        Ok(Self { inner })
    }

    /// Loads a JSONL file; labels are inferred when not given.
    #[staticmethod]
    #[pyo3(signature = (path, schema = "single", labels = None))]
    fn load(path: &str, schema: &str, labels: Option<Vec<String>>) -> PyResult<Self> {
        let labels = labels.map(LabelSet::from_names).transpose().map_err(err)?;
        let inner = corpus::load_dataset(path, parse_schema(schema)?, labels.as_ref(), &TokenizerConfig::default())
            .map_err(err)?;
        Ok(Self { inner })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        corpus::save_dataset(&self.inner, path).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset({} documents, schema={}, labels={:?})",
            self.inner.len(),
            self.inner.schema(),
            self.label_names()
        )
    }

    #[getter]
    fn schema(&self) -> &'static str {
        self.inner.schema().as_str()
    }

    #[getter]
    fn label_names(&self) -> Vec<String> {
        self.inner.label_set().iter().map(|(_, name)| name.to_string()).collect()
    }

    #[getter]
    fn ids(&self) -> Vec<String> {
        self.inner.documents().iter().map(|d| d.id().to_string()).collect()
    }

    #[getter]
    fn texts(&self) -> Vec<String> {
        self.inner.documents().iter().map(|d| d.mutable_text().to_string()).collect()
    }

    #[getter]
    fn labels(&self) -> Vec<u32> {
        self.inner.documents().iter().map(|d| d.label().0).collect()
    }

    fn tokens(&self, id: &str) -> PyResult<Vec<String>> {
        let doc = self.inner.get(id).ok_or_else(|| err(format!("no document \"{id}\"")))?;
        Ok(doc.tokens().to_vec())
    }

    /// TF-IDF weight of `token` in document `id` under this corpus.
    fn tfidf(&self, id: &str, token: &str) -> PyResult<f64> {
        let doc = self.inner.get(id).ok_or_else(|| err(format!("no document \"{id}\"")))?;
        let stats = CorpusStats::build(&self.inner, 0);
        surface::tfidf_score(token, doc, &stats).map_err(err)
    }
}

#[pyfunction]
#[pyo3(signature = (pos, dim = 64))]
fn positional_encoding(pos: usize, dim: usize) -> PyResult<Vec<f64>> {
    surface::positional_encoding(pos, dim).map_err(err)
}

/// Surface embeddings keyed by document id. Documents under two tokens are
/// absent.
#[pyfunction]
#[pyo3(signature = (dataset, dim = 64))]
fn surface_embeddings(dataset: &PyDataset, dim: usize) -> PyResult<Vec<(String, Vec<f64>)>> {
    let stats = CorpusStats::build(&dataset.inner, 0);
    let map = surface::embed_dataset(&dataset.inner, &stats, dim).map_err(err)?;
    Ok(dataset
        .inner
        .documents()
        .iter()
        .filter_map(|d| map.get(d.id()).map(|e| (d.id().to_string(), e.vector().to_vec())))
        .collect())
}

/// Shortcut-score ranking and summary: `(rows, summary)`.
#[pyfunction]
#[pyo3(signature = (dataset, dim = 64))]
fn analyze<'py>(py: Python<'py>, dataset: &PyDataset, dim: usize) -> PyResult<(Bound<'py, PyAny>, Bound<'py, PyAny>)> {
    let (rows, summary, _) = evalkit::analyze(&dataset.inner, dim).map_err(err)?;
    Ok((to_py(py, &rows)?, to_py(py, &summary)?))
}

#[pyfunction]
#[pyo3(signature = (dataset, dim = 64))]
fn objective(dataset: &PyDataset, dim: usize) -> PyResult<f64> {
    let stats = CorpusStats::build(&dataset.inner, 0);
    let map = surface::embed_dataset(&dataset.inner, &stats, dim).map_err(err)?;
    surface::class_alignment_objective(&dataset.inner, &map).map_err(err)
}

/// Runs the rewrite loop. `rules` (a mock-rules dict) selects the offline
/// backend; without it the HTTP backend is used and RAZOR_API_KEY must be
/// set. Returns `(dataset, traces, stop_reason)`.
#[pyfunction]
#[pyo3(signature = (dataset, rules = None, config = None, checkpoint_dir = None))]
fn run<'py>(
    py: Python<'py>,
    dataset: &PyDataset,
    rules: Option<&Bound<'py, PyAny>>,
    config: Option<&Bound<'py, PyAny>>,
    checkpoint_dir: Option<&str>,
) -> PyResult<(PyDataset, Bound<'py, PyAny>, String)> {
    let mut config: RunConfig = match config {
        Some(c) => from_py(c)?,
        None => RunConfig::default(),
    };
    let backend: Box<dyn RewriteBackend> = match rules {
        Some(r) => {
            config.generator.backend = BackendKind::Mock;
            Box::new(MockBackend::new(from_py::<MockRules>(r)?).map_err(err)?)
        }
        None => {
            config.generator.backend = BackendKind::Http;
            let timeout = Duration::from_secs(config.generator.timeout_secs);
            Box::new(HttpBackend::from_env(config.generator.model.clone(), timeout).map_err(err)?)
        }
    };
    let data = dataset.inner.clone();
    let outcome = py
        .detach(|| {
            let mut razor = razor_core::Razor::new(config, backend.as_ref())?;
            if let Some(dir) = checkpoint_dir {
                razor = razor.with_checkpoint(razor_core::Checkpoint::open(dir)?);
            }
            razor.run(&data)
        })
        .map_err(err)?;
    let stop = to_py(py, &outcome.stop_reason)?.extract::<String>()?;
    Ok((PyDataset { inner: outcome.dataset }, to_py(py, &outcome.traces)?, stop))
}

/// Synthetic corpus with one planted token: `(dataset, mock_rules)`.
#[pyfunction]
#[pyo3(signature = (planted_token = "not", biased_class = 0, bias_rate = 0.9, background_rate = 0.1, corpus_size = 1000, seed = 0, num_classes = 2))]
#[allow(clippy::too_many_arguments)]
fn generate_biased_corpus<'py>(
    py: Python<'py>,
    planted_token: &str,
    biased_class: u32,
    bias_rate: f64,
    background_rate: f64,
    corpus_size: usize,
    seed: u64,
    num_classes: u32,
) -> PyResult<(PyDataset, Bound<'py, PyAny>)> {
    let spec = evalkit::BiasSpec {
        planted_token: planted_token.to_string(),
        biased_class: ClassId(biased_class),
        bias_rate,
        background_rate,
        corpus_size,
        seed,
        num_classes,
    };
    let (inner, rules) = evalkit::generate_biased_corpus(&spec).map_err(err)?;
    Ok((PyDataset { inner }, to_py(py, &rules)?))
}

#[pyfunction]
#[pyo3(signature = (candidates, references, max_n = 4, smoothing = false))]
fn corpus_bleu(candidates: Vec<String>, references: Vec<String>, max_n: usize, smoothing: bool) -> PyResult<f64> {
    evalkit::corpus_bleu(&candidates, &references, max_n, smoothing).map_err(err)
}

/// Per-class counts of each term: `{term: {"per_class": {...}, "total": n}}`.
#[pyfunction]
fn count_terms<'py>(py: Python<'py>, dataset: &PyDataset, terms: Vec<String>) -> PyResult<Bound<'py, PyAny>> {
    let refs: Vec<&str> = terms.iter().map(String::as_str).collect();
    to_py(py, &evalkit::count_terms(&dataset.inner, &refs).map_err(err)?)
}

#[pyfunction]
fn frequency_gap(dataset: &PyDataset, token: &str) -> f64 {
    evalkit::frequency_gap(&dataset.inner, token)
}

/// Before/after comparison. `traces` is the list returned by `run`.
#[pyfunction]
#[pyo3(signature = (before, after, terms, traces = None, max_n = 4, smoothing = false))]
fn report<'py>(
    py: Python<'py>,
    before: &PyDataset,
    after: &PyDataset,
    terms: Vec<String>,
    traces: Option<&Bound<'py, PyAny>>,
    max_n: usize,
    smoothing: bool,
) -> PyResult<Bound<'py, PyAny>> {
    let traces: Vec<razor_core::IterationTrace> = match traces {
        Some(t) => from_py(t)?,
        None => Vec::new(),
    };
    let refs: Vec<&str> = terms.iter().map(String::as_str).collect();
    let options = ReportOptions {
        max_n,
        smoothing,
        ..ReportOptions::new()
    };
    let report = evalkit::emit_report(&before.inner, &after.inner, &traces, &refs, &options).map_err(err)?;
    to_py(py, &report)
}

/// Shortcut verdict for `subset` of an attribution record dict:
/// `(is_shortcut, failed_condition)`.
#[pyfunction]
fn is_shortcut(subset: Vec<usize>, record: &Bound<'_, PyAny>) -> PyResult<(bool, Option<String>)> {
    let record: AttributionRecord = from_py(record)?;
    record.validate().map_err(err)?;
    let verdict = attribution::is_shortcut(&subset, &record).map_err(err)?;
    let failed = verdict
        .failed
        .map(|c| serde_json::to_value(c).map_err(err))
        .transpose()?
        .and_then(|v| v.as_str().map(str::to_string));
    Ok((verdict.is_shortcut, failed))
}

#[pyfunction]
fn lemma1_holds(subset: Vec<usize>, record: &Bound<'_, PyAny>) -> PyResult<bool> {
    let record: AttributionRecord = from_py(record)?;
    record.validate().map_err(err)?;
    attribution::lemma1_holds(&subset, &record).map_err(err)
}

#[pymodule]
fn razor(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("RazorError", m.py().get_type::<RazorError>())?;
    m.add_class::<PyDataset>()?;
    m.add_function(wrap_pyfunction!(positional_encoding, m)?)?;
    m.add_function(wrap_pyfunction!(surface_embeddings, m)?)?;
    m.add_function(wrap_pyfunction!(analyze, m)?)?;
    m.add_function(wrap_pyfunction!(objective, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(generate_biased_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(corpus_bleu, m)?)?;
    m.add_function(wrap_pyfunction!(count_terms, m)?)?;
    m.add_function(wrap_pyfunction!(frequency_gap, m)?)?;
    m.add_function(wrap_pyfunction!(report, m)?)?;
    m.add_function(wrap_pyfunction!(is_shortcut, m)?)?;
    m.add_function(wrap_pyfunction!(lemma1_holds, m)?)?;
    Ok(())
}
