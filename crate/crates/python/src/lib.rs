//! Python bindings: text normalization, the detection engine, the encoder,
//! training and evaluation.

use std::path::PathBuf;
use std::sync::Arc;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use cg::chardomain::encode_token;
use cg::encoder::{fingerprint, load_params, save_params, EncoderConfig, EncoderParams};
use cg::evalharness::{evaluate, regex_baseline, Gold, LabeledChat, MetricsReport};
use cg::fixtures::{generate_corpus, variant_space, CorpusSpec};
use cg::latentindex::HnswParams;
use cg::normalizer::{NormalizationConfig, Normalizer};
use cg::pipeline::{Detector, Engine as CoreEngine, Model, PipelineConfig, Verdict};
use cg::tokenizer::{Lexicon, VocabKind, Vocabulary};
use cg::trainer::{fit, TrainPlan};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

/// Normalizes chat text with the default rules.
#[pyfunction]
fn normalize(text: &str) -> String {
    Normalizer::new(NormalizationConfig::default()).normalize(text)
}

/// Encoder weights.
#[pyclass(frozen)]
struct Encoder {
    params: Arc<EncoderParams<f32>>,
}

#[pymethods]
impl Encoder {
    /// Freshly initialized weights.
    #[new]
    #[pyo3(signature = (seed=0, hidden_dim=128))]
    fn new(seed: u64, hidden_dim: usize) -> PyResult<Self> {
        let cfg = EncoderConfig {
            hidden_dim,
            ..EncoderConfig::default()
        };
        let params = EncoderParams::init(cfg, seed).map_err(value_err)?;
        Ok(Self {
            params: Arc::new(params),
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            params: Arc::new(load_params(&path).map_err(value_err)?),
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_params(&self.params, &path).map_err(runtime_err)
    }

    /// Hex digest identifying these weights.
    #[getter]
    fn fingerprint(&self) -> String {
        format!("{:016x}", fingerprint(&self.params))
    }

    /// One row of floats per token.
    fn embed(&self, py: Python<'_>, tokens: Vec<String>) -> PyResult<Vec<Vec<f32>>> {
        let seqs = tokens
            .iter()
            .map(|t| encode_token(t).map_err(|e| value_err(format!("{t:?}: {e}"))))
            .collect::<PyResult<Vec<_>>>()?;
        if seqs.is_empty() {
            return Ok(Vec::new());
        }
        let params = self.params.clone();
        let z = py.detach(move || params.embed(&seqs)).map_err(runtime_err)?;
        Ok((0..z.rows).map(|i| z.row(i).to_vec()).collect())
    }
}

/// Trains an encoder on `tokens` with the single-core preset and returns it
/// with the per-epoch history as `(epoch, train_loss, val_loss, lr)` tuples.
#[pyfunction]
#[pyo3(signature = (tokens, epochs=None, seed=None))]
fn train(
    py: Python<'_>,
    tokens: Vec<String>,
    epochs: Option<usize>,
    seed: Option<u64>,
) -> PyResult<(Encoder, Vec<(usize, f64, f64, f64)>)> {
    let mut plan = TrainPlan::desk();
    if let Some(e) = epochs {
        plan.train.epochs = e;
    }
    if let Some(s) = seed {
        plan.train.seed = s;
    }
    let outcome = py
        .detach(|| fit(&tokens, &plan.encoder, &plan.train))
        .map_err(value_err)?;
    let history = outcome
        .history
        .epochs
        .iter()
        .map(|r| (r.epoch, r.train_loss, r.val_loss, r.lr))
        .collect();
    Ok((
        Encoder {
            params: Arc::new(outcome.params),
        },
        history,
    ))
}

fn verdict_dict<'py>(py: Python<'py>, v: &Verdict) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("chat_id", &v.chat_id)?;
    d.set_item("label", serde_json::to_value(v.label).map_err(runtime_err)?.as_str())?;
    d.set_item("stage", v.stage.to_string())?;
    d.set_item("latency_us", v.latency_us)?;
    let e = v.evidence.as_ref();
    d.set_item("token", e.map(|e| e.token.clone()))?;
    d.set_item("key", e.map(|e| e.key.clone()))?;
    d.set_item("sim", e.map(|e| e.sim))?;
    Ok(d)
}

fn report_dict<'py>(py: Python<'py>, r: &MetricsReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("model", &r.model)?;
    d.set_item("threshold", r.threshold)?;
    let c = r.counts;
    d.set_item("tp", c.tp)?;
    d.set_item("fp", c.fp)?;
    d.set_item("fn", c.fn_)?;
    d.set_item("tn", c.tn)?;
    for (name, m) in [("profane", &r.profane), ("not_profane", &r.not_profane)] {
        let inner = PyDict::new(py);
        inner.set_item("precision", m.precision)?;
        inner.set_item("recall", m.recall)?;
        inner.set_item("f1", m.f1)?;
        inner.set_item("support", m.support)?;
        d.set_item(name, inner)?;
    }
    Ok(d)
}

fn labeled(texts: Vec<String>, labels: Vec<bool>) -> PyResult<Vec<LabeledChat>> {
    if texts.len() != labels.len() {
        return Err(value_err("texts and labels differ in length"));
    }
    Ok(texts
        .into_iter()
        .zip(labels)
        .map(|(t, p)| LabeledChat::new(t, if p { Gold::Profane } else { Gold::NotProfane }))
        .collect())
}

/// Two-stage detector with a live profane vocabulary.
#[pyclass(frozen)]
struct Engine {
    detector: Detector,
}

#[pymethods]
impl Engine {
    /// Builds an engine from in-memory word lists and optional weights.
    #[new]
    #[pyo3(signature = (safe, profane, encoder=None, threshold=0.8, max_chat_len=500))]
    fn new(
        safe: Vec<String>,
        profane: Vec<String>,
        encoder: Option<&Encoder>,
        threshold: f32,
        max_chat_len: usize,
    ) -> PyResult<Self> {
        let norm = Normalizer::new(NormalizationConfig::default());
        let clean = |words: Vec<String>| words.iter().map(|w| norm.normalize(w)).collect::<Vec<_>>();
        let safe = Vocabulary::from_entries(VocabKind::SafePlatform, clean(safe)).map_err(value_err)?;
        let profane = Vocabulary::from_entries(VocabKind::Profane, clean(profane)).map_err(value_err)?;
        let lexicon = Lexicon::new(vec![safe], profane).map_err(value_err)?;
        let model = encoder
            .map(|e| Model::build(e.params.clone(), lexicon.profane().iter(), HnswParams::default()))
            .transpose()
            .map_err(value_err)?;
        let engine = CoreEngine::new(norm, lexicon, model, threshold, max_chat_len).map_err(value_err)?;
        Ok(Self {
            detector: Detector::new(engine),
        })
    }

    /// Loads vocabularies, weights and index from a TOML config file.
    #[staticmethod]
    fn from_config(path: PathBuf) -> PyResult<Self> {
        let cfg = PipelineConfig::load(&path).map_err(value_err)?;
        let engine = CoreEngine::from_config(&cfg).map_err(value_err)?;
        Ok(Self {
            detector: Detector::new(engine),
        })
    }

    #[getter]
    fn threshold(&self) -> f32 {
        self.detector.snapshot().threshold()
    }

    /// Returns a dict with `label`, `stage`, `token`, `key`, `sim` and
    /// `latency_us`.
    #[pyo3(signature = (text, chat_id=""))]
    fn detect<'py>(&self, py: Python<'py>, text: &str, chat_id: &str) -> PyResult<Bound<'py, PyDict>> {
        let chat = cg::normalizer::RawChat::new(chat_id, text);
        let v = py.detach(|| self.detector.detect(&chat)).map_err(runtime_err)?;
        verdict_dict(py, &v)
    }

    /// Adds a profane key; takes effect for every later call.
    fn add_profane_key(&self, key: &str) -> PyResult<()> {
        self.detector.add_profane_key(key).map_err(value_err)
    }

    fn profane_keys(&self) -> Vec<String> {
        self.detector.snapshot().lexicon().profane().iter().map(str::to_owned).collect()
    }

    /// Precision/recall/F1 against `labels` (True = profane).
    #[pyo3(signature = (texts, labels, threshold=None))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        texts: Vec<String>,
        labels: Vec<bool>,
        threshold: Option<f32>,
    ) -> PyResult<Bound<'py, PyDict>> {
        let data = labeled(texts, labels)?;
        let engine = self.detector.snapshot();
        let t = threshold.unwrap_or(engine.threshold());
        let r = py.detach(|| evaluate(&data, &engine, t)).map_err(value_err)?;
        report_dict(py, &r)
    }

    /// The exact-match baseline over the same vocabulary.
    fn baseline<'py>(&self, py: Python<'py>, texts: Vec<String>, labels: Vec<bool>) -> PyResult<Bound<'py, PyDict>> {
        let data = labeled(texts, labels)?;
        let engine = self.detector.snapshot();
        let r = regex_baseline(&data, engine.normalizer(), engine.lexicon().profane()).map_err(value_err)?;
        report_dict(py, &r)
    }
}

/// A seeded synthetic corpus as `(safe, profane)` token lists.
#[pyfunction]
#[pyo3(signature = (n_safe=450, n_profane=50, seed=1))]
fn fixture_corpus(n_safe: usize, n_profane: usize, seed: u64) -> PyResult<(Vec<String>, Vec<String>)> {
    let c = generate_corpus(&CorpusSpec {
        n_safe,
        n_profane,
        seed,
        ..CorpusSpec::default()
    })
    .map_err(value_err)?;
    Ok((c.safe, c.profane))
}

/// Every variant of `key` with `ops` interior edits (deletion or `*`).
#[pyfunction]
#[pyo3(signature = (key, ops=1))]
fn variants(key: &str, ops: usize) -> PyResult<Vec<String>> {
    Ok(variant_space(key, ops).map_err(value_err)?.into_iter().collect())
}

#[pymodule]
fn chatguard(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Encoder>()?;
    m.add_class::<Engine>()?;
    m.add_function(wrap_pyfunction!(normalize, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(fixture_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(variants, m)?)?;
    Ok(())
}
