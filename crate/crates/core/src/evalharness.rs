//! Precision/recall/F1 evaluation of the detector against labeled chats.
//!
//! A dataset is a CSV file with a `text` and a `label` column, where the label
//! is `profane` or `not_profane`. [`evaluate`] runs the full detector,
//! [`regex_baseline`] runs exact dictionary matching only, and
//! [`threshold_sweep`] scores one set of embeddings at many thresholds.
//! Reports render as an aligned text table or as CSV.

use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{fingerprint, EncoderParams};
use crate::normalizer::{Normalizer, RawChat};
use crate::pipeline::{Engine, PipelineError};
use crate::tokenizer::Vocabulary;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Format(String),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gold {
    Profane,
    NotProfane,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledChat {
    pub text: String,
    #[serde(rename = "label")]
    pub gold: Gold,
}

impl LabeledChat {
    pub fn new(text: impl Into<String>, gold: Gold) -> Self {
        Self {
            text: text.into(),
            gold,
        }
    }
}

/// Confusion counts with `Profane` as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn record(&mut self, predicted_profane: bool, gold: Gold) {
        match (predicted_profane, gold) {
            (true, Gold::Profane) => self.tp += 1,
            (true, Gold::NotProfane) => self.fp += 1,
            (false, Gold::Profane) => self.fn_ += 1,
            (false, Gold::NotProfane) => self.tn += 1,
        }
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (bool, Gold)>) -> Self {
        let mut c = Self::default();
        for (p, g) in pairs {
            c.record(p, g);
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn predicted_profane(&self) -> usize {
        self.tp + self.fp
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Gold members of the class.
    pub support: usize,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl ClassMetrics {
    /// Metrics for a class with `tp` hits, `fp` false alarms and `fn_` misses.
    /// Empty denominators give 0.
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            precision,
            recall,
            f1,
            support: tp + fn_,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Which detector produced the predictions.
    pub model: String,
    /// `None` for detectors without a similarity threshold.
    pub threshold: Option<f32>,
    pub counts: Confusion,
    pub profane: ClassMetrics,
    pub not_profane: ClassMetrics,
}

impl MetricsReport {
    pub fn from_confusion(counts: Confusion, threshold: Option<f32>, model: impl Into<String>) -> Self {
        let c = counts;
        Self {
            model: model.into(),
            threshold,
            counts,
            profane: ClassMetrics::from_counts(c.tp, c.fp, c.fn_),
            not_profane: ClassMetrics::from_counts(c.tn, c.fn_, c.fp),
        }
    }

    fn rows(&self) -> [(&'static str, &ClassMetrics); 2] {
        [("profane", &self.profane), ("not_profane", &self.not_profane)]
    }

    fn threshold_cell(&self) -> String {
        self.threshold.map(|t| format!("{t}")).unwrap_or_else(|| "-".into())
    }
}

const CSV_HEADER: [&str; 11] = [
    "model", "threshold", "class", "precision", "recall", "f1", "support", "tp", "fp", "fn", "tn",
];

/// Aligned plain-text table, one row per report and class, metrics as
/// percentages with two decimals.
pub fn render_table(reports: &[MetricsReport]) -> String {
    let mut rows = vec![[
        "model", "threshold", "class", "precision", "recall", "f1", "support",
    ]
    .map(String::from)
    .to_vec()];
    for r in reports {
        for (class, m) in r.rows() {
            rows.push(vec![
                r.model.clone(),
                r.threshold_cell(),
                class.to_owned(),
                format!("{:.2}", m.precision * 100.0),
                format!("{:.2}", m.recall * 100.0),
                format!("{:.2}", m.f1 * 100.0),
                m.support.to_string(),
            ]);
        }
    }
    let widths: Vec<usize> = (0..rows[0].len())
        .map(|i| rows.iter().map(|r| r[i].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in &rows {
        let line = row
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (cell, w))| {
                if i < 3 {
                    format!("{cell:<w$}")
                } else {
                    format!("{cell:>w$}")
                }
            })
            .collect::<Vec<_>>()
            .join("  ");
        let _ = writeln!(out, "{}", line.trim_end());
    }
    out
}

/// Machine-readable form of the reports with unrounded metrics.
pub fn write_csv<W: Write>(reports: &[MetricsReport], out: W) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in reports {
        let c = r.counts;
        for (class, m) in r.rows() {
            w.write_record([
                r.model.clone(),
                r.threshold_cell(),
                class.to_owned(),
                m.precision.to_string(),
                m.recall.to_string(),
                m.f1.to_string(),
                m.support.to_string(),
                c.tp.to_string(),
                c.fp.to_string(),
                c.fn_.to_string(),
                c.tn.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset<R: Read>(input: R) -> Result<Vec<LabeledChat>, EvalError> {
    let mut rdr = csv::Reader::from_reader(input);
    let headers = rdr.headers()?.clone();
    for col in ["text", "label"] {
        if !headers.iter().any(|h| h == col) {
            return Err(EvalError::Format(format!("dataset has no {col:?} column")));
        }
    }
    let mut out = Vec::new();
    for (i, row) in rdr.deserialize::<LabeledChat>().enumerate() {
        out.push(row.map_err(|e| EvalError::Format(format!("row {}: {e}", i + 1)))?);
    }
    Ok(out)
}

pub fn load_dataset(path: &Path) -> Result<Vec<LabeledChat>, EvalError> {
    read_dataset(std::fs::File::open(path)?)
}

pub fn write_dataset<W: Write>(dataset: &[LabeledChat], out: W) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(out);
    for chat in dataset {
        w.serialize(chat)?;
    }
    w.flush()?;
    Ok(())
}

/// Names the detector behind an engine: the weights fingerprint, or
/// `dictionary` when no encoder is loaded.
pub fn model_id(engine: &Engine) -> String {
    match engine.model() {
        Some(m) => format!("encoder-{:016x}", m.fingerprint),
        None => "dictionary".into(),
    }
}

fn non_empty(dataset: &[LabeledChat]) -> Result<(), EvalError> {
    if dataset.is_empty() {
        Err(EvalError::EmptyDataset)
    } else {
        Ok(())
    }
}

/// Runs the full detector over every chat. Direct and latent hits both count
/// as a `Profane` prediction.
pub fn evaluate(dataset: &[LabeledChat], engine: &Engine, threshold: f32) -> Result<MetricsReport, EvalError> {
    non_empty(dataset)?;
    let mut counts = Confusion::default();
    for (i, chat) in dataset.iter().enumerate() {
        let v = engine.detect_at(&RawChat::new(i.to_string(), chat.text.as_str()), threshold)?;
        counts.record(v.label.is_profane(), chat.gold);
    }
    Ok(MetricsReport::from_confusion(counts, Some(threshold), model_id(engine)))
}

/// Exact token equality against `profane` after normalization, with no
/// fragment merging and no latent stage.
pub fn regex_baseline(
    dataset: &[LabeledChat],
    normalizer: &Normalizer,
    profane: &Vocabulary,
) -> Result<MetricsReport, EvalError> {
    non_empty(dataset)?;
    let counts = Confusion::from_pairs(dataset.iter().map(|chat| {
        let text = normalizer.normalize(&chat.text);
        (text.split(' ').any(|t| profane.contains(t)), chat.gold)
    }));
    Ok(MetricsReport::from_confusion(counts, None, "regex-baseline"))
}

/// One report per threshold. Each chat is scanned (and embedded) once.
pub fn threshold_sweep(
    dataset: &[LabeledChat],
    engine: &Engine,
    thresholds: &[f32],
) -> Result<Vec<MetricsReport>, EvalError> {
    non_empty(dataset)?;
    if thresholds.iter().any(|t| !t.is_finite()) {
        return Err(EvalError::Format("thresholds must be finite".into()));
    }
    if thresholds.windows(2).any(|w| w[0] > w[1]) {
        return Err(EvalError::Format("thresholds must be sorted ascending".into()));
    }
    let scans = dataset
        .iter()
        .map(|c| engine.scan(&c.text))
        .collect::<Result<Vec<_>, _>>()?;
    let id = model_id(engine);
    Ok(thresholds
        .iter()
        .map(|&t| {
            let counts = Confusion::from_pairs(
                scans.iter().zip(dataset).map(|(s, c)| (s.label_at(t).is_profane(), c.gold)),
            );
            MetricsReport::from_confusion(counts, Some(t), id.clone())
        })
        .collect())
}

/// Parses `"0.5,0.6,0.7"`.
pub fn parse_thresholds(list: &str) -> Result<Vec<f32>, EvalError> {
    list.split(',')
        .map(|s| {
            s.trim()
                .parse::<f32>()
                .map_err(|e| EvalError::Format(format!("threshold {s:?}: {e}")))
        })
        .collect()
}

/// Writes `token,d0,...,d{n-1}` rows with shortest round-trip float
/// formatting.
pub fn export_embeddings<W: Write>(
    tokens: &[String],
    params: &EncoderParams<f32>,
    out: W,
) -> Result<(), EvalError> {
    let dim = params.config().proj_dim;
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["token".to_owned()];
    header.extend((0..dim).map(|i| format!("d{i}")));
    w.write_record(&header)?;
    let seqs = tokens
        .iter()
        .map(|t| {
            crate::chardomain::encode_token(t)
                .map_err(|e| EvalError::Format(format!("token {t:?}: {e}")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    for (chunk_tokens, chunk) in tokens.chunks(256).zip(seqs.chunks(256)) {
        let z = params.embed(chunk).map_err(PipelineError::from)?;
        for (i, token) in chunk_tokens.iter().enumerate() {
            let mut row = vec![token.clone()];
            row.extend(z.row(i).iter().map(|x| x.to_string()));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    log::debug!("exported {} embeddings from weights {:016x}", tokens.len(), fingerprint(params));
    Ok(())
}

/// One token per line; blank lines and `#` comments are skipped.
pub fn read_tokens(path: &Path) -> Result<Vec<String>, EvalError> {
    Ok(std::fs::read_to_string(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_owned)
        .collect())
}
