//! Two-stage chat moderation.
//!
//! Stage 1 normalizes the chat, looks every token up in the dictionaries and
//! glues short suspicious fragments back together. Stage 2 embeds whatever is
//! still suspicious and searches the profane-key index. A cheap whole-word
//! scan of the raw text runs before either stage.
//!
//! [`Engine`] is an immutable snapshot of everything detection needs.
//! [`Detector`] holds the current snapshot and swaps it atomically when the
//! vocabulary changes.

mod config;
mod service;

use std::sync::{Arc, RwLock};
use std::time::Instant;

use log::warn;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::{ModelSection, PipelineConfig, QueueSection, VocabSection, CONFIG_ENV};
pub use service::{
    serve_lines, serve_tcp, InProcQueue, InboundMessage, OutboundRecord, Service, WireLabel,
};

use crate::chardomain::CharSeq;
use crate::container::ContainerError;
use crate::encoder::{fingerprint, load_params, EncoderParams, WeightsError};
use crate::latentindex::{HnswParams, IndexError, LatentIndex};
use crate::normalizer::{ConfigError, Normalizer, RawChat};
use crate::tokenizer::{
    load_vocabulary, merge_suspicious, tokenize, Lexicon, TokenClass, TokenRecord, VocabError,
    VocabKind, Vocabulary,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Normalization(#[from] ConfigError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error("weights: {0}")]
    Weights(#[from] WeightsError),
    #[error("index: {0}")]
    Index(#[from] IndexError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl From<ContainerError> for PipelineError {
    fn from(e: ContainerError) -> Self {
        PipelineError::Index(IndexError::Persist(e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    NotProfane,
    ProfaneDirect,
    ProfaneLatent,
}

impl Label {
    pub fn is_profane(self) -> bool {
        self != Label::NotProfane
    }
}

/// Where the verdict was decided.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Prefilter,
    Stage1,
    Stage2,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Prefilter => "prefilter",
            Stage::Stage1 => "stage1",
            Stage::Stage2 => "stage2",
        })
    }
}

/// The first offending token, the key it matched and their similarity
/// (1.0 for dictionary hits).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evidence {
    pub token: String,
    pub key: String,
    pub sim: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub chat_id: String,
    pub label: Label,
    pub evidence: Option<Evidence>,
    pub stage: Stage,
    pub latency_us: u64,
}

/// Encoder weights plus the index built from them.
#[derive(Debug, Clone)]
pub struct Model {
    pub params: Arc<EncoderParams<f32>>,
    pub index: LatentIndex,
    pub fingerprint: u64,
}

impl Model {
    /// Builds the index over `keys` with freshly computed embeddings.
    pub fn build<'a>(
        params: Arc<EncoderParams<f32>>,
        keys: impl IntoIterator<Item = &'a str>,
        hnsw: HnswParams,
    ) -> Result<Self, IndexError> {
        let dim = params.config().proj_dim;
        let index = LatentIndex::build(keys, params.as_ref(), dim, hnsw)?;
        let fingerprint = fingerprint(&params);
        Ok(Self {
            params,
            index,
            fingerprint,
        })
    }
}

/// What stage 1 leaves behind.
enum Prepared {
    Decided(Stage, Evidence),
    Suspicious(Vec<TokenRecord>),
    Malformed,
}

/// Per-chat data for threshold sweeps: a dictionary hit, or the best index
/// match of every suspicious token in chat order.
#[derive(Debug, Clone, PartialEq)]
pub enum Scan {
    Direct(Stage, Evidence),
    Latent(Vec<Evidence>),
    Malformed,
}

impl Scan {
    /// The label `detect` gives at `threshold`.
    pub fn label_at(&self, threshold: f32) -> Label {
        match self {
            Scan::Direct(..) => Label::ProfaneDirect,
            Scan::Latent(hits) if hits.iter().any(|e| e.sim >= threshold) => Label::ProfaneLatent,
            _ => Label::NotProfane,
        }
    }
}

/// Everything detection needs, fixed at construction.
#[derive(Debug, Clone)]
pub struct Engine {
    normalizer: Normalizer,
    lexicon: Lexicon,
    model: Option<Model>,
    threshold: f32,
    max_chat_len: usize,
    prefilter: Option<Regex>,
}

fn prefilter_regex(profane: &Vocabulary) -> Option<Regex> {
    if profane.is_empty() {
        return None;
    }
    let mut keys: Vec<&str> = profane.iter().collect();
    keys.sort_by_key(|k| std::cmp::Reverse(k.len()));
    let alternation = keys.iter().map(|k| regex::escape(k)).collect::<Vec<_>>().join("|");
    Some(Regex::new(&format!(r"(?i)(?:^|\s)({alternation})(?:\s|$)")).expect("escaped keys form a valid regex"))
}

pub fn validate_threshold(t: f32) -> Result<f32, PipelineError> {
    if t > 0.0 && t <= 1.0 {
        Ok(t)
    } else {
        Err(PipelineError::Config(format!("threshold {t} outside (0, 1]")))
    }
}

impl Engine {
    pub fn new(
        normalizer: Normalizer,
        lexicon: Lexicon,
        model: Option<Model>,
        threshold: f32,
        max_chat_len: usize,
    ) -> Result<Self, PipelineError> {
        let threshold = validate_threshold(threshold)?;
        if let Some(m) = &model {
            if let Some(k) = lexicon.profane().iter().find(|k| !m.index.contains(k)) {
                return Err(PipelineError::Config(format!(
                    "profane key {k:?} is missing from the index"
                )));
            }
        }
        let prefilter = prefilter_regex(lexicon.profane());
        Ok(Self {
            normalizer,
            lexicon,
            model,
            threshold,
            max_chat_len,
            prefilter,
        })
    }

    /// Loads vocabularies, weights and index as described by `cfg`. A
    /// missing or stale index file is rebuilt (and rewritten) from the
    /// profane vocabulary.
    pub fn from_config(cfg: &PipelineConfig) -> Result<Self, PipelineError> {
        cfg.validate()?;
        let mut ncfg = cfg.normalization.clone();
        if let Some(path) = &cfg.vocab.names {
            ncfg.load_names(path)?;
        }
        ncfg.validate()?;
        let normalizer = Normalizer::new(ncfg);
        // vocabulary entries are normalized without name scrubbing
        let vocab_norm = Normalizer::new(cfg.normalization.without_names());
        let mut safe = Vec::new();
        for (path, kind) in cfg.vocab.safe_paths() {
            safe.push(load_vocabulary(path, kind, &vocab_norm)?);
        }
        let profane = match &cfg.vocab.profane {
            Some(p) => load_vocabulary(p, VocabKind::Profane, &vocab_norm)?,
            None => Vocabulary::new(VocabKind::Profane),
        };
        let lexicon = Lexicon::new(safe, profane)?;
        let model = match &cfg.model.weights {
            Some(w) => Some(load_model(
                w,
                &cfg.model.index_path(),
                lexicon.profane(),
                cfg.model.hnsw.clone(),
            )?),
            None => None,
        };
        Self::new(normalizer, lexicon, model, cfg.threshold, cfg.max_chat_len)
    }

    pub fn threshold(&self) -> f32 {
        self.threshold
    }

    pub fn lexicon(&self) -> &Lexicon {
        &self.lexicon
    }

    pub fn normalizer(&self) -> &Normalizer {
        &self.normalizer
    }

    pub fn model(&self) -> Option<&Model> {
        self.model.as_ref()
    }

    pub fn with_threshold(mut self, threshold: f32) -> Result<Self, PipelineError> {
        self.threshold = validate_threshold(threshold)?;
        Ok(self)
    }

    /// Copy of this engine with one more profane key, indexed with a single
    /// encoder call. Weights are untouched.
    pub fn with_profane_key(&self, key: &str) -> Result<Self, PipelineError> {
        let mut next = self.clone();
        let key = self.normalizer.normalize(key);
        if key.is_empty() || key.contains(' ') {
            return Err(PipelineError::Config(format!(
                "{key:?} is not a single token after normalization"
            )));
        }
        next.lexicon.add_profane(&key)?;
        if let Some(m) = next.model.as_mut() {
            if !m.index.contains(&key) {
                m.index.insert_token(&key, m.params.as_ref())?;
            }
        }
        next.prefilter = prefilter_regex(next.lexicon.profane());
        Ok(next)
    }

    fn prefilter(&self, raw: &str) -> Option<Evidence> {
        let caps = self.prefilter.as_ref()?.captures(raw)?;
        let key = caps[1].to_lowercase();
        Some(Evidence {
            token: key.clone(),
            key,
            sim: 1.0,
        })
    }

    fn prepare(&self, raw: &str) -> Prepared {
        if raw.chars().count() > self.max_chat_len {
            return Prepared::Malformed;
        }
        if let Some(e) = self.prefilter(raw) {
            return Prepared::Decided(Stage::Prefilter, e);
        }
        let text = self.normalizer.normalize(raw);
        let direct = |tokens: &[TokenRecord]| {
            tokens
                .iter()
                .find(|t| t.class == TokenClass::ProfaneDirect)
                .map(|t| Evidence {
                    token: t.text.clone(),
                    key: t.text.clone(),
                    sim: 1.0,
                })
        };
        let tokens = tokenize(&text, &self.lexicon);
        if let Some(e) = direct(&tokens) {
            return Prepared::Decided(Stage::Stage1, e);
        }
        let tokens = merge_suspicious(tokens, &self.lexicon);
        if let Some(e) = direct(&tokens) {
            return Prepared::Decided(Stage::Stage1, e);
        }
        Prepared::Suspicious(
            tokens
                .into_iter()
                .filter(|t| t.class == TokenClass::Suspicious && t.seq.is_some())
                .collect(),
        )
    }

    fn top_hit(&self, model: &Model, token: &TokenRecord, z: &[f32]) -> Result<Option<Evidence>, IndexError> {
        Ok(model.index.match_vector(z, f32::NEG_INFINITY)?.map(|h| Evidence {
            token: token.text.clone(),
            key: h.key,
            sim: h.sim,
        }))
    }

    /// Runs both stages on one chat at the engine's threshold.
    pub fn detect(&self, chat: &RawChat) -> Result<Verdict, PipelineError> {
        self.detect_at(chat, self.threshold)
    }

    /// Runs both stages on one chat, stopping at the first offending token.
    pub fn detect_at(&self, chat: &RawChat, threshold: f32) -> Result<Verdict, PipelineError> {
        let start = Instant::now();
        let verdict = |label, evidence, stage| Verdict {
            chat_id: chat.id.clone(),
            label,
            evidence,
            stage,
            latency_us: start.elapsed().as_micros() as u64,
        };
        let suspicious = match self.prepare(&chat.text) {
            Prepared::Decided(stage, e) => return Ok(verdict(Label::ProfaneDirect, Some(e), stage)),
            Prepared::Malformed => {
                warn!(
                    "chat {:?} exceeds {} characters; passed as not profane",
                    chat.id, self.max_chat_len
                );
                return Ok(verdict(Label::NotProfane, None, Stage::Stage1));
            }
            Prepared::Suspicious(s) => s,
        };
        let Some(model) = self.model.as_ref().filter(|m| !m.index.is_empty()) else {
            return Ok(verdict(Label::NotProfane, None, Stage::Stage1));
        };
        if suspicious.is_empty() {
            return Ok(verdict(Label::NotProfane, None, Stage::Stage1));
        }
        for token in &suspicious {
            let seq = token.seq.expect("filtered to encodable tokens");
            let z = model.params.embed(&[seq])?;
            if let Some(e) = self.top_hit(model, token, z.row(0))? {
                if e.sim >= threshold {
                    return Ok(verdict(Label::ProfaneLatent, Some(e), Stage::Stage2));
                }
            }
        }
        Ok(verdict(Label::NotProfane, None, Stage::Stage2))
    }

    /// Convenience wrapper for plain text.
    pub fn detect_text(&self, text: &str) -> Result<Verdict, PipelineError> {
        self.detect(&RawChat::new("", text))
    }

    /// Both stages without a threshold: every suspicious token is embedded
    /// (in one batch) and its best key recorded.
    pub fn scan(&self, text: &str) -> Result<Scan, PipelineError> {
        let suspicious = match self.prepare(text) {
            Prepared::Decided(stage, e) => return Ok(Scan::Direct(stage, e)),
            Prepared::Malformed => return Ok(Scan::Malformed),
            Prepared::Suspicious(s) => s,
        };
        let Some(model) = self.model.as_ref().filter(|m| !m.index.is_empty()) else {
            return Ok(Scan::Latent(Vec::new()));
        };
        if suspicious.is_empty() {
            return Ok(Scan::Latent(Vec::new()));
        }
        let seqs: Vec<CharSeq> = suspicious.iter().map(|t| t.seq.expect("encodable")).collect();
        let z = model.params.embed(&seqs)?;
        let mut hits = Vec::new();
        for (i, token) in suspicious.iter().enumerate() {
            hits.extend(self.top_hit(model, token, z.row(i))?);
        }
        Ok(Scan::Latent(hits))
    }
}

impl From<crate::encoder::EncoderError> for PipelineError {
    fn from(e: crate::encoder::EncoderError) -> Self {
        PipelineError::Index(IndexError::Encoder(e))
    }
}

/// Loads weights and the matching index, rebuilding the index when it is
/// missing, built from other weights, or out of step with `profane`.
pub fn load_model(
    weights: &std::path::Path,
    index_path: &std::path::Path,
    profane: &Vocabulary,
    hnsw: HnswParams,
) -> Result<Model, PipelineError> {
    let params = Arc::new(load_params(weights)?);
    let fp = fingerprint(&params);
    let loaded = match LatentIndex::load_for(index_path, fp) {
        Ok(index) => Some(index),
        Err(IndexError::Persist(ContainerError::Io(e))) if e.kind() == std::io::ErrorKind::NotFound => None,
        Err(IndexError::StaleIndex { .. }) => {
            warn!("{} was built from other weights; rebuilding", index_path.display());
            None
        }
        Err(e) => return Err(e.into()),
    };
    let model = match loaded {
        Some(mut index) if index.keys().all(|k| profane.contains(k)) => {
            let missing: Vec<&str> = profane.iter().filter(|k| !index.contains(k)).collect();
            for key in missing {
                index.insert_token(key, params.as_ref())?;
            }
            Model {
                params,
                index,
                fingerprint: fp,
            }
        }
        _ => {
            let model = Model::build(params, profane.iter(), hnsw)?;
            model.index.save(index_path, fp)?;
            model
        }
    };
    Ok(model)
}

/// Shared handle to the current [`Engine`]; readers never block each other
/// and a swap is atomic to in-flight detections.
#[derive(Debug)]
pub struct Detector {
    current: RwLock<Arc<Engine>>,
}

impl Detector {
    pub fn new(engine: Engine) -> Self {
        Self {
            current: RwLock::new(Arc::new(engine)),
        }
    }

    pub fn snapshot(&self) -> Arc<Engine> {
        self.current.read().expect("detector lock").clone()
    }

    pub fn swap(&self, engine: Engine) {
        *self.current.write().expect("detector lock") = Arc::new(engine);
    }

    pub fn detect(&self, chat: &RawChat) -> Result<Verdict, PipelineError> {
        self.snapshot().detect(chat)
    }

    /// Adds a profane key to the live vocabulary and index.
    pub fn add_profane_key(&self, key: &str) -> Result<(), PipelineError> {
        let mut guard = self.current.write().expect("detector lock");
        let next = guard.with_profane_key(key)?;
        *guard = Arc::new(next);
        Ok(())
    }
}
