//! TOML service configuration.
//!
//! ```toml
//! threshold = 0.8
//! max_chat_len = 500
//!
//! [vocab]
//! safe_english = "vocab/english.txt"
//! profane = "vocab/profane.txt"
//! extra_safe = ["vocab/biology.txt"]
//!
//! [model]
//! weights = "model/encoder.cgw"
//!
//! [queue]
//! workers = 4
//! listen = "127.0.0.1:7070"
//! ```
//!
//! Relative paths are resolved against the directory holding the file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::latentindex::HnswParams;
use crate::normalizer::NormalizationConfig;
use crate::tokenizer::VocabKind;

/// Environment variable consulted when no `--config` is given.
pub const CONFIG_ENV: &str = "YZR_CONFIG";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VocabSection {
    pub safe_english: Option<PathBuf>,
    pub safe_hinglish: Option<PathBuf>,
    pub safe_platform: Option<PathBuf>,
    /// Session-specific allowlists, e.g. subject terminology.
    pub extra_safe: Vec<PathBuf>,
    pub profane: Option<PathBuf>,
    /// Names scrubbed from chats before matching.
    pub names: Option<PathBuf>,
}

impl VocabSection {
    pub fn safe_paths(&self) -> Vec<(&Path, VocabKind)> {
        let mut out = Vec::new();
        let fixed = [
            (&self.safe_english, VocabKind::SafeEnglish),
            (&self.safe_hinglish, VocabKind::SafeHinglish),
            (&self.safe_platform, VocabKind::SafePlatform),
        ];
        for (p, kind) in fixed {
            if let Some(p) = p {
                out.push((p.as_path(), kind));
            }
        }
        out.extend(self.extra_safe.iter().map(|p| (p.as_path(), VocabKind::SafePlatform)));
        out
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// Encoder weights. Without them only dictionary matching runs.
    pub weights: Option<PathBuf>,
    /// Index file; defaults to the weights path with an `.idx` extension.
    pub index: Option<PathBuf>,
    pub hnsw: HnswParams,
}

impl ModelSection {
    pub fn index_path(&self) -> PathBuf {
        match (&self.index, &self.weights) {
            (Some(p), _) => p.clone(),
            (None, Some(w)) => w.with_extension("idx"),
            (None, None) => PathBuf::from("index.idx"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QueueSection {
    pub workers: usize,
    /// Bound of each in-process queue.
    pub capacity: usize,
    /// `host:port` for the line-delimited JSON socket.
    pub listen: Option<String>,
    /// Verdicts remembered for duplicate suppression.
    pub dedup_capacity: usize,
}

impl Default for QueueSection {
    fn default() -> Self {
        Self {
            workers: 2,
            capacity: 1024,
            listen: None,
            dedup_capacity: 100_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(serialize_with = "short_f32")]
    pub threshold: f32,
    pub max_chat_len: usize,
    pub vocab: VocabSection,
    pub model: ModelSection,
    pub normalization: NormalizationConfig,
    pub queue: QueueSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            threshold: 0.8,
            max_chat_len: 500,
            vocab: VocabSection::default(),
            model: ModelSection::default(),
            normalization: NormalizationConfig::default(),
            queue: QueueSection::default(),
        }
    }
}

/// Writes `0.8` rather than the nearest f64 of the f32 value.
fn short_f32<S: serde::Serializer>(v: &f32, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_f64(v.to_string().parse().expect("float display parses"))
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl PipelineConfig {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, PipelineError> {
        let mut cfg: Self =
            toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        let v = &mut cfg.vocab;
        for p in [
            &mut v.safe_english,
            &mut v.safe_hinglish,
            &mut v.safe_platform,
            &mut v.profane,
            &mut v.names,
            &mut cfg.model.weights,
            &mut cfg.model.index,
        ]
        .into_iter()
        .flatten()
        {
            resolve(base_dir, p);
        }
        for p in &mut v.extra_safe {
            resolve(base_dir, p);
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            PipelineError::Config(format!("reading {}: {e}", path.display()))
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    /// `--config` if given, else the [`CONFIG_ENV`] variable, else defaults.
    pub fn discover(explicit: Option<&Path>) -> Result<Self, PipelineError> {
        match explicit {
            Some(p) => Self::load(p),
            None => match std::env::var_os(CONFIG_ENV) {
                Some(p) => Self::load(Path::new(&p)),
                None => Ok(Self::default()),
            },
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Checks value ranges and that every configured file exists.
    pub fn validate(&self) -> Result<(), PipelineError> {
        super::validate_threshold(self.threshold)?;
        if self.max_chat_len == 0 {
            return Err(PipelineError::Config("max_chat_len must be positive".into()));
        }
        if self.queue.workers == 0 || self.queue.capacity == 0 {
            return Err(PipelineError::Config(
                "queue workers and capacity must be positive".into(),
            ));
        }
        self.model.hnsw.validate()?;
        let mut paths: Vec<&Path> = self.vocab.safe_paths().into_iter().map(|(p, _)| p).collect();
        paths.extend(self.vocab.profane.as_deref());
        paths.extend(self.vocab.names.as_deref());
        paths.extend(self.model.weights.as_deref());
        if let Some(missing) = paths.into_iter().find(|p| !p.is_file()) {
            return Err(PipelineError::Config(format!("{} does not exist", missing.display())));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_from_empty_file() {
        let cfg = PipelineConfig::parse("", Path::new("/x")).unwrap();
        assert_eq!(cfg, PipelineConfig::default());
        assert_eq!(cfg.threshold, 0.8);
        cfg.validate().unwrap();
    }

    #[test]
    fn relative_paths_resolve_against_base() {
        let cfg = PipelineConfig::parse(
            "threshold = 0.9\n[vocab]\nprofane = \"p.txt\"\nextra_safe = [\"/abs/bio.txt\"]\n[model]\nweights = \"m/w.cgw\"\n",
            Path::new("/etc/cg"),
        )
        .unwrap();
        assert_eq!(cfg.vocab.profane.as_deref(), Some(Path::new("/etc/cg/p.txt")));
        assert_eq!(cfg.vocab.extra_safe, vec![PathBuf::from("/abs/bio.txt")]);
        assert_eq!(cfg.model.index_path(), PathBuf::from("/etc/cg/m/w.idx"));
        assert_eq!(cfg.threshold, 0.9);
    }

    #[test]
    fn rejects_bad_values_and_unknown_keys() {
        let base = Path::new(".");
        assert!(PipelineConfig::parse("thresold = 0.5", base).is_err());
        for t in ["0.0", "1.5", "-0.1"] {
            let cfg = PipelineConfig::parse(&format!("threshold = {t}"), base).unwrap();
            assert!(cfg.validate().is_err(), "{t}");
        }
        let cfg = PipelineConfig::parse("threshold = 1.0", base).unwrap();
        assert!(cfg.validate().is_ok());
        let cfg = PipelineConfig::parse("[vocab]\nprofane = \"/no/such/file\"", base).unwrap();
        assert!(matches!(cfg.validate(), Err(PipelineError::Config(m)) if m.contains("/no/such/file")));
    }

    #[test]
    fn round_trips_through_toml() {
        let mut cfg = PipelineConfig::default();
        cfg.queue.listen = Some("127.0.0.1:9000".into());
        cfg.model.hnsw.m = 8;
        let text = cfg.to_toml();
        assert!(text.starts_with("threshold = 0.8\n"), "{text}");
        let back = PipelineConfig::parse(&text, Path::new("/")).unwrap();
        assert_eq!(back, cfg);
    }
}
