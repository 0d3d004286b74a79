//! Space tokenization, dictionary classification and the suspicious-token
//! merge that recovers spaced-out words ("a b u s e").

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chardomain::{encode_token, CharSeq, SEQ_LEN};
use crate::normalizer::Normalizer;

/// Longest suffix token that may be glued onto a preceding suspicious token.
pub const MERGE_MAX_SUFFIX: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VocabKind {
    SafeEnglish,
    SafeHinglish,
    SafePlatform,
    Profane,
}

impl fmt::Display for VocabKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VocabKind::SafeEnglish => "safe_english",
            VocabKind::SafeHinglish => "safe_hinglish",
            VocabKind::SafePlatform => "safe_platform",
            VocabKind::Profane => "profane",
        })
    }
}

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}:{line}: {reason}")]
    Format {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("token {token:?} is both profane and in {safe_kind}")]
    Conflict { token: String, safe_kind: VocabKind },
    #[error("invalid vocabulary entry {token:?}: {reason}")]
    InvalidEntry { token: String, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    kind: VocabKind,
    entries: BTreeSet<String>,
    version: u64,
}

impl Vocabulary {
    pub fn new(kind: VocabKind) -> Self {
        Self {
            kind,
            entries: BTreeSet::new(),
            version: 1,
        }
    }

    /// Builds a vocabulary from already normalized entries.
    pub fn from_entries<I, S>(kind: VocabKind, entries: I) -> Result<Self, VocabError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Self::new(kind);
        for e in entries {
            let e = e.into();
            check_entry(&e).map_err(|reason| VocabError::InvalidEntry {
                token: e.clone(),
                reason,
            })?;
            v.entries.insert(e);
        }
        Ok(v)
    }

    pub fn kind(&self) -> VocabKind {
        self.kind
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, token: &str) -> bool {
        self.entries.contains(token)
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(String::as_str)
    }

    /// Adds a normalized entry. Returns false if it was already present.
    pub fn insert(&mut self, token: &str) -> Result<bool, VocabError> {
        check_entry(token).map_err(|reason| VocabError::InvalidEntry {
            token: token.to_owned(),
            reason,
        })?;
        let added = self.entries.insert(token.to_owned());
        if added {
            self.version += 1;
        }
        Ok(added)
    }
}

fn check_entry(token: &str) -> Result<(), String> {
    let len = token.chars().count();
    if len == 0 {
        return Err("empty".into());
    }
    if len > SEQ_LEN {
        return Err(format!("{len} characters, longer than {SEQ_LEN}"));
    }
    if token.contains(' ') {
        return Err("contains a space".into());
    }
    if !crate::normalizer::is_normalized(token) {
        return Err("not normalized".into());
    }
    Ok(())
}

/// Reads a vocabulary file: UTF-8, one token per line, `#` comment lines and
/// blank lines skipped. Each line is normalized before insertion.
pub fn load_vocabulary(
    path: &Path,
    kind: VocabKind,
    normalizer: &Normalizer,
) -> Result<Vocabulary, VocabError> {
    let text = std::fs::read_to_string(path).map_err(|source| VocabError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_vocabulary(&text, kind, normalizer, &path.display().to_string())
}

pub fn parse_vocabulary(
    text: &str,
    kind: VocabKind,
    normalizer: &Normalizer,
    origin: &str,
) -> Result<Vocabulary, VocabError> {
    let mut vocab = Vocabulary::new(kind);
    for (i, raw) in text.lines().enumerate() {
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let token = normalizer.normalize(trimmed);
        let fail = |reason: String| VocabError::Format {
            path: origin.to_owned(),
            line: i + 1,
            reason,
        };
        if token.is_empty() {
            return Err(fail(format!("{trimmed:?} normalizes to nothing")));
        }
        if token.contains(' ') {
            return Err(fail(format!("{token:?} contains a space")));
        }
        if token.chars().count() > SEQ_LEN {
            return Err(fail(format!("{token:?} is longer than {SEQ_LEN}")));
        }
        vocab.entries.insert(token);
    }
    Ok(vocab)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TokenClass {
    Safe,
    ProfaneDirect,
    Suspicious,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenRecord {
    pub text: String,
    /// `None` only for tokens longer than [`SEQ_LEN`], which are never matched.
    pub seq: Option<CharSeq>,
    pub class: TokenClass,
    /// Byte range into the normalized chat.
    pub span: (usize, usize),
}

/// The safe dictionaries plus the profane dictionary, validated disjoint.
#[derive(Debug, Clone)]
pub struct Lexicon {
    safe: Vec<Vocabulary>,
    profane: Vocabulary,
}

impl Lexicon {
    pub fn new(safe: Vec<Vocabulary>, profane: Vocabulary) -> Result<Self, VocabError> {
        for s in &safe {
            if let Some(token) = profane.iter().find(|t| s.contains(t)) {
                return Err(VocabError::Conflict {
                    token: token.to_owned(),
                    safe_kind: s.kind(),
                });
            }
        }
        Ok(Self { safe, profane })
    }

    pub fn empty() -> Self {
        Self {
            safe: Vec::new(),
            profane: Vocabulary::new(VocabKind::Profane),
        }
    }

    pub fn profane(&self) -> &Vocabulary {
        &self.profane
    }

    pub fn safe(&self) -> &[Vocabulary] {
        &self.safe
    }

    pub fn is_safe(&self, token: &str) -> bool {
        self.safe.iter().any(|v| v.contains(token))
    }

    /// Adds a profane key, rejecting it if a safe list already holds it.
    pub fn add_profane(&mut self, token: &str) -> Result<bool, VocabError> {
        if let Some(s) = self.safe.iter().find(|v| v.contains(token)) {
            return Err(VocabError::Conflict {
                token: token.to_owned(),
                safe_kind: s.kind(),
            });
        }
        self.profane.insert(token)
    }

    /// Profane first, then safe; over-length tokens are not matchable and
    /// count as safe.
    pub fn classify(&self, token: &str) -> TokenClass {
        if token.len() > SEQ_LEN {
            TokenClass::Safe
        } else if self.profane.contains(token) {
            TokenClass::ProfaneDirect
        } else if self.is_safe(token) {
            TokenClass::Safe
        } else {
            TokenClass::Suspicious
        }
    }

    fn record(&self, text: String, span: (usize, usize)) -> TokenRecord {
        let class = self.classify(&text);
        let seq = encode_token(&text).ok();
        TokenRecord {
            text,
            seq,
            class,
            span,
        }
    }
}

/// Splits normalized text on spaces and classifies each token.
pub fn tokenize(text: &str, lexicon: &Lexicon) -> Vec<TokenRecord> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, c) in text.char_indices().chain(std::iter::once((text.len(), ' '))) {
        match (c == ' ', start) {
            (true, Some(s)) => {
                out.push(lexicon.record(text[s..i].to_owned(), (s, i)));
                start = None;
            }
            (false, None) => start = Some(i),
            _ => {}
        }
    }
    out
}

/// Greedy left-to-right merge: a suspicious token of at most
/// [`MERGE_MAX_SUFFIX`] characters following another suspicious token is
/// appended to it and the result re-classified. A merge that would exceed
/// [`SEQ_LEN`] is skipped.
pub fn merge_suspicious(tokens: Vec<TokenRecord>, lexicon: &Lexicon) -> Vec<TokenRecord> {
    let mut out: Vec<TokenRecord> = Vec::with_capacity(tokens.len());
    for tok in tokens {
        let mergeable = tok.class == TokenClass::Suspicious
            && tok.text.len() <= MERGE_MAX_SUFFIX
            && out
                .last()
                .is_some_and(|prev| prev.class == TokenClass::Suspicious)
            && out.last().unwrap().text.len() + tok.text.len() <= SEQ_LEN;
        if mergeable {
            let prev = out.pop().unwrap();
            let text = prev.text + &tok.text;
            out.push(lexicon.record(text, (prev.span.0, tok.span.1)));
        } else {
            out.push(tok);
        }
    }
    out
}
