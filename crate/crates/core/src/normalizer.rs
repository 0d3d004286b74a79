//! Raw chat text to the reduced `{a-z, ' ', '*', '-'}` alphabet.
//!
//! The rules run in a fixed order:
//!
//! 1. strip email handles, URLs and configured names
//! 2. map look-alike symbols to letters (`$` to `s`, ...)
//! 3. delete digits
//! 4. fold accented letters to their ASCII base
//! 5. delete emoji
//! 6. delete mathematical operators, collapse whitespace
//! 7. replace each run of other symbols with one `*`
//! 8. cap runs of one repeated character at `repeat_cap`
//! 9. lowercase and trim
//!
//! Mapping runs before digit deletion so that a deployment can turn digit
//! look-alikes such as `0` into letters.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use unicode_normalization::char::is_combining_mark;
use unicode_normalization::UnicodeNormalization;

/// A chat message as it arrives from the platform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawChat {
    pub id: String,
    pub text: String,
    #[serde(default)]
    pub meta: serde_json::Value,
}

impl RawChat {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
            meta: serde_json::Value::Object(Default::default()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NormalizationConfig {
    /// Look-alike symbol to lowercase letter.
    #[serde(serialize_with = "string_keys")]
    pub special_to_letter_map: BTreeMap<char, char>,
    /// Inclusive codepoint intervals deleted as emoji.
    pub emoji_ranges: Vec<(u32, u32)>,
    /// Names scrubbed as whole words, case-insensitively.
    pub name_list: Vec<String>,
    pub repeat_cap: usize,
}

/// TOML tables only take string keys.
fn string_keys<S: serde::Serializer>(map: &BTreeMap<char, char>, s: S) -> Result<S::Ok, S::Error> {
    s.collect_map(map.iter().map(|(k, v)| (k.to_string(), v)))
}

impl Default for NormalizationConfig {
    fn default() -> Self {
        Self {
            special_to_letter_map: BTreeMap::from([('$', 's'), ('@', 'a')]),
            emoji_ranges: vec![
                (0x1F000, 0x1FAFF),
                (0x2600, 0x27BF),
                (0x2B00, 0x2BFF),
                (0xFE00, 0xFE0F),
                (0x200D, 0x200D),
                (0xE0020, 0xE007F),
            ],
            name_list: Vec::new(),
            repeat_cap: 2,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("special_to_letter_map value for {0:?} must be a lowercase ASCII letter, got {1:?}")]
    BadMapping(char, char),
    #[error("repeat_cap must be at least 1")]
    BadRepeatCap,
    #[error("emoji range {0:#x}..={1:#x} is inverted")]
    BadRange(u32, u32),
    #[error("reading name list {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

impl NormalizationConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        for (&k, &v) in &self.special_to_letter_map {
            if !v.is_ascii_lowercase() {
                return Err(ConfigError::BadMapping(k, v));
            }
        }
        if self.repeat_cap == 0 {
            return Err(ConfigError::BadRepeatCap);
        }
        if let Some(&(a, b)) = self.emoji_ranges.iter().find(|(a, b)| a > b) {
            return Err(ConfigError::BadRange(a, b));
        }
        Ok(())
    }

    /// Loads a name list file: one name per line, blank lines and `#` comments ignored.
    pub fn load_names(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        self.name_list.extend(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .map(str::to_owned),
        );
        Ok(())
    }

    /// Same configuration with the name list cleared.
    pub fn without_names(&self) -> Self {
        Self {
            name_list: Vec::new(),
            ..self.clone()
        }
    }
}

/// Compiled form of a [`NormalizationConfig`]. Build once, share freely.
#[derive(Debug, Clone)]
pub struct Normalizer {
    cfg: NormalizationConfig,
    names: Option<Regex>,
}

fn email_url_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?i)(?:\b(?:https?|ftp)://\S+|\bwww\.\S+|\S+@\S+\.\S+)").unwrap()
    })
}

fn is_math_operator(c: char) -> bool {
    matches!(
        c,
        '+' | '=' | '<' | '>' | '^' | '%' | '±' | '×' | '÷' | '¬' | '∙' | '⁄' | '−'
    ) || ('\u{2200}'..='\u{22FF}').contains(&c)
        || ('\u{2A00}'..='\u{2AFF}').contains(&c)
}

impl Normalizer {
    pub fn new(cfg: NormalizationConfig) -> Self {
        let names: Vec<String> = cfg
            .name_list
            .iter()
            .map(|n| n.trim())
            .filter(|n| !n.is_empty())
            .map(regex::escape)
            .collect();
        let names = if names.is_empty() {
            None
        } else {
            Some(Regex::new(&format!(r"(?i)\b(?:{})\b", names.join("|"))).unwrap())
        };
        Self { cfg, names }
    }

    pub fn config(&self) -> &NormalizationConfig {
        &self.cfg
    }

    pub fn normalize_chat(&self, chat: &RawChat) -> String {
        self.normalize(&chat.text)
    }

    pub fn normalize(&self, text: &str) -> String {
        // 1
        let mut s = email_url_pattern().replace_all(text, " ").into_owned();
        if let Some(names) = &self.names {
            s = names.replace_all(&s, " ").into_owned();
        }
        // 2, 3
        let s: String = s
            .chars()
            .map(|c| self.cfg.special_to_letter_map.get(&c).copied().unwrap_or(c))
            .filter(|c| !c.is_numeric())
            .collect();
        // 4
        let s: String = s.nfd().filter(|&c| !is_combining_mark(c)).collect();
        // 5, 6
        let mut out = String::with_capacity(s.len());
        let mut pending_space = false;
        for c in s.chars() {
            if self.is_emoji(c) || is_math_operator(c) {
                continue;
            }
            if c.is_whitespace() {
                pending_space = true;
                continue;
            }
            if pending_space {
                out.push(' ');
                pending_space = false;
            }
            out.push(c);
        }
        if pending_space {
            out.push(' ');
        }
        // 7
        let mut starred = String::with_capacity(out.len());
        let mut in_run = false;
        for c in out.chars() {
            if c.is_ascii_alphabetic() || c == ' ' || c == '-' {
                starred.push(c);
                in_run = false;
            } else if !in_run {
                starred.push('*');
                in_run = true;
            }
        }
        // 8, 9
        let cap = self.cfg.repeat_cap;
        let mut capped = String::with_capacity(starred.len());
        let mut prev = None;
        let mut run = 0usize;
        for c in starred.chars().map(|c| c.to_ascii_lowercase()) {
            if Some(c) == prev {
                run += 1;
            } else {
                prev = Some(c);
                run = 1;
            }
            if run <= cap {
                capped.push(c);
            }
        }
        capped.trim_matches(' ').to_owned()
    }

    fn is_emoji(&self, c: char) -> bool {
        let cp = c as u32;
        self.cfg
            .emoji_ranges
            .iter()
            .any(|&(lo, hi)| (lo..=hi).contains(&cp))
    }

    /// True iff normalizing `text` (names not scrubbed) leaves it unchanged.
    pub fn is_normalized(&self, text: &str) -> bool {
        if self.names.is_some() {
            Normalizer::new(self.cfg.without_names()).normalize(text) == text
        } else {
            self.normalize(text) == text
        }
    }
}

impl Default for Normalizer {
    fn default() -> Self {
        Self::new(NormalizationConfig::default())
    }
}

pub fn normalize(chat: &RawChat, cfg: &NormalizationConfig) -> String {
    Normalizer::new(cfg.clone()).normalize_chat(chat)
}

pub fn is_normalized(text: &str) -> bool {
    Normalizer::default().is_normalized(text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn norm(s: &str) -> String {
        Normalizer::default().normalize(s)
    }

    #[test]
    fn dollar_maps_to_s() {
        assert_eq!(norm("cla$$"), "class");
    }

    #[test]
    fn long_runs_collapse_to_cap() {
        assert_eq!(norm("cooooool"), "cool");
        assert_eq!(norm("COOooOOL"), "cool");
        assert_eq!(norm("class"), "class");
    }

    #[test]
    fn symbol_runs_become_single_star() {
        assert_eq!(norm("f!!k"), "f*k");
        assert_eq!(norm("f**k"), "f*k");
        assert_eq!(norm("f#!*k"), "f*k");
    }

    #[test]
    fn urls_digits_and_case() {
        assert_eq!(norm("Visit http://x.yz NOW 123"), "visit now");
        assert_eq!(norm("see www.example.com/x ok"), "see ok");
    }

    #[test]
    fn emails_are_removed_before_at_mapping() {
        assert_eq!(norm("mail me at joe@mail.com pls"), "mail me at pls");
        assert_eq!(norm("@dult"), "adult");
    }

    #[test]
    fn accents_fold() {
        assert_eq!(norm("Café naïve"), "cafe naive");
    }

    #[test]
    fn emoji_and_math_are_deleted() {
        assert_eq!(norm("nice 😀 job"), "nice job");
        assert_eq!(norm("a+b=c"), "abc");
        assert_eq!(norm("x ≤ y"), "x y");
    }

    #[test]
    fn whitespace_collapses_and_trims() {
        assert_eq!(norm("  hello \t\n world  "), "hello world");
        assert_eq!(norm(""), "");
    }

    #[test]
    fn names_scrubbed_as_words() {
        let cfg = NormalizationConfig {
            name_list: vec!["Rahul".into()],
            ..Default::default()
        };
        let n = Normalizer::new(cfg);
        assert_eq!(n.normalize("hi rahul, rahulx"), "hi * rahulx");
    }

    #[test]
    fn digit_lookalike_survives_when_configured() {
        let mut cfg = NormalizationConfig::default();
        cfg.special_to_letter_map.insert('0', 'o');
        assert_eq!(Normalizer::new(cfg).normalize("c00l 42"), "cool");
    }

    #[test]
    fn is_normalized_examples() {
        assert!(is_normalized("class"));
        assert!(!is_normalized("Class"));
        assert!(!is_normalized("a  b"));
        assert!(is_normalized(""));
    }

    #[test]
    fn validation() {
        let mut cfg = NormalizationConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.repeat_cap = 0;
        assert!(matches!(cfg.validate(), Err(ConfigError::BadRepeatCap)));
        let mut cfg = NormalizationConfig::default();
        cfg.special_to_letter_map.insert('3', 'E');
        assert!(matches!(cfg.validate(), Err(ConfigError::BadMapping('3', 'E'))));
    }

    proptest! {
        #[test]
        fn idempotent_and_closed(s in "\\PC{0,40}") {
            let n = Normalizer::default();
            let once = n.normalize(&s);
            prop_assert!(once.chars().all(|c| c.is_ascii_lowercase() || c == ' ' || c == '*' || c == '-'));
            prop_assert_eq!(n.normalize(&once), once.clone());
        }

        #[test]
        fn no_long_runs(s in "[a-zA-Z$@*!. ]{0,40}") {
            let out = norm(&s);
            let chars: Vec<char> = out.chars().collect();
            prop_assert!(chars.windows(3).all(|w| !(w[0] == w[1] && w[1] == w[2])));
        }
    }
}
