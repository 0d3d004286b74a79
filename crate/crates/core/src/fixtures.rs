//! Seeded synthetic vocabularies, censored variants and labeled chats.
//!
//! Tokens are random lowercase letter strings. Every profane key sits at edit
//! distance at least [`MIN_SEPARATION`] from every other generated token, and
//! no generated token is a proper prefix of a profane key, so a spaced-out key
//! always merges back into exactly that key.

use std::collections::BTreeSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::evalharness::{Gold, LabeledChat};
use crate::normalizer::is_normalized;

pub const MIN_SEPARATION: usize = 3;

#[derive(Debug, Error, PartialEq)]
pub enum FixtureError {
    #[error("cannot satisfy corpus spec: {0}")]
    SpecInfeasible(String),
    #[error("{key:?} has only {available} distinct {ops}-edit variants, {requested} requested")]
    NotEnoughVariants {
        key: String,
        ops: usize,
        requested: usize,
        available: usize,
    },
    #[error("key {0:?} is shorter than 3 characters")]
    KeyTooShort(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSpec {
    pub n_safe: usize,
    pub n_profane: usize,
    /// Inclusive token length bounds.
    pub len_range: (usize, usize),
    pub seed: u64,
    /// Edit budget for test variants.
    pub variant_ops: usize,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            n_safe: 450,
            n_profane: 50,
            len_range: (3, 12),
            seed: 1,
            variant_ops: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub safe: Vec<String>,
    pub profane: Vec<String>,
}

impl Corpus {
    /// Safe tokens followed by profane keys.
    pub fn all_tokens(&self) -> Vec<String> {
        self.safe.iter().chain(&self.profane).cloned().collect()
    }
}

/// Levenshtein distance, giving up early once it is known to reach `cap`
/// (returns `cap` in that case).
pub fn edit_distance_capped(a: &str, b: &str, cap: usize) -> usize {
    let (a, b) = (a.as_bytes(), b.as_bytes());
    if a.len().abs_diff(b.len()) >= cap {
        return cap;
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for i in 1..=a.len() {
        cur[0] = i;
        let mut row_min = cur[0];
        for j in 1..=b.len() {
            let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
            row_min = row_min.min(cur[j]);
        }
        if row_min >= cap {
            return cap;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()].min(cap)
}

fn random_token(rng: &mut impl Rng, (lo, hi): (usize, usize)) -> String {
    let len = rng.random_range(lo..=hi);
    (0..len).map(|_| rng.random_range(b'a'..=b'z') as char).collect()
}

fn is_proper_prefix(short: &str, long: &str) -> bool {
    short.len() < long.len() && long.starts_with(short)
}

/// Generates the safe and profane token sets described by `spec`.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus, FixtureError> {
    let (lo, hi) = spec.len_range;
    if spec.n_safe + spec.n_profane < 10 {
        return Err(FixtureError::SpecInfeasible(
            "need at least 10 tokens in total".into(),
        ));
    }
    if lo < 3 || hi < lo || hi > crate::chardomain::SEQ_LEN {
        return Err(FixtureError::SpecInfeasible(format!(
            "length range {lo}..={hi} must lie within 3..=24"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let budget = 2000 * (spec.n_safe + spec.n_profane);
    let mut attempts = 0;
    let mut draw = |rng: &mut ChaCha8Rng| -> Result<String, FixtureError> {
        attempts += 1;
        if attempts > budget {
            return Err(FixtureError::SpecInfeasible(format!(
                "no valid placement after {budget} draws"
            )));
        }
        Ok(random_token(rng, spec.len_range))
    };

    let mut profane: Vec<String> = Vec::with_capacity(spec.n_profane);
    while profane.len() < spec.n_profane {
        let t = draw(&mut rng)?;
        let ok = is_normalized(&t)
            && profane.iter().all(|p| {
                edit_distance_capped(&t, p, MIN_SEPARATION) >= MIN_SEPARATION
                    && !is_proper_prefix(&t, p)
                    && !is_proper_prefix(p, &t)
            });
        if ok {
            profane.push(t);
        }
    }

    let mut safe: Vec<String> = Vec::with_capacity(spec.n_safe);
    let mut seen = BTreeSet::new();
    while safe.len() < spec.n_safe {
        let t = draw(&mut rng)?;
        let ok = is_normalized(&t)
            && !seen.contains(&t)
            && profane.iter().all(|p| {
                edit_distance_capped(&t, p, MIN_SEPARATION) >= MIN_SEPARATION
                    && !is_proper_prefix(&t, p)
            });
        if ok {
            seen.insert(t.clone());
            safe.push(t);
        }
    }
    Ok(Corpus { safe, profane })
}

/// Every distinct string reachable from `key` by exactly `ops` edits at
/// distinct interior positions, each edit a deletion or a `*`.
pub fn variant_space(key: &str, ops: usize) -> Result<BTreeSet<String>, FixtureError> {
    let chars: Vec<char> = key.chars().collect();
    if chars.len() < 3 {
        return Err(FixtureError::KeyTooShort(key.to_owned()));
    }
    let interior: Vec<usize> = (1..chars.len() - 1).collect();
    let mut out = BTreeSet::new();
    if ops == 0 || ops > interior.len() {
        return Ok(out);
    }
    // walk all `ops`-subsets of interior positions in lexicographic order
    let mut pick: Vec<usize> = (0..ops).collect();
    loop {
        for mask in 0..(1u32 << ops) {
            let mut s = String::with_capacity(chars.len());
            for (i, &c) in chars.iter().enumerate() {
                match pick.iter().position(|&p| interior[p] == i) {
                    Some(k) if mask & (1 << k) != 0 => s.push('*'),
                    Some(_) => {}
                    None => s.push(c),
                }
            }
            out.insert(s);
        }
        let Some(k) = (0..ops).rev().find(|&k| pick[k] < interior.len() - ops + k) else {
            break;
        };
        pick[k] += 1;
        for j in k + 1..ops {
            pick[j] = pick[j - 1] + 1;
        }
    }
    Ok(out)
}

/// `n` distinct variants of `key` with exactly `ops` edits, endpoints kept.
pub fn generate_variants(
    key: &str,
    n: usize,
    ops: usize,
    seed: u64,
) -> Result<Vec<String>, FixtureError> {
    let space: Vec<String> = variant_space(key, ops)?.into_iter().collect();
    if space.len() < n {
        return Err(FixtureError::NotEnoughVariants {
            key: key.to_owned(),
            ops,
            requested: n,
            available: space.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(space.choose_multiple(&mut rng, n).cloned().collect())
}

/// How the offending token of a profane chat is written.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProfaneStyle {
    /// The key verbatim.
    Direct,
    /// One interior letter replaced by `*`.
    Starred,
    /// One interior letter deleted or starred.
    Edited,
    /// The key's letters separated by spaces.
    Spaced,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatSpec {
    pub n: usize,
    /// Share of chats that carry one profane token.
    pub profane_fraction: f64,
    pub style: ProfaneStyle,
    /// Safe words per chat, inclusive.
    pub words: (usize, usize),
    pub seed: u64,
}

impl Default for ChatSpec {
    fn default() -> Self {
        Self {
            n: 1000,
            profane_fraction: 0.5,
            style: ProfaneStyle::Direct,
            words: (3, 8),
            seed: 7,
        }
    }
}

fn offending_token(key: &str, style: ProfaneStyle, rng: &mut ChaCha8Rng) -> String {
    let chars: Vec<char> = key.chars().collect();
    match style {
        ProfaneStyle::Direct => key.to_owned(),
        ProfaneStyle::Spaced => chars.iter().map(char::to_string).collect::<Vec<_>>().join(" "),
        ProfaneStyle::Starred | ProfaneStyle::Edited => {
            let pos = rng.random_range(1..chars.len() - 1);
            let delete = style == ProfaneStyle::Edited && rng.random_bool(0.5);
            chars
                .iter()
                .enumerate()
                .filter_map(|(i, &c)| match (i == pos, delete) {
                    (true, true) => None,
                    (true, false) => Some('*'),
                    _ => Some(c),
                })
                .collect()
        }
    }
}

/// Chats of safe words, a `profane_fraction` share of which also carry one
/// profane key written in `style` at a random position.
pub fn generate_chats(corpus: &Corpus, spec: &ChatSpec) -> Result<Vec<LabeledChat>, FixtureError> {
    let (lo, hi) = spec.words;
    if corpus.safe.is_empty() || lo == 0 || hi < lo {
        return Err(FixtureError::SpecInfeasible(
            "chats need a non-empty safe list and word range".into(),
        ));
    }
    if spec.profane_fraction > 0.0 && corpus.profane.is_empty() {
        return Err(FixtureError::SpecInfeasible("no profane keys to insert".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n_profane = (spec.n as f64 * spec.profane_fraction.clamp(0.0, 1.0)).round() as usize;
    let mut gold: Vec<bool> = (0..spec.n).map(|i| i < n_profane).collect();
    gold.shuffle(&mut rng);
    let mut chats = Vec::with_capacity(spec.n);
    for profane in gold {
        let n_words = rng.random_range(lo..=hi);
        let mut words: Vec<String> = (0..n_words)
            .map(|_| corpus.safe.choose(&mut rng).unwrap().clone())
            .collect();
        if profane {
            let key = corpus.profane.choose(&mut rng).unwrap();
            let at = rng.random_range(0..=words.len());
            words.insert(at, offending_token(key, spec.style, &mut rng));
        }
        chats.push(LabeledChat {
            text: words.join(" "),
            gold: if profane { Gold::Profane } else { Gold::NotProfane },
        });
    }
    Ok(chats)
}
