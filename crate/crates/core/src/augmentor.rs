//! Positive-pair generation by interior deletion and `*` censoring.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chardomain::SEQ_LEN;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AugmentError {
    #[error("token {0:?} is shorter than 2 characters")]
    TokenTooShort(String),
    #[error("token {0:?} is longer than {SEQ_LEN} characters")]
    TokenTooLong(String),
}

/// Upper bound on the number of edits applied to a token of a given length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum MaxOps {
    /// `max(1, len / 4)`.
    QuarterLength,
    Fixed(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentPolicy {
    /// Probability that an edit deletes the character rather than starring it.
    pub p_delete: f64,
    pub max_ops: MaxOps,
    pub keep_endpoints: bool,
    pub rng_seed: u64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self::training(0)
    }
}

impl AugmentPolicy {
    pub fn training(seed: u64) -> Self {
        Self {
            p_delete: 0.5,
            max_ops: MaxOps::QuarterLength,
            keep_endpoints: true,
            rng_seed: seed,
        }
    }

    /// Lighter policy used for the validation split.
    pub fn validation(seed: u64) -> Self {
        Self {
            max_ops: MaxOps::Fixed(1),
            ..Self::training(seed)
        }
    }

    /// Edit budget for a token of `len` characters. Always leaves the two
    /// endpoints and at least one interior character untouched.
    pub fn max_ops(&self, len: usize) -> usize {
        let raw = match self.max_ops {
            MaxOps::QuarterLength => (len / 4).max(1),
            MaxOps::Fixed(n) => n,
        };
        raw.min(len.saturating_sub(3))
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.p_delete) {
            return Err(format!("p_delete {} outside [0, 1]", self.p_delete));
        }
        if !self.keep_endpoints {
            return Err("keep_endpoints must be true".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AugmentedPair {
    pub anchor: String,
    pub t: String,
    pub t_prime: String,
}

fn check_len(token: &str) -> Result<usize, AugmentError> {
    let len = token.chars().count();
    if len < 2 {
        Err(AugmentError::TokenTooShort(token.to_owned()))
    } else if len > SEQ_LEN {
        Err(AugmentError::TokenTooLong(token.to_owned()))
    } else {
        Ok(len)
    }
}

/// Draws one variant of `token`.
pub fn augment<R: Rng + ?Sized>(
    token: &str,
    policy: &AugmentPolicy,
    rng: &mut R,
) -> Result<String, AugmentError> {
    let len = check_len(token)?;
    let budget = policy.max_ops(len);
    if len <= 2 || budget == 0 {
        return Ok(token.to_owned());
    }
    let k = rng.random_range(0..=budget);
    let mut edits = vec![None; len];
    // interior positions 1..len-1
    for pos in sample(rng, len - 2, k).into_iter() {
        let delete = rng.random_bool(policy.p_delete);
        edits[pos + 1] = Some(delete);
    }
    Ok(token
        .chars()
        .zip(edits)
        .filter_map(|(c, edit)| match edit {
            None => Some(c),
            Some(true) => None,
            Some(false) => Some('*'),
        })
        .collect())
}

pub fn make_pair<R: Rng + ?Sized>(
    token: &str,
    policy: &AugmentPolicy,
    rng: &mut R,
) -> Result<AugmentedPair, AugmentError> {
    Ok(AugmentedPair {
        anchor: token.to_owned(),
        t: augment(token, policy, rng)?,
        t_prime: augment(token, policy, rng)?,
    })
}
