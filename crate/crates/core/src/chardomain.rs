//! The closed character alphabet accepted by the encoder and the fixed-length
//! id sequences built from it.
//!
//! Id layout: `0` is padding, `a..=z` occupy `1..=26`, the three specials
//! (space, `*`, `-`) occupy `27..=29`, and every other character maps to the
//! out-of-vocabulary id `30`.

use std::fmt;

use thiserror::Error;

/// Fixed sequence length fed to the encoder. Longer tokens are not matchable.
pub const SEQ_LEN: usize = 24;
/// Number of distinct ids, padding and OOV included.
pub const ALPHABET_SIZE: usize = 31;

pub const PAD_ID: u8 = 0;
pub const OOV_ID: u8 = 30;
/// Special characters in id order.
pub const SPECIALS: [char; 3] = [' ', '*', '-'];
/// Rendered in place of OOV ids by [`decode`].
pub const OOV_GLYPH: char = '\u{FFFD}';

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DomainError {
    #[error("empty token")]
    EmptyToken,
    #[error("token has {0} characters, the maximum is {SEQ_LEN}")]
    TokenTooLong(usize),
}

/// Character to id mapping. Stateless; all methods are associated functions
/// on a unit struct so callers can pass it around as a value if they want to.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CharDomain;

impl CharDomain {
    pub fn id_of(c: char) -> u8 {
        match c {
            'a'..='z' => c as u8 - b'a' + 1,
            ' ' => 27,
            '*' => 28,
            '-' => 29,
            _ => OOV_ID,
        }
    }

    /// Inverse of [`CharDomain::id_of`] on the in-domain ids. `None` for pad and OOV.
    pub fn char_of(id: u8) -> Option<char> {
        match id {
            1..=26 => Some((b'a' + id - 1) as char),
            27..=29 => Some(SPECIALS[(id - 27) as usize]),
            _ => None,
        }
    }

    pub fn contains(c: char) -> bool {
        Self::id_of(c) != OOV_ID
    }
}

/// A token encoded as exactly [`SEQ_LEN`] ids, real characters first and
/// padding after.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct CharSeq {
    ids: [u8; SEQ_LEN],
    true_len: u8,
}

impl CharSeq {
    pub fn ids(&self) -> &[u8; SEQ_LEN] {
        &self.ids
    }

    pub fn true_len(&self) -> usize {
        self.true_len as usize
    }

    /// Builds a sequence from raw ids, checking the padding layout.
    pub fn from_ids(ids: [u8; SEQ_LEN]) -> Option<Self> {
        let true_len = ids.iter().position(|&id| id == PAD_ID).unwrap_or(SEQ_LEN);
        if true_len == 0 || ids[true_len..].iter().any(|&id| id != PAD_ID) {
            return None;
        }
        if ids.iter().any(|&id| id as usize >= ALPHABET_SIZE) {
            return None;
        }
        Some(Self {
            ids,
            true_len: true_len as u8,
        })
    }
}

impl fmt::Debug for CharSeq {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CharSeq({:?})", decode(self))
    }
}

/// Encodes a normalized token. Characters outside the domain become OOV.
pub fn encode_token(token: &str) -> Result<CharSeq, DomainError> {
    let len = token.chars().count();
    if len == 0 {
        return Err(DomainError::EmptyToken);
    }
    if len > SEQ_LEN {
        return Err(DomainError::TokenTooLong(len));
    }
    let mut ids = [PAD_ID; SEQ_LEN];
    for (slot, c) in ids.iter_mut().zip(token.chars()) {
        *slot = CharDomain::id_of(c);
    }
    Ok(CharSeq {
        ids,
        true_len: len as u8,
    })
}

pub fn decode(seq: &CharSeq) -> String {
    seq.ids[..seq.true_len()]
        .iter()
        .map(|&id| CharDomain::char_of(id).unwrap_or(OOV_GLYPH))
        .collect()
}
