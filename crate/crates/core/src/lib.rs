//! Chat profanity detection.
//!
//! Chats are normalized to a small character alphabet and split into tokens
//! that are looked up in safe and profane dictionaries. Tokens that match
//! neither are embedded by a character-level LSTM encoder, trained with a
//! contrastive loss on synthetic misspellings, and compared against the
//! profane keys through an HNSW index.
//!
//! The [`pipeline`] module ties the stages together and serves them over a
//! line-delimited JSON protocol. [`evalharness`] scores a detector against
//! labeled chats, and [`fixtures`] generates synthetic corpora for tests and
//! demos.

pub mod augmentor;
pub mod chardomain;
pub mod container;
pub mod encoder;
pub mod evalharness;
pub mod fixtures;
pub mod latentindex;
pub mod normalizer;
pub mod pipeline;
pub mod tokenizer;
pub mod trainer;
