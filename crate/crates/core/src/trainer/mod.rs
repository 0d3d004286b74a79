//! Self-supervised contrastive training of the token encoder.
//!
//! Each epoch shuffles the training tokens, turns every token into two
//! augmented views, and minimizes NT-Xent over the in-batch pairs with Adam
//! under a cosine-decayed learning rate. Validation uses a fixed, lightly
//! augmented pair set; the parameters with the lowest validation loss are
//! returned.

mod adam;
mod loss;

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use adam::{cosine_lr, Adam};
pub use loss::{cosine_sim, ntxent_loss, partner};

use crate::augmentor::{make_pair, AugmentError, AugmentPolicy};
use crate::chardomain::{encode_token, CharSeq, DomainError};
use crate::encoder::linalg::Matrix;
use crate::encoder::{backward, forward, EncoderConfig, EncoderError, EncoderParams, ForwardMode};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("zero vector has no direction")]
    ZeroVector,
    #[error("non-finite loss {0}")]
    NonFiniteLoss(f64),
    #[error("need at least {need} tokens, got {got}")]
    TooFewTokens { need: usize, got: usize },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error("token {0:?}: {1}")]
    Token(String, DomainError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr0: f64,
    pub temperature: f64,
    pub split_fraction: f64,
    pub seed: u64,
    pub policy_train: AugmentPolicy,
    pub policy_valid: AugmentPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            epochs: 200,
            lr0: 1e-4,
            temperature: 0.07,
            split_fraction: 0.7,
            seed: 0,
            policy_train: AugmentPolicy::training(1),
            policy_valid: AugmentPolicy::validation(2),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.batch_size < 2 {
            return bad(format!("batch_size {} < 2", self.batch_size));
        }
        if self.temperature <= 0.0 {
            return bad(format!("temperature {} must be positive", self.temperature));
        }
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return bad(format!("split_fraction {} outside (0, 1)", self.split_fraction));
        }
        if !(self.lr0 > 0.0) {
            return bad(format!("lr0 {} must be positive", self.lr0));
        }
        self.policy_train.validate().map_err(TrainError::Config)?;
        self.policy_valid.validate().map_err(TrainError::Config)?;
        Ok(())
    }
}

/// Encoder shape plus training settings, read from a TOML file with
/// `[encoder]` and `[train]` tables.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainPlan {
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
}

impl TrainPlan {
    /// A narrower encoder with a higher learning rate, sized so that a
    /// corpus of a few hundred tokens trains in minutes on one CPU core.
    pub fn desk() -> Self {
        Self {
            encoder: EncoderConfig {
                hidden_dim: 64,
                ..EncoderConfig::default()
            },
            train: TrainConfig {
                epochs: 500,
                lr0: 3e-3,
                split_fraction: 0.9,
                seed: 1,
                ..TrainConfig::default()
            },
        }
    }

    pub fn parse(text: &str) -> Result<Self, TrainError> {
        let plan: Self = toml::from_str(text).map_err(|e| TrainError::Config(e.to_string()))?;
        plan.encoder.validate()?;
        plan.train.validate()?;
        Ok(plan)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("plan serializes")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Learning rate after the epoch's last step.
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

impl TrainHistory {
    /// `epoch,train_loss,val_loss,lr` with round-trip float formatting.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,lr\n");
        for r in &self.epochs {
            writeln!(out, "{},{:e},{:e},{:e}", r.epoch, r.train_loss, r.val_loss, r.lr).unwrap();
        }
        out
    }
}

/// Seeded shuffle then split; `round(n * fraction)` tokens go to training,
/// clamped so that both sides are non-empty.
pub fn split_dataset(
    tokens: &[String],
    fraction: f64,
    seed: u64,
) -> Result<(Vec<String>, Vec<String>), TrainError> {
    if tokens.len() < 2 {
        return Err(TrainError::TooFewTokens {
            need: 2,
            got: tokens.len(),
        });
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(TrainError::Config(format!("fraction {fraction} outside (0, 1)")));
    }
    let mut shuffled = tokens.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((tokens.len() as f64 * fraction).round() as usize).clamp(1, tokens.len() - 1);
    let valid = shuffled.split_off(n_train);
    Ok((shuffled, valid))
}

fn encode_pair_batch(pairs: &[(String, String)]) -> Result<Vec<CharSeq>, TrainError> {
    let mut out = Vec::with_capacity(pairs.len() * 2);
    for (a, b) in pairs {
        for t in [a, b] {
            out.push(encode_token(t).map_err(|e| TrainError::Token(t.clone(), e))?);
        }
    }
    Ok(out)
}

/// Splits `n` items into batches of `size`, folding a trailing single item
/// into the previous batch so every batch holds at least two pairs.
fn batch_ranges(n: usize, size: usize) -> Vec<std::ops::Range<usize>> {
    let mut out: Vec<std::ops::Range<usize>> = (0..n)
        .step_by(size)
        .map(|s| s..(s + size).min(n))
        .collect();
    if out.len() > 1 && out.last().unwrap().len() < 2 {
        let last = out.pop().unwrap();
        out.last_mut().unwrap().end = last.end;
    }
    out
}

/// Validation pairs drawn once, so every epoch is scored on the same data.
#[derive(Debug, Clone)]
pub struct ValidationSet {
    pairs: Vec<(String, String)>,
}

impl ValidationSet {
    pub fn build(tokens: &[String], policy: &AugmentPolicy) -> Result<Self, TrainError> {
        if tokens.len() < 2 {
            return Err(TrainError::TooFewTokens {
                need: 2,
                got: tokens.len(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(policy.rng_seed);
        let pairs = tokens
            .iter()
            .map(|t| make_pair(t, policy, &mut rng).map(|p| (p.t, p.t_prime)))
            .collect::<Result<_, _>>()?;
        Ok(Self { pairs })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Mean NT-Xent over the set, batch statistics and no dropout,
    /// weighted by batch size.
    pub fn loss(
        &self,
        params: &EncoderParams<f32>,
        batch_size: usize,
        tau: f64,
    ) -> Result<f64, TrainError> {
        let mut total = 0.0;
        for range in batch_ranges(self.pairs.len(), batch_size) {
            let n = range.len();
            let seqs = encode_pair_batch(&self.pairs[range])?;
            let (z, _) = forward(&seqs, params, ForwardMode::Validate)?;
            let z64 = z.cast::<f64>();
            let (l, _) = ntxent_loss(&z64.data, z64.rows, z64.cols, tau)?;
            total += l * n as f64;
        }
        Ok(total / self.pairs.len() as f64)
    }
}

/// Result of [`fit`].
#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub params: EncoderParams<f32>,
    pub history: TrainHistory,
}

/// Trains an encoder from scratch on `tokens` (deduplicated, each valid for
/// the character domain).
pub fn fit(
    tokens: &[String],
    encoder_cfg: &EncoderConfig,
    cfg: &TrainConfig,
) -> Result<FitOutcome, TrainError> {
    fit_with_progress(tokens, encoder_cfg, cfg, |_| {})
}

pub fn fit_with_progress(
    tokens: &[String],
    encoder_cfg: &EncoderConfig,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<FitOutcome, TrainError> {
    cfg.validate()?;
    let mut unique = tokens.to_vec();
    unique.sort();
    unique.dedup();
    for t in &unique {
        encode_token(t).map_err(|e| TrainError::Token(t.clone(), e))?;
    }
    let (mut train, valid) = split_dataset(&unique, cfg.split_fraction, cfg.seed)?;
    if train.len() < 2 || valid.len() < 2 {
        return Err(TrainError::TooFewTokens {
            need: 4,
            got: unique.len(),
        });
    }
    let valid = ValidationSet::build(&valid, &cfg.policy_valid)?;

    let mut params = EncoderParams::<f32>::init(encoder_cfg.clone(), cfg.seed)?;
    let mut opt = Adam::new(params.weights.len());
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed));
    let mut aug_rng = ChaCha8Rng::seed_from_u64(cfg.policy_train.rng_seed);
    let batches_per_epoch = batch_ranges(train.len(), cfg.batch_size).len() as u64;
    let total_steps = batches_per_epoch * cfg.epochs as u64;

    let mut history = TrainHistory {
        best_val_loss: f64::INFINITY,
        ..Default::default()
    };
    let mut best = params.clone();
    let mut step = 0u64;
    for epoch in 1..=cfg.epochs {
        train.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for range in batch_ranges(train.len(), cfg.batch_size) {
            let n = range.len();
            let pairs = train[range]
                .iter()
                .map(|t| make_pair(t, &cfg.policy_train, &mut aug_rng).map(|p| (p.t, p.t_prime)))
                .collect::<Result<Vec<_>, _>>()?;
            let seqs = encode_pair_batch(&pairs)?;
            let mode = ForwardMode::Train {
                dropout_seed: shuffle_rng.random(),
            };
            let (z, cache) = forward(&seqs, &params, mode)?;
            let z64 = z.cast::<f64>();
            let (loss, grad_z) = ntxent_loss(&z64.data, z64.rows, z64.cols, cfg.temperature)?;
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss(loss));
            }
            let upstream = Matrix::from_vec(z.rows, z.cols, grad_z).cast::<f32>();
            let grad = backward(&seqs, &params, &cache, &upstream)?;
            let grad: Vec<f64> = grad.iter().map(|&g| g as f64).collect();
            let lr = cosine_lr(cfg.lr0, step, total_steps);
            opt.step(&mut params.weights, &grad, lr);
            params.update_running_stats(&cache);
            step += 1;
            epoch_loss += loss * n as f64;
        }
        let train_loss = epoch_loss / train.len() as f64;
        let val_loss = valid.loss(&params, cfg.batch_size, cfg.temperature)?;
        if !val_loss.is_finite() {
            return Err(TrainError::NonFiniteLoss(val_loss));
        }
        let record = EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr: cosine_lr(cfg.lr0, step, total_steps),
        };
        if val_loss < history.best_val_loss {
            history.best_val_loss = val_loss;
            history.best_epoch = epoch;
            best = params.clone();
        }
        on_epoch(&record);
        history.epochs.push(record);
    }
    Ok(FitOutcome {
        params: best,
        history,
    })
}
