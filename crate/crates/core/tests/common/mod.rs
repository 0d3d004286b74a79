//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use chatguard::chardomain::{encode_token, CharSeq};
use chatguard::encoder::linalg::Matrix;
use chatguard::encoder::{backward, forward, EncoderConfig, EncoderParams, ForwardMode};
use chatguard::fixtures::{variant_space, Corpus};
use chatguard::latentindex::{HnswParams, LatentIndex};
use chatguard::trainer::ntxent_loss;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const REL_TOL: f64 = 1e-3;
pub const ABS_FLOOR: f64 = 1e-6;

/// Worst disagreement between an analytic and a numeric gradient.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub checked: usize,
    pub worst_excess: f64,
    pub worst_at: String,
    pub failures: usize,
}

impl GradCheck {
    fn new() -> Self {
        Self {
            checked: 0,
            worst_excess: f64::NEG_INFINITY,
            worst_at: String::new(),
            failures: 0,
        }
    }

    /// Passes when `|a - n| <= max(REL_TOL * max(|a|, |n|), ABS_FLOOR)`.
    fn compare(&mut self, analytic: f64, numeric: f64, at: impl FnOnce() -> String) {
        let allowed = (REL_TOL * analytic.abs().max(numeric.abs())).max(ABS_FLOOR);
        let excess = (analytic - numeric).abs() / allowed;
        self.checked += 1;
        if excess > 1.0 {
            self.failures += 1;
        }
        if excess > self.worst_excess {
            self.worst_excess = excess;
            self.worst_at = at();
        }
    }

    pub fn passed(&self) -> bool {
        self.failures == 0 && self.checked > 0
    }
}

pub fn seqs(tokens: &[&str]) -> Vec<CharSeq> {
    tokens.iter().map(|t| encode_token(t).unwrap()).collect()
}

/// The gradient-check encoder: embedding 4, hidden 8, three layers.
pub fn tiny_config() -> EncoderConfig {
    EncoderConfig {
        embed_dim: 4,
        hidden_dim: 8,
        num_layers: 3,
        ..EncoderConfig::tiny()
    }
}

/// Checks every encoder weight against central differences of the NT-Xent
/// loss of the encoder output. The dropout seed is fixed, so every
/// perturbed forward pass uses the same mask.
pub fn encoder_gradcheck(seed: u64) -> GradCheck {
    let params = EncoderParams::<f64>::init(tiny_config(), seed).unwrap();
    let batch = seqs(&["abuse", "ab*se", "crap", "cr*p", "hello", "helo"]);
    let mode = ForwardMode::Train { dropout_seed: seed ^ 0xd0 };
    let tau = 0.5;
    let loss_of = |p: &EncoderParams<f64>| {
        let (z, _) = forward(&batch, p, mode).unwrap();
        ntxent_loss(&z.data, z.rows, z.cols, tau).unwrap().0
    };
    let (z, cache) = forward(&batch, &params, mode).unwrap();
    let (_, grad_z) = ntxent_loss(&z.data, z.rows, z.cols, tau).unwrap();
    let upstream = Matrix::from_vec(z.rows, z.cols, grad_z);
    let analytic = backward(&batch, &params, &cache, &upstream).unwrap();

    let h = 1e-6;
    let mut report = GradCheck::new();
    let layout = params.layout().clone();
    for slot in layout.slots() {
        for i in slot.range() {
            let mut p = params.clone();
            p.weights[i] += h;
            let up = loss_of(&p);
            p.weights[i] -= 2.0 * h;
            let down = loss_of(&p);
            let numeric = (up - down) / (2.0 * h);
            report.compare(analytic[i], numeric, || format!("{}[{}]", slot.name, i - slot.offset));
        }
    }
    report
}

/// Checks the NT-Xent gradient with respect to random embeddings.
pub fn ntxent_gradcheck(seed: u64) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheck::new();
    for (rows, dim, tau) in [(4, 3, 1.0), (6, 5, 0.5), (8, 4, 0.07)] {
        let e: Vec<f64> = (0..rows * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (_, grad) = ntxent_loss(&e, rows, dim, tau).unwrap();
        let h = 1e-6;
        for i in 0..e.len() {
            let mut p = e.clone();
            p[i] += h;
            let up = ntxent_loss(&p, rows, dim, tau).unwrap().0;
            p[i] -= 2.0 * h;
            let down = ntxent_loss(&p, rows, dim, tau).unwrap().0;
            report.compare(grad[i], (up - down) / (2.0 * h), || format!("rows={rows} tau={tau} [{i}]"));
        }
    }
    report
}

/// N = 2 pairs, tau = 1, positives identical and negatives orthogonal.
pub fn two_pair_loss() -> (f64, f64) {
    let e = [1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0];
    let got = ntxent_loss(&e, 4, 2, 1.0).unwrap().0;
    let want = -(std::f64::consts::E / (std::f64::consts::E + 2.0)).ln();
    (got, want)
}

/// Matching quality of an encoder on a fixture corpus at one threshold.
#[derive(Debug, Clone, Copy)]
pub struct MatchQuality {
    pub variants: usize,
    pub matched: usize,
    pub correct: usize,
    pub safe_false_matches: usize,
    pub safe_total: usize,
}

impl MatchQuality {
    pub fn recall(&self) -> f64 {
        self.correct as f64 / self.variants as f64
    }

    pub fn attribution(&self) -> f64 {
        if self.matched == 0 {
            0.0
        } else {
            self.correct as f64 / self.matched as f64
        }
    }

    pub fn false_match_rate(&self) -> f64 {
        self.safe_false_matches as f64 / self.safe_total as f64
    }
}

/// Indexes the profane keys, then matches every 1-edit variant of every key
/// and every safe token against the index.
pub fn match_quality(params: &EncoderParams<f32>, corpus: &Corpus, threshold: f32) -> MatchQuality {
    let index = LatentIndex::build(
        corpus.profane.iter().map(String::as_str),
        params,
        params.config().proj_dim,
        HnswParams::default(),
    )
    .unwrap();
    let training: std::collections::HashSet<&str> =
        corpus.safe.iter().chain(&corpus.profane).map(String::as_str).collect();
    let mut q = MatchQuality {
        variants: 0,
        matched: 0,
        correct: 0,
        safe_false_matches: 0,
        safe_total: corpus.safe.len(),
    };
    for key in &corpus.profane {
        for v in variant_space(key, 1).unwrap() {
            assert!(!training.contains(v.as_str()), "variant {v} is a training token");
            q.variants += 1;
            if let Some(hit) = index.match_token(&v, params, threshold).unwrap() {
                q.matched += 1;
                if &hit.key == key {
                    q.correct += 1;
                }
            }
        }
    }
    for s in &corpus.safe {
        if index.match_token(s, params, threshold).unwrap().is_some() {
            q.safe_false_matches += 1;
        }
    }
    q
}

/// Random strings over a mix of scripts, symbols, digits and emoji.
pub fn random_unicode(rng: &mut impl Rng) -> String {
    const POOLS: &[(u32, u32)] = &[
        (0x20, 0x7E),
        (0xA0, 0x17F),
        (0x300, 0x36F),
        (0x391, 0x3C9),
        (0x400, 0x44F),
        (0x2000, 0x206F),
        (0x2200, 0x22FF),
        (0x2600, 0x27BF),
        (0x4E00, 0x4E80),
        (0x1F300, 0x1F6FF),
        (0x1F900, 0x1F9FF),
    ];
    let len = rng.random_range(0..40);
    (0..len)
        .map(|_| {
            if rng.random_bool(0.05) {
                // anywhere in the scalar value range
                loop {
                    if let Some(c) = char::from_u32(rng.random_range(0..0x110000)) {
                        break c;
                    }
                }
            } else {
                let (lo, hi) = POOLS[rng.random_range(0..POOLS.len())];
                char::from_u32(rng.random_range(lo..=hi)).unwrap_or('?')
            }
        })
        .collect()
}
