//! Character-level token encoder.
//!
//! ```text
//! ids[24] -> embedding -> gated recurrent layer x3 -> h at step 24
//!         -> batch norm -> dropout -> ReLU(W x + b) -> 64-d embedding
//! ```
//!
//! Every time step is processed, padding included. Activations are laid out
//! time-major: row `t * batch + b`.

mod io;
pub mod linalg;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use io::{fingerprint, load_params, load_params_expecting, save_params, WeightsError};
use linalg::{gemm, sigmoid, Matrix, Op, Scalar};

use crate::chardomain::{CharSeq, ALPHABET_SIZE, SEQ_LEN};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EncoderError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("backward called with a batch or mode that does not match the cached forward pass")]
    StaleCache,
    #[error("invalid encoder config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub alphabet_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub proj_dim: usize,
    pub dropout_rate: f64,
    pub seq_len: usize,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            alphabet_size: ALPHABET_SIZE,
            embed_dim: 32,
            hidden_dim: 128,
            num_layers: 3,
            proj_dim: 64,
            dropout_rate: 0.2,
            seq_len: SEQ_LEN,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }
}

impl EncoderConfig {
    /// Small shapes for gradient checks.
    pub fn tiny() -> Self {
        Self {
            embed_dim: 4,
            hidden_dim: 8,
            proj_dim: 6,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        let err = |m: &str| Err(EncoderError::Config(m.to_owned()));
        if self.alphabet_size != ALPHABET_SIZE {
            return err("alphabet_size must be 31");
        }
        if self.seq_len != SEQ_LEN {
            return err("seq_len must be 24");
        }
        if self.embed_dim == 0 || self.hidden_dim == 0 || self.num_layers == 0 || self.proj_dim == 0 {
            return err("all dimensions must be at least 1");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return err("dropout_rate must be in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) || self.bn_eps <= 0.0 {
            return err("bad batch-norm constants");
        }
        Ok(())
    }

    fn layer_input(&self, layer: usize) -> usize {
        if layer == 0 {
            self.embed_dim
        } else {
            self.hidden_dim
        }
    }

    /// Number of trainable scalars.
    pub fn param_count(&self) -> usize {
        Layout::new(self).total
    }
}

/// Offsets of each trainable tensor inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub embedding: Slot,
    pub layers: Vec<LayerSlots>,
    pub bn_gamma: Slot,
    pub bn_beta: Slot,
    pub proj_w: Slot,
    pub proj_b: Slot,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSlots {
    /// `[4H × In]`, gate order input, forget, candidate, output.
    pub w_ih: Slot,
    /// `[4H × H]`.
    pub w_hh: Slot,
    /// `[4H]`.
    pub bias: Slot,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Slot {
    pub name: String,
    pub dims: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

impl Slot {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }
}

impl Layout {
    pub fn new(cfg: &EncoderConfig) -> Self {
        let mut offset = 0;
        let mut slot = |name: String, dims: Vec<usize>| {
            let len = dims.iter().product();
            let s = Slot {
                name,
                dims,
                offset,
                len,
            };
            offset += len;
            s
        };
        let h = cfg.hidden_dim;
        let embedding = slot("embedding".into(), vec![cfg.alphabet_size, cfg.embed_dim]);
        let layers = (0..cfg.num_layers)
            .map(|l| LayerSlots {
                w_ih: slot(format!("layer{l}.w_ih"), vec![4 * h, cfg.layer_input(l)]),
                w_hh: slot(format!("layer{l}.w_hh"), vec![4 * h, h]),
                bias: slot(format!("layer{l}.bias"), vec![4 * h]),
            })
            .collect();
        let bn_gamma = slot("bn.gamma".into(), vec![h]);
        let bn_beta = slot("bn.beta".into(), vec![h]);
        let proj_w = slot("proj.w".into(), vec![h, cfg.proj_dim]);
        let proj_b = slot("proj.b".into(), vec![cfg.proj_dim]);
        Self {
            embedding,
            layers,
            bn_gamma,
            bn_beta,
            proj_w,
            proj_b,
            total: offset,
        }
    }

    /// All trainable slots in storage order.
    pub fn slots(&self) -> Vec<&Slot> {
        let mut out = vec![&self.embedding];
        for l in &self.layers {
            out.extend([&l.w_ih, &l.w_hh, &l.bias]);
        }
        out.extend([&self.bn_gamma, &self.bn_beta, &self.proj_w, &self.proj_b]);
        out
    }
}

/// Trainable weights plus batch-norm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<T> {
    config: EncoderConfig,
    layout: Layout,
    pub weights: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

impl<T: Scalar> EncoderParams<T> {
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self, EncoderError> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut w = vec![T::zero(); layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |slot: &Slot, bound: f64, w: &mut [T]| {
            for v in &mut w[slot.range()] {
                *v = T::lit(rng.random_range(-bound..=bound));
            }
        };
        let xavier = |fan_in: usize, fan_out: usize| (6.0 / (fan_in + fan_out) as f64).sqrt();
        fill(&layout.embedding, xavier(config.alphabet_size, config.embed_dim), &mut w);
        let h = config.hidden_dim;
        let rec = 1.0 / (h as f64).sqrt();
        for l in &layout.layers {
            fill(&l.w_ih, rec, &mut w);
            fill(&l.w_hh, rec, &mut w);
            for v in &mut w[l.bias.offset + h..l.bias.offset + 2 * h] {
                *v = T::one();
            }
        }
        w[layout.bn_gamma.range()].iter_mut().for_each(|v| *v = T::one());
        fill(&layout.proj_w, xavier(h, config.proj_dim), &mut w);
        Ok(Self {
            running_mean: vec![T::zero(); h],
            running_var: vec![T::one(); h],
            weights: w,
            layout,
            config,
        })
    }

    pub(crate) fn from_parts(
        config: EncoderConfig,
        weights: Vec<T>,
        running_mean: Vec<T>,
        running_var: Vec<T>,
    ) -> Result<Self, EncoderError> {
        config.validate()?;
        let layout = Layout::new(&config);
        let h = config.hidden_dim;
        if weights.len() != layout.total || running_mean.len() != h || running_var.len() != h {
            return Err(EncoderError::Shape("parameter sizes do not match config".into()));
        }
        Ok(Self {
            config,
            layout,
            weights,
            running_mean,
            running_var,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn tensor(&self, slot: &Slot) -> &[T] {
        &self.weights[slot.range()]
    }

    pub fn is_finite(&self) -> bool {
        self.weights
            .iter()
            .chain(&self.running_mean)
            .chain(&self.running_var)
            .all(|v| v.is_finite())
            && self.running_var.iter().all(|v| *v > T::zero())
    }

    pub fn cast<U: Scalar>(&self) -> EncoderParams<U> {
        let c = |v: &Vec<T>| v.iter().map(|x| U::from_f64(x.to_f64().unwrap()).unwrap()).collect();
        EncoderParams {
            config: self.config.clone(),
            layout: self.layout.clone(),
            weights: c(&self.weights),
            running_mean: c(&self.running_mean),
            running_var: c(&self.running_var),
        }
    }

    /// Folds the batch statistics of a training forward pass into the
    /// running estimates.
    pub fn update_running_stats(&mut self, cache: &ForwardCache<T>) {
        let ForwardMode::Train { .. } = cache.mode else {
            return;
        };
        let m = T::lit(self.config.bn_momentum);
        let b = cache.batch;
        let unbias = if b > 1 {
            T::lit(b as f64 / (b - 1) as f64)
        } else {
            T::one()
        };
        for j in 0..self.config.hidden_dim {
            self.running_mean[j] = (T::one() - m) * self.running_mean[j] + m * cache.bn_mean[j];
            self.running_var[j] =
                (T::one() - m) * self.running_var[j] + m * cache.bn_var[j] * unbias;
        }
    }

    /// Embeds tokens in inference mode.
    pub fn embed(&self, batch: &[CharSeq]) -> Result<Matrix<T>, EncoderError> {
        forward(batch, self, ForwardMode::Infer).map(|(z, _)| z)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    /// Batch statistics, seeded dropout, cache usable for backward.
    Train { dropout_seed: u64 },
    /// Batch statistics, no dropout.
    Validate,
    /// Running statistics, no dropout.
    Infer,
}

#[derive(Debug, Clone)]
struct LayerCache<T> {
    input: Vec<T>,
    /// Activated gates `[i f g o]` per row.
    gates: Vec<T>,
    c: Vec<T>,
    tanh_c: Vec<T>,
    h: Vec<T>,
}

/// Activations kept from a forward pass for the matching backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    mode: ForwardMode,
    ids: Vec<[u8; SEQ_LEN]>,
    batch: usize,
    layers: Vec<LayerCache<T>>,
    bn_mean: Vec<T>,
    bn_var: Vec<T>,
    bn_inv_std: Vec<T>,
    xhat: Vec<T>,
    /// Dropout multipliers (0 or 1/(1-p)); empty when dropout is off.
    mask: Vec<T>,
    /// Input of the projection (after dropout).
    proj_in: Vec<T>,
    pre_relu: Vec<T>,
}

fn check_finite<T: Scalar>(v: &[T], what: &'static str) -> Result<(), EncoderError> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(EncoderError::NonFinite(what))
    }
}

/// Runs the encoder over a batch. Returns `[batch × proj_dim]` embeddings.
pub fn forward<T: Scalar>(
    batch: &[CharSeq],
    params: &EncoderParams<T>,
    mode: ForwardMode,
) -> Result<(Matrix<T>, ForwardCache<T>), EncoderError> {
    let cfg = &params.config;
    let lay = &params.layout;
    let b = batch.len();
    if b == 0 {
        return Err(EncoderError::Shape("empty batch".into()));
    }
    let (s, e, h, p) = (cfg.seq_len, cfg.embed_dim, cfg.hidden_dim, cfg.proj_dim);
    let w = &params.weights;

    // embedding lookup, time-major
    let emb = &w[lay.embedding.range()];
    let mut x = vec![T::zero(); s * b * e];
    for t in 0..s {
        for (bi, seq) in batch.iter().enumerate() {
            let id = seq.ids()[t] as usize;
            x[(t * b + bi) * e..(t * b + bi + 1) * e].copy_from_slice(&emb[id * e..(id + 1) * e]);
        }
    }

    let mut layers = Vec::with_capacity(cfg.num_layers);
    let mut input = x;
    for (l, slots) in lay.layers.iter().enumerate() {
        let in_dim = cfg.layer_input(l);
        let w_ih = &w[slots.w_ih.range()];
        let w_hh = &w[slots.w_hh.range()];
        let bias = &w[slots.bias.range()];
        let g4 = 4 * h;
        let mut gates = vec![T::zero(); s * b * g4];
        for row in gates.chunks_exact_mut(g4) {
            row.copy_from_slice(bias);
        }
        gemm(Op::N, Op::T, s * b, g4, in_dim, &input, w_ih, T::one(), &mut gates);
        let mut c = vec![T::zero(); s * b * h];
        let mut tanh_c = vec![T::zero(); s * b * h];
        let mut hs = vec![T::zero(); s * b * h];
        for t in 0..s {
            let rows = t * b..(t + 1) * b;
            if t > 0 {
                let (prev, _) = hs.split_at(t * b * h);
                let h_prev = &prev[(t - 1) * b * h..];
                gemm(
                    Op::N,
                    Op::T,
                    b,
                    g4,
                    h,
                    h_prev,
                    w_hh,
                    T::one(),
                    &mut gates[rows.start * g4..rows.end * g4],
                );
            }
            for r in rows {
                let g = &mut gates[r * g4..(r + 1) * g4];
                for j in 0..h {
                    g[j] = sigmoid(g[j]);
                    g[h + j] = sigmoid(g[h + j]);
                    g[2 * h + j] = g[2 * h + j].tanh();
                    g[3 * h + j] = sigmoid(g[3 * h + j]);
                }
                for j in 0..h {
                    let c_prev = if t > 0 { c[(r - b) * h + j] } else { T::zero() };
                    let cv = g[h + j] * c_prev + g[j] * g[2 * h + j];
                    let tc = cv.tanh();
                    c[r * h + j] = cv;
                    tanh_c[r * h + j] = tc;
                    hs[r * h + j] = g[3 * h + j] * tc;
                }
            }
        }
        check_finite(&c, "recurrent cell state")?;
        let next = hs.clone();
        layers.push(LayerCache {
            input,
            gates,
            c,
            tanh_c,
            h: hs,
        });
        input = next;
    }

    // last step of the top layer
    let y = &input[(s - 1) * b * h..];
    let gamma = &w[lay.bn_gamma.range()];
    let beta = &w[lay.bn_beta.range()];
    let eps = T::lit(cfg.bn_eps);
    let (mean, var) = match mode {
        ForwardMode::Infer => (params.running_mean.clone(), params.running_var.clone()),
        _ => {
            let nb = T::lit(b as f64);
            let mut mean = vec![T::zero(); h];
            let mut var = vec![T::zero(); h];
            for row in y.chunks_exact(h) {
                for j in 0..h {
                    mean[j] = mean[j] + row[j];
                }
            }
            mean.iter_mut().for_each(|m| *m = *m / nb);
            for row in y.chunks_exact(h) {
                for j in 0..h {
                    let d = row[j] - mean[j];
                    var[j] = var[j] + d * d;
                }
            }
            var.iter_mut().for_each(|v| *v = *v / nb);
            (mean, var)
        }
    };
    let inv_std: Vec<T> = var.iter().map(|v| T::one() / (*v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); b * h];
    let mut proj_in = vec![T::zero(); b * h];
    for r in 0..b {
        for j in 0..h {
            let xh = (y[r * h + j] - mean[j]) * inv_std[j];
            xhat[r * h + j] = xh;
            proj_in[r * h + j] = gamma[j] * xh + beta[j];
        }
    }
    let mut mask = Vec::new();
    if let ForwardMode::Train { dropout_seed } = mode {
        if cfg.dropout_rate > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
            let keep = T::lit(1.0 / (1.0 - cfg.dropout_rate));
            mask = (0..b * h)
                .map(|_| {
                    if rng.random_bool(cfg.dropout_rate) {
                        T::zero()
                    } else {
                        keep
                    }
                })
                .collect();
            proj_in.iter_mut().zip(&mask).for_each(|(v, m)| *v = *v * *m);
        }
    }

    let proj_w = &w[lay.proj_w.range()];
    let proj_b = &w[lay.proj_b.range()];
    let mut pre = vec![T::zero(); b * p];
    for row in pre.chunks_exact_mut(p) {
        row.copy_from_slice(proj_b);
    }
    gemm(Op::N, Op::N, b, p, h, &proj_in, proj_w, T::one(), &mut pre);
    check_finite(&pre, "projection")?;
    let z: Vec<T> = pre.iter().map(|v| v.max(T::zero())).collect();

    let cache = ForwardCache {
        mode,
        ids: batch.iter().map(|s| *s.ids()).collect(),
        batch: b,
        layers,
        bn_mean: mean,
        bn_var: var,
        bn_inv_std: inv_std,
        xhat,
        mask,
        proj_in,
        pre_relu: pre,
    };
    Ok((Matrix::from_vec(b, p, z), cache))
}

/// Backpropagation through the projection, batch norm and all recurrent
/// layers and time steps. `upstream` is dL/dz, `[batch × proj_dim]`.
/// Returns gradients laid out like [`EncoderParams::weights`].
pub fn backward<T: Scalar>(
    batch: &[CharSeq],
    params: &EncoderParams<T>,
    cache: &ForwardCache<T>,
    upstream: &Matrix<T>,
) -> Result<Vec<T>, EncoderError> {
    let cfg = &params.config;
    let lay = &params.layout;
    let b = cache.batch;
    let (s, e, h, p) = (cfg.seq_len, cfg.embed_dim, cfg.hidden_dim, cfg.proj_dim);
    let ForwardMode::Train { .. } = cache.mode else {
        return Err(EncoderError::StaleCache);
    };
    if batch.len() != b || batch.iter().zip(&cache.ids).any(|(seq, ids)| seq.ids() != ids) {
        return Err(EncoderError::StaleCache);
    }
    if upstream.rows != b || upstream.cols != p {
        return Err(EncoderError::Shape(format!(
            "upstream gradient is {}x{}, expected {b}x{p}",
            upstream.rows, upstream.cols
        )));
    }
    let w = &params.weights;
    let mut grad = vec![T::zero(); lay.total];

    // ReLU
    let d_pre: Vec<T> = upstream
        .data
        .iter()
        .zip(&cache.pre_relu)
        .map(|(g, x)| if *x > T::zero() { *g } else { T::zero() })
        .collect();
    // projection
    {
        let gb = &mut grad[lay.proj_b.range()];
        for row in d_pre.chunks_exact(p) {
            for (acc, v) in gb.iter_mut().zip(row) {
                *acc = *acc + *v;
            }
        }
    }
    gemm(
        Op::T,
        Op::N,
        h,
        p,
        b,
        &cache.proj_in,
        &d_pre,
        T::zero(),
        &mut grad[lay.proj_w.range()],
    );
    let mut d_bn = vec![T::zero(); b * h];
    gemm(Op::N, Op::T, b, h, p, &d_pre, &w[lay.proj_w.range()], T::zero(), &mut d_bn);
    if !cache.mask.is_empty() {
        d_bn.iter_mut().zip(&cache.mask).for_each(|(g, m)| *g = *g * *m);
    }
    // batch norm with batch statistics
    let gamma = &w[lay.bn_gamma.range()];
    let nb = T::lit(b as f64);
    let mut sum_dxhat = vec![T::zero(); h];
    let mut sum_dxhat_xhat = vec![T::zero(); h];
    {
        let (gg, gbeta) = {
            let (lo, hi) = grad.split_at_mut(lay.bn_beta.offset);
            (&mut lo[lay.bn_gamma.range()], &mut hi[..h])
        };
        for r in 0..b {
            for j in 0..h {
                let d = d_bn[r * h + j];
                let xh = cache.xhat[r * h + j];
                gg[j] = gg[j] + d * xh;
                gbeta[j] = gbeta[j] + d;
                let dxh = d * gamma[j];
                sum_dxhat[j] = sum_dxhat[j] + dxh;
                sum_dxhat_xhat[j] = sum_dxhat_xhat[j] + dxh * xh;
            }
        }
    }
    let mut dy = vec![T::zero(); b * h];
    for r in 0..b {
        for j in 0..h {
            let dxh = d_bn[r * h + j] * gamma[j];
            let xh = cache.xhat[r * h + j];
            dy[r * h + j] =
                cache.bn_inv_std[j] / nb * (nb * dxh - sum_dxhat[j] - xh * sum_dxhat_xhat[j]);
        }
    }

    // recurrent stack, top down
    let mut dh_all = vec![T::zero(); s * b * h];
    dh_all[(s - 1) * b * h..].copy_from_slice(&dy);
    let g4 = 4 * h;
    for l in (0..cfg.num_layers).rev() {
        let lc = &cache.layers[l];
        let slots = &lay.layers[l];
        let in_dim = cfg.layer_input(l);
        let w_hh = &w[slots.w_hh.range()];
        let mut d_gates = vec![T::zero(); s * b * g4];
        let mut dh_next = vec![T::zero(); b * h];
        let mut dc_next = vec![T::zero(); b * h];
        for t in (0..s).rev() {
            for bi in 0..b {
                let r = t * b + bi;
                let g = &lc.gates[r * g4..(r + 1) * g4];
                let dg = &mut d_gates[r * g4..(r + 1) * g4];
                for j in 0..h {
                    let (i_g, f_g, c_g, o_g) = (g[j], g[h + j], g[2 * h + j], g[3 * h + j]);
                    let tc = lc.tanh_c[r * h + j];
                    let dh = dh_all[r * h + j] + dh_next[bi * h + j];
                    let dc = dc_next[bi * h + j] + dh * o_g * (T::one() - tc * tc);
                    let c_prev = if t > 0 { lc.c[(r - b) * h + j] } else { T::zero() };
                    dg[j] = dc * c_g * i_g * (T::one() - i_g);
                    dg[h + j] = dc * c_prev * f_g * (T::one() - f_g);
                    dg[2 * h + j] = dc * i_g * (T::one() - c_g * c_g);
                    dg[3 * h + j] = dh * tc * o_g * (T::one() - o_g);
                    dc_next[bi * h + j] = dc * f_g;
                }
            }
            gemm(
                Op::N,
                Op::N,
                b,
                h,
                g4,
                &d_gates[t * b * g4..(t + 1) * b * g4],
                w_hh,
                T::zero(),
                &mut dh_next,
            );
        }
        // dW_hh = sum_{t>=1} dG_t^T h_{t-1}
        if s > 1 {
            gemm(
                Op::T,
                Op::N,
                g4,
                h,
                (s - 1) * b,
                &d_gates[b * g4..],
                &lc.h[..(s - 1) * b * h],
                T::zero(),
                &mut grad[slots.w_hh.range()],
            );
        }
        gemm(
            Op::T,
            Op::N,
            g4,
            in_dim,
            s * b,
            &d_gates,
            &lc.input,
            T::zero(),
            &mut grad[slots.w_ih.range()],
        );
        {
            let gb = &mut grad[slots.bias.range()];
            for row in d_gates.chunks_exact(g4) {
                for (acc, v) in gb.iter_mut().zip(row) {
                    *acc = *acc + *v;
                }
            }
        }
        let mut dx = vec![T::zero(); s * b * in_dim];
        gemm(
            Op::N,
            Op::N,
            s * b,
            in_dim,
            g4,
            &d_gates,
            &w[slots.w_ih.range()],
            T::zero(),
            &mut dx,
        );
        dh_all = dx;
    }

    // embedding rows
    let ge = &mut grad[lay.embedding.range()];
    for t in 0..s {
        for bi in 0..b {
            let id = cache.ids[bi][t] as usize;
            let src = &dh_all[(t * b + bi) * e..(t * b + bi + 1) * e];
            for (acc, v) in ge[id * e..(id + 1) * e].iter_mut().zip(src) {
                *acc = *acc + *v;
            }
        }
    }
    check_finite(&grad, "gradients")?;
    Ok(grad)
}
