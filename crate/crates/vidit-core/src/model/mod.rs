//! The diffusion transformer.
//!
//! Visual tokens come from a linear patch embedding over the latent grid;
//! conditioning tokens come from a parallel embedder over the reactive
//! stream, the inactive stream, and the latent mask, whose weight blocks
//! start as copies of the patch embedding (mask block zero). Each block is
//! timestep-modulated self-attention, text cross-attention, and an MLP, all
//! behind zero-initialized gates, so a fresh model computes the zero
//! velocity field exactly.
//!
//! Two wiring modes. `FullFt` adds conditioning tokens to the noisy tokens
//! once, before the block stack, and trains everything. `Adapter` keeps the
//! main stack frozen and runs a cascade of context blocks (structural
//! copies of selected main blocks) whose outputs are injected back through
//! zero-initialized per-channel gates.
//!
//! This file owns configuration, parameters, tokenization, and positional
//! encoding; the forward graph lives in [`net`].

pub mod net;

use std::collections::BTreeMap;

use crate::codec::{CodecConfig, LatentGrid};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub use net::{build_loss, embed_context, forward, patchify, LossBuild};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    FullFt,
    Adapter,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Mode::FullFt => write!(f, "fullft"),
            Mode::Adapter => write!(f, "adapter"),
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Mode> {
        match s {
            "fullft" => Ok(Mode::FullFt),
            "adapter" => Ok(Mode::Adapter),
            other => Err(Error::Config(format!("unknown mode {:?}", other))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PlacementSpec {
    ContinuousFirst(usize),
    DistributedEven(usize),
    Explicit(Vec<usize>),
}

/// Indices of the main blocks that receive context injection, sorted.
pub fn resolve_placement(spec: &PlacementSpec, layers: usize) -> Result<Vec<usize>> {
    let check_k = |k: usize| -> Result<()> {
        if k == 0 || k > layers {
            return Err(Error::arg(
                "resolve_placement",
                format!("{} blocks requested from a {}-layer stack", k, layers),
            ));
        }
        Ok(())
    };
    match spec {
        PlacementSpec::ContinuousFirst(k) => {
            check_k(*k)?;
            Ok((0..*k).collect())
        }
        PlacementSpec::DistributedEven(k) => {
            check_k(*k)?;
            Ok((0..*k)
                .map(|i| (i as f64 * layers as f64 / *k as f64).round() as usize)
                .collect())
        }
        PlacementSpec::Explicit(list) => {
            if list.is_empty() {
                return Err(Error::arg("resolve_placement", "empty explicit placement"));
            }
            for w in list.windows(2) {
                if w[1] <= w[0] {
                    return Err(Error::arg(
                        "resolve_placement",
                        format!("indices must be strictly increasing, got {:?}", list),
                    ));
                }
            }
            if *list.last().unwrap() >= layers {
                return Err(Error::arg(
                    "resolve_placement",
                    format!("index {} out of {} layers", list.last().unwrap(), layers),
                ));
            }
            Ok(list.clone())
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    /// Patch extents over (frame, row, col) of the latent grid.
    pub patch: (usize, usize, usize),
    pub text_buckets: usize,
    pub max_text_tokens: usize,
    pub mode: Mode,
    pub placement: PlacementSpec,
    pub codec: CodecConfig,
    /// Route masked-out and masked-in frame content through separate context
    /// channels. Turning this off collapses the bundle to a single stream
    /// (the ablation arm handled by `encode_vcu_with`).
    pub decoupled: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 8,
            model_dim: 128,
            heads: 4,
            patch: (1, 2, 2),
            text_buckets: 256,
            max_text_tokens: 16,
            mode: Mode::FullFt,
            placement: PlacementSpec::DistributedEven(4),
            codec: CodecConfig::default(),
            decoupled: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("layers must be at least 1".into()));
        }
        if self.model_dim == 0 || self.heads == 0 || self.model_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} must be a positive multiple of heads {}",
                self.model_dim, self.heads
            )));
        }
        if self.model_dim % 2 != 0 {
            return Err(Error::Config("model_dim must be even for the positional code".into()));
        }
        if self.patch.0 == 0 || self.patch.1 == 0 || self.patch.2 == 0 {
            return Err(Error::Config("patch extents must be at least 1".into()));
        }
        if self.text_buckets == 0 || self.max_text_tokens == 0 {
            return Err(Error::Config("text_buckets and max_text_tokens must be positive".into()));
        }
        resolve_placement(&self.placement, self.layers)?;
        Ok(())
    }

    /// Values per visual patch: p_t * p_h * p_w * d.
    pub fn patch_payload(&self) -> usize {
        self.patch.0 * self.patch.1 * self.patch.2 * self.codec.d()
    }

    /// Values per mask patch: p_t * p_h * p_w.
    pub fn mask_payload(&self) -> usize {
        self.patch.0 * self.patch.1 * self.patch.2
    }

    /// Reserved id appended after the hash buckets.
    pub fn pad_id(&self) -> usize {
        self.text_buckets
    }

    pub fn blocks_in_context_path(&self) -> Result<usize> {
        Ok(match self.mode {
            Mode::FullFt => 0,
            Mode::Adapter => resolve_placement(&self.placement, self.layers)?.len(),
        })
    }
}

/// Prompt to a fixed-length id list: whitespace words, each hashed with
/// 64-bit FNV-1a into [0, text_buckets), truncated or padded with the
/// reserved pad id. The empty prompt is the unconditional sequence.
pub fn text_tokens(prompt: &str, cfg: &ModelConfig) -> Vec<usize> {
    let mut ids: Vec<usize> = prompt
        .split_whitespace()
        .take(cfg.max_text_tokens)
        .map(|w| {
            let mut h: u64 = 0xcbf2_9ce4_8422_2325;
            for b in w.as_bytes() {
                h ^= *b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
            (h % cfg.text_buckets as u64) as usize
        })
        .collect();
    ids.resize(cfg.max_text_tokens, cfg.pad_id());
    ids
}

/// Token indexing over a (possibly reference-prefixed) latent grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenGrid {
    pub ref_frames: usize,
    pub video_frames: usize,
    /// Patched extents.
    pub frames: usize,
    pub rows: usize,
    pub cols: usize,
    pub channels: usize,
    pub patch: (usize, usize, usize),
}

impl TokenGrid {
    pub fn from_latent(x: &LatentGrid, ref_frames: usize, cfg: &ModelConfig) -> Result<TokenGrid> {
        let (p_t, p_h, p_w) = cfg.patch;
        if ref_frames > x.frames() {
            return Err(Error::dim(
                "TokenGrid",
                format!("{} reference frames exceed {} total", ref_frames, x.frames()),
            ));
        }
        if x.frames() % p_t != 0 || x.height() % p_h != 0 || x.width() % p_w != 0 {
            return Err(Error::dim(
                "TokenGrid",
                format!(
                    "grid ({}, {}, {}) not divisible by patch ({}, {}, {})",
                    x.frames(),
                    x.height(),
                    x.width(),
                    p_t,
                    p_h,
                    p_w
                ),
            ));
        }
        Ok(TokenGrid {
            ref_frames,
            video_frames: x.frames() - ref_frames,
            frames: x.frames() / p_t,
            rows: x.height() / p_h,
            cols: x.width() / p_w,
            channels: x.channels(),
            patch: cfg.patch,
        })
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.rows * self.cols
    }

    pub fn total_tokens(&self) -> usize {
        self.frames * self.rows * self.cols
    }

    pub fn payload(&self) -> usize {
        self.patch.0 * self.patch.1 * self.patch.2 * self.channels
    }
}

/// Flatten each patch into one row: (frames, h', w', d) -> (tokens, payload).
/// Tokens run frame-major, then row, then column; the payload nests
/// (frame offset, row offset, col offset, channel). Pure rearrangement.
pub fn patch_tokens(x: &LatentGrid, grid: &TokenGrid) -> Tensor {
    let (p_t, p_h, p_w) = grid.patch;
    let (hl, wl, d) = (x.height(), x.width(), x.channels());
    let payload = grid.payload();
    let src = x.tensor().data();
    let mut out = vec![0.0f32; grid.total_tokens() * payload];
    let mut token = 0usize;
    for tf in 0..grid.frames {
        for r in 0..grid.rows {
            for c in 0..grid.cols {
                let row = &mut out[token * payload..(token + 1) * payload];
                let mut k = 0usize;
                for dt in 0..p_t {
                    for dy in 0..p_h {
                        for dx in 0..p_w {
                            let cell =
                                (((tf * p_t + dt) * hl + r * p_h + dy) * wl + c * p_w + dx) * d;
                            row[k..k + d].copy_from_slice(&src[cell..cell + d]);
                            k += d;
                        }
                    }
                }
                token += 1;
            }
        }
    }
    Tensor::from_vec(&[grid.total_tokens(), payload], out).expect("layout fixed above")
}

/// Exact inverse of [`patch_tokens`].
pub fn unpatch_tokens(tokens: &Tensor, grid: &TokenGrid) -> Result<LatentGrid> {
    let payload = grid.payload();
    if tokens.shape() != [grid.total_tokens(), payload] {
        return Err(Error::dim(
            "unpatch_tokens",
            format!(
                "tokens {:?}, grid wants ({}, {})",
                tokens.shape(),
                grid.total_tokens(),
                payload
            ),
        ));
    }
    let (p_t, p_h, p_w) = grid.patch;
    let (fl, hl, wl, d) =
        (grid.frames * p_t, grid.rows * p_h, grid.cols * p_w, grid.channels);
    let src = tokens.data();
    let mut out = vec![0.0f32; fl * hl * wl * d];
    let mut token = 0usize;
    for tf in 0..grid.frames {
        for r in 0..grid.rows {
            for c in 0..grid.cols {
                let row = &src[token * payload..(token + 1) * payload];
                let mut k = 0usize;
                for dt in 0..p_t {
                    for dy in 0..p_h {
                        for dx in 0..p_w {
                            let cell =
                                (((tf * p_t + dt) * hl + r * p_h + dy) * wl + c * p_w + dx) * d;
                            out[cell..cell + d].copy_from_slice(&row[k..k + d]);
                            k += d;
                        }
                    }
                }
                token += 1;
            }
        }
    }
    LatentGrid::new(Tensor::from_vec(&[fl, hl, wl, d], out)?)
}

/// Additive positional code, shape (tokens, D). Channel pairs are assigned
/// round-robin to the (frame, row, col) coordinates of the token; pair j
/// encodes its coordinate p as (sin, cos) of p / 10000^(2j/D). Reference
/// frames sit at the leading frame indices, so no separate scheme is
/// needed for them.
pub fn positional_code(grid: &TokenGrid, model_dim: usize) -> Tensor {
    let pairs = model_dim / 2;
    let mut out = vec![0.0f32; grid.total_tokens() * model_dim];
    let mut token = 0usize;
    for f in 0..grid.frames {
        for r in 0..grid.rows {
            for c in 0..grid.cols {
                let row = &mut out[token * model_dim..(token + 1) * model_dim];
                for j in 0..pairs {
                    let pos = match j % 3 {
                        0 => f,
                        1 => r,
                        _ => c,
                    } as f64;
                    let theta = pos / 10000f64.powf(2.0 * j as f64 / model_dim as f64);
                    row[2 * j] = theta.sin() as f32;
                    row[2 * j + 1] = theta.cos() as f32;
                }
                token += 1;
            }
        }
    }
    Tensor::from_vec(&[grid.total_tokens(), model_dim], out).expect("layout fixed above")
}

/// Sinusoidal features of the diffusion time, shape (1, D). The time is
/// scaled by 1000 so the frequency ladder covers [0, 1] usefully.
pub fn time_features(t: f64, model_dim: usize) -> Tensor {
    let pairs = model_dim / 2;
    let mut out = vec![0.0f32; model_dim];
    for j in 0..pairs {
        let theta = t * 1000.0 / 10000f64.powf(2.0 * j as f64 / model_dim as f64);
        out[2 * j] = theta.sin() as f32;
        out[2 * j + 1] = theta.cos() as f32;
    }
    Tensor::from_vec(&[1, model_dim], out).expect("layout fixed above")
}

/// Named parameters with per-name trainable flags. Iteration order is the
/// name order, which keeps update loops and serialization deterministic.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, (Tensor, bool)>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: &str, t: Tensor, trainable: bool) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::arg("ParamStore", format!("duplicate parameter {}", name)));
        }
        self.entries.insert(name.to_string(), (t, trainable));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|(t, _)| t)
            .ok_or_else(|| Error::arg("ParamStore", format!("unknown parameter {}", name)))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .map(|(t, _)| t)
            .ok_or_else(|| Error::arg("ParamStore", format!("unknown parameter {}", name)))
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.entries.get(name).map(|(_, f)| *f).unwrap_or(false)
    }

    pub fn set_trainable(&mut self, name: &str, flag: bool) -> Result<()> {
        self.entries
            .get_mut(name)
            .map(|(_, f)| *f = flag)
            .ok_or_else(|| Error::arg("ParamStore", format!("unknown parameter {}", name)))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor, bool)> {
        self.entries.iter().map(|(n, (t, f))| (n.as_str(), t, *f))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn total_values(&self) -> usize {
        self.entries.values().map(|(t, _)| t.numel()).sum()
    }
}

/// Names of the parameters updated by training under this config.
pub fn trainable_mask(cfg: &ModelConfig, params: &ParamStore) -> Vec<String> {
    params
        .names()
        .filter(|n| name_is_trainable(cfg, n))
        .map(str::to_string)
        .collect()
}

fn name_is_trainable(cfg: &ModelConfig, name: &str) -> bool {
    match cfg.mode {
        Mode::FullFt => true,
        Mode::Adapter => name.starts_with("ctx_embed.") || name.starts_with("ctx_block"),
    }
}

// Query/key/value projections carry no bias: a shared key bias shifts every
// attention score in a row equally and cancels in the softmax, leaving a
// parameter with an identically zero gradient.
fn block_names(prefix: &str) -> Vec<(String, &'static str)> {
    let mut out = Vec::new();
    for part in ["attn", "xattn"] {
        for w in ["wq", "wk", "wv", "wo"] {
            out.push((format!("{}.{}.{}", prefix, part, w), "attn_w"));
        }
        out.push((format!("{}.{}.bo", prefix, part), "attn_b"));
    }
    out.push((format!("{}.mlp.w1", prefix), "mlp_w1"));
    out.push((format!("{}.mlp.b1", prefix), "mlp_b1"));
    out.push((format!("{}.mlp.w2", prefix), "mlp_w2"));
    out.push((format!("{}.mlp.b2", prefix), "mlp_b2"));
    out.push((format!("{}.adaln.weight", prefix), "adaln_w"));
    out.push((format!("{}.adaln.bias", prefix), "adaln_b"));
    out
}

/// Fresh parameters. Weight matrices draw from N(0, 1/sqrt(fan_in)) in a
/// fixed documented order (patch embedding, text table, time MLP, then the
/// main blocks front to back); every bias, every modulation head, the mask
/// embedding block, the final projection, and every injection gate start
/// at zero; the context embedder and the context blocks start as copies.
pub fn init_params(cfg: &ModelConfig, rng: &mut Rng) -> Result<ParamStore> {
    cfg.validate()?;
    let d = cfg.model_dim;
    let p = cfg.patch_payload();
    let mut ps = ParamStore::new();

    let w_std = |fan_in: usize| 1.0 / (fan_in as f32).sqrt();
    ps.insert("patchify.weight", Tensor::randn(&[p, d], w_std(p), rng), true)?;
    ps.insert("patchify.bias", Tensor::zeros(&[d]), true)?;

    ps.insert(
        "text_embed.table",
        Tensor::randn(&[cfg.text_buckets + 1, d], 0.02, rng), // pad row included
        true,
    )?;

    ps.insert("time_embed.w1", Tensor::randn(&[d, d], w_std(d), rng), true)?;
    ps.insert("time_embed.b1", Tensor::zeros(&[d]), true)?;
    ps.insert("time_embed.w2", Tensor::randn(&[d, d], w_std(d), rng), true)?;
    ps.insert("time_embed.b2", Tensor::zeros(&[d]), true)?;

    for i in 0..cfg.layers {
        let prefix = format!("main_block{:02}", i);
        for (name, kind) in block_names(&prefix) {
            let t = match kind {
                "attn_w" => Tensor::randn(&[d, d], w_std(d), rng),
                "attn_b" => Tensor::zeros(&[d]),
                "mlp_w1" => Tensor::randn(&[d, 4 * d], w_std(d), rng),
                "mlp_b1" => Tensor::zeros(&[4 * d]),
                "mlp_w2" => Tensor::randn(&[4 * d, d], w_std(4 * d), rng),
                "mlp_b2" => Tensor::zeros(&[d]),
                "adaln_w" => Tensor::zeros(&[d, 9 * d]),
                _ => Tensor::zeros(&[9 * d]),
            };
            ps.insert(&name, t, true)?;
        }
    }

    ps.insert("final.adaln.weight", Tensor::zeros(&[d, 2 * d]), true)?;
    ps.insert("final.adaln.bias", Tensor::zeros(&[2 * d]), true)?;
    ps.insert("final.proj.weight", Tensor::zeros(&[d, p]), true)?;
    ps.insert("final.proj.bias", Tensor::zeros(&[p]), true)?;

    // Context embedder: content blocks copy the patch embedding, the mask
    // block is zero so the mask channel is initially silent.
    ps.insert("ctx_embed.w_c", ps.get("patchify.weight")?.clone(), true)?;
    ps.insert("ctx_embed.w_k", ps.get("patchify.weight")?.clone(), true)?;
    ps.insert("ctx_embed.w_m", Tensor::zeros(&[cfg.mask_payload(), d]), true)?;
    ps.insert("ctx_embed.bias", ps.get("patchify.bias")?.clone(), true)?;

    if cfg.mode == Mode::Adapter {
        return attach_adapter(&ps, cfg);
    }

    for name in params_named(&ps) {
        let flag = name_is_trainable(cfg, &name);
        ps.set_trainable(&name, flag)?;
    }
    Ok(ps)
}

/// Bolts a context branch onto an existing base store: each context block
/// starts as a copy of the main block it injects after, with a zero gate, so
/// the combined model's output is bitwise the base model's output until the
/// gates move. The base may be freshly initialized or already trained; its
/// values are carried over untouched. Trainable flags are reset so that only
/// the context embedder and context blocks learn.
pub fn attach_adapter(base: &ParamStore, cfg: &ModelConfig) -> Result<ParamStore> {
    if cfg.mode != Mode::Adapter {
        return Err(Error::arg("attach_adapter", "config must be in adapter mode"));
    }
    cfg.validate()?;
    if base.names().any(|n| n.starts_with("ctx_block")) {
        return Err(Error::arg("attach_adapter", "store already carries context blocks"));
    }
    let mut ps = base.clone();
    let placement = resolve_placement(&cfg.placement, cfg.layers)?;
    for (j, &src) in placement.iter().enumerate() {
        let src_prefix = format!("main_block{:02}", src);
        let dst_prefix = format!("ctx_block{:02}", j);
        for (name, _) in block_names(&src_prefix) {
            let copied = ps.get(&name)?.clone();
            ps.insert(&name.replacen(&src_prefix, &dst_prefix, 1), copied, true)?;
        }
        ps.insert(&format!("{}.inject_gate", dst_prefix), Tensor::zeros(&[cfg.model_dim]), true)?;
    }

    for name in params_named(&ps) {
        let flag = name_is_trainable(cfg, &name);
        ps.set_trainable(&name, flag)?;
    }
    Ok(ps)
}

fn params_named(ps: &ParamStore) -> Vec<String> {
    ps.names().map(str::to_string).collect()
}
