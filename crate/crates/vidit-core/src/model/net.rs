//! Forward graph assembly.
//!
//! One `Assembler` builds a complete compute graph per call: parameters
//! enter as gradient-tracked leaves when trainable (constants otherwise,
//! which prunes their backward paths), inputs enter as constants. The same
//! assembly serves inference ([`forward`]) and training ([`build_loss`]);
//! the latter also accepts per-parameter f64 overrides so finite-difference
//! probes can perturb a single tensor without touching the store.

use std::collections::BTreeMap;

use crate::codec::{LatentBundle, LatentGrid};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::{
    patch_tokens, positional_code, time_features, Mode, ModelConfig, ParamStore, TokenGrid,
    resolve_placement,
};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub struct LossBuild<T: Scalar> {
    pub graph: Graph<T>,
    pub loss: Var,
    pub pred: Var,
    /// Trainable parameters that entered the graph, by name.
    pub leaves: BTreeMap<String, Var>,
}

struct Assembler<'a, T: Scalar> {
    g: Graph<T>,
    params: &'a ParamStore,
    cfg: &'a ModelConfig,
    placement: Vec<usize>,
    vars: BTreeMap<String, Var>,
    leaves: BTreeMap<String, Var>,
    overrides: Option<&'a BTreeMap<String, Vec<f64>>>,
    /// Inference graphs track no gradients at all.
    inference: bool,
    ln_affine: Option<(Var, Var)>,
}

impl<'a, T: Scalar> Assembler<'a, T> {
    fn new(
        params: &'a ParamStore,
        cfg: &'a ModelConfig,
        overrides: Option<&'a BTreeMap<String, Vec<f64>>>,
        inference: bool,
    ) -> Result<Self> {
        cfg.validate()?;
        let placement = match cfg.mode {
            Mode::FullFt => Vec::new(),
            Mode::Adapter => resolve_placement(&cfg.placement, cfg.layers)?,
        };
        Ok(Assembler {
            g: Graph::new(),
            params,
            cfg,
            placement,
            vars: BTreeMap::new(),
            leaves: BTreeMap::new(),
            overrides,
            inference,
            ln_affine: None,
        })
    }

    fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let t = self.params.get(name)?;
        let trainable = !self.inference && self.params.is_trainable(name);
        let var = if let Some(data) = self.overrides.and_then(|m| m.get(name)) {
            if data.len() != t.numel() {
                return Err(Error::arg(
                    "override",
                    format!("{} values for {} ({} elements)", data.len(), name, t.numel()),
                ));
            }
            let conv: Vec<T> = data.iter().map(|&x| T::from_f64(x)).collect();
            self.g.leaf_owned(t.shape(), conv, trainable)?
        } else {
            self.g.leaf(t, trainable)
        };
        self.vars.insert(name.to_string(), var);
        if trainable {
            self.leaves.insert(name.to_string(), var);
        }
        Ok(var)
    }

    fn linear(&mut self, x: Var, w: &str, b: &str) -> Result<Var> {
        let wv = self.param(w)?;
        let bv = self.param(b)?;
        let mm = self.g.matmul(x, wv)?;
        self.g.add_row(mm, bv)
    }

    /// Layer norm without learned affine; shifts and scales come from the
    /// timestep modulation instead.
    fn ln(&mut self, x: Var) -> Result<Var> {
        let (gamma, beta) = match self.ln_affine {
            Some(pair) => pair,
            None => {
                let d = self.cfg.model_dim;
                let gamma = self.g.constant(&Tensor::full(&[d], 1.0));
                let beta = self.g.constant(&Tensor::zeros(&[d]));
                self.ln_affine = Some((gamma, beta));
                (gamma, beta)
            }
        };
        self.g.layer_norm(x, gamma, beta)
    }

    /// x * (1 + scale) + shift, rows broadcast over tokens.
    fn modulate(&mut self, x: Var, shift: Var, scale: Var) -> Result<Var> {
        let one_plus = self.g.add_scalar(scale, 1.0);
        let scaled = self.g.mul_row(x, one_plus)?;
        self.g.add_row(scaled, shift)
    }

    /// The first `n` rows of the modulation head's output, each rank-1 (D).
    fn modulation(&mut self, adaln: &str, tau: Var, n: usize) -> Result<Vec<Var>> {
        let w = self.param(&format!("{}.weight", adaln))?;
        let b = self.param(&format!("{}.bias", adaln))?;
        let mm = self.g.matmul(tau, w)?;
        let m = self.g.add_row(mm, b)?;
        let d = self.cfg.model_dim;
        let mut rows = Vec::with_capacity(n);
        for j in 0..n {
            let s = self.g.slice(m, 1, j * d, d)?;
            rows.push(self.g.reshape(s, &[d])?);
        }
        Ok(rows)
    }

    /// Multi-head attention sublayer; `kv` may differ from `q_src` (text
    /// cross-attention). Only the output projection carries a bias.
    fn attention(&mut self, prefix: &str, part: &str, q_src: Var, kv: Var) -> Result<Var> {
        let name = |w: &str| format!("{}.{}.{}", prefix, part, w);
        let wq = self.param(&name("wq"))?;
        let wk = self.param(&name("wk"))?;
        let wv = self.param(&name("wv"))?;
        let q = self.g.matmul(q_src, wq)?;
        let k = self.g.matmul(kv, wk)?;
        let v = self.g.matmul(kv, wv)?;
        let a = self.g.mha(q, k, v, self.cfg.heads)?;
        self.linear(a, &name("wo"), &name("bo"))
    }

    fn mlp(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let h = self.linear(x, &format!("{}.mlp.w1", prefix), &format!("{}.mlp.b1", prefix))?;
        let h = self.g.gelu(h);
        self.linear(h, &format!("{}.mlp.w2", prefix), &format!("{}.mlp.b2", prefix))
    }

    /// Pre-norm block: gated self-attention, gated text cross-attention,
    /// gated MLP. With the modulation head at zero the block is the
    /// identity bit for bit.
    fn block(&mut self, prefix: &str, h: Var, text: Var, tau: Var) -> Result<Var> {
        let m = self.modulation(&format!("{}.adaln", prefix), tau, 9)?;

        let x = self.ln(h)?;
        let x = self.modulate(x, m[0], m[1])?;
        let a = self.attention(prefix, "attn", x, x)?;
        let a = self.g.mul_row(a, m[2])?;
        let h = self.g.add(h, a)?;

        let x = self.ln(h)?;
        let x = self.modulate(x, m[3], m[4])?;
        let a = self.attention(prefix, "xattn", x, text)?;
        let a = self.g.mul_row(a, m[5])?;
        let h = self.g.add(h, a)?;

        let x = self.ln(h)?;
        let x = self.modulate(x, m[6], m[7])?;
        let a = self.mlp(prefix, x)?;
        let a = self.g.mul_row(a, m[8])?;
        self.g.add(h, a)
    }

    fn time_tau(&mut self, t: f64) -> Result<Var> {
        let feats = self.g.constant(&time_features(t, self.cfg.model_dim));
        let h = self.linear(feats, "time_embed.w1", "time_embed.b1")?;
        let h = self.g.gelu(h);
        self.linear(h, "time_embed.w2", "time_embed.b2")
    }

    fn final_layer(&mut self, h: Var, tau: Var) -> Result<Var> {
        let m = self.modulation("final.adaln", tau, 2)?;
        let x = self.ln(h)?;
        let x = self.modulate(x, m[0], m[1])?;
        self.linear(x, "final.proj.weight", "final.proj.bias")
    }

    /// Patch projection plus positional code for a latent grid already in
    /// hand; the rearrangement itself carries no parameters and enters as
    /// a constant.
    fn patchify_vars(&mut self, x: &LatentGrid, ref_frames: usize) -> Result<Var> {
        let grid = TokenGrid::from_latent(x, ref_frames, self.cfg)?;
        let raw = self.g.constant(&patch_tokens(x, &grid));
        let proj = self.linear(raw, "patchify.weight", "patchify.bias")?;
        let pe = self.g.constant(&positional_code(&grid, self.cfg.model_dim));
        self.g.add(proj, pe)
    }

    fn embed_context_vars(&mut self, bundle: &LatentBundle) -> Result<Var> {
        if bundle.x_c.tensor().shape() != bundle.x_k.tensor().shape() {
            return Err(Error::dim(
                "embed_context",
                format!(
                    "reactive {:?} vs inactive {:?}",
                    bundle.x_c.tensor().shape(),
                    bundle.x_k.tensor().shape()
                ),
            ));
        }
        let grid = TokenGrid::from_latent(&bundle.x_c, bundle.ref_latent_len, self.cfg)?;
        let mask_grid = LatentGrid::new(bundle.m_lat.clone())?;
        if mask_grid.frames() != grid.ref_frames + grid.video_frames
            || mask_grid.height() != bundle.x_c.height()
            || mask_grid.width() != bundle.x_c.width()
            || mask_grid.channels() != 1
        {
            return Err(Error::dim(
                "embed_context",
                format!("mask {:?} off-grid", bundle.m_lat.shape()),
            ));
        }
        let mgrid = TokenGrid::from_latent(&mask_grid, bundle.ref_latent_len, self.cfg)?;

        let c = self.g.constant(&patch_tokens(&bundle.x_c, &grid));
        let k = self.g.constant(&patch_tokens(&bundle.x_k, &grid));
        let m = self.g.constant(&patch_tokens(&mask_grid, &mgrid));
        let wc = self.param("ctx_embed.w_c")?;
        let wk = self.param("ctx_embed.w_k")?;
        let wm = self.param("ctx_embed.w_m")?;
        let bias = self.param("ctx_embed.bias")?;

        let sc = self.g.matmul(c, wc)?;
        let sk = self.g.matmul(k, wk)?;
        let sm = self.g.matmul(m, wm)?;
        let s = self.g.add(sc, sk)?;
        let s = self.g.add(s, sm)?;
        let s = self.g.add_row(s, bias)?;
        let pe = self.g.constant(&positional_code(&grid, self.cfg.model_dim));
        self.g.add(s, pe)
    }

    /// Full stack from embedded tokens to velocity tokens.
    fn assemble(&mut self, noisy: Var, ctx: Var, text_ids: &[usize], t: f64) -> Result<Var> {
        if !t.is_finite() {
            return Err(Error::arg("forward", format!("non-finite time {}", t)));
        }
        let table = self.param("text_embed.table")?;
        let text = self.g.embedding(table, text_ids)?;
        let tau = self.time_tau(t)?;

        let h = match self.cfg.mode {
            Mode::FullFt => {
                let mut h = self.g.add(noisy, ctx)?;
                for i in 0..self.cfg.layers {
                    h = self.block(&format!("main_block{:02}", i), h, text, tau)?;
                }
                h
            }
            Mode::Adapter => {
                let mut h = noisy;
                let mut ctx_h = ctx;
                for i in 0..self.cfg.layers {
                    h = self.block(&format!("main_block{:02}", i), h, text, tau)?;
                    if let Some(j) = self.placement.iter().position(|&p| p == i) {
                        ctx_h = self.block(&format!("ctx_block{:02}", j), ctx_h, text, tau)?;
                        let gate = self.param(&format!("ctx_block{:02}.inject_gate", j))?;
                        let injected = self.g.mul_row(ctx_h, gate)?;
                        h = self.g.add(h, injected)?;
                    }
                }
                h
            }
        };
        self.final_layer(h, tau)
    }
}

/// Embed a latent grid into visual tokens: patch projection plus the
/// positional code. `ref_frames` counts leading reference slots (they only
/// influence token bookkeeping, the code itself is position-based).
pub fn patchify(
    x: &LatentGrid,
    ref_frames: usize,
    params: &ParamStore,
    cfg: &ModelConfig,
) -> Result<Tensor> {
    let mut asm = Assembler::<f32>::new(params, cfg, None, true)?;
    let v = asm.patchify_vars(x, ref_frames)?;
    Ok(asm.g.tensor(v))
}

/// Embed a condition bundle into context tokens: the reactive, inactive,
/// and mask patches each pass through their own weight block and the
/// results are summed with the shared bias and positional code.
pub fn embed_context(
    bundle: &LatentBundle,
    params: &ParamStore,
    cfg: &ModelConfig,
) -> Result<Tensor> {
    let mut asm = Assembler::<f32>::new(params, cfg, None, true)?;
    let v = asm.embed_context_vars(bundle)?;
    Ok(asm.g.tensor(v))
}

/// Run the transformer on embedded tokens. `noisy_tokens` and
/// `context_tokens` are (tokens, D) matrices from [`patchify`] and
/// [`embed_context`]; the result is the velocity prediction as (tokens,
/// patch payload) rows, ready for [`super::unpatch_tokens`].
pub fn forward(
    params: &ParamStore,
    cfg: &ModelConfig,
    noisy_tokens: &Tensor,
    context_tokens: &Tensor,
    text_ids: &[usize],
    t: f64,
) -> Result<Tensor> {
    if noisy_tokens.shape() != context_tokens.shape() {
        return Err(Error::dim(
            "forward",
            format!(
                "noisy {:?} vs context {:?}",
                noisy_tokens.shape(),
                context_tokens.shape()
            ),
        ));
    }
    if noisy_tokens.shape().len() != 2 || noisy_tokens.shape()[1] != cfg.model_dim {
        return Err(Error::dim(
            "forward",
            format!("tokens {:?}, want (tokens, {})", noisy_tokens.shape(), cfg.model_dim),
        ));
    }
    let mut asm = Assembler::<f32>::new(params, cfg, None, true)?;
    let n = asm.g.constant(noisy_tokens);
    let c = asm.g.constant(context_tokens);
    let out = asm.assemble(n, c, text_ids, t)?;
    Ok(asm.g.tensor(out))
}

/// Build the training graph for one sample: embed the noisy latent and the
/// condition bundle, run the stack, take the mean squared error against the
/// target velocity tokens over every token uniformly (references included).
///
/// `overrides` substitutes full-precision values for named parameters;
/// finite-difference probes use it to perturb one tensor at a time.
#[allow(clippy::too_many_arguments)]
pub fn build_loss<T: Scalar>(
    params: &ParamStore,
    cfg: &ModelConfig,
    bundle: &LatentBundle,
    x_t: &LatentGrid,
    v_target: &Tensor,
    text_ids: &[usize],
    t: f64,
    overrides: Option<&BTreeMap<String, Vec<f64>>>,
) -> Result<LossBuild<T>> {
    if x_t.tensor().shape() != bundle.x_c.tensor().shape() {
        return Err(Error::dim(
            "build_loss",
            format!(
                "noisy latent {:?} vs bundle {:?}",
                x_t.tensor().shape(),
                bundle.x_c.tensor().shape()
            ),
        ));
    }
    let grid = TokenGrid::from_latent(x_t, bundle.ref_latent_len, cfg)?;
    if v_target.shape() != [grid.total_tokens(), grid.payload()] {
        return Err(Error::dim(
            "build_loss",
            format!(
                "target {:?}, want ({}, {})",
                v_target.shape(),
                grid.total_tokens(),
                grid.payload()
            ),
        ));
    }
    let mut asm = Assembler::<T>::new(params, cfg, overrides, false)?;
    let noisy = asm.patchify_vars(x_t, bundle.ref_latent_len)?;
    let ctx = asm.embed_context_vars(bundle)?;
    let pred = asm.assemble(noisy, ctx, text_ids, t)?;
    let tgt = asm.g.constant(v_target);
    let diff = asm.g.sub(pred, tgt)?;
    let sq = asm.g.mul(diff, diff)?;
    let loss = asm.g.mean_all(sq);
    Ok(LossBuild { graph: asm.g, loss, pred, leaves: asm.leaves })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{encode_vcu, CodecConfig};
    use crate::model::{init_params, text_tokens, PlacementSpec};
    use crate::rng::Rng;
    use crate::vcu;

    fn small_cfg(mode: Mode) -> ModelConfig {
        ModelConfig {
            layers: 2,
            model_dim: 16,
            heads: 2,
            text_buckets: 8,
            max_text_tokens: 4,
            mode,
            placement: PlacementSpec::DistributedEven(1),
            codec: CodecConfig { temporal_stride: 2, spatial_stride: 2 },
            ..ModelConfig::default()
        }
    }

    /// Bundle, noisy latent, and target for a masked-edit sample on an
    /// 8-token grid (video 4x8x8 under stride (2,2) and patch (1,2,2)).
    fn sample_inputs(
        cfg: &ModelConfig,
        seed: u64,
    ) -> (crate::codec::LatentBundle, LatentGrid, Tensor, Vec<usize>) {
        let mut rng = Rng::new(seed);
        let pixels: Vec<f32> =
            (0..4 * 8 * 8 * 3).map(|_| rng.range_f32(-1.0, 1.0)).collect();
        let video = crate::vcu::FrameSeq::new(
            Tensor::from_vec(&[4, 8, 8, 3], pixels).unwrap(),
        )
        .unwrap();
        let mask_data: Vec<f32> = (0..4 * 8 * 8).map(|_| rng.below(2) as f32).collect();
        let masks =
            crate::vcu::MaskSeq::new(Tensor::from_vec(&[4, 8, 8], mask_data).unwrap()).unwrap();
        let unit = vcu::make_mv2v("a square slides", &video, &masks).unwrap();
        let bundle = encode_vcu(&unit, &cfg.codec).unwrap();
        let shape = bundle.x_c.tensor().shape().to_vec();
        let x_t = LatentGrid::new(Tensor::randn(&shape, 1.0, &mut rng)).unwrap();
        let grid = TokenGrid::from_latent(&x_t, 0, cfg).unwrap();
        let target = Tensor::randn(&[grid.total_tokens(), grid.payload()], 1.0, &mut rng);
        let ids = text_tokens("a square slides", cfg);
        (bundle, x_t, target, ids)
    }

    #[test]
    fn fresh_model_outputs_exact_zero_in_both_modes() {
        for mode in [Mode::FullFt, Mode::Adapter] {
            let cfg = small_cfg(mode);
            let params = init_params(&cfg, &mut Rng::new(1)).unwrap();
            let mut rng = Rng::new(2);
            let noisy = Tensor::randn(&[8, 16], 1.0, &mut rng);
            let ctx = Tensor::randn(&[8, 16], 1.0, &mut rng);
            let ids = text_tokens("anything at all", &cfg);
            for &t in &[0.0, 0.31, 1.0] {
                let out = forward(&params, &cfg, &noisy, &ctx, &ids, t).unwrap();
                assert_eq!(out.shape(), &[8, cfg.patch_payload()]);
                assert!(out.data().iter().all(|&v| v == 0.0), "mode {}", mode);
            }
        }
    }

    #[test]
    fn fresh_default_model_outputs_exact_zero() {
        let cfg = ModelConfig::default();
        let params = init_params(&cfg, &mut Rng::new(3)).unwrap();
        let mut rng = Rng::new(4);
        let noisy = Tensor::randn(&[32, 128], 1.0, &mut rng);
        let ctx = Tensor::randn(&[32, 128], 1.0, &mut rng);
        let out =
            forward(&params, &cfg, &noisy, &ctx, &text_tokens("x", &cfg), 0.5).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn context_block_internals_are_silent_while_gates_are_zero() {
        let cfg = small_cfg(Mode::Adapter);
        let mut params = init_params(&cfg, &mut Rng::new(5)).unwrap();
        // Give the base a non-trivial function: lift every zero-initialized
        // main-path tensor to random values, as if the base were trained.
        let mut rng = Rng::new(6);
        for name in ["main_block00.adaln.weight", "main_block00.adaln.bias",
                     "main_block01.adaln.weight", "main_block01.adaln.bias",
                     "final.adaln.weight", "final.adaln.bias",
                     "final.proj.weight", "final.proj.bias"] {
            let t = params.get_mut(name).unwrap();
            let fresh = Tensor::randn(t.shape(), 0.5, &mut rng);
            *t = fresh;
        }
        let noisy = Tensor::randn(&[8, 16], 1.0, &mut rng);
        let ctx = Tensor::randn(&[8, 16], 1.0, &mut rng);
        let ids = text_tokens("still life", &cfg);

        let base = forward(&params, &cfg, &noisy, &ctx, &ids, 0.4).unwrap();
        assert!(base.data().iter().any(|&v| v != 0.0));

        // Scramble every context-block internal weight; inject gates stay
        // zero, so the main path must not move.
        let names: Vec<String> = params
            .names()
            .filter(|n| n.starts_with("ctx_block") && !n.ends_with("inject_gate"))
            .map(str::to_string)
            .collect();
        for name in names {
            let t = params.get_mut(&name).unwrap();
            let fresh = Tensor::randn(t.shape(), 1.0, &mut rng);
            *t = fresh;
        }
        let scrambled = forward(&params, &cfg, &noisy, &ctx, &ids, 0.4).unwrap();
        assert_eq!(base.max_abs_diff(&scrambled), 0.0);

        // Context tokens themselves are also inert in this state.
        let other_ctx = Tensor::randn(&[8, 16], 1.0, &mut rng);
        let swapped = forward(&params, &cfg, &noisy, &other_ctx, &ids, 0.4).unwrap();
        assert_eq!(base.max_abs_diff(&swapped), 0.0);

        // Opening one gate breaks the invariance, confirming the path is
        // actually wired.
        params.get_mut("ctx_block00.inject_gate").unwrap().data_mut().fill(0.1);
        let open = forward(&params, &cfg, &noisy, &ctx, &ids, 0.4).unwrap();
        assert!(open.max_abs_diff(&base) > 0.0);
    }

    #[test]
    fn embed_context_ignores_mask_at_init() {
        let cfg = small_cfg(Mode::FullFt);
        let params = init_params(&cfg, &mut Rng::new(7)).unwrap();
        let (bundle, _, _, _) = sample_inputs(&cfg, 8);
        let a = embed_context(&bundle, &params, &cfg).unwrap();

        let mut other = bundle.clone();
        let mut rng = Rng::new(9);
        let noise: Vec<f32> =
            (0..other.m_lat.numel()).map(|_| rng.range_f32(0.0, 1.0)).collect();
        other.m_lat = Tensor::from_vec(other.m_lat.shape(), noise).unwrap();
        let b = embed_context(&other, &params, &cfg).unwrap();
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn embed_context_at_init_matches_patchify_on_reactive_stream() {
        let cfg = small_cfg(Mode::FullFt);
        let params = init_params(&cfg, &mut Rng::new(10)).unwrap();
        let (mut bundle, _, _, _) = sample_inputs(&cfg, 11);
        // Zero the inactive stream so only the copied W_c block contributes.
        bundle.x_k = LatentGrid::zeros(
            bundle.x_k.frames(),
            bundle.x_k.height(),
            bundle.x_k.width(),
            bundle.x_k.channels(),
        );
        let ctx = embed_context(&bundle, &params, &cfg).unwrap();
        let direct = patchify(&bundle.x_c, bundle.ref_latent_len, &params, &cfg).unwrap();
        assert!(ctx.max_abs_diff(&direct) < 1e-6);
    }

    #[test]
    fn forward_validates_token_shapes() {
        let cfg = small_cfg(Mode::FullFt);
        let params = init_params(&cfg, &mut Rng::new(12)).unwrap();
        let mut rng = Rng::new(13);
        let noisy = Tensor::randn(&[8, 16], 1.0, &mut rng);
        let short = Tensor::randn(&[7, 16], 1.0, &mut rng);
        let ids = text_tokens("", &cfg);
        assert!(forward(&params, &cfg, &noisy, &short, &ids, 0.5).is_err());
        let wide = Tensor::randn(&[8, 32], 1.0, &mut rng);
        assert!(forward(&params, &cfg, &wide, &wide, &ids, 0.5).is_err());
        assert!(forward(&params, &cfg, &noisy, &noisy, &ids, f64::NAN).is_err());
    }

    #[test]
    fn output_payload_is_independent_of_model_width() {
        for dim in [16usize, 32] {
            let cfg = ModelConfig { model_dim: dim, ..small_cfg(Mode::FullFt) };
            let params = init_params(&cfg, &mut Rng::new(14)).unwrap();
            let mut rng = Rng::new(15);
            let noisy = Tensor::randn(&[8, dim], 1.0, &mut rng);
            let out =
                forward(&params, &cfg, &noisy, &noisy, &text_tokens("w", &cfg), 0.2).unwrap();
            assert_eq!(out.shape(), &[8, cfg.patch_payload()]);
        }
    }

    #[test]
    fn pad_tail_order_never_reaches_the_output() {
        let cfg = small_cfg(Mode::FullFt);
        let mut params = init_params(&cfg, &mut Rng::new(16)).unwrap();
        let mut rng = Rng::new(17);
        // Light up the gates so attention actually contributes.
        for name in ["main_block00.adaln.bias", "main_block01.adaln.bias",
                     "final.adaln.bias", "final.proj.weight"] {
            let t = params.get_mut(name).unwrap();
            let fresh = Tensor::randn(t.shape(), 0.3, &mut rng);
            *t = fresh;
        }
        let noisy = Tensor::randn(&[8, 16], 1.0, &mut rng);
        let ctx = Tensor::randn(&[8, 16], 1.0, &mut rng);

        let ids = text_tokens("red circle", &cfg);
        assert_eq!(&ids[2..], &[cfg.pad_id(), cfg.pad_id()]);
        let mut swapped = ids.clone();
        swapped.swap(2, 3);
        assert_eq!(ids, swapped);
        let a = forward(&params, &cfg, &noisy, &ctx, &ids, 0.6).unwrap();
        let b = forward(&params, &cfg, &noisy, &ctx, &swapped, 0.6).unwrap();
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn loss_at_init_equals_target_mean_square() {
        let cfg = small_cfg(Mode::FullFt);
        let params = init_params(&cfg, &mut Rng::new(18)).unwrap();
        let (bundle, x_t, target, ids) = sample_inputs(&cfg, 19);
        let built =
            build_loss::<f32>(&params, &cfg, &bundle, &x_t, &target, &ids, 0.5, None).unwrap();
        let loss = built.graph.value(built.loss)[0];
        let expect: f64 = target.data().iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>()
            / target.numel() as f64;
        // The prediction is exactly zero, so the only slack is f32 squaring.
        assert!((loss as f64 - expect).abs() < 1e-6, "{} vs {}", loss, expect);
    }

    #[test]
    fn build_loss_rejects_mismatched_target() {
        let cfg = small_cfg(Mode::FullFt);
        let params = init_params(&cfg, &mut Rng::new(20)).unwrap();
        let (bundle, x_t, _, ids) = sample_inputs(&cfg, 21);
        let bad = Tensor::zeros(&[7, cfg.patch_payload()]);
        assert!(
            build_loss::<f32>(&params, &cfg, &bundle, &x_t, &bad, &ids, 0.5, None).is_err()
        );
    }

    /// Perturb every zero-initialized tensor so all paths carry signal,
    /// then compare analytic gradients of every trainable tensor against
    /// central differences at f64.
    fn fd_check_all_trainables(mode: Mode) {
        let cfg = small_cfg(mode);
        let mut params = init_params(&cfg, &mut Rng::new(22)).unwrap();
        let mut rng = Rng::new(23);
        let names: Vec<String> = params.names().map(str::to_string).collect();
        for name in &names {
            let t = params.get_mut(name).unwrap();
            let noise = Tensor::randn(t.shape(), 0.1, &mut rng);
            let summed: Vec<f32> =
                t.data().iter().zip(noise.data()).map(|(a, b)| a + b).collect();
            *t = Tensor::from_vec(t.shape(), summed).unwrap();
        }
        let (bundle, x_t, target, ids) = sample_inputs(&cfg, 24);
        let t_val = 0.37;

        let built =
            build_loss::<f64>(&params, &cfg, &bundle, &x_t, &target, &ids, t_val, None)
                .unwrap();
        let grads = built.graph.backward(built.loss).unwrap();
        assert!(!built.leaves.is_empty());

        // Coordinates whose gradient is orders of magnitude below the
        // tensor's scale drown in difference-quotient truncation, so the
        // comparison is per tensor in the norm, not per coordinate.
        let eps = 1e-5;
        for (name, var) in &built.leaves {
            let analytic = grads.get(*var).expect("trainable leaf has a gradient");
            let base: Vec<f64> =
                params.get(name).unwrap().data().iter().map(|&v| v as f64).collect();
            let mut numeric = Vec::with_capacity(base.len());
            for i in 0..base.len() {
                let probe = |delta: f64| -> f64 {
                    let mut data = base.clone();
                    data[i] += delta;
                    let mut ov = BTreeMap::new();
                    ov.insert(name.clone(), data);
                    let b = build_loss::<f64>(
                        &params, &cfg, &bundle, &x_t, &target, &ids, t_val,
                        Some(&ov),
                    )
                    .unwrap();
                    b.graph.value(b.loss)[0]
                };
                numeric.push((probe(eps) - probe(-eps)) / (2.0 * eps));
            }
            let err = crate::gradcheck::norm_rel_error(analytic, &numeric);
            assert!(err < 1e-4, "{}: norm rel err {}", name, err);
        }
    }

    #[test]
    fn gradients_match_finite_differences_fullft() {
        fd_check_all_trainables(Mode::FullFt);
    }

    #[test]
    fn gradients_match_finite_differences_adapter() {
        fd_check_all_trainables(Mode::Adapter);
    }
}
