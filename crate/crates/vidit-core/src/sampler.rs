//! Euler sampling with classifier-free guidance.
//!
//! A trajectory starts at pure noise (t = 1) and walks the learned velocity
//! field down to data (t = 0). The condition bundle and its embedded context
//! tokens are built once; every step re-embeds only the moving latent. The
//! guided velocity is v_u + g*(v_c - v_u) with the conditional branch fed
//! the prompt and the unconditional branch the empty prompt; context tokens
//! are identical in both, so guidance extrapolates along the text axis only.
//! g = 1 evaluates just the conditional branch and g = 0 just the
//! unconditional one, which keeps those contracts bitwise.

use crate::codec::{decode_video, encode_vcu_with, strip_refs, LatentGrid};
use crate::error::{Error, Result};
use crate::model::net::{embed_context, forward, patchify};
use crate::model::{text_tokens, unpatch_tokens, ModelConfig, ParamStore, TokenGrid};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::vcu::{FrameSeq, Vcu};

#[derive(Clone, Debug)]
pub struct SampleConfig {
    /// Euler step count K; the grid has K+1 time points.
    pub steps: usize,
    /// Guidance scale g.
    pub guide: f64,
    pub seed: u64,
    /// After decoding, overwrite pixels whose mask is 0 with the source
    /// frames, so untouched regions are carried over verbatim.
    pub composite_inactive: bool,
    /// Warp the time grid with the training-time shift map (None keeps the
    /// grid uniform).
    pub time_shift: Option<f64>,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            steps: 40,
            guide: 3.0,
            seed: 0,
            composite_inactive: false,
            time_shift: None,
        }
    }
}

impl SampleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if !(self.guide >= 0.0) {
            return Err(Error::Config(format!("guide {} must be at least 0", self.guide)));
        }
        if let Some(s) = self.time_shift {
            if !(s > 0.0) {
                return Err(Error::Config(format!("time_shift {s} must be positive")));
            }
        }
        Ok(())
    }
}

/// Initial noise derived from (seed, latent shape) alone. The stream is the
/// seed's rng split successively by frames, height, width, and channels, so
/// two distinct shapes read decorrelated sub-streams and the prompt plays
/// no part.
pub fn seeded_noise_for(vcu: &Vcu, cfg: &ModelConfig, seed: u64) -> Result<LatentGrid> {
    cfg.codec.check_divisible("seeded_noise_for", vcu.video_len(), vcu.height(), vcu.width())?;
    let frames = vcu.ref_count() + vcu.video_len() / cfg.codec.temporal_stride;
    let h = vcu.height() / cfg.codec.spatial_stride;
    let w = vcu.width() / cfg.codec.spatial_stride;
    let d = cfg.codec.d();
    let mut rng = Rng::new(seed)
        .split(frames as u64)
        .split(h as u64)
        .split(w as u64)
        .split(d as u64);
    let mut data = vec![0.0f32; frames * h * w * d];
    rng.fill_normal(&mut data);
    LatentGrid::new(Tensor::from_vec(&[frames, h, w, d], data)?)
}

/// Descending time grid with K intervals from 1 to 0, optionally warped by
/// the shift map t = s*u / (1 + (s-1)*u) (which fixes both endpoints).
pub fn time_grid(steps: usize, shift: Option<f64>) -> Vec<f64> {
    (0..=steps)
        .map(|i| {
            let u = 1.0 - i as f64 / steps as f64;
            match shift {
                None => u,
                Some(s) => s * u / (1.0 + (s - 1.0) * u),
            }
        })
        .collect()
}

/// Explicit Euler down a velocity field: x <- x - (t_k - t_{k+1}) * v(x, t_k)
/// for each consecutive pair of `times`. The field is a parameter so the
/// integrator can be exercised with exact closed-form stubs.
pub fn euler_integrate(
    init: &LatentGrid,
    times: &[f64],
    mut velocity: impl FnMut(&LatentGrid, f64) -> Result<LatentGrid>,
) -> Result<LatentGrid> {
    if times.len() < 2 {
        return Err(Error::arg("euler_integrate", "need at least two time points"));
    }
    for pair in times.windows(2) {
        if !(pair[0] > pair[1]) {
            return Err(Error::arg(
                "euler_integrate",
                format!("times must strictly decrease, got {} then {}", pair[0], pair[1]),
            ));
        }
    }
    let mut x = init.tensor().clone();
    for k in 0..times.len() - 1 {
        let dt = (times[k] - times[k + 1]) as f32;
        let v = velocity(&LatentGrid::new(x.clone())?, times[k])?;
        if v.tensor().shape() != x.shape() {
            return Err(Error::dim(
                "euler_integrate",
                format!("velocity {:?} vs state {:?}", v.tensor().shape(), x.shape()),
            ));
        }
        let vd = v.tensor().data();
        for (xi, &vi) in x.data_mut().iter_mut().zip(vd) {
            *xi -= dt * vi;
        }
    }
    LatentGrid::new(x)
}

/// Sample a video for a condition unit. Returns exactly `video_len` frames;
/// reference slots are integrated but stripped before decoding.
pub fn euler_sample(
    params: &ParamStore,
    model_cfg: &ModelConfig,
    vcu: &Vcu,
    cfg: &SampleConfig,
) -> Result<FrameSeq> {
    model_cfg.validate()?;
    cfg.validate()?;
    let bundle = encode_vcu_with(vcu, &model_cfg.codec, model_cfg.decoupled)?;
    let ctx = embed_context(&bundle, params, model_cfg)?;
    let cond_ids = text_tokens(vcu.prompt(), model_cfg);
    let uncond_ids = text_tokens("", model_cfg);
    let g = cfg.guide;

    let init = seeded_noise_for(vcu, model_cfg, cfg.seed)?;
    let grid = TokenGrid::from_latent(&init, bundle.ref_latent_len, model_cfg)?;
    let times = time_grid(cfg.steps, cfg.time_shift);

    let out = euler_integrate(&init, &times, |x, t| {
        let noisy = patchify(x, bundle.ref_latent_len, params, model_cfg)?;
        let tokens = if g == 1.0 {
            forward(params, model_cfg, &noisy, &ctx, &cond_ids, t)?
        } else if g == 0.0 {
            forward(params, model_cfg, &noisy, &ctx, &uncond_ids, t)?
        } else {
            let vc = forward(params, model_cfg, &noisy, &ctx, &cond_ids, t)?;
            let mut vu = forward(params, model_cfg, &noisy, &ctx, &uncond_ids, t)?;
            let gf = g as f32;
            let cd = vc.data();
            for (u, &c) in vu.data_mut().iter_mut().zip(cd) {
                *u += gf * (c - *u);
            }
            vu
        };
        unpatch_tokens(&tokens, &grid)
    })?;

    let video_latent = strip_refs(&out, bundle.ref_latent_len)?;
    let decoded = decode_video(&video_latent, &model_cfg.codec)?;
    let result = decoded.clamped();
    if cfg.composite_inactive {
        Ok(overwrite_inactive(&result, vcu))
    } else {
        Ok(result)
    }
}

/// Copy source pixels over the generated video wherever the mask is 0.
fn overwrite_inactive(generated: &FrameSeq, vcu: &Vcu) -> FrameSeq {
    let src = vcu.video_frames();
    let masks = vcu.video_masks();
    let mut data = generated.tensor().data().to_vec();
    let sd = src.tensor().data();
    for (px, &m) in masks.tensor().data().iter().enumerate() {
        if m == 0.0 {
            data[px * 3..px * 3 + 3].copy_from_slice(&sd[px * 3..px * 3 + 3]);
        }
    }
    let t = Tensor::from_vec(generated.tensor().shape(), data).expect("shape preserved");
    FrameSeq::new(t).expect("both sources stay within the pixel range")
}
