//! Pixel/latent codec.
//!
//! Stands in for a learned video autoencoder with an exactly invertible
//! space-to-depth rearrangement: each s_t x s_s x s_s x 3 block of pixels
//! becomes one latent cell with d = 3*s_t*s_s^2 channels. Invertibility
//! means decode fidelity is testable bitwise rather than approximately.
//!
//! Masks travel to the latent grid by area-average pooling over the same
//! blocks, so partial coverage survives as fractional values.
//!
//! [`encode_vcu`] assembles the full conditioning bundle: the video part is
//! split into a reactive stream (pixels to change) and an inactive stream
//! (pixels to keep), each reference image is replicated to fill one temporal
//! block and encoded to a single latent frame at the front of the inactive
//! stream.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vcu::{FrameSeq, MaskSeq, Vcu};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CodecConfig {
    pub temporal_stride: usize,
    pub spatial_stride: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig { temporal_stride: 2, spatial_stride: 4 }
    }
}

impl CodecConfig {
    /// Latent channel count.
    pub fn d(&self) -> usize {
        3 * self.temporal_stride * self.spatial_stride * self.spatial_stride
    }

    fn check(&self) -> Result<()> {
        if self.temporal_stride == 0 || self.spatial_stride == 0 {
            return Err(Error::arg("CodecConfig", "strides must be at least 1"));
        }
        Ok(())
    }

    pub fn check_divisible(&self, op: &'static str, n: usize, h: usize, w: usize) -> Result<()> {
        self.check()?;
        if n % self.temporal_stride != 0 {
            return Err(Error::dim(
                op,
                format!("{} frames not divisible by temporal stride {}", n, self.temporal_stride),
            ));
        }
        if h % self.spatial_stride != 0 {
            return Err(Error::dim(
                op,
                format!("height {} not divisible by spatial stride {}", h, self.spatial_stride),
            ));
        }
        if w % self.spatial_stride != 0 {
            return Err(Error::dim(
                op,
                format!("width {} not divisible by spatial stride {}", w, self.spatial_stride),
            ));
        }
        Ok(())
    }
}

/// Latent tensor of shape (frames, h', w', d).
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGrid(Tensor);

impl LatentGrid {
    pub fn new(t: Tensor) -> Result<LatentGrid> {
        if t.shape().len() != 4 {
            return Err(Error::dim(
                "LatentGrid",
                format!("want (frames, h', w', d), got {:?}", t.shape()),
            ));
        }
        Ok(LatentGrid(t))
    }

    pub fn zeros(frames: usize, h: usize, w: usize, d: usize) -> LatentGrid {
        LatentGrid(Tensor::zeros(&[frames, h, w, d]))
    }

    pub fn frames(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[3]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    /// `a` followed by `b` along the frame axis.
    pub fn concat(a: &LatentGrid, b: &LatentGrid) -> Result<LatentGrid> {
        if a.height() != b.height() || a.width() != b.width() || a.channels() != b.channels() {
            return Err(Error::dim(
                "LatentGrid::concat",
                format!("{:?} vs {:?}", a.0.shape(), b.0.shape()),
            ));
        }
        let mut data = a.0.data().to_vec();
        data.extend_from_slice(b.0.data());
        let shape = [a.frames() + b.frames(), a.height(), a.width(), a.channels()];
        Ok(LatentGrid(Tensor::from_vec(&shape, data).expect("concat preserves layout")))
    }
}

/// Everything the model consumes for one condition unit. All three tensors
/// share the (frames, h', w') grid; the first `ref_latent_len` frames are
/// reference slots (zero mask, zero reactive content).
#[derive(Clone, Debug)]
pub struct LatentBundle {
    pub x_c: LatentGrid,
    pub x_k: LatentGrid,
    /// Shape (frames, h', w', 1), values in [0, 1].
    pub m_lat: Tensor,
    pub ref_latent_len: usize,
}

impl LatentBundle {
    pub fn frames(&self) -> usize {
        self.x_c.frames()
    }

    /// Latent frames belonging to the clip itself.
    pub fn video_latent_len(&self) -> usize {
        self.frames() - self.ref_latent_len
    }
}

/// Split frames into the reactive part (pixels to change, mask 1) and the
/// inactive part (pixels to keep, mask 0). The two sum back to the input
/// exactly and never overlap.
pub fn decouple(frames: &FrameSeq, masks: &MaskSeq) -> Result<(FrameSeq, FrameSeq)> {
    if frames.count() != masks.count()
        || frames.height() != masks.height()
        || frames.width() != masks.width()
    {
        return Err(Error::dim(
            "decouple",
            format!(
                "frames ({}, {}, {}) vs masks ({}, {}, {})",
                frames.count(),
                frames.height(),
                frames.width(),
                masks.count(),
                masks.height(),
                masks.width()
            ),
        ));
    }
    let f = frames.tensor().data();
    let m = masks.tensor().data();
    let mut reactive = vec![0.0f32; f.len()];
    let mut inactive = vec![0.0f32; f.len()];
    for (i, &mv) in m.iter().enumerate() {
        for c in 0..3 {
            let v = f[i * 3 + c];
            reactive[i * 3 + c] = v * mv;
            inactive[i * 3 + c] = v * (1.0 - mv);
        }
    }
    let shape = frames.tensor().shape();
    Ok((
        FrameSeq::new(Tensor::from_vec(shape, reactive)?)?,
        FrameSeq::new(Tensor::from_vec(shape, inactive)?)?,
    ))
}

/// Space-to-depth: (n, h, w, 3) -> (n/s_t, h/s_s, w/s_s, d). Pure
/// rearrangement; every input value appears exactly once in the output.
pub fn encode_video(v: &FrameSeq, cfg: &CodecConfig) -> Result<LatentGrid> {
    let (n, h, w) = (v.count(), v.height(), v.width());
    cfg.check_divisible("encode_video", n, h, w)?;
    let (st, ss) = (cfg.temporal_stride, cfg.spatial_stride);
    let (nl, hl, wl, d) = (n / st, h / ss, w / ss, cfg.d());
    let src = v.tensor().data();
    let mut out = vec![0.0f32; nl * hl * wl * d];
    for ti in 0..nl {
        for yi in 0..hl {
            for xi in 0..wl {
                let cell = ((ti * hl + yi) * wl + xi) * d;
                for dt in 0..st {
                    for dy in 0..ss {
                        for dx in 0..ss {
                            let pix =
                                (((ti * st + dt) * h + yi * ss + dy) * w + xi * ss + dx) * 3;
                            let ch = ((dt * ss + dy) * ss + dx) * 3;
                            out[cell + ch..cell + ch + 3]
                                .copy_from_slice(&src[pix..pix + 3]);
                        }
                    }
                }
            }
        }
    }
    LatentGrid::new(Tensor::from_vec(&[nl, hl, wl, d], out)?)
}

/// Exact inverse of [`encode_video`].
pub fn decode_video(x: &LatentGrid, cfg: &CodecConfig) -> Result<FrameSeq> {
    cfg.check()?;
    if x.channels() != cfg.d() {
        return Err(Error::dim(
            "decode_video",
            format!("{} latent channels, config wants {}", x.channels(), cfg.d()),
        ));
    }
    let (st, ss, d) = (cfg.temporal_stride, cfg.spatial_stride, cfg.d());
    let (nl, hl, wl) = (x.frames(), x.height(), x.width());
    let (n, h, w) = (nl * st, hl * ss, wl * ss);
    let src = x.tensor().data();
    let mut out = vec![0.0f32; n * h * w * 3];
    for ti in 0..nl {
        for yi in 0..hl {
            for xi in 0..wl {
                let cell = ((ti * hl + yi) * wl + xi) * d;
                for dt in 0..st {
                    for dy in 0..ss {
                        for dx in 0..ss {
                            let pix =
                                (((ti * st + dt) * h + yi * ss + dy) * w + xi * ss + dx) * 3;
                            let ch = ((dt * ss + dy) * ss + dx) * 3;
                            out[pix..pix + 3].copy_from_slice(&src[cell + ch..cell + ch + 3]);
                        }
                    }
                }
            }
        }
    }
    // Latent grids are not range-restricted, so bypass the [-1, 1] check and
    // rely on the caller to clamp decoded samples.
    FrameSeq::new_unchecked(Tensor::from_vec(&[n, h, w, 3], out)?)
}

/// Area-average pooling of a pixel mask onto the latent grid:
/// (n, h, w) -> (n/s_t, h/s_s, w/s_s, 1).
pub fn encode_mask(m: &MaskSeq, cfg: &CodecConfig) -> Result<Tensor> {
    let (n, h, w) = (m.count(), m.height(), m.width());
    cfg.check_divisible("encode_mask", n, h, w)?;
    let (st, ss) = (cfg.temporal_stride, cfg.spatial_stride);
    let (nl, hl, wl) = (n / st, h / ss, w / ss);
    let block = (st * ss * ss) as f64;
    let src = m.tensor().data();
    let mut out = vec![0.0f32; nl * hl * wl];
    for ti in 0..nl {
        for yi in 0..hl {
            for xi in 0..wl {
                let mut acc = 0.0f64;
                for dt in 0..st {
                    for dy in 0..ss {
                        for dx in 0..ss {
                            acc += src[((ti * st + dt) * h + yi * ss + dy) * w + xi * ss + dx]
                                as f64;
                        }
                    }
                }
                out[(ti * hl + yi) * wl + xi] = (acc / block) as f32;
            }
        }
    }
    Tensor::from_vec(&[nl, hl, wl, 1], out)
}

/// Encode a condition unit into the model-facing bundle.
///
/// With `decoupled` false (the single-stream ablation arm) the full frame
/// content, references included, is routed to the reactive stream and the
/// inactive stream is zeroed.
pub fn encode_vcu_with(vcu: &Vcu, cfg: &CodecConfig, decoupled: bool) -> Result<LatentBundle> {
    let violations = vcu.validate();
    if let Some(first) = violations.first() {
        return Err(Error::arg("encode_vcu", first.to_string()));
    }
    let l = vcu.ref_count();
    let video = vcu.video_frames();
    let video_masks = vcu.video_masks();

    let (reactive, inactive) = if decoupled {
        decouple(&video, &video_masks)?
    } else {
        (video.clone(), FrameSeq::zeros(video.count(), video.height(), video.width()))
    };
    let z_c = encode_video(&reactive, cfg)?;
    let z_k = encode_video(&inactive, cfg)?;

    let ref_latents = encode_references(&vcu.reference_frames(), cfg)?;

    let (x_c, x_k) = if decoupled {
        let ref_zero = LatentGrid::zeros(l, z_c.height(), z_c.width(), cfg.d());
        (LatentGrid::concat(&ref_zero, &z_c)?, LatentGrid::concat(&ref_latents, &z_k)?)
    } else {
        let ref_zero = LatentGrid::zeros(l, z_c.height(), z_c.width(), cfg.d());
        (LatentGrid::concat(&ref_latents, &z_c)?, LatentGrid::concat(&ref_zero, &z_k)?)
    };

    let m_video = encode_mask(&video_masks, cfg)?;
    let (hl, wl) = (x_c.height(), x_c.width());
    let mut m_data = vec![0.0f32; l * hl * wl];
    m_data.extend_from_slice(m_video.data());
    let m_lat = Tensor::from_vec(&[x_c.frames(), hl, wl, 1], m_data)?;

    Ok(LatentBundle { x_c, x_k, m_lat, ref_latent_len: l })
}

pub fn encode_vcu(vcu: &Vcu, cfg: &CodecConfig) -> Result<LatentBundle> {
    encode_vcu_with(vcu, cfg, true)
}

/// Encode standalone reference images, one latent frame per input frame:
/// each image is replicated across the temporal stride so the space-to-depth
/// block is filled with the same picture. Every consumer of reference slots
/// (condition bundles, clean training latents) must agree on this encoding.
pub fn encode_references(refs: &FrameSeq, cfg: &CodecConfig) -> Result<LatentGrid> {
    let (hl, wl) = (refs.height() / cfg.spatial_stride, refs.width() / cfg.spatial_stride);
    let mut out = LatentGrid::zeros(0, hl, wl, cfg.d());
    for i in 0..refs.count() {
        let frame = refs.slice_frames(i, 1);
        let mut rep = frame.clone();
        for _ in 1..cfg.temporal_stride {
            rep = FrameSeq::concat(&rep, &frame)?;
        }
        out = LatentGrid::concat(&out, &encode_video(&rep, cfg)?)?;
    }
    Ok(out)
}

/// Drop the leading reference slots, keeping the clip's own latent frames.
pub fn strip_refs(x: &LatentGrid, ref_latent_len: usize) -> Result<LatentGrid> {
    if ref_latent_len > x.frames() {
        return Err(Error::dim(
            "strip_refs",
            format!("{} reference frames exceed {} total", ref_latent_len, x.frames()),
        ));
    }
    let tail = x.frames() - ref_latent_len;
    let stride = x.height() * x.width() * x.channels();
    let data = x.tensor().data()[ref_latent_len * stride..].to_vec();
    LatentGrid::new(Tensor::from_vec(&[tail, x.height(), x.width(), x.channels()], data)?)
}
