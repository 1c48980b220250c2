//! Video condition units.
//!
//! A condition unit bundles everything one generation request needs: a
//! prompt, a frame sequence, and a mask sequence of equal length. The first
//! `ref_count` frames are reference images to keep (their masks are zero by
//! construction); the remaining `video_len` frames describe the clip itself.
//! Masks select where new content may be written: 1 = generate, 0 = keep.
//!
//! Task layouts are produced by builders so the zeros/ones placement is
//! never assembled ad hoc:
//!
//! ```text
//! text-to-video        frames = 0 x n                masks = 1 x n
//! reference-to-video   frames = refs ++ 0 x n        masks = 0 x l ++ 1 x n
//! video-to-video       frames = video                masks = 1 x n
//! masked video editing frames = video                masks = given
//! ```
//!
//! The task tag is bookkeeping for logs and reports; no pipeline stage
//! branches on it.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Frame sequence, shape (count, h, w, 3), values in [-1, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSeq(Tensor);

impl FrameSeq {
    pub fn new(t: Tensor) -> Result<FrameSeq> {
        let s = t.shape();
        if s.len() != 4 || s[3] != 3 {
            return Err(Error::dim("FrameSeq", format!("want (count, h, w, 3), got {:?}", s)));
        }
        if let Some(&v) = t.data().iter().find(|v| !v.is_finite() || v.abs() > 1.0) {
            return Err(Error::arg("FrameSeq", format!("value {} outside [-1, 1]", v)));
        }
        Ok(FrameSeq(t))
    }

    /// Shape check only. For values that may leave [-1, 1] transiently,
    /// such as decoded model output before clamping.
    pub(crate) fn new_unchecked(t: Tensor) -> Result<FrameSeq> {
        let s = t.shape();
        if s.len() != 4 || s[3] != 3 {
            return Err(Error::dim("FrameSeq", format!("want (count, h, w, 3), got {:?}", s)));
        }
        Ok(FrameSeq(t))
    }

    pub fn zeros(count: usize, h: usize, w: usize) -> FrameSeq {
        FrameSeq(Tensor::zeros(&[count, h, w, 3]))
    }

    /// Values clamped into [-1, 1].
    pub fn clamped(&self) -> FrameSeq {
        let data = self.0.data().iter().map(|v| v.clamp(-1.0, 1.0)).collect();
        FrameSeq(Tensor::from_vec(self.0.shape(), data).expect("same layout"))
    }

    pub fn count(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    /// Frames `start..start + len` as a new sequence.
    pub fn slice_frames(&self, start: usize, len: usize) -> FrameSeq {
        let (c, h, w) = (self.count(), self.height(), self.width());
        assert!(start + len <= c, "frame range {}..{} of {}", start, start + len, c);
        let stride = h * w * 3;
        let data = self.0.data()[start * stride..(start + len) * stride].to_vec();
        FrameSeq(Tensor::from_vec(&[len, h, w, 3], data).expect("slice preserves layout"))
    }

    /// `a` followed by `b`; spatial sizes must match.
    pub fn concat(a: &FrameSeq, b: &FrameSeq) -> Result<FrameSeq> {
        if a.height() != b.height() || a.width() != b.width() {
            return Err(Error::dim(
                "FrameSeq::concat",
                format!(
                    "({}, {}) vs ({}, {})",
                    a.height(),
                    a.width(),
                    b.height(),
                    b.width()
                ),
            ));
        }
        let mut data = a.0.data().to_vec();
        data.extend_from_slice(b.0.data());
        let shape = [a.count() + b.count(), a.height(), a.width(), 3];
        Ok(FrameSeq(Tensor::from_vec(&shape, data).expect("concat preserves layout")))
    }
}

/// Mask sequence, shape (count, h, w), entries exactly 0.0 or 1.0.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSeq(Tensor);

impl MaskSeq {
    pub fn new(t: Tensor) -> Result<MaskSeq> {
        let s = t.shape();
        if s.len() != 3 {
            return Err(Error::dim("MaskSeq", format!("want (count, h, w), got {:?}", s)));
        }
        if let Some(&v) = t.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(Error::arg("MaskSeq", format!("non-binary value {}", v)));
        }
        Ok(MaskSeq(t))
    }

    pub fn zeros(count: usize, h: usize, w: usize) -> MaskSeq {
        MaskSeq(Tensor::zeros(&[count, h, w]))
    }

    pub fn ones(count: usize, h: usize, w: usize) -> MaskSeq {
        MaskSeq(Tensor::full(&[count, h, w], 1.0))
    }

    pub fn count(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn slice_frames(&self, start: usize, len: usize) -> MaskSeq {
        let (c, h, w) = (self.count(), self.height(), self.width());
        assert!(start + len <= c, "frame range {}..{} of {}", start, start + len, c);
        let stride = h * w;
        let data = self.0.data()[start * stride..(start + len) * stride].to_vec();
        MaskSeq(Tensor::from_vec(&[len, h, w], data).expect("slice preserves layout"))
    }

    pub fn concat(a: &MaskSeq, b: &MaskSeq) -> Result<MaskSeq> {
        if a.height() != b.height() || a.width() != b.width() {
            return Err(Error::dim(
                "MaskSeq::concat",
                format!(
                    "({}, {}) vs ({}, {})",
                    a.height(),
                    a.width(),
                    b.height(),
                    b.width()
                ),
            ));
        }
        let mut data = a.0.data().to_vec();
        data.extend_from_slice(b.0.data());
        let shape = [a.count() + b.count(), a.height(), a.width()];
        Ok(MaskSeq(Tensor::from_vec(&shape, data).expect("concat preserves layout")))
    }

    /// 1 - m, elementwise.
    pub fn complement(&self) -> MaskSeq {
        let data = self.0.data().iter().map(|&v| 1.0 - v).collect();
        MaskSeq(Tensor::from_vec(self.0.shape(), data).expect("same layout"))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TaskTag {
    T2V,
    R2V,
    V2V,
    MV2V,
    Composite(Vec<TaskTag>),
}

impl std::fmt::Display for TaskTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TaskTag::T2V => write!(f, "t2v"),
            TaskTag::R2V => write!(f, "r2v"),
            TaskTag::V2V => write!(f, "v2v"),
            TaskTag::MV2V => write!(f, "mv2v"),
            TaskTag::Composite(parts) => {
                write!(f, "composite(")?;
                for (i, p) in parts.iter().enumerate() {
                    if i > 0 {
                        write!(f, "+")?;
                    }
                    write!(f, "{}", p)?;
                }
                write!(f, ")")
            }
        }
    }
}

impl std::str::FromStr for TaskTag {
    type Err = Error;

    /// Inverse of `Display`. Composite parts are always simple tags because
    /// reference attachment flattens nesting.
    fn from_str(s: &str) -> Result<TaskTag> {
        Ok(match s {
            "t2v" => TaskTag::T2V,
            "r2v" => TaskTag::R2V,
            "v2v" => TaskTag::V2V,
            "mv2v" => TaskTag::MV2V,
            _ => {
                let inner = s
                    .strip_prefix("composite(")
                    .and_then(|r| r.strip_suffix(')'))
                    .ok_or_else(|| Error::arg("task_tag", format!("unknown tag {s:?}")))?;
                let parts = inner
                    .split('+')
                    .map(|p| match p.parse::<TaskTag>() {
                        Ok(TaskTag::Composite(_)) | Err(_) => {
                            Err(Error::arg("task_tag", format!("bad composite part {p:?}")))
                        }
                        Ok(simple) => Ok(simple),
                    })
                    .collect::<Result<Vec<_>>>()?;
                TaskTag::Composite(parts)
            }
        })
    }
}

/// One validation finding; `field` is a path like `masks[2]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub field: String,
    pub message: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

#[derive(Clone, Debug)]
pub struct Vcu {
    prompt: String,
    frames: FrameSeq,
    masks: MaskSeq,
    ref_count: usize,
    video_len: usize,
    task_tag: TaskTag,
}

impl Vcu {
    pub fn prompt(&self) -> &str {
        &self.prompt
    }

    pub fn frames(&self) -> &FrameSeq {
        &self.frames
    }

    pub fn masks(&self) -> &MaskSeq {
        &self.masks
    }

    pub fn ref_count(&self) -> usize {
        self.ref_count
    }

    pub fn video_len(&self) -> usize {
        self.video_len
    }

    pub fn task_tag(&self) -> &TaskTag {
        &self.task_tag
    }

    pub fn height(&self) -> usize {
        self.frames.height()
    }

    pub fn width(&self) -> usize {
        self.frames.width()
    }

    /// The non-reference trailing part of the frame sequence.
    pub fn video_frames(&self) -> FrameSeq {
        self.frames.slice_frames(self.ref_count, self.video_len)
    }

    pub fn video_masks(&self) -> MaskSeq {
        self.masks.slice_frames(self.ref_count, self.video_len)
    }

    pub fn reference_frames(&self) -> FrameSeq {
        self.frames.slice_frames(0, self.ref_count)
    }

    /// Assemble from raw parts, running full validation. Used by builders
    /// and by deserialization.
    pub fn from_parts(
        prompt: String,
        frames: FrameSeq,
        masks: MaskSeq,
        ref_count: usize,
        video_len: usize,
        task_tag: TaskTag,
    ) -> Result<Vcu> {
        let v = Vcu { prompt, frames, masks, ref_count, video_len, task_tag };
        let violations = v.validate();
        if let Some(first) = violations.first() {
            return Err(Error::arg(
                "Vcu",
                format!("{} ({} violations total)", first, violations.len()),
            ));
        }
        Ok(v)
    }

    /// Structural checks beyond what the component types enforce.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let expected = self.ref_count + self.video_len;
        if self.video_len == 0 {
            out.push(Violation {
                field: "video_len".into(),
                message: "must be at least 1".into(),
            });
        }
        if self.frames.count() != expected {
            out.push(Violation {
                field: "frames".into(),
                message: format!(
                    "{} frames, expected ref_count + video_len = {}",
                    self.frames.count(),
                    expected
                ),
            });
        }
        if self.masks.count() != self.frames.count() {
            out.push(Violation {
                field: "masks".into(),
                message: format!(
                    "{} masks for {} frames",
                    self.masks.count(),
                    self.frames.count()
                ),
            });
        }
        if self.masks.height() != self.frames.height() || self.masks.width() != self.frames.width()
        {
            out.push(Violation {
                field: "masks".into(),
                message: format!(
                    "spatial size ({}, {}) vs frames ({}, {})",
                    self.masks.height(),
                    self.masks.width(),
                    self.frames.height(),
                    self.frames.width()
                ),
            });
        }
        let per_frame = self.masks.height() * self.masks.width();
        for i in 0..self.ref_count.min(self.masks.count()) {
            let frame = &self.masks.tensor().data()[i * per_frame..(i + 1) * per_frame];
            if frame.iter().any(|&v| v != 0.0) {
                out.push(Violation {
                    field: format!("masks[{}]", i),
                    message: "reference frames must carry all-zero masks".into(),
                });
            }
        }
        out
    }
}

/// Generation from text alone: blank frames, everything generable.
pub fn make_t2v(prompt: &str, n: usize, h: usize, w: usize) -> Result<Vcu> {
    Vcu::from_parts(
        prompt.to_string(),
        FrameSeq::zeros(n, h, w),
        MaskSeq::ones(n, h, w),
        0,
        n,
        TaskTag::T2V,
    )
}

/// Generation guided by reference images placed before the clip.
pub fn make_r2v(prompt: &str, refs: &FrameSeq, n: usize) -> Result<Vcu> {
    let l = refs.count();
    let (h, w) = (refs.height(), refs.width());
    let frames = FrameSeq::concat(refs, &FrameSeq::zeros(n, h, w))?;
    let masks = MaskSeq::concat(&MaskSeq::zeros(l, h, w), &MaskSeq::ones(n, h, w))?;
    Vcu::from_parts(prompt.to_string(), frames, masks, l, n, TaskTag::R2V)
}

/// Full-clip repaint conditioned on an input video.
pub fn make_v2v(prompt: &str, video: &FrameSeq) -> Result<Vcu> {
    let n = video.count();
    let masks = MaskSeq::ones(n, video.height(), video.width());
    Vcu::from_parts(prompt.to_string(), video.clone(), masks, 0, n, TaskTag::V2V)
}

/// Masked editing: regenerate only where the mask is 1.
pub fn make_mv2v(prompt: &str, video: &FrameSeq, masks: &MaskSeq) -> Result<Vcu> {
    if masks.count() != video.count()
        || masks.height() != video.height()
        || masks.width() != video.width()
    {
        return Err(Error::dim(
            "make_mv2v",
            format!(
                "masks ({}, {}, {}) vs video ({}, {}, {})",
                masks.count(),
                masks.height(),
                masks.width(),
                video.count(),
                video.height(),
                video.width()
            ),
        ));
    }
    Vcu::from_parts(
        prompt.to_string(),
        video.clone(),
        masks.clone(),
        0,
        video.count(),
        TaskTag::MV2V,
    )
}

/// Prepend reference frames to an existing unit. New references go in front
/// of any the unit already carries; the result is tagged composite.
pub fn with_references(vcu: &Vcu, refs: &FrameSeq) -> Result<Vcu> {
    let l = refs.count();
    let frames = FrameSeq::concat(refs, &vcu.frames)?;
    let masks = MaskSeq::concat(&MaskSeq::zeros(l, refs.height(), refs.width()), &vcu.masks)?;
    let mut parts = vec![TaskTag::R2V];
    match &vcu.task_tag {
        TaskTag::Composite(existing) => parts.extend(existing.iter().cloned()),
        other => parts.push(other.clone()),
    }
    Vcu::from_parts(
        vcu.prompt.clone(),
        frames,
        masks,
        vcu.ref_count + l,
        vcu.video_len,
        TaskTag::Composite(parts),
    )
}

/// Clip pinned at specific frame indices. In keep mode (`condition_mode`
/// false) anchors are preserved verbatim and everything else is generated;
/// in condition mode the anchors merely steer a full repaint.
pub fn make_frame_anchored(
    prompt: &str,
    anchors: &[(usize, FrameSeq)],
    n: usize,
    h: usize,
    w: usize,
    condition_mode: bool,
) -> Result<Vcu> {
    let mut seen = vec![false; n];
    for (idx, frame) in anchors {
        if *idx >= n {
            return Err(Error::arg(
                "make_frame_anchored",
                format!("anchor index {} out of {} frames", idx, n),
            ));
        }
        if std::mem::replace(&mut seen[*idx], true) {
            return Err(Error::arg(
                "make_frame_anchored",
                format!("duplicate anchor index {}", idx),
            ));
        }
        if frame.count() != 1 || frame.height() != h || frame.width() != w {
            return Err(Error::dim(
                "make_frame_anchored",
                format!(
                    "anchor at {} is ({}, {}, {}), want (1, {}, {})",
                    idx,
                    frame.count(),
                    frame.height(),
                    frame.width(),
                    h,
                    w
                ),
            ));
        }
    }
    let mut frame_data = vec![0.0f32; n * h * w * 3];
    let stride = h * w * 3;
    for (idx, frame) in anchors {
        frame_data[idx * stride..(idx + 1) * stride].copy_from_slice(frame.tensor().data());
    }
    let mask_value = |frame_idx: usize| -> f32 {
        if condition_mode || !seen[frame_idx] {
            1.0
        } else {
            0.0
        }
    };
    let mut mask_data = vec![0.0f32; n * h * w];
    for f in 0..n {
        let v = mask_value(f);
        mask_data[f * h * w..(f + 1) * h * w].fill(v);
    }
    let tag = if condition_mode { TaskTag::V2V } else { TaskTag::MV2V };
    Vcu::from_parts(
        prompt.to_string(),
        FrameSeq::new(Tensor::from_vec(&[n, h, w, 3], frame_data)?)?,
        MaskSeq::new(Tensor::from_vec(&[n, h, w], mask_data)?)?,
        0,
        n,
        tag,
    )
}
