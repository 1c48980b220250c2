//! Procedural training data: moving-shape videos with exact condition
//! channels, editing masks, reference crops, and a task sampler that
//! assembles complete training units.
//!
//! Everything is driven by a single seed through pure RNG splits, so
//! `(task kind, seed)` fully determines a sample. Pixels are quantized to
//! the 8-bit container grid at generation time, which makes the on-disk
//! roundtrip bit-exact.

pub mod condition;
pub mod io;
pub mod mask;
pub mod scene;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::train::TrainSample;
use crate::vcu::{
    make_frame_anchored, make_mv2v, make_r2v, make_t2v, make_v2v, with_references, FrameSeq,
};

use condition::{condition, ConditionKind};
use mask::{make_mask, MaskStyle};
use scene::{random_scene, Scene, ShapeKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TaskKind {
    T2v,
    R2vObject,
    V2vGray,
    V2vLayout,
    V2vScribble,
    V2vDepth,
    V2vFlow,
    Mv2vInpaint,
    Mv2vOutpaint,
    ExtensionFirst,
    ExtensionEnds,
    ExtensionRandom,
    Composite,
}

impl TaskKind {
    pub const ALL: [TaskKind; 13] = [
        TaskKind::T2v,
        TaskKind::R2vObject,
        TaskKind::V2vGray,
        TaskKind::V2vLayout,
        TaskKind::V2vScribble,
        TaskKind::V2vDepth,
        TaskKind::V2vFlow,
        TaskKind::Mv2vInpaint,
        TaskKind::Mv2vOutpaint,
        TaskKind::ExtensionFirst,
        TaskKind::ExtensionEnds,
        TaskKind::ExtensionRandom,
        TaskKind::Composite,
    ];

    /// Kinds a composite sample may use as its base: everything with real
    /// video content (references get attached on top).
    pub const COMPOSITE_BASES: [TaskKind; 10] = [
        TaskKind::V2vGray,
        TaskKind::V2vLayout,
        TaskKind::V2vScribble,
        TaskKind::V2vDepth,
        TaskKind::V2vFlow,
        TaskKind::Mv2vInpaint,
        TaskKind::Mv2vOutpaint,
        TaskKind::ExtensionFirst,
        TaskKind::ExtensionEnds,
        TaskKind::ExtensionRandom,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::T2v => "t2v",
            TaskKind::R2vObject => "r2v_object",
            TaskKind::V2vGray => "v2v_gray",
            TaskKind::V2vLayout => "v2v_layout",
            TaskKind::V2vScribble => "v2v_scribble",
            TaskKind::V2vDepth => "v2v_depth",
            TaskKind::V2vFlow => "v2v_flow",
            TaskKind::Mv2vInpaint => "mv2v_inpaint",
            TaskKind::Mv2vOutpaint => "mv2v_outpaint",
            TaskKind::ExtensionFirst => "extension_first",
            TaskKind::ExtensionEnds => "extension_ends",
            TaskKind::ExtensionRandom => "extension_random",
            TaskKind::Composite => "composite",
        }
    }
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for TaskKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<TaskKind> {
        TaskKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::arg("task_kind", format!("unknown task kind {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GeomParams {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for GeomParams {
    fn default() -> GeomParams {
        GeomParams {
            frames: 8,
            height: 32,
            width: 32,
        }
    }
}

impl GeomParams {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::arg("geom", "frames, height, width must be positive"));
        }
        Ok(())
    }
}

/// Map a pixel in [-1, 1] onto the container's 8-bit grid.
pub fn pixel_to_u8(x: f32) -> u8 {
    ((x + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// Inverse of [`pixel_to_u8`] on its own range. The midpoint byte decodes
/// to exact zero so structural placeholder frames (all-zero slots in
/// generation layouts) survive the container bit-for-bit.
pub fn u8_to_pixel(b: u8) -> f32 {
    if b == 128 {
        0.0
    } else {
        b as f32 / 127.5 - 1.0
    }
}

/// Snap every pixel to the 8-bit grid. Idempotent, so frames survive the
/// dataset container bit-exactly.
pub fn quantize(frames: &FrameSeq) -> FrameSeq {
    let data: Vec<f32> = frames
        .tensor()
        .data()
        .iter()
        .map(|&v| u8_to_pixel(pixel_to_u8(v)))
        .collect();
    let t = Tensor::from_vec(frames.tensor().shape(), data).expect("same layout");
    FrameSeq::new(t).expect("grid values stay in range")
}

fn color_name(c: [f32; 3]) -> &'static str {
    match (c[0] > 0.4, c[1] > 0.4, c[2] > 0.4) {
        (false, false, false) => "gray",
        (true, false, false) => "red",
        (false, true, false) => "green",
        (false, false, true) => "blue",
        (true, true, false) => "yellow",
        (true, false, true) => "magenta",
        (false, true, true) => "cyan",
        (true, true, true) => "white",
    }
}

fn kind_name(k: ShapeKind) -> &'static str {
    match k {
        ShapeKind::Circle => "circle",
        ShapeKind::Square => "square",
        ShapeKind::Triangle => "triangle",
    }
}

fn motion_phrase(vel: (f32, f32)) -> String {
    let mut parts: Vec<&str> = Vec::new();
    if vel.0 <= -0.25 {
        parts.push("left");
    } else if vel.0 >= 0.25 {
        parts.push("right");
    }
    if vel.1 <= -0.25 {
        parts.push("up");
    } else if vel.1 >= 0.25 {
        parts.push("down");
    }
    if parts.is_empty() {
        "holding still".to_string()
    } else {
        format!("moving {}", parts.join(" and "))
    }
}

/// Deterministic caption naming each shape's color, kind, and motion.
pub fn describe(scene: &Scene) -> String {
    let mut s = String::new();
    for (i, shape) in scene.shapes.iter().enumerate() {
        if i > 0 {
            s.push_str(", ");
        }
        s.push_str(&format!(
            "a {} {} {}",
            color_name(shape.color),
            kind_name(shape.kind),
            motion_phrase(shape.vel)
        ));
    }
    s.push_str(" over a gradient background");
    s
}

// Per-sample RNG streams, split off the seed root.
const STREAM_SCENE: u64 = 0;
const STREAM_MASK: u64 = 1;
const STREAM_BASE_PICK: u64 = 3;
const STREAM_REF_CROP: u64 = 4;

/// Build one training unit. The seed alone determines everything: scene,
/// masks, anchors, reference augmentation, and the composite base.
pub fn make_sample(kind: TaskKind, seed: u64, geom: &GeomParams) -> Result<TrainSample> {
    geom.validate()?;
    let root = Rng::new(seed);
    let (n, h, w) = (geom.frames, geom.height, geom.width);
    let scene = random_scene(&mut root.split(STREAM_SCENE), h, w);
    let target = quantize(&scene::render_scene(&scene, n, h, w)?);
    let prompt = describe(&scene);

    let vcu = match kind {
        TaskKind::T2v => make_t2v(&prompt, n, h, w)?,
        TaskKind::R2vObject => {
            let reference = reference_crop(&scene, &target, &root)?;
            make_r2v(&prompt, &reference, n)?
        }
        TaskKind::V2vGray => condition_vcu(&scene, &target, ConditionKind::Gray, &prompt)?,
        TaskKind::V2vLayout => condition_vcu(&scene, &target, ConditionKind::Layout, &prompt)?,
        TaskKind::V2vScribble => condition_vcu(&scene, &target, ConditionKind::Scribble, &prompt)?,
        TaskKind::V2vDepth => condition_vcu(&scene, &target, ConditionKind::DepthProxy, &prompt)?,
        TaskKind::V2vFlow => condition_vcu(&scene, &target, ConditionKind::Flow, &prompt)?,
        TaskKind::Mv2vInpaint => {
            let m = make_mask(&scene, MaskStyle::InstanceFollow, n, h, w, &root.split(STREAM_MASK))?;
            make_mv2v(&prompt, &target, &m)?
        }
        TaskKind::Mv2vOutpaint => {
            let m = make_mask(&scene, MaskStyle::InstanceFollow, n, h, w, &root.split(STREAM_MASK))?;
            make_mv2v(&prompt, &target, &m.complement())?
        }
        TaskKind::ExtensionFirst => extension(&prompt, &target, &[0])?,
        TaskKind::ExtensionEnds => {
            let anchors = if n > 1 { vec![0, n - 1] } else { vec![0] };
            extension(&prompt, &target, &anchors)?
        }
        TaskKind::ExtensionRandom => {
            let anchors = random_anchor_set(&mut root.split(STREAM_MASK), n);
            extension(&prompt, &target, &anchors)?
        }
        TaskKind::Composite => {
            let mut pick = root.split(STREAM_BASE_PICK);
            let base =
                TaskKind::COMPOSITE_BASES[pick.below(TaskKind::COMPOSITE_BASES.len() as u64) as usize];
            return make_composite(base, seed, geom);
        }
    };
    TrainSample::new(vcu, target, seed)
}

/// A composite sample with a chosen base task: the base unit plus one
/// cropped reference image prepended.
pub fn make_composite(base: TaskKind, seed: u64, geom: &GeomParams) -> Result<TrainSample> {
    if !TaskKind::COMPOSITE_BASES.contains(&base) {
        return Err(Error::arg(
            "composite_base",
            format!("{base} cannot serve as a composite base"),
        ));
    }
    let sample = make_sample(base, seed, geom)?;
    let root = Rng::new(seed);
    let scene = random_scene(&mut root.split(STREAM_SCENE), geom.height, geom.width);
    let reference = reference_crop(&scene, &sample.target, &root)?;
    let vcu = with_references(&sample.vcu, &reference)?;
    TrainSample::new(vcu, sample.target, seed)
}

fn condition_vcu(
    scene: &Scene,
    target: &FrameSeq,
    kind: ConditionKind,
    prompt: &str,
) -> Result<crate::vcu::Vcu> {
    let cond = quantize(&condition(scene, target, kind)?);
    make_v2v(prompt, &cond)
}

fn extension(prompt: &str, target: &FrameSeq, indices: &[usize]) -> Result<crate::vcu::Vcu> {
    let anchors: Vec<(usize, FrameSeq)> = indices
        .iter()
        .map(|&i| (i, target.slice_frames(i, 1)))
        .collect();
    make_frame_anchored(
        prompt,
        &anchors,
        target.count(),
        target.height(),
        target.width(),
        false,
    )
}

/// A sorted, nonempty, proper subset of frame indices (all of 0..n only
/// when n == 1).
fn random_anchor_set(rng: &mut Rng, n: usize) -> Vec<usize> {
    if n < 2 {
        return vec![0];
    }
    let count = 1 + rng.below(n as u64 - 1) as usize;
    let mut indices: Vec<usize> = (0..n).collect();
    for i in 0..count {
        let j = i + rng.below((n - i) as u64) as usize;
        indices.swap(i, j);
    }
    indices.truncate(count);
    indices.sort_unstable();
    indices
}

/// Tight bounding-box crop of one shape from the first target frame,
/// pasted centered on a neutral canvas, brightness-jittered as a light
/// augmentation.
fn reference_crop(scene: &Scene, target: &FrameSeq, root: &Rng) -> Result<FrameSeq> {
    if scene.shapes.is_empty() {
        return Err(Error::arg("reference_crop", "scene has no shapes"));
    }
    let (h, w) = (target.height(), target.width());
    let mut rng = root.split(STREAM_REF_CROP);
    let shape = &scene.shapes[rng.below(scene.shapes.len() as u64) as usize];
    let jitter = rng.range_f32(-0.1, 0.1);

    let (x0, x1, y0, y1) = shape.bbox_at(0);
    let x0 = x0.clamp(0, w as i64 - 1) as usize;
    let x1 = x1.clamp(0, w as i64 - 1) as usize;
    let y0 = y0.clamp(0, h as i64 - 1) as usize;
    let y1 = y1.clamp(0, h as i64 - 1) as usize;
    let (cw, ch) = (x1 - x0 + 1, y1 - y0 + 1);

    let src = target.tensor().data();
    let mut out = vec![0.0f32; h * w * 3];
    let (oy, ox) = ((h - ch) / 2, (w - cw) / 2);
    for y in 0..ch {
        for x in 0..cw {
            let s = ((y0 + y) * w + (x0 + x)) * 3;
            let d = ((oy + y) * w + (ox + x)) * 3;
            for c in 0..3 {
                out[d + c] = (src[s + c] + jitter).clamp(-1.0, 1.0);
            }
        }
    }
    let raw = FrameSeq::new(Tensor::from_vec(&[1, h, w, 3], out)?)?;
    Ok(quantize(&raw))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::decouple;
    use crate::model::ModelConfig;
    use crate::vcu::TaskTag;

    fn geom() -> GeomParams {
        GeomParams::default()
    }

    #[test]
    fn kind_names_roundtrip() {
        for kind in TaskKind::ALL {
            assert_eq!(kind.name().parse::<TaskKind>().unwrap(), kind);
        }
        assert!("v2v_pose".parse::<TaskKind>().is_err());
    }

    #[test]
    fn every_kind_is_deterministic_in_its_seed() {
        for kind in TaskKind::ALL {
            let a = make_sample(kind, 17, &geom()).unwrap();
            let b = make_sample(kind, 17, &geom()).unwrap();
            assert_eq!(a.vcu.prompt(), b.vcu.prompt());
            assert_eq!(a.vcu.task_tag(), b.vcu.task_tag());
            assert!(a.vcu.frames().tensor().bit_eq(b.vcu.frames().tensor()));
            assert!(a.vcu.masks().tensor().bit_eq(b.vcu.masks().tensor()));
            assert!(a.target.tensor().bit_eq(b.target.tensor()), "{kind}");
        }
    }

    #[test]
    fn every_kind_validates_under_the_default_model() {
        let cfg = ModelConfig::default();
        for kind in TaskKind::ALL {
            for seed in 0..3u64 {
                let s = make_sample(kind, seed, &geom()).unwrap();
                s.validate(&cfg).unwrap();
                assert!(s.vcu.validate().is_empty(), "{kind} seed {seed}");
            }
        }
    }

    #[test]
    fn t2v_delegates_to_the_plain_builder() {
        let s = make_sample(TaskKind::T2v, 5, &geom()).unwrap();
        let direct = make_t2v(s.vcu.prompt(), 8, 32, 32).unwrap();
        assert_eq!(s.vcu.task_tag(), &TaskTag::T2V);
        assert!(s.vcu.frames().tensor().bit_eq(direct.frames().tensor()));
        assert!(s.vcu.masks().tensor().bit_eq(direct.masks().tensor()));
    }

    #[test]
    fn outpaint_mask_complements_the_paired_inpaint_mask() {
        for seed in 0..5u64 {
            let inp = make_sample(TaskKind::Mv2vInpaint, seed, &geom()).unwrap();
            let out = make_sample(TaskKind::Mv2vOutpaint, seed, &geom()).unwrap();
            assert!(out
                .vcu
                .masks()
                .tensor()
                .bit_eq(inp.vcu.masks().complement().tensor()));
            assert!(out.vcu.frames().tensor().bit_eq(inp.vcu.frames().tensor()));
        }
    }

    #[test]
    fn forced_reference_inpaint_composite_keeps_the_base_masks() {
        let seed = 11;
        let comp = make_composite(TaskKind::Mv2vInpaint, seed, &geom()).unwrap();
        let base = make_sample(TaskKind::Mv2vInpaint, seed, &geom()).unwrap();
        assert_eq!(comp.vcu.ref_count(), 1);
        assert_eq!(
            comp.vcu.task_tag(),
            &TaskTag::Composite(vec![TaskTag::R2V, TaskTag::MV2V])
        );
        assert!(comp
            .vcu
            .video_masks()
            .tensor()
            .bit_eq(base.vcu.masks().tensor()));
        // reference slots are masked as given
        assert_eq!(comp.vcu.masks().tensor().data()[..32 * 32].iter().sum::<f32>(), 0.0);
    }

    #[test]
    fn composite_base_pick_is_uniformly_drawn_and_restricted() {
        assert!(make_composite(TaskKind::T2v, 0, &geom()).is_err());
        assert!(make_composite(TaskKind::Composite, 0, &geom()).is_err());
        let mut seen = std::collections::HashSet::new();
        for seed in 0..40u64 {
            let s = make_sample(TaskKind::Composite, seed, &geom()).unwrap();
            assert!(s.vcu.ref_count() >= 1);
            if let TaskTag::Composite(parts) = s.vcu.task_tag() {
                assert_eq!(parts[0], TaskTag::R2V);
                seen.insert(format!("{}", s.vcu.task_tag()));
            } else {
                panic!("composite sample carries tag {}", s.vcu.task_tag());
            }
        }
        assert!(seen.len() >= 2, "base pick never varied: {seen:?}");
    }

    #[test]
    fn repaint_tasks_put_all_content_in_the_reactive_stream() {
        for kind in [
            TaskKind::V2vGray,
            TaskKind::V2vLayout,
            TaskKind::V2vScribble,
            TaskKind::V2vDepth,
            TaskKind::V2vFlow,
        ] {
            let s = make_sample(kind, 3, &geom()).unwrap();
            let (f_c, f_k) = decouple(s.vcu.frames(), s.vcu.masks()).unwrap();
            assert_eq!(f_k.tensor().max_abs(), 0.0, "{kind}");
            assert!(f_c.tensor().bit_eq(s.vcu.frames().tensor()));
        }
    }

    #[test]
    fn extension_anchors_carry_target_frames_and_zero_masks() {
        for kind in [
            TaskKind::ExtensionFirst,
            TaskKind::ExtensionEnds,
            TaskKind::ExtensionRandom,
        ] {
            for seed in 0..5u64 {
                let s = make_sample(kind, seed, &geom()).unwrap();
                let masks = s.vcu.masks();
                let frames = s.vcu.frames();
                let mut anchored = 0;
                for t in 0..8 {
                    let m = masks.slice_frames(t, 1);
                    let msum: f32 = m.tensor().data().iter().sum();
                    let is_anchor = msum == 0.0;
                    if !is_anchor {
                        assert_eq!(msum, 32.0 * 32.0, "{kind}: frame {t} mask not constant");
                        continue;
                    }
                    anchored += 1;
                    assert!(frames
                        .slice_frames(t, 1)
                        .tensor()
                        .bit_eq(s.target.slice_frames(t, 1).tensor()));
                }
                match kind {
                    TaskKind::ExtensionFirst => assert_eq!(anchored, 1),
                    TaskKind::ExtensionEnds => assert_eq!(anchored, 2),
                    _ => assert!((1..8).contains(&anchored)),
                }
                if kind == TaskKind::ExtensionEnds {
                    let first: f32 = masks.slice_frames(0, 1).tensor().data().iter().sum();
                    let last: f32 = masks.slice_frames(7, 1).tensor().data().iter().sum();
                    assert_eq!(first + last, 0.0);
                }
            }
        }
    }

    #[test]
    fn reference_crops_are_centered_and_jittered() {
        let s = make_sample(TaskKind::R2vObject, 9, &geom()).unwrap();
        assert_eq!(s.vcu.ref_count(), 1);
        assert_eq!(s.vcu.task_tag(), &TaskTag::R2V);
        let r = s.vcu.reference_frames();
        assert_eq!((r.count(), r.height(), r.width()), (1, 32, 32));
        // corners stay neutral: the crop is centered and smaller than the canvas
        let d = r.tensor().data();
        let neutral = u8_to_pixel(pixel_to_u8(0.0));
        assert_eq!(d[0], neutral);
        assert_eq!(d[d.len() - 1], neutral);
        assert!(
            d.iter().any(|&v| v != neutral),
            "reference should hold crop content"
        );
    }

    #[test]
    fn quantization_is_idempotent_and_pins_the_grid() {
        assert_eq!(pixel_to_u8(-1.0), 0);
        assert_eq!(pixel_to_u8(1.0), 255);
        assert_eq!(pixel_to_u8(0.0), 128);
        assert_eq!(u8_to_pixel(0), -1.0);
        assert_eq!(u8_to_pixel(255), 1.0);
        assert_eq!(u8_to_pixel(128), 0.0);
        for b in 0..=255u8 {
            assert_eq!(pixel_to_u8(u8_to_pixel(b)), b);
        }
        let mut rng = Rng::new(4);
        let data: Vec<f32> = (0..4 * 8 * 8 * 3).map(|_| rng.range_f32(-1.0, 1.0)).collect();
        let f = FrameSeq::new(Tensor::from_vec(&[4, 8, 8, 3], data).unwrap()).unwrap();
        let once = quantize(&f);
        let twice = quantize(&once);
        assert!(once.tensor().bit_eq(twice.tensor()));
    }

    #[test]
    fn prompts_name_shapes_and_motion() {
        let s = make_sample(TaskKind::T2v, 2, &geom()).unwrap();
        let p = s.vcu.prompt();
        assert!(p.contains("a "), "{p}");
        assert!(p.ends_with("over a gradient background"), "{p}");
        assert!(
            p.contains("circle") || p.contains("square") || p.contains("triangle"),
            "{p}"
        );
        assert_eq!(motion_phrase((1.0, 0.0)), "moving right");
        assert_eq!(motion_phrase((-0.5, 0.3)), "moving left and down");
        assert_eq!(motion_phrase((0.1, -0.1)), "holding still");
        assert_eq!(motion_phrase((0.0, -2.0)), "moving up");
    }
}
