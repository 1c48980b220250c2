//! Editing-region masks over a rendered scene.
//!
//! Masks are binary and video-shaped: 1 marks pixels the model must
//! generate, 0 marks pixels that are given. Three styles cover the common
//! cases: a mask that follows one shape, a static rectangle, and a jittered
//! multi-rectangle variant for augmentation.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::vcu::MaskSeq;

use super::scene::{shape_support, Scene};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskStyle {
    /// Track a uniformly chosen shape, dilated by a small random radius.
    InstanceFollow,
    /// One rectangle covering 10..60% of the frame, constant over time.
    StaticRect,
    /// 1..3 rectangles whose corners jitter by up to 2px per frame.
    Augmented,
}

pub fn make_mask(
    scene: &Scene,
    style: MaskStyle,
    n: usize,
    h: usize,
    w: usize,
    rng: &Rng,
) -> Result<MaskSeq> {
    let values = match style {
        MaskStyle::InstanceFollow => instance_follow(scene, n, h, w, rng)?,
        MaskStyle::StaticRect => static_rect(n, h, w, rng),
        MaskStyle::Augmented => augmented(n, h, w, rng),
    };
    MaskSeq::new(Tensor::from_vec(&[n, h, w], values)?)
}

fn instance_follow(scene: &Scene, n: usize, h: usize, w: usize, rng: &Rng) -> Result<Vec<f32>> {
    if scene.shapes.is_empty() {
        return Err(Error::arg(
            "scene",
            "instance-follow mask needs at least one shape",
        ));
    }
    let mut rng = rng.split(0);
    let shape = &scene.shapes[rng.below(scene.shapes.len() as u64) as usize];
    let radius = rng.below(4) as i64;
    let mut out = vec![0.0f32; n * h * w];
    for t in 0..n {
        let support = shape_support(shape, t, h, w);
        let frame = &mut out[t * h * w..(t + 1) * h * w];
        dilate_into(&support, frame, h, w, radius);
    }
    Ok(out)
}

/// Chebyshev-ball dilation: a pixel turns on when any support pixel lies
/// within `radius` in both axes.
fn dilate_into(support: &[bool], frame: &mut [f32], h: usize, w: usize, radius: i64) {
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            if !support[(y as usize) * w + x as usize] {
                continue;
            }
            for dy in -radius..=radius {
                for dx in -radius..=radius {
                    let (ny, nx) = (y + dy, x + dx);
                    if (0..h as i64).contains(&ny) && (0..w as i64).contains(&nx) {
                        frame[(ny as usize) * w + nx as usize] = 1.0;
                    }
                }
            }
        }
    }
}

fn rect_frame(frame: &mut [f32], w: usize, y0: usize, y1: usize, x0: usize, x1: usize) {
    for y in y0..=y1 {
        for x in x0..=x1 {
            frame[y * w + x] = 1.0;
        }
    }
}

fn static_rect(n: usize, h: usize, w: usize, rng: &Rng) -> Vec<f32> {
    let mut rng = rng.split(0);
    let area = (h * w) as f64;
    let mut chosen = None;
    for _ in 0..64 {
        let y0 = rng.below(h as u64) as usize;
        let y1 = rng.below(h as u64) as usize;
        let x0 = rng.below(w as u64) as usize;
        let x1 = rng.below(w as u64) as usize;
        let (y0, y1) = (y0.min(y1), y0.max(y1));
        let (x0, x1) = (x0.min(x1), x0.max(x1));
        let frac = ((y1 - y0 + 1) * (x1 - x0 + 1)) as f64 / area;
        if (0.1..=0.6).contains(&frac) {
            chosen = Some((y0, y1, x0, x1));
            break;
        }
    }
    // centered box near 35% area; only reachable when 64 draws all miss
    let (y0, y1, x0, x1) = chosen.unwrap_or((h / 4, h / 4 + h / 2, w / 4, w / 4 + 7 * w / 10));
    let mut out = vec![0.0f32; n * h * w];
    for t in 0..n {
        rect_frame(&mut out[t * h * w..(t + 1) * h * w], w, y0, y1, x0, x1);
    }
    out
}

fn augmented(n: usize, h: usize, w: usize, rng: &Rng) -> Vec<f32> {
    let mut rng = rng.split(0);
    let rects = 1 + rng.below(3);
    let mut out = vec![0.0f32; n * h * w];
    for _ in 0..rects {
        let y0 = rng.below(h as u64) as i64;
        let y1 = rng.below(h as u64) as i64;
        let x0 = rng.below(w as u64) as i64;
        let x1 = rng.below(w as u64) as i64;
        for t in 0..n {
            let jy = rng.below(5) as i64 - 2;
            let jx = rng.below(5) as i64 - 2;
            let cy0 = (y0.min(y1) + jy).clamp(0, h as i64 - 1) as usize;
            let cy1 = (y0.max(y1) + jy).clamp(0, h as i64 - 1) as usize;
            let cx0 = (x0.min(x1) + jx).clamp(0, w as i64 - 1) as usize;
            let cx1 = (x0.max(x1) + jx).clamp(0, w as i64 - 1) as usize;
            rect_frame(&mut out[t * h * w..(t + 1) * h * w], w, cy0, cy1, cx0, cx1);
        }
    }
    out
}
