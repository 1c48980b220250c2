//! Condition channels derived from a scene and its rendered video.
//!
//! Each renderer produces a video-shaped frame sequence that stands in for
//! a real perception signal: grayscale, bounding-box layout, edge sketch,
//! depth, and dense motion. The geometric channels read the scene's ground
//! truth instead of estimating anything, so they are exact by construction.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vcu::FrameSeq;

use super::scene::Scene;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConditionKind {
    Gray,
    Layout,
    Scribble,
    DepthProxy,
    Flow,
}

impl std::str::FromStr for ConditionKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<ConditionKind> {
        Ok(match s {
            "gray" => ConditionKind::Gray,
            "layout" => ConditionKind::Layout,
            "scribble" => ConditionKind::Scribble,
            "depth" => ConditionKind::DepthProxy,
            "flow" => ConditionKind::Flow,
            _ => return Err(Error::arg("condition_kind", format!("unknown kind {s:?}"))),
        })
    }
}

/// Velocities map to color by direction and speed: R and G carry the x and
/// y components scaled by this full-scale speed, B stays 0. Zero motion is
/// therefore exactly mid-gray.
pub const FLOW_FULL_SCALE: f32 = 4.0;

const LUMA: [f32; 3] = [0.299, 0.587, 0.114];
const SOBEL_THRESHOLD: f32 = 0.2;

pub fn condition(scene: &Scene, video: &FrameSeq, kind: ConditionKind) -> Result<FrameSeq> {
    let (n, h, w) = (video.count(), video.height(), video.width());
    let out = match kind {
        ConditionKind::Gray => gray(video),
        ConditionKind::Layout => layout(scene, n, h, w),
        ConditionKind::Scribble => scribble(video),
        ConditionKind::DepthProxy => depth_proxy(scene, n, h, w),
        ConditionKind::Flow => flow(scene, n, h, w),
    };
    FrameSeq::new(Tensor::from_vec(&[n, h, w, 3], out)?)
}

fn luma_of(px: &[f32]) -> f32 {
    LUMA[0] * px[0] + LUMA[1] * px[1] + LUMA[2] * px[2]
}

fn gray(video: &FrameSeq) -> Vec<f32> {
    let src = video.tensor().data();
    let mut out = vec![0.0f32; src.len()];
    for (i, px) in src.chunks_exact(3).enumerate() {
        let l = luma_of(px);
        out[i * 3..i * 3 + 3].copy_from_slice(&[l, l, l]);
    }
    out
}

fn layout(scene: &Scene, n: usize, h: usize, w: usize) -> Vec<f32> {
    let mut out = vec![-1.0f32; n * h * w * 3];
    let order = scene.painter_order();
    for t in 0..n {
        for &i in &order {
            let shape = &scene.shapes[i];
            let (x0, x1, y0, y1) = shape.bbox_at(t);
            let mut draw = |x: i64, y: i64| {
                if (0..w as i64).contains(&x) && (0..h as i64).contains(&y) {
                    let base = ((t * h + y as usize) * w + x as usize) * 3;
                    out[base..base + 3].copy_from_slice(&shape.color);
                }
            };
            for x in x0..=x1 {
                draw(x, y0);
                draw(x, y1);
            }
            for y in y0..=y1 {
                draw(x0, y);
                draw(x1, y);
            }
        }
    }
    out
}

/// Binarized Sobel magnitude of the grayscale video, white on black.
/// Borders replicate their nearest pixel so the canvas edge itself is not
/// reported as an edge.
fn scribble(video: &FrameSeq) -> Vec<f32> {
    let (n, h, w) = (video.count(), video.height(), video.width());
    let g = gray(video);
    let lum = |t: usize, y: i64, x: i64| {
        let y = y.clamp(0, h as i64 - 1) as usize;
        let x = x.clamp(0, w as i64 - 1) as usize;
        g[((t * h + y) * w + x) * 3]
    };
    let mut out = vec![-1.0f32; n * h * w * 3];
    for t in 0..n {
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let gx = lum(t, y - 1, x + 1) + 2.0 * lum(t, y, x + 1) + lum(t, y + 1, x + 1)
                    - lum(t, y - 1, x - 1)
                    - 2.0 * lum(t, y, x - 1)
                    - lum(t, y + 1, x - 1);
                let gy = lum(t, y + 1, x - 1) + 2.0 * lum(t, y + 1, x) + lum(t, y + 1, x + 1)
                    - lum(t, y - 1, x - 1)
                    - 2.0 * lum(t, y - 1, x)
                    - lum(t, y - 1, x + 1);
                if (gx * gx + gy * gy).sqrt() > SOBEL_THRESHOLD {
                    let base = ((t * h + y as usize) * w + x as usize) * 3;
                    out[base..base + 3].copy_from_slice(&[1.0, 1.0, 1.0]);
                }
            }
        }
    }
    out
}

/// Nearer shapes render brighter; the background stays darkest. Depths map
/// affinely from (z_min - 1, z_max] onto (-1, 1].
fn depth_proxy(scene: &Scene, n: usize, h: usize, w: usize) -> Vec<f32> {
    let mut out = vec![-1.0f32; n * h * w * 3];
    let Some((z_lo, z_hi)) = scene.z_range() else {
        return out;
    };
    let span = (z_hi - z_lo + 1) as f32;
    for t in 0..n {
        for y in 0..h {
            for x in 0..w {
                if let Some(shape) = scene.topmost_at(t, x, y) {
                    let v = -1.0 + 2.0 * (shape.z - z_lo + 1) as f32 / span;
                    let base = ((t * h + y) * w + x) * 3;
                    out[base..base + 3].copy_from_slice(&[v, v, v]);
                }
            }
        }
    }
    out
}

fn flow(scene: &Scene, n: usize, h: usize, w: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; n * h * w * 3];
    for t in 0..n {
        for y in 0..h {
            for x in 0..w {
                if let Some(shape) = scene.topmost_at(t, x, y) {
                    let base = ((t * h + y) * w + x) * 3;
                    out[base] = (shape.vel.0 / FLOW_FULL_SCALE).clamp(-1.0, 1.0);
                    out[base + 1] = (shape.vel.1 / FLOW_FULL_SCALE).clamp(-1.0, 1.0);
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::scene::{render_scene, Shape, ShapeKind};

    fn one_shape(vel: (f32, f32), z: i32) -> Scene {
        Scene {
            shapes: vec![Shape {
                kind: ShapeKind::Square,
                color: [0.9, 0.2, -0.5],
                size: 4.0,
                pos: (8.0, 8.0),
                vel,
                z,
            }],
            bg_top: [-0.8; 3],
            bg_bottom: [-0.6; 3],
        }
    }

    #[test]
    fn gray_is_idempotent() {
        let scene = one_shape((1.0, -0.5), 0);
        let video = render_scene(&scene, 3, 16, 16).unwrap();
        let once = condition(&scene, &video, ConditionKind::Gray).unwrap();
        let twice = condition(&scene, &once, ConditionKind::Gray).unwrap();
        assert!(once.tensor().max_abs_diff(twice.tensor()) < 1e-6);
    }

    #[test]
    fn flow_of_a_static_scene_is_exactly_mid_gray() {
        let scene = one_shape((0.0, 0.0), 0);
        let video = render_scene(&scene, 3, 16, 16).unwrap();
        let f = condition(&scene, &video, ConditionKind::Flow).unwrap();
        assert_eq!(f.tensor().max_abs(), 0.0);
    }

    #[test]
    fn flow_encodes_direction_and_speed_inside_the_shape() {
        let scene = one_shape((2.0, -1.0), 0);
        let video = render_scene(&scene, 1, 16, 16).unwrap();
        let f = condition(&scene, &video, ConditionKind::Flow).unwrap();
        let d = f.tensor().data();
        let center = ((8 * 16) + 8) * 3;
        assert_eq!(d[center], 0.5);
        assert_eq!(d[center + 1], -0.25);
        assert_eq!(d[center + 2], 0.0);
        let corner = 0;
        assert_eq!(&d[corner..corner + 3], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn layout_outline_matches_the_analytic_bounding_box() {
        let scene = Scene {
            shapes: vec![Shape {
                kind: ShapeKind::Circle,
                color: [1.0, 1.0, 1.0],
                size: 5.0,
                pos: (16.0, 16.0),
                vel: (0.0, 0.0),
                z: 0,
            }],
            bg_top: [-1.0; 3],
            bg_bottom: [-1.0; 3],
        };
        let video = render_scene(&scene, 1, 32, 32).unwrap();
        let l = condition(&scene, &video, ConditionKind::Layout).unwrap();
        let d = l.tensor().data();
        for y in 0..32i64 {
            for x in 0..32i64 {
                let on_box = ((x == 11 || x == 21) && (11..=21).contains(&y))
                    || ((y == 11 || y == 21) && (11..=21).contains(&x));
                let px = &d[((y as usize * 32) + x as usize) * 3..][..3];
                if on_box {
                    assert_eq!(px, &[1.0, 1.0, 1.0], "({x}, {y}) should be outline");
                } else {
                    assert_eq!(px, &[-1.0, -1.0, -1.0], "({x}, {y}) should be background");
                }
            }
        }
    }

    #[test]
    fn scribble_is_binary_and_fires_on_the_shape_boundary() {
        let scene = one_shape((0.0, 0.0), 0);
        let video = render_scene(&scene, 1, 16, 16).unwrap();
        let s = condition(&scene, &video, ConditionKind::Scribble).unwrap();
        let d = s.tensor().data();
        for &v in d {
            assert!(v == 1.0 || v == -1.0);
        }
        // square spans [4, 12]^2: its edge column must fire, the deep
        // interior and the far corner must not
        let px = |y: usize, x: usize| d[((y * 16) + x) * 3];
        assert_eq!(px(8, 4), 1.0, "left edge");
        assert_eq!(px(8, 8), -1.0, "interior");
        assert_eq!(px(0, 15), -1.0, "far background");
    }

    #[test]
    fn depth_orders_brightness_by_nearness() {
        let scene = Scene {
            shapes: vec![
                Shape {
                    kind: ShapeKind::Square,
                    color: [0.5; 3],
                    size: 3.0,
                    pos: (5.0, 8.0),
                    vel: (0.0, 0.0),
                    z: 0,
                },
                Shape {
                    kind: ShapeKind::Square,
                    color: [0.5; 3],
                    size: 3.0,
                    pos: (11.0, 8.0),
                    vel: (0.0, 0.0),
                    z: 3,
                },
            ],
            bg_top: [0.0; 3],
            bg_bottom: [0.0; 3],
        };
        let video = render_scene(&scene, 1, 16, 16).unwrap();
        let dmap = condition(&scene, &video, ConditionKind::DepthProxy).unwrap();
        let d = dmap.tensor().data();
        let px = |y: usize, x: usize| d[((y * 16) + x) * 3];
        let far = px(8, 3);
        let near = px(8, 12);
        let bg = px(0, 0);
        assert_eq!(bg, -1.0, "background darkest");
        assert!(near > far && far > bg, "near {near}, far {far}, bg {bg}");
        assert_eq!(near, 1.0, "nearest maps to full brightness");
    }

    #[test]
    fn kind_parsing_rejects_unknown_names() {
        assert!("gray".parse::<ConditionKind>().is_ok());
        assert!("pose".parse::<ConditionKind>().is_err());
    }
}
