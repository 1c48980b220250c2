//! Procedural moving-shape scenes and their rasterizer.
//!
//! A scene is a handful of colored shapes drifting at constant velocity over
//! a vertical background gradient. Rasterization is deliberately hard-edged
//! and translation-exact: a pixel is inside or out by a closed-form test on
//! its offset from the shape center, so shifting a center by a whole pixel
//! shifts the support by exactly that pixel. Ground truth (positions,
//! velocities, depth order) stays available to the condition renderers.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::vcu::FrameSeq;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

#[derive(Clone, Debug)]
pub struct Shape {
    pub kind: ShapeKind,
    /// RGB in [-1, 1].
    pub color: [f32; 3],
    /// Half-extent in pixels (radius for circles).
    pub size: f32,
    /// Center at frame 0, (x, y).
    pub pos: (f32, f32),
    /// Pixels per frame.
    pub vel: (f32, f32),
    /// Depth order; larger is nearer and drawn on top.
    pub z: i32,
}

impl Shape {
    pub fn center_at(&self, frame: usize) -> (f32, f32) {
        (self.pos.0 + self.vel.0 * frame as f32, self.pos.1 + self.vel.1 * frame as f32)
    }

    /// Closed-form inclusion test against the center offset.
    pub fn covers(&self, frame: usize, x: usize, y: usize) -> bool {
        let (cx, cy) = self.center_at(frame);
        let (dx, dy) = (x as f32 - cx, y as f32 - cy);
        let s = self.size;
        match self.kind {
            ShapeKind::Circle => dx * dx + dy * dy <= s * s,
            ShapeKind::Square => dx.abs() <= s && dy.abs() <= s,
            ShapeKind::Triangle => {
                // apex up: vertices (cx, cy-s), (cx-s, cy+s), (cx+s, cy+s)
                let down = dy + s;
                (0.0..=2.0 * s).contains(&down) && dx.abs() <= down / 2.0
            }
        }
    }

    /// Axis-aligned bounding box [x0, x1] x [y0, y1] at a frame, unclipped.
    pub fn bbox_at(&self, frame: usize) -> (i64, i64, i64, i64) {
        let (cx, cy) = self.center_at(frame);
        let s = self.size;
        (
            (cx - s).round() as i64,
            (cx + s).round() as i64,
            (cy - s).round() as i64,
            (cy + s).round() as i64,
        )
    }
}

#[derive(Clone, Debug)]
pub struct Scene {
    pub shapes: Vec<Shape>,
    pub bg_top: [f32; 3],
    pub bg_bottom: [f32; 3],
}

impl Scene {
    /// Painter order: back to front, ties broken by insertion order.
    pub fn painter_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.shapes.len()).collect();
        order.sort_by_key(|&i| self.shapes[i].z);
        order
    }

    /// The shape visible at a pixel, if any: the last covering one in
    /// painter order.
    pub fn topmost_at(&self, frame: usize, x: usize, y: usize) -> Option<&Shape> {
        let mut hit = None;
        for &i in &self.painter_order() {
            if self.shapes[i].covers(frame, x, y) {
                hit = Some(&self.shapes[i]);
            }
        }
        hit
    }

    /// Range of depth values present, if the scene has shapes.
    pub fn z_range(&self) -> Option<(i32, i32)> {
        let lo = self.shapes.iter().map(|s| s.z).min()?;
        let hi = self.shapes.iter().map(|s| s.z).max()?;
        Some((lo, hi))
    }
}

/// Draw a random scene: 1-3 shapes with bright colors over a dark gradient,
/// everything fully on canvas at frame 0.
pub fn random_scene(rng: &mut Rng, h: usize, w: usize) -> Scene {
    let dark = |rng: &mut Rng| {
        [rng.range_f32(-1.0, -0.3), rng.range_f32(-1.0, -0.3), rng.range_f32(-1.0, -0.3)]
    };
    let bg_top = dark(rng);
    let bg_bottom = dark(rng);
    let count = 1 + rng.below(3) as usize;
    let mut shapes = Vec::with_capacity(count);
    for _ in 0..count {
        let kind = match rng.below(3) {
            0 => ShapeKind::Circle,
            1 => ShapeKind::Square,
            _ => ShapeKind::Triangle,
        };
        let size = rng.range_f32(h as f32 / 8.0, h as f32 / 4.0);
        shapes.push(Shape {
            kind,
            color: [
                rng.range_f32(-0.2, 1.0),
                rng.range_f32(-0.2, 1.0),
                rng.range_f32(-0.2, 1.0),
            ],
            size,
            pos: (rng.range_f32(size, w as f32 - size), rng.range_f32(size, h as f32 - size)),
            vel: (rng.range_f32(-2.0, 2.0), rng.range_f32(-2.0, 2.0)),
            z: rng.below(8) as i32,
        });
    }
    Scene { shapes, bg_top, bg_bottom }
}

/// Rasterize `n` frames of `h` x `w` pixels: gradient first, then shapes
/// back to front.
pub fn render_scene(scene: &Scene, n: usize, h: usize, w: usize) -> Result<FrameSeq> {
    if n == 0 || h == 0 || w == 0 {
        return Err(Error::arg("render_scene", format!("geometry ({n}, {h}, {w}) must be positive")));
    }
    let order = scene.painter_order();
    let mut data = vec![0.0f32; n * h * w * 3];
    for t in 0..n {
        for y in 0..h {
            let frac = if h > 1 { y as f32 / (h - 1) as f32 } else { 0.0 };
            let row: [f32; 3] = std::array::from_fn(|c| {
                scene.bg_top[c] + (scene.bg_bottom[c] - scene.bg_top[c]) * frac
            });
            for x in 0..w {
                let mut px = row;
                for &i in &order {
                    if scene.shapes[i].covers(t, x, y) {
                        px = scene.shapes[i].color;
                    }
                }
                let base = ((t * h + y) * w + x) * 3;
                data[base..base + 3].copy_from_slice(&px);
            }
        }
    }
    FrameSeq::new(Tensor::from_vec(&[n, h, w, 3], data)?)
}

/// Boolean support of one shape over a frame, row-major.
pub fn shape_support(shape: &Shape, frame: usize, h: usize, w: usize) -> Vec<bool> {
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = shape.covers(frame, x, y);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lone(kind: ShapeKind, pos: (f32, f32), vel: (f32, f32), size: f32) -> Scene {
        Scene {
            shapes: vec![Shape { kind, color: [0.8, -0.1, 0.3], size, pos, vel, z: 0 }],
            bg_top: [-0.9, -0.8, -0.7],
            bg_bottom: [-0.4, -0.5, -0.6],
        }
    }

    #[test]
    fn empty_scene_is_a_constant_vertical_gradient() {
        let scene = Scene { shapes: vec![], bg_top: [-1.0, 0.0, 0.5], bg_bottom: [0.5, 0.0, -1.0] };
        let v = render_scene(&scene, 3, 8, 4).unwrap();
        let d = v.tensor().data();
        let px = |t: usize, y: usize, x: usize, c: usize| d[(((t * 8) + y) * 4 + x) * 3 + c];
        for t in 0..3 {
            for y in 0..8 {
                for x in 0..4 {
                    for c in 0..3 {
                        assert_eq!(px(t, y, x, c), px(0, y, 0, c), "time and column constant");
                    }
                }
            }
        }
        assert_eq!(px(0, 0, 0, 0), -1.0);
        assert_eq!(px(0, 7, 0, 0), 0.5);
        for y in 1..8 {
            assert!(px(0, y, 0, 0) > px(0, y - 1, 0, 0), "monotone gradient");
        }
    }

    #[test]
    fn static_shape_renders_identical_frames() {
        for kind in [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle] {
            let v = render_scene(&lone(kind, (8.0, 8.0), (0.0, 0.0), 4.0), 5, 16, 16).unwrap();
            let frame = v.slice_frames(0, 1);
            for t in 1..5 {
                assert!(v.slice_frames(t, 1).tensor().bit_eq(frame.tensor()));
            }
        }
    }

    #[test]
    fn unit_velocity_shifts_every_pixel_by_one() {
        for kind in [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle] {
            let v = render_scene(&lone(kind, (6.0, 8.0), (1.0, 0.0), 4.0), 4, 16, 16).unwrap();
            let d = v.tensor().data();
            let px = |t: usize, y: usize, x: usize, c: usize| d[(((t * 16) + y) * 16 + x) * 3 + c];
            for t in 0..3 {
                for y in 0..16 {
                    for x in 0..15 {
                        for c in 0..3 {
                            assert_eq!(
                                px(t + 1, y, x + 1, c),
                                px(t, y, x, c),
                                "kind {kind:?} t {t} y {y} x {x}"
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn painter_order_puts_larger_z_on_top() {
        let scene = Scene {
            shapes: vec![
                Shape {
                    kind: ShapeKind::Square,
                    color: [1.0, -1.0, -1.0],
                    size: 5.0,
                    pos: (8.0, 8.0),
                    vel: (0.0, 0.0),
                    z: 3,
                },
                Shape {
                    kind: ShapeKind::Square,
                    color: [-1.0, 1.0, -1.0],
                    size: 5.0,
                    pos: (10.0, 8.0),
                    vel: (0.0, 0.0),
                    z: 7,
                },
            ],
            bg_top: [-1.0; 3],
            bg_bottom: [-1.0; 3],
        };
        let v = render_scene(&scene, 1, 16, 16).unwrap();
        let d = v.tensor().data();
        // (9, 8) is covered by both squares; the z=7 one must win
        let base = ((8 * 16) + 9) * 3;
        assert_eq!(&d[base..base + 3], &[-1.0, 1.0, -1.0]);
        assert_eq!(scene.topmost_at(0, 9, 8).unwrap().z, 7);
        assert_eq!(scene.topmost_at(0, 4, 8).unwrap().z, 3);
        assert!(scene.topmost_at(0, 0, 0).is_none());
    }

    #[test]
    fn random_scenes_render_in_range_and_deterministically() {
        for seed in 0..20 {
            let mut rng = Rng::new(seed);
            let scene = random_scene(&mut rng, 32, 32);
            assert!((1..=3).contains(&scene.shapes.len()));
            let v = render_scene(&scene, 4, 32, 32).unwrap();
            for &x in v.tensor().data() {
                assert!((-1.0..=1.0).contains(&x));
            }
            let mut rng = Rng::new(seed);
            let again = render_scene(&random_scene(&mut rng, 32, 32), 4, 32, 32).unwrap();
            assert!(v.tensor().bit_eq(again.tensor()));
        }
    }

    #[test]
    fn bbox_matches_the_analytic_extents() {
        let s = lone(ShapeKind::Circle, (16.0, 12.0), (0.0, 0.0), 5.0);
        assert_eq!(s.shapes[0].bbox_at(0), (11, 21, 7, 17));
        let s = lone(ShapeKind::Triangle, (4.0, 4.0), (1.0, 2.0), 3.0);
        assert_eq!(s.shapes[0].bbox_at(1), (2, 8, 3, 9));
    }
}
