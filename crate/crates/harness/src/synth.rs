//! Procedural top-down scenes and their two kinds of views.
//!
//! A scene lives on the unit square and holds the landmarks of one
//! location: coloured rectangles, discs and road-like strokes. Each capture
//! draws a fresh [`Ground`] (base tint, waves and small grey clutter), so two
//! images of a location share only their landmarks. View B renders the scene
//! canonically. View A applies a random rotation, zoom, shift and
//! brightness change around the scene centre.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::raster::RawImage;

const PALETTE: [[f64; 3]; 8] = [
    [0.85, 0.20, 0.15],
    [0.95, 0.80, 0.20],
    [0.20, 0.45, 0.85],
    [0.90, 0.90, 0.88],
    [0.15, 0.15, 0.18],
    [0.55, 0.30, 0.65],
    [0.95, 0.55, 0.15],
    [0.25, 0.70, 0.70],
];

const SUPERSAMPLE: usize = 2;
const CLUTTER: (usize, usize) = (8, 14);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Jitter {
    pub max_rotation_deg: f64,
    pub min_scale: f64,
    pub max_scale: f64,
    pub max_shift: f64,
    pub min_brightness: f64,
    pub max_brightness: f64,
    pub noise_std: f64,
}

impl Default for Jitter {
    fn default() -> Self {
        Self {
            max_rotation_deg: 30.0,
            min_scale: 0.85,
            max_scale: 1.15,
            max_shift: 0.06,
            min_brightness: 0.75,
            max_brightness: 1.25,
            noise_std: 0.02,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Shape {
    Rect {
        cx: f64,
        cy: f64,
        half_w: f64,
        half_h: f64,
        angle: f64,
        color: [f64; 3],
    },
    Disc {
        cx: f64,
        cy: f64,
        r: f64,
        color: [f64; 3],
    },
    Stroke {
        x0: f64,
        y0: f64,
        x1: f64,
        y1: f64,
        half_width: f64,
        color: [f64; 3],
    },
}

impl Shape {
    fn color_at(&self, x: f64, y: f64) -> Option<[f64; 3]> {
        match *self {
            Shape::Rect {
                cx,
                cy,
                half_w,
                half_h,
                angle,
                color,
            } => {
                let (s, c) = angle.sin_cos();
                let (dx, dy) = (x - cx, y - cy);
                let u = c * dx + s * dy;
                let v = -s * dx + c * dy;
                (u.abs() <= half_w && v.abs() <= half_h).then_some(color)
            }
            Shape::Disc { cx, cy, r, color } => ((x - cx).powi(2) + (y - cy).powi(2) <= r * r).then_some(color),
            Shape::Stroke {
                x0,
                y0,
                x1,
                y1,
                half_width,
                color,
            } => {
                let (ex, ey) = (x1 - x0, y1 - y0);
                let t = (((x - x0) * ex + (y - y0) * ey) / (ex * ex + ey * ey)).clamp(0.0, 1.0);
                let (px, py) = (x0 + t * ex - x, y0 + t * ey - y);
                (px * px + py * py <= half_width * half_width).then_some(color)
            }
        }
    }
}

/// Persistent content of one location.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    shapes: Vec<Shape>,
}

/// Ground appearance at capture time; redrawn for every image, like
/// season or illumination changes between acquisitions.
#[derive(Clone, Debug, PartialEq)]
pub struct Ground {
    base: [f64; 3],
    waves: Vec<[f64; 4]>,
    /// Transient objects (vehicles, shadows) present in this capture only.
    clutter: Vec<Shape>,
}

impl Ground {
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let g = rng.random_range(0.35..0.5);
        let base = [g * rng.random_range(0.7..0.9), g, g * rng.random_range(0.6..0.8)];
        let waves = (0..3)
            .map(|_| {
                let f = rng.random_range(2.0..6.0);
                let theta = rng.random_range(0.0..PI);
                [f * theta.cos(), f * theta.sin(), rng.random_range(0.0..2.0 * PI), 0.06]
            })
            .collect();
        let clutter = (0..rng.random_range(CLUTTER.0..=CLUTTER.1))
            .map(|_| {
                let v = rng.random_range(0.05..0.95);
                Shape::Rect {
                    cx: rng.random_range(0.0..1.0),
                    cy: rng.random_range(0.0..1.0),
                    half_w: rng.random_range(0.015..0.05),
                    half_h: rng.random_range(0.015..0.05),
                    angle: rng.random_range(0.0..PI),
                    color: [v, v, v * 0.97],
                }
            })
            .collect();
        Self { base, waves, clutter }
    }

    fn color_at(&self, x: f64, y: f64) -> [f64; 3] {
        if let Some(c) = self.clutter.iter().find_map(|s| s.color_at(x, y)) {
            return c;
        }
        let t: f64 = self.waves.iter().map(|w| w[3] * (w[0] * x * 2.0 * PI + w[1] * y * 2.0 * PI + w[2]).sin()).sum();
        self.base.map(|g| g + t)
    }
}

fn pick_color<R: Rng + ?Sized>(rng: &mut R) -> [f64; 3] {
    PALETTE[rng.random_range(0..PALETTE.len())]
}

impl Scene {
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut shapes = Vec::new();
        for _ in 0..rng.random_range(1..=2) {
            let (x0, y0) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
            let a = rng.random_range(0.0..PI);
            shapes.push(Shape::Stroke {
                x0: x0 - a.cos(),
                y0: y0 - a.sin(),
                x1: x0 + a.cos(),
                y1: y0 + a.sin(),
                half_width: rng.random_range(0.02..0.04),
                color: [0.6, 0.6, 0.58],
            });
        }
        for _ in 0..rng.random_range(4..=7) {
            shapes.push(Shape::Rect {
                cx: rng.random_range(0.1..0.9),
                cy: rng.random_range(0.1..0.9),
                half_w: rng.random_range(0.04..0.14),
                half_h: rng.random_range(0.04..0.14),
                angle: rng.random_range(0.0..PI),
                color: pick_color(rng),
            });
        }
        for _ in 0..rng.random_range(1..=3) {
            shapes.push(Shape::Disc {
                cx: rng.random_range(0.1..0.9),
                cy: rng.random_range(0.1..0.9),
                r: rng.random_range(0.04..0.1),
                color: pick_color(rng),
            });
        }
        Self { shapes }
    }

    fn color_at(&self, ground: &Ground, x: f64, y: f64) -> [f64; 3] {
        self.shapes
            .iter()
            .rev()
            .find_map(|s| s.color_at(x, y))
            .unwrap_or_else(|| ground.color_at(x, y))
    }
}

/// Similarity transform and photometric change of one view.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct View {
    pub rotation: f64,
    pub scale: f64,
    pub shift: [f64; 2],
    pub brightness: f64,
}

impl View {
    pub fn canonical() -> Self {
        Self {
            rotation: 0.0,
            scale: 1.0,
            shift: [0.0, 0.0],
            brightness: 1.0,
        }
    }

    pub fn random<R: Rng + ?Sized>(jitter: &Jitter, rng: &mut R) -> Self {
        let r = jitter.max_rotation_deg.to_radians();
        let mut sample = |lo: f64, hi: f64| if hi > lo { rng.random_range(lo..hi) } else { lo };
        Self {
            rotation: sample(-r, r),
            scale: sample(jitter.min_scale, jitter.max_scale),
            shift: [sample(-jitter.max_shift, jitter.max_shift), sample(-jitter.max_shift, jitter.max_shift)],
            brightness: sample(jitter.min_brightness, jitter.max_brightness),
        }
    }
}

/// Renders `scene` over `ground` as seen through `view`, with Gaussian
/// pixel noise drawn from `rng`.
pub fn render<R: Rng + ?Sized>(
    scene: &Scene,
    ground: &Ground,
    view: &View,
    size: usize,
    noise_std: f64,
    rng: &mut R,
) -> RawImage {
    let (s, c) = (-view.rotation).sin_cos();
    let mut data = Vec::with_capacity(size * size * 3);
    let n = SUPERSAMPLE as f64;
    let noise = Normal::new(0.0, noise_std.max(0.0)).expect("finite noise level");
    for i in 0..size {
        for j in 0..size {
            let mut acc = [0.0; 3];
            for si in 0..SUPERSAMPLE {
                for sj in 0..SUPERSAMPLE {
                    let qx = (j as f64 + (sj as f64 + 0.5) / n) / size as f64 - 0.5;
                    let qy = (i as f64 + (si as f64 + 0.5) / n) / size as f64 - 0.5;
                    let (ux, uy) = (qx / view.scale, qy / view.scale);
                    let x = 0.5 + c * ux - s * uy - view.shift[0];
                    let y = 0.5 + s * ux + c * uy - view.shift[1];
                    let col = scene.color_at(ground, x, y);
                    for k in 0..3 {
                        acc[k] += col[k];
                    }
                }
            }
            for a in acc {
                let mut v = a / (n * n) * view.brightness;
                if noise_std > 0.0 {
                    v += noise.sample(rng);
                }
                data.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    RawImage::new(size as u32, size as u32, 3, data).expect("consistent raster size")
}
