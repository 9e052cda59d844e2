use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{validate_specs, StructureKind, StructureSpec, VideoClip, BACKGROUND_LEVEL};
use crate::error::{Error, Result};

/// Multiplicative speckle strengths; the speckle field is drawn once per clip
/// and is bound to pixel positions, so a static phantom renders identical
/// frames.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderOptions {
    pub speckle_structure: f64,
    pub speckle_background: f64,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self { speckle_structure: 0.05, speckle_background: 0.2 }
    }
}

impl RenderOptions {
    pub fn noiseless() -> Self {
        Self { speckle_structure: 0.0, speckle_background: 0.0 }
    }
}

pub(super) fn valve_bounds(s: &StructureSpec, theta: f64) -> [f64; 4] {
    let corners = valve_corners(s, theta);
    let xs = corners.iter().map(|c| c.0);
    let ys = corners.iter().map(|c| c.1);
    [
        xs.clone().fold(f64::INFINITY, f64::min),
        ys.clone().fold(f64::INFINITY, f64::min),
        xs.fold(f64::NEG_INFINITY, f64::max),
        ys.fold(f64::NEG_INFINITY, f64::max),
    ]
}

fn valve_corners(s: &StructureSpec, theta: f64) -> [(f64, f64); 4] {
    let (len, thick) = s.base_radii;
    let (dx, dy) = (theta.cos(), theta.sin());
    let (nx, ny) = (-dy * thick / 2.0, dx * thick / 2.0);
    let (px, py) = s.center;
    let (tx, ty) = (px + dx * len, py + dy * len);
    [(px + nx, py + ny), (px - nx, py - ny), (tx + nx, ty + ny), (tx - nx, ty - ny)]
}

/// Tight analytic box of a structure at frame `t`.
pub fn shape_bounds(s: &StructureSpec, t: f64) -> [f64; 4] {
    match s.kind {
        StructureKind::Chamber => {
            let (rx, ry) = s.radii_at(t);
            [s.center.0 - rx, s.center.1 - ry, s.center.0 + rx, s.center.1 + ry]
        }
        StructureKind::Valve => valve_bounds(s, s.angle_at(t)),
    }
}

fn inside(s: &StructureSpec, t: f64, x: f64, y: f64) -> bool {
    match s.kind {
        StructureKind::Chamber => {
            let (rx, ry) = s.radii_at(t);
            let (u, v) = ((x - s.center.0) / rx, (y - s.center.1) / ry);
            u * u + v * v <= 1.0
        }
        StructureKind::Valve => {
            let theta = s.angle_at(t);
            let (ox, oy) = (x - s.center.0, y - s.center.1);
            let along = ox * theta.cos() + oy * theta.sin();
            let across = -ox * theta.sin() + oy * theta.cos();
            (0.0..=s.base_radii.0).contains(&along) && across.abs() <= s.base_radii.1 / 2.0
        }
    }
}

/// Renders `frames` frames with the default speckle strengths.
pub fn render_phantom(specs: &[StructureSpec], frames: usize, height: usize, width: usize, seed: u64) -> Result<VideoClip> {
    render_phantom_with(specs, frames, height, width, seed, RenderOptions::default())
}

/// Renders a phantom clip; `seed` drives only the speckle field.
pub fn render_phantom_with(
    specs: &[StructureSpec],
    frames: usize,
    height: usize,
    width: usize,
    seed: u64,
    opts: RenderOptions,
) -> Result<VideoClip> {
    if frames < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 frames, got {frames}")));
    }
    validate_specs(specs, height, width)?;
    let mut order: Vec<&StructureSpec> = specs.iter().collect();
    order.sort_by_key(|s| s.category_id);
    let categories = specs.len();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let speckle: Vec<f64> = (0..height * width).map(|_| rng.gen_range(-1.0..=1.0)).collect();

    let mut clip = VideoClip {
        frames,
        height,
        width,
        categories,
        pixels: Vec::with_capacity(frames * height * width),
        boxes: Vec::with_capacity(frames * categories),
        present: vec![true; frames * categories],
    };
    let mut label = vec![usize::MAX; height * width];
    for t in 0..frames {
        let tf = t as f64;
        label.iter_mut().for_each(|l| *l = usize::MAX);
        for (idx, s) in order.iter().enumerate() {
            let [x0, y0, x1, y1] = shape_bounds(s, tf);
            clip.boxes.push([x0 as f32, y0 as f32, x1 as f32, y1 as f32]);
            let ys = (y0.floor().max(0.0) as usize)..((y1.ceil() as usize).min(height));
            for y in ys {
                let xs = (x0.floor().max(0.0) as usize)..((x1.ceil() as usize).min(width));
                for x in xs {
                    if inside(s, tf, x as f64 + 0.5, y as f64 + 0.5) {
                        label[y * width + x] = idx;
                    }
                }
            }
        }
        for (p, &l) in label.iter().enumerate() {
            let v = if l == usize::MAX {
                BACKGROUND_LEVEL * (1.0 + opts.speckle_background * speckle[p])
            } else {
                let s = order[l];
                let (lo, hi) = s.intensity_band;
                (s.intensity() * (1.0 + opts.speckle_structure * speckle[p])).clamp(lo, hi)
            };
            clip.pixels.push(v.clamp(0.0, 1.0) as f32);
        }
    }
    Ok(clip)
}
