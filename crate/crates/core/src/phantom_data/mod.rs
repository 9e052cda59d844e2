//! Procedural echocardiography-like phantom videos with exact per-structure
//! motion.
//!
//! Chambers are ellipses whose radii breathe sinusoidally; valves are thin
//! rectangles rotating about a hinge. Ground-truth boxes come from the
//! noiseless analytic geometry, never from the rendered pixels.

mod detect;
mod io;
mod render;
mod sampler;

use serde::{Deserialize, Serialize};

pub use detect::{detect_boxes, detect_clip, largest_component_box, Detection, MIN_COMPONENT_AREA};
pub use io::{read_clip, read_clip_from, read_dataset, write_clip, write_clip_to, write_dataset, DatasetManifest, CLIP_MAGIC, CLIP_VERSION, MANIFEST_VERSION};
pub use render::{render_phantom, render_phantom_with, shape_bounds, RenderOptions};
pub use sampler::{generate_dataset, sample_specs, PhantomConfig, CATEGORY_NAMES, DEFAULT_BANDS};

use crate::error::{Error, Result};

/// Background gray level before speckle.
pub const BACKGROUND_LEVEL: f64 = 0.05;
/// Minimum gap between intensity bands (and between background and bands).
pub const BAND_GAP: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StructureKind {
    /// Ellipse; `base_radii = (rx, ry)`.
    Chamber,
    /// Rectangle hinged at `center`; `base_radii = (length, thickness)`.
    Valve,
}

/// One anatomical structure of a phantom.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructureSpec {
    pub category_id: usize,
    pub kind: StructureKind,
    /// Ellipse centre for chambers, hinge point for valves (pixels).
    pub center: (f64, f64),
    pub base_radii: (f64, f64),
    pub amplitude: f64,
    /// Frames per cycle.
    pub period: f64,
    pub phase: f64,
    pub intensity_band: (f64, f64),
}

impl StructureSpec {
    fn cycle(&self, t: f64) -> f64 {
        (2.0 * std::f64::consts::PI * t / self.period + self.phase).sin()
    }

    /// Chamber radii at frame `t`.
    pub fn radii_at(&self, t: f64) -> (f64, f64) {
        let s = 1.0 + self.amplitude * self.cycle(t);
        (self.base_radii.0 * s, self.base_radii.1 * s)
    }

    /// Valve angle (radians) at frame `t`.
    pub fn angle_at(&self, t: f64) -> f64 {
        self.amplitude * std::f64::consts::FRAC_PI_2 * self.cycle(t)
    }

    /// Mid-band gray level the structure is painted with.
    pub fn intensity(&self) -> f64 {
        0.5 * (self.intensity_band.0 + self.intensity_band.1)
    }
}

/// Checks the per-spec and cross-spec invariants for a `height × width` frame.
pub fn validate_specs(specs: &[StructureSpec], height: usize, width: usize) -> Result<()> {
    let c = specs.len();
    let mut seen = vec![false; c];
    for s in specs {
        if s.category_id >= c || seen[s.category_id] {
            return Err(Error::InvalidSpec(format!("category ids must be a permutation of 0..{c}")));
        }
        seen[s.category_id] = true;
        if !(0.0..1.0).contains(&s.amplitude) {
            return Err(Error::InvalidSpec(format!("category {}: amplitude {} not in [0,1)", s.category_id, s.amplitude)));
        }
        if !(s.period >= 2.0) {
            return Err(Error::InvalidSpec(format!("category {}: period {} < 2", s.category_id, s.period)));
        }
        if !(s.base_radii.0 > 0.0 && s.base_radii.1 > 0.0) {
            return Err(Error::InvalidSpec(format!("category {}: non-positive size", s.category_id)));
        }
        let (lo, hi) = s.intensity_band;
        if !(lo < hi && lo >= BACKGROUND_LEVEL * 1.2 + BAND_GAP && hi <= 1.0) {
            return Err(Error::InvalidSpec(format!("category {}: bad intensity band {:?}", s.category_id, s.intensity_band)));
        }
        let [x0, y0, x1, y1] = motion_envelope(s);
        if x0 < 0.0 || y0 < 0.0 || x1 > width as f64 || y1 > height as f64 {
            return Err(Error::InvalidSpec(format!(
                "category {}: motion leaves the {width}x{height} frame (envelope {:?})",
                s.category_id,
                [x0, y0, x1, y1]
            )));
        }
    }
    let mut bands: Vec<(f64, f64)> = specs.iter().map(|s| s.intensity_band).collect();
    bands.sort_by(|a, b| a.0.total_cmp(&b.0));
    for pair in bands.windows(2) {
        if pair[1].0 - pair[0].1 < BAND_GAP - 1e-12 {
            return Err(Error::InvalidSpec(format!("intensity bands {:?} and {:?} overlap or are closer than {BAND_GAP}", pair[0], pair[1])));
        }
    }
    Ok(())
}

/// Union of a structure's bounds over its whole cycle.
pub fn motion_envelope(s: &StructureSpec) -> [f64; 4] {
    let mut env = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
    let mut merge = |b: [f64; 4]| {
        env[0] = env[0].min(b[0]);
        env[1] = env[1].min(b[1]);
        env[2] = env[2].max(b[2]);
        env[3] = env[3].max(b[3]);
    };
    match s.kind {
        StructureKind::Chamber => {
            let (rx, ry) = (s.base_radii.0 * (1.0 + s.amplitude), s.base_radii.1 * (1.0 + s.amplitude));
            merge([s.center.0 - rx, s.center.1 - ry, s.center.0 + rx, s.center.1 + ry]);
        }
        StructureKind::Valve => {
            let max_angle = s.amplitude * std::f64::consts::FRAC_PI_2;
            let samples = 720;
            for i in 0..=samples {
                let theta = -max_angle + 2.0 * max_angle * i as f64 / samples as f64;
                merge(render::valve_bounds(s, theta));
            }
        }
    }
    env
}

/// Frames plus per-frame, per-structure boxes.
///
/// `pixels` is `frames × height × width`; `boxes` and `present` are
/// `frames × categories`, boxes as `(x_min, y_min, x_max, y_max)` pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub categories: usize,
    pub pixels: Vec<f32>,
    pub boxes: Vec<[f32; 4]>,
    pub present: Vec<bool>,
}

impl VideoClip {
    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.pixels[t * n..(t + 1) * n]
    }

    pub fn bbox(&self, t: usize, c: usize) -> [f32; 4] {
        self.boxes[t * self.categories + c]
    }

    pub fn is_present(&self, t: usize, c: usize) -> bool {
        self.present[t * self.categories + c]
    }

    /// Copies frames `start, start+step, …` (`count` of them).
    pub fn subsample(&self, start: usize, step: usize, count: usize) -> Result<VideoClip> {
        if step == 0 || count == 0 || start + step * (count - 1) >= self.frames {
            return Err(Error::InvalidArgument(format!(
                "cannot take {count} frames from {start} with interval {step} out of {}",
                self.frames
            )));
        }
        let n = self.height * self.width;
        let mut out = VideoClip {
            frames: count,
            height: self.height,
            width: self.width,
            categories: self.categories,
            pixels: Vec::with_capacity(count * n),
            boxes: Vec::with_capacity(count * self.categories),
            present: Vec::with_capacity(count * self.categories),
        };
        for i in 0..count {
            let t = start + i * step;
            out.pixels.extend_from_slice(self.frame(t));
            out.boxes.extend_from_slice(&self.boxes[t * self.categories..(t + 1) * self.categories]);
            out.present.extend_from_slice(&self.present[t * self.categories..(t + 1) * self.categories]);
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.frames * self.height * self.width;
        if self.pixels.len() != n || self.boxes.len() != self.frames * self.categories || self.present.len() != self.boxes.len() {
            return Err(Error::Shape("clip buffers do not match its dimensions".into()));
        }
        if let Some(v) = self.pixels.iter().find(|v| !(v.is_finite() && (0.0..=1.0).contains(*v))) {
            return Err(Error::Format(format!("pixel value {v} outside [0,1]")));
        }
        for (i, (b, &p)) in self.boxes.iter().zip(&self.present).enumerate() {
            if p && !(0.0 <= b[0] && b[0] < b[2] && b[2] <= self.width as f32 && 0.0 <= b[1] && b[1] < b[3] && b[3] <= self.height as f32) {
                return Err(Error::Format(format!("box {i} {b:?} invalid")));
            }
        }
        Ok(())
    }
}
