//! Motion curves: normalized per-frame box corners for every structure, their
//! Fourier encoding and learned embedding, and the editing operations
//! (scale, replace, resample) used to steer generation.

mod encode;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use encode::{fourier_encode, fourier_features, EncodingMode, MotionEncoder, MotionEncoderConfig};

use crate::error::{Error, Result};
use crate::phantom_data::VideoClip;

/// Scalars per (frame, category): TL, TR, BL, BR corners as (x, y).
pub const COORDS: usize = 8;
pub const CURVES_VERSION: &str = "ecm-curves/1";

#[derive(Clone, Debug, PartialEq)]
pub struct MotionCurveSet {
    pub frames: usize,
    pub categories: usize,
    /// `frames × categories` corner records, normalized by frame size.
    pub coords: Vec<[f64; COORDS]>,
    pub present: Vec<bool>,
}

fn corners(b: [f64; 4], width: f64, height: f64) -> [f64; COORDS] {
    let (x0, y0, x1, y1) = (b[0] / width, b[1] / height, b[2] / width, b[3] / height);
    [x0, y0, x1, y0, x0, y1, x1, y1]
}

/// Normalized corner curves from `frames × categories` boxes.
pub fn extract_curves(
    boxes: &[[f32; 4]],
    present: &[bool],
    frames: usize,
    categories: usize,
    height: usize,
    width: usize,
) -> Result<MotionCurveSet> {
    if boxes.len() != frames * categories || present.len() != boxes.len() {
        return Err(Error::Shape(format!("expected {frames}x{categories} boxes, got {}", boxes.len())));
    }
    let coords = boxes
        .iter()
        .zip(present)
        .map(|(b, &p)| {
            if p {
                corners(b.map(|v| v as f64), width as f64, height as f64)
            } else {
                [0.0; COORDS]
            }
        })
        .collect();
    Ok(MotionCurveSet { frames, categories, coords, present: present.to_vec() })
}

impl MotionCurveSet {
    pub fn from_clip(clip: &VideoClip) -> Self {
        extract_curves(&clip.boxes, &clip.present, clip.frames, clip.categories, clip.height, clip.width)
            .expect("clip buffers are consistent")
    }

    pub fn at(&self, t: usize, c: usize) -> &[f64; COORDS] {
        &self.coords[t * self.categories + c]
    }

    pub fn is_present(&self, t: usize, c: usize) -> bool {
        self.present[t * self.categories + c]
    }

    /// Boxes `(x_min, y_min, x_max, y_max)` in pixels, from the TL and BR
    /// corners.
    pub fn boxes(&self, height: usize, width: usize) -> Vec<[f64; 4]> {
        let (w, h) = (width as f64, height as f64);
        self.coords.iter().map(|c| [c[0] * w, c[1] * h, c[6] * w, c[7] * h]).collect()
    }

    /// Boxes of frame `t`.
    pub fn frame_boxes(&self, t: usize, height: usize, width: usize) -> (Vec<[f64; 4]>, Vec<bool>) {
        let (w, h) = (width as f64, height as f64);
        let range = t * self.categories..(t + 1) * self.categories;
        let boxes = self.coords[range.clone()].iter().map(|c| [c[0] * w, c[1] * h, c[6] * w, c[7] * h]).collect();
        (boxes, self.present[range].to_vec())
    }

    fn check_category(&self, category: usize) -> Result<()> {
        if category >= self.categories {
            return Err(Error::InvalidArgument(format!("category {category} out of range 0..{}", self.categories)));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.coords.len() != self.frames * self.categories || self.present.len() != self.coords.len() {
            return Err(Error::Shape("curve buffers do not match frames x categories".into()));
        }
        for (i, (c, &p)) in self.coords.iter().zip(&self.present).enumerate() {
            if p && c.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Format(format!("curve entry {i} has coordinates outside [0,1]")));
            }
            if c.iter().any(|v| !v.is_finite()) {
                return Err(Error::Format(format!("curve entry {i} is not finite")));
            }
        }
        Ok(())
    }
}

/// Result of [`scale_curve`]: the edited curves and how many coordinates
/// had to be clamped back into `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Scaled {
    pub curves: MotionCurveSet,
    pub clamped: usize,
}

/// Scales one category's motion about its temporal mean:
/// `c'(t) = m + factor·(c(t) − m)`, clamped to `[0, 1]`.
pub fn scale_curve(curves: &MotionCurveSet, category: usize, factor: f64) -> Result<Scaled> {
    curves.check_category(category)?;
    if !(factor >= 0.0) || !factor.is_finite() {
        return Err(Error::InvalidArgument(format!("scale factor {factor} must be finite and non-negative")));
    }
    let mut out = curves.clone();
    let frames: Vec<usize> = (0..curves.frames).filter(|&t| curves.is_present(t, category)).collect();
    if frames.is_empty() {
        return Ok(Scaled { curves: out, clamped: 0 });
    }
    let mut clamped = 0;
    for k in 0..COORDS {
        let mean = frames.iter().map(|&t| curves.at(t, category)[k]).sum::<f64>() / frames.len() as f64;
        for &t in &frames {
            let v = &mut out.coords[t * curves.categories + category][k];
            let s = mean + factor * (*v - mean);
            let c = s.clamp(0.0, 1.0);
            if c != s {
                clamped += 1;
            }
            *v = c;
        }
    }
    Ok(Scaled { curves: out, clamped })
}

/// Copies one category's curve and presence from `b` into `a`.
pub fn replace_curve(a: &MotionCurveSet, b: &MotionCurveSet, category: usize) -> Result<MotionCurveSet> {
    a.check_category(category)?;
    if a.frames != b.frames || a.categories != b.categories {
        return Err(Error::Shape(format!(
            "cannot replace from a {}x{} curve set into a {}x{} one; resample first",
            b.frames, b.categories, a.frames, a.categories
        )));
    }
    let mut out = a.clone();
    for t in 0..a.frames {
        let i = t * a.categories + category;
        out.coords[i] = b.coords[i];
        out.present[i] = b.present[i];
    }
    Ok(out)
}

/// Linear-in-time resampling to `frames_out` frames; presence follows the
/// nearest source frame. Where a neighbouring source frame is absent the
/// nearest frame's coordinates are used unmixed.
pub fn resample_curve(curves: &MotionCurveSet, frames_out: usize) -> Result<MotionCurveSet> {
    if frames_out < 2 {
        return Err(Error::InvalidArgument(format!("cannot resample to {frames_out} frames")));
    }
    let (n, c) = (curves.frames, curves.categories);
    let mut out = MotionCurveSet {
        frames: frames_out,
        categories: c,
        coords: Vec::with_capacity(frames_out * c),
        present: Vec::with_capacity(frames_out * c),
    };
    for i in 0..frames_out {
        let s = if n == 1 { 0.0 } else { i as f64 * (n - 1) as f64 / (frames_out - 1) as f64 };
        let lo = (s.floor() as usize).min(n - 1);
        let hi = (lo + 1).min(n - 1);
        let frac = s - lo as f64;
        let nearest = if frac > 0.5 { hi } else { lo };
        for k in 0..c {
            let (a, b) = (curves.at(lo, k), curves.at(hi, k));
            let both = curves.is_present(lo, k) && curves.is_present(hi, k);
            let v = if frac == 0.0 {
                *a
            } else if both {
                std::array::from_fn(|j| a[j] + frac * (b[j] - a[j]))
            } else {
                *curves.at(nearest, k)
            };
            out.coords.push(v);
            out.present.push(curves.is_present(nearest, k));
        }
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CurveFile {
    version: String,
    frames: usize,
    categories: usize,
    /// `[frame][category][8]`
    coords: Vec<Vec<[f64; COORDS]>>,
    present: Vec<Vec<bool>>,
}

impl MotionCurveSet {
    pub fn to_json(&self) -> Result<String> {
        let file = CurveFile {
            version: CURVES_VERSION.to_string(),
            frames: self.frames,
            categories: self.categories,
            coords: self.coords.chunks(self.categories).map(|r| r.to_vec()).collect(),
            present: self.present.chunks(self.categories).map(|r| r.to_vec()).collect(),
        };
        Ok(serde_json::to_string_pretty(&file)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: CurveFile = serde_json::from_str(text)?;
        if file.version != CURVES_VERSION {
            return Err(Error::Format(format!("unrecognized curve file version {:?}", file.version)));
        }
        if file.coords.len() != file.frames
            || file.present.len() != file.frames
            || file.coords.iter().any(|r| r.len() != file.categories)
            || file.present.iter().any(|r| r.len() != file.categories)
        {
            return Err(Error::Shape("curve file rows do not match frames x categories".into()));
        }
        let set = MotionCurveSet {
            frames: file.frames,
            categories: file.categories,
            coords: file.coords.concat(),
            present: file.present.concat(),
        };
        set.validate()?;
        Ok(set)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests;
