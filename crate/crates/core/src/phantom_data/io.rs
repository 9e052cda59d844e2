use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::VideoClip;
use crate::binio::*;
use crate::error::{Error, Result};

pub const CLIP_MAGIC: &[u8; 4] = b"ECMV";
pub const CLIP_VERSION: u32 = 1;
pub const MANIFEST_VERSION: &str = "ecm-dataset/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: String,
    pub clip_count: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub categories: usize,
    pub category_names: Vec<String>,
    /// Detector bands, one per category.
    pub intensity_bands: Vec<(f64, f64)>,
    pub fps: f64,
    pub seed: u64,
}

impl DatasetManifest {
    fn check(&self) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::Format(format!("unrecognized dataset version {:?} (expected {MANIFEST_VERSION:?})", self.version)));
        }
        if self.category_names.len() != self.categories || self.intensity_bands.len() != self.categories {
            return Err(Error::Format("manifest category lists do not match category count".into()));
        }
        Ok(())
    }
}

fn clip_name(i: usize) -> String {
    format!("clip-{i:05}.ecmv")
}

pub fn write_clip_to(w: &mut impl Write, clip: &VideoClip) -> Result<()> {
    clip.validate()?;
    w.write_all(CLIP_MAGIC)?;
    write_u32(w, CLIP_VERSION)?;
    for d in [clip.frames, clip.height, clip.width, clip.categories] {
        write_u32(w, d as u32)?;
    }
    write_f32s(w, &clip.pixels)?;
    let flat: Vec<f32> = clip.boxes.iter().flatten().copied().collect();
    write_f32s(w, &flat)?;
    let presence: Vec<u8> = clip.present.iter().map(|&p| p as u8).collect();
    w.write_all(&presence)?;
    Ok(())
}

pub fn read_clip_from(r: &mut impl Read) -> Result<VideoClip> {
    expect_magic(r, CLIP_MAGIC)?;
    let version = read_u32(r)?;
    if version != CLIP_VERSION {
        return Err(Error::Version { found: version, expected: CLIP_VERSION });
    }
    let dims: Vec<usize> = (0..4).map(|_| read_u32(r).map(|v| v as usize)).collect::<Result<_>>()?;
    let (frames, height, width, categories) = (dims[0], dims[1], dims[2], dims[3]);
    let pixel_count = frames
        .checked_mul(height)
        .and_then(|v| v.checked_mul(width))
        .filter(|&v| v <= 1 << 30)
        .ok_or_else(|| Error::Format("clip dimensions too large".into()))?;
    let pixels = read_f32s(r, pixel_count)?;
    let flat = read_f32s(r, frames * categories * 4)?;
    let boxes = flat.chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]).collect();
    let presence = read_bytes(r, frames * categories)?;
    let present = presence
        .iter()
        .map(|&b| match b {
            0 => Ok(false),
            1 => Ok(true),
            _ => Err(Error::Format(format!("presence byte {b} is not 0 or 1"))),
        })
        .collect::<Result<_>>()?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Format("trailing bytes after clip".into()));
    }
    let clip = VideoClip { frames, height, width, categories, pixels, boxes, present };
    clip.validate()?;
    Ok(clip)
}

pub fn write_clip(path: &Path, clip: &VideoClip) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_clip_to(&mut w, clip)?;
    w.flush()?;
    Ok(())
}

pub fn read_clip(path: &Path) -> Result<VideoClip> {
    read_clip_from(&mut BufReader::new(File::open(path)?))
}

/// Writes `manifest.json` and one `clip-%05d.ecmv` per clip into `dir`.
pub fn write_dataset(dir: &Path, clips: &[VideoClip], manifest: &DatasetManifest) -> Result<()> {
    manifest.check()?;
    if manifest.clip_count != clips.len() {
        return Err(Error::Format(format!("manifest lists {} clips but {} were given", manifest.clip_count, clips.len())));
    }
    fs::create_dir_all(dir)?;
    for (i, clip) in clips.iter().enumerate() {
        check_dims(manifest, clip, i)?;
        write_clip(&dir.join(clip_name(i)), clip)?;
    }
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(manifest)? + "\n")?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<(Vec<VideoClip>, DatasetManifest)> {
    let text = fs::read_to_string(dir.join("manifest.json"))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)?;
    manifest.check()?;
    let on_disk = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter(|e| {
            let name = e.file_name();
            let name = name.to_string_lossy();
            name.starts_with("clip-") && name.ends_with(".ecmv")
        })
        .count();
    if on_disk != manifest.clip_count {
        return Err(Error::Format(format!("manifest lists {} clips but {on_disk} clip files exist", manifest.clip_count)));
    }
    let mut clips = Vec::with_capacity(manifest.clip_count);
    for i in 0..manifest.clip_count {
        let clip = read_clip(&dir.join(clip_name(i)))?;
        check_dims(&manifest, &clip, i)?;
        clips.push(clip);
    }
    Ok((clips, manifest))
}

fn check_dims(m: &DatasetManifest, clip: &VideoClip, i: usize) -> Result<()> {
    if (clip.frames, clip.height, clip.width, clip.categories) != (m.frames, m.height, m.width, m.categories) {
        return Err(Error::Format(format!("clip {i} dimensions differ from the manifest")));
    }
    Ok(())
}
