//! PNG output: per-frame dumps and a small curve plot.

use std::path::Path;

use image::{GrayImage, Rgb, RgbImage};

use ecm_core::motion_curves::MotionCurveSet;
use ecm_core::phantom_data::{detect_clip, VideoClip, DEFAULT_BANDS};

use crate::error::CliError;

/// Writes `frame_000.png`, `frame_001.png`, ... into `dir`.
pub fn dump_frames(clip: &VideoClip, dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    for t in 0..clip.frames {
        let px = clip.frame(t).iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        let img = GrayImage::from_raw(clip.width as u32, clip.height as u32, px).expect("frame size");
        let path = dir.join(format!("frame_{t:03}.png"));
        img.save(&path).map_err(|e| CliError::io(&path, e))?;
    }
    Ok(())
}

const PANEL_W: u32 = 240;
const PANEL_H: u32 = 120;
const MARGIN: u32 = 8;
const CURVE: Rgb<u8> = Rgb([30, 90, 200]);
const DETECTED: Rgb<u8> = Rgb([220, 60, 40]);

fn line(img: &mut RgbImage, a: (f64, f64), b: (f64, f64), color: Rgb<u8>) {
    let n = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
    for i in 0..=n {
        let s = i as f64 / n as f64;
        let (x, y) = (a.0 + (b.0 - a.0) * s, a.1 + (b.1 - a.1) * s);
        if x >= 0.0 && y >= 0.0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
    }
}

/// One panel per category with the box width (solid) and height (every
/// other frame drawn) over time, both normalized by the frame width.
/// With a clip, widths detected on it are overlaid in red.
pub fn curve_plot(curves: &MotionCurveSet, clip: Option<&VideoClip>, out: &Path) -> Result<(), CliError> {
    let k = curves.categories as u32;
    let mut img = RgbImage::from_pixel(PANEL_W + 2 * MARGIN, k * (PANEL_H + MARGIN) + MARGIN, Rgb([255, 255, 255]));
    let detection = clip.map(|c| detect_clip(c, &DEFAULT_BANDS));
    let steps = curves.frames.saturating_sub(1).max(1) as f64;
    for c in 0..curves.categories {
        let top = MARGIN + c as u32 * (PANEL_H + MARGIN);
        for x in 0..PANEL_W {
            img.put_pixel(MARGIN + x, top + PANEL_H - 1, Rgb([160, 160, 160]));
        }
        let to_px = |t: usize, v: f64| (MARGIN as f64 + t as f64 / steps * (PANEL_W - 1) as f64, (top + PANEL_H - 1) as f64 - v.clamp(0.0, 1.0) * (PANEL_H - 1) as f64);
        let series = |t: usize| -> Option<(f64, f64)> {
            curves.is_present(t, c).then(|| {
                let p = curves.at(t, c);
                (p[2] - p[0], p[5] - p[1])
            })
        };
        for t in 1..curves.frames {
            if let (Some(a), Some(b)) = (series(t - 1), series(t)) {
                line(&mut img, to_px(t - 1, a.0), to_px(t, b.0), CURVE);
                if t % 2 == 0 {
                    line(&mut img, to_px(t - 1, a.1), to_px(t, b.1), CURVE);
                }
            }
            if let (Some(d), Some(clip)) = (&detection, clip) {
                if d.is_present(t - 1, c) && d.is_present(t, c) {
                    let wd = |t: usize| {
                        let b = d.bbox(t, c);
                        (b[2] - b[0]) as f64 / clip.width as f64
                    };
                    line(&mut img, to_px(t - 1, wd(t - 1)), to_px(t, wd(t)), DETECTED);
                }
            }
        }
    }
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    img.save(out).map_err(|e| CliError::io(out, e))?;
    Ok(())
}
