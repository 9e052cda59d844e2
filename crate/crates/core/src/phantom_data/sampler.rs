use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::io::{DatasetManifest, MANIFEST_VERSION};
use super::render::{render_phantom_with, RenderOptions};
use super::{StructureKind, StructureSpec, VideoClip};
use crate::error::Result;

pub const CATEGORY_NAMES: [&str; 4] = ["lv", "rv", "la", "mv"];

/// Detector bands of the default four-structure layout.
pub const DEFAULT_BANDS: [(f64, f64); 4] = [(0.25, 0.38), (0.43, 0.56), (0.61, 0.74), (0.79, 0.95)];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomConfig {
    pub clip_count: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub fps: f64,
    pub seed: u64,
    /// Shared cycle length range in frames, sampled per clip.
    pub period_range: (f64, f64),
    pub speckle_structure: f64,
    pub speckle_background: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            clip_count: 200,
            frames: 12,
            height: 64,
            width: 64,
            fps: 30.0,
            seed: 0,
            period_range: (8.0, 16.0),
            speckle_structure: 0.05,
            speckle_background: 0.2,
        }
    }
}

impl PhantomConfig {
    pub fn render_options(&self) -> RenderOptions {
        RenderOptions { speckle_structure: self.speckle_structure, speckle_background: self.speckle_background }
    }

    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest {
            version: MANIFEST_VERSION.to_string(),
            clip_count: self.clip_count,
            frames: self.frames,
            height: self.height,
            width: self.width,
            categories: CATEGORY_NAMES.len(),
            category_names: CATEGORY_NAMES.iter().map(|s| s.to_string()).collect(),
            intensity_bands: DEFAULT_BANDS.to_vec(),
            fps: self.fps,
            seed: self.seed,
        }
    }

    /// Structure specs of clip `index`.
    pub fn clip_specs(&self, index: usize) -> Vec<StructureSpec> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, index as u64, 0));
        sample_specs(&mut rng, self.height, self.width, self.period_range)
    }

    pub fn noise_seed(&self, index: usize) -> u64 {
        derive_seed(self.seed, index as u64, 1)
    }

    pub fn render_clip(&self, index: usize) -> Result<VideoClip> {
        let specs = self.clip_specs(index);
        render_phantom_with(&specs, self.frames, self.height, self.width, self.noise_seed(index), self.render_options())
    }
}

fn derive_seed(seed: u64, index: u64, stream: u64) -> u64 {
    // splitmix64 finalizer over the packed inputs
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ stream.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Draws the default layout (left/right chambers, atrium, hinged valve),
/// laid out for 64×64 and scaled to `height × width`.
pub fn sample_specs(rng: &mut impl Rng, height: usize, width: usize, period_range: (f64, f64)) -> Vec<StructureSpec> {
    let (sx, sy) = (width as f64 / 64.0, height as f64 / 64.0);
    let period = if period_range.1 > period_range.0 { rng.gen_range(period_range.0..=period_range.1) } else { period_range.0 };
    let lv = chamber(rng, 0, (40.0, 21.0), 2.0, (7.5, 9.0), (9.5, 11.5), (0.15, 0.35), period, (sx, sy));
    let rv = chamber(rng, 1, (14.0, 22.0), 1.5, (5.0, 6.5), (8.0, 10.0), (0.15, 0.35), period, (sx, sy));
    let la = chamber(rng, 2, (40.0, 52.0), 1.5, (7.0, 8.5), (4.5, 5.5), (0.1, 0.3), period, (sx, sy));
    let s = sx.min(sy);
    let mv = StructureSpec {
        category_id: 3,
        kind: StructureKind::Valve,
        center: (10.0 * sx, 50.0 * sy),
        base_radii: (rng.gen_range(10.0..=12.0) * s, 3.0 * s),
        amplitude: rng.gen_range(0.2..=0.45),
        period,
        phase: rng.gen_range(0.0..std::f64::consts::TAU),
        intensity_band: DEFAULT_BANDS[3],
    };
    vec![lv, rv, la, mv]
}

#[allow(clippy::too_many_arguments)]
fn chamber(
    rng: &mut impl Rng,
    id: usize,
    center: (f64, f64),
    jitter: f64,
    rx: (f64, f64),
    ry: (f64, f64),
    amplitude: (f64, f64),
    period: f64,
    (sx, sy): (f64, f64),
) -> StructureSpec {
    let cx = center.0 + rng.gen_range(-jitter..=jitter);
    let cy = center.1 + rng.gen_range(-jitter..=jitter);
    StructureSpec {
        category_id: id,
        kind: StructureKind::Chamber,
        center: (cx * sx, cy * sy),
        base_radii: (rng.gen_range(rx.0..=rx.1) * sx, rng.gen_range(ry.0..=ry.1) * sy),
        amplitude: rng.gen_range(amplitude.0..=amplitude.1),
        period,
        phase: rng.gen_range(0.0..std::f64::consts::TAU),
        intensity_band: DEFAULT_BANDS[id],
    }
}

/// Renders every clip of the configured dataset.
pub fn generate_dataset(cfg: &PhantomConfig) -> Result<(Vec<VideoClip>, DatasetManifest)> {
    let clips = (0..cfg.clip_count).map(|i| cfg.render_clip(i)).collect::<Result<Vec<_>>>()?;
    Ok((clips, cfg.manifest()))
}
