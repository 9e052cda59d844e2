//! The trained smoke model shared by the end-to-end and controllability
//! criteria, plus the small config used by the determinism check.

use std::sync::OnceLock;
use std::time::Instant;

use ecm_core::eval_metrics::{box_iou, iou_consistency};
use ecm_core::latent_codec::{train_codec, CodecConfig, CodecTrainConfig, LatentCodec};
use ecm_core::motion_curves::{scale_curve, MotionCurveSet};
use ecm_core::phantom_data::{detect_boxes, generate_dataset, PhantomConfig, VideoClip, DEFAULT_BANDS};
use ecm_core::video_diffusion::{generate, prepare_clips, train_diffusion, DiffusionConfig, DiffusionModel, DiffusionTrainConfig, Prediction};

use crate::Outcome;

const CLIPS: usize = 200;
const TRAIN_CLIPS: usize = 180;
const DENOISER_STEPS: usize = 20_000;
const EVAL_CLIPS: usize = 20;
const SEEDS: usize = 10;
/// Structure whose curve is scaled (left ventricle).
const EDITED: usize = 0;
const FACTORS: [f64; 3] = [0.5, 1.0, 1.5];

pub fn determinism_config() -> String {
    r#"
[data]
clip_count = 6

[codec]
base_channels = 4

[codec_train]
steps = 40

[model]
base_channels = 8
time_dim = 32
sampling_steps = 10

[model.motion]
dim = 32

[model.conditioning]
dim = 32
cond_dim = 16
"#
    .to_string()
}

fn codec_config() -> (CodecConfig, CodecTrainConfig) {
    (
        CodecConfig { base_channels: 8, ..Default::default() },
        CodecTrainConfig { steps: 800, lr: 2e-3, batch_frames: 8, seed: 0, log_every: 100 },
    )
}

fn model_config() -> DiffusionConfig {
    DiffusionConfig { base_channels: 32, prediction: Prediction::Velocity, ..Default::default() }
}

fn train_config() -> DiffusionTrainConfig {
    DiffusionTrainConfig { steps: DENOISER_STEPS, lr: 5e-4, ema_decay: 0.999, ..Default::default() }
}

struct Smoke {
    clips: Vec<VideoClip>,
    codec: LatentCodec,
    model: DiffusionModel,
    codec_mae: f64,
    mean_curves: MotionCurveSet,
    train_secs: f64,
}

/// Per-structure mean corner positions over the training clips, held
/// constant over time.
fn dataset_mean_curves(clips: &[VideoClip]) -> MotionCurveSet {
    let first = MotionCurveSet::from_clip(&clips[0]);
    let (n, c) = (first.frames, first.categories);
    let mut sums = vec![[0.0; 8]; c];
    let mut counts = vec![0usize; c];
    for clip in clips {
        let curves = MotionCurveSet::from_clip(clip);
        for t in 0..n {
            for k in 0..c {
                if curves.is_present(t, k) {
                    sums[k].iter_mut().zip(curves.at(t, k)).for_each(|(s, v)| *s += v);
                    counts[k] += 1;
                }
            }
        }
    }
    let means: Vec<[f64; 8]> = sums.iter().zip(&counts).map(|(s, &m)| s.map(|v| v / m.max(1) as f64)).collect();
    MotionCurveSet { frames: n, categories: c, coords: (0..n).flat_map(|_| means.clone()).collect(), present: vec![true; n * c] }
}

fn build() -> Result<Smoke, String> {
    let start = Instant::now();
    let data = PhantomConfig { clip_count: CLIPS, ..Default::default() };
    let (clips, _) = generate_dataset(&data).map_err(|e| e.to_string())?;
    let (train, held) = clips.split_at(TRAIN_CLIPS);
    let (ccfg, ctrain) = codec_config();
    let (mut codec, _) = train_codec(&ccfg, &ctrain, train, None).map_err(|e| e.to_string())?;
    codec.fit_latent_stats(train).map_err(|e| e.to_string())?;
    let codec_mae = codec.reconstruction_mae(held).map_err(|e| e.to_string())?;
    let cfg = model_config();
    let prepared = prepare_clips(&cfg, &codec, train).map_err(|e| e.to_string())?;
    let mut model = DiffusionModel::new(cfg, 0, &codec.fingerprint()).map_err(|e| e.to_string())?;
    train_diffusion(&mut model, &train_config(), &prepared, None, None).map_err(|e| e.to_string())?;
    let mean_curves = dataset_mean_curves(train);
    drop(prepared);
    Ok(Smoke { clips, codec, model, codec_mae, mean_curves, train_secs: start.elapsed().as_secs_f64() })
}

fn smoke() -> &'static Result<Smoke, String> {
    static SMOKE: OnceLock<Result<Smoke, String>> = OnceLock::new();
    SMOKE.get_or_init(build)
}

impl Smoke {
    fn held(&self) -> &[VideoClip] {
        &self.clips[TRAIN_CLIPS..]
    }

    fn sample(&self, clip: &VideoClip, curves: &MotionCurveSet, seed: u64) -> Vec<f32> {
        let steps = self.model.config().sampling_steps;
        generate(&self.model, &self.codec, clip.frame(0), curves, steps, seed).expect("generation").pixels
    }
}

/// Mean IoU consistency; a clip where nothing is detected scores 0.
fn consistency(pixels: &[f32], clip: &VideoClip, curves: &MotionCurveSet) -> f64 {
    iou_consistency(pixels, clip.height, clip.width, &DEFAULT_BANDS, curves).unwrap_or(0.0)
}

pub fn end_to_end() -> Outcome {
    let s = match smoke() {
        Ok(s) => s,
        Err(e) => return Outcome::new(false, format!("smoke model failed to train: {e}")),
    };
    let (mut cond, mut base) = (0.0, 0.0);
    for (i, clip) in s.held().iter().take(EVAL_CLIPS).enumerate() {
        let truth = MotionCurveSet::from_clip(clip);
        cond += consistency(&s.sample(clip, &truth, i as u64), clip, &truth);
        base += consistency(&s.sample(clip, &s.mean_curves, i as u64), clip, &truth);
    }
    let (cond, base) = (cond / EVAL_CLIPS as f64, base / EVAL_CLIPS as f64);
    let pass = s.codec_mae <= 0.05 && DENOISER_STEPS <= 20_000 && cond >= 0.5 && cond - base >= 0.1;
    Outcome::new(
        pass,
        format!(
            "codec_mae={:.4} steps={DENOISER_STEPS} iou={cond:.3} baseline={base:.3} gap={:.3} train_time={:.0}s",
            s.codec_mae,
            cond - base,
            s.train_secs
        ),
    )
}

/// Detected width of structure `c` per frame (pixels), where detected.
fn widths(pixels: &[f32], clip: &VideoClip, c: usize) -> Vec<f64> {
    let det = detect_boxes(pixels, clip.frames, clip.height, clip.width, &DEFAULT_BANDS);
    (0..clip.frames).filter(|&t| det.is_present(t, c)).map(|t| (det.bbox(t, c)[2] - det.bbox(t, c)[0]) as f64).collect()
}

/// IoU of detections vs `curves` restricted to structures other than `skip`.
fn others_iou(pixels: &[f32], clip: &VideoClip, curves: &MotionCurveSet, skip: usize) -> Option<f64> {
    let det = detect_boxes(pixels, clip.frames, clip.height, clip.width, &DEFAULT_BANDS);
    let (mut sum, mut n) = (0.0, 0usize);
    for t in 0..curves.frames {
        let (boxes, present) = curves.frame_boxes(t, clip.height, clip.width);
        for c in (0..curves.categories).filter(|&c| c != skip) {
            if present[c] && det.is_present(t, c) {
                sum += box_iou(boxes[c], det.bbox(t, c).map(|v| v as f64));
                n += 1;
            }
        }
    }
    (n > 0).then(|| sum / n as f64)
}

/// Spearman rank correlation for distinct-valued samples.
fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let ranks = |v: &[f64]| {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        idx.iter().enumerate().for_each(|(rank, &i)| r[i] = rank as f64);
        r
    };
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let d2: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - b).powi(2)).sum();
    1.0 - 6.0 * d2 / (n * (n * n - 1.0))
}

pub fn controllability() -> Outcome {
    let s = match smoke() {
        Ok(s) => s,
        Err(e) => return Outcome::new(false, format!("smoke model failed to train: {e}")),
    };
    let mut amplitude = [0.0; 3];
    let mut others = [0.0; 3];
    let mut per_seed_rho = 0.0;
    for seed in 0..SEEDS {
        let clip = &s.held()[seed];
        let truth = MotionCurveSet::from_clip(clip);
        let mut amps = [0.0; 3];
        for (k, &f) in FACTORS.iter().enumerate() {
            let curves = scale_curve(&truth, EDITED, f).expect("scale").curves;
            let px = s.sample(clip, &curves, seed as u64);
            let w = widths(&px, clip, EDITED);
            amps[k] = if w.is_empty() { 0.0 } else { w.iter().copied().fold(f64::MIN, f64::max) - w.iter().copied().fold(f64::MAX, f64::min) };
            others[k] += others_iou(&px, clip, &truth, EDITED).unwrap_or(0.0) / SEEDS as f64;
        }
        amplitude.iter_mut().zip(&amps).for_each(|(a, v)| *a += v / SEEDS as f64);
        per_seed_rho += spearman(&FACTORS, &amps) / SEEDS as f64;
    }
    let rho = spearman(&FACTORS, &amplitude);
    let drop = (others[1] - others[0]).max(others[1] - others[2]);
    Outcome::new(
        rho == 1.0 && drop <= 0.1,
        format!(
            "amplitude(px) {:.2}/{:.2}/{:.2} spearman={rho:.2} per-seed mean={per_seed_rho:.2} others_iou {:.3}/{:.3}/{:.3} max_drop={drop:.3}",
            amplitude[0], amplitude[1], amplitude[2], others[0], others[1], others[2]
        ),
    )
}
