//! One function per subcommand; each is a thin composition of core
//! operations that never mutates its inputs.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ecm_core::checkpoint::Checkpoint;
use ecm_core::eval_metrics::{self, ClipMetrics, MetricReport, StructureFeatures};
use ecm_core::latent_codec::{self, LatentCodec, CODEC_KIND};
use ecm_core::motion_curves::{replace_curve, resample_curve, scale_curve, MotionCurveSet};
use ecm_core::phantom_data::{self, read_clip, read_dataset, write_clip, write_dataset, VideoClip, DEFAULT_BANDS};
use ecm_core::video_diffusion::{self, prepare_clips, train_diffusion, DiffusionModel, DENOISER_KIND};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::plot;

pub type CliResult<T> = Result<T, CliError>;

/// Attaches `path` to I/O errors coming from the core.
fn at<T>(path: &Path, r: ecm_core::Result<T>) -> CliResult<T> {
    r.map_err(|e| match e {
        ecm_core::Error::Io(io) => CliError::io(path, io),
        other => other.into(),
    })
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| CliError::io(path, e))?))
}

/// Adds the run-config echo to a checkpoint's meta object.
fn with_echo(mut ck: Checkpoint, cfg: &RunConfig) -> Checkpoint {
    let mut meta: serde_json::Map<String, serde_json::Value> = serde_json::from_str(&ck.meta).unwrap_or_default();
    meta.insert("run_config".into(), serde_json::Value::String(cfg.to_toml()));
    ck.meta = serde_json::Value::Object(meta).to_string();
    ck
}

fn save(ck: &Checkpoint, path: &Path) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    at(path, ck.save(path))
}

pub fn load_codec(path: &Path) -> CliResult<LatentCodec> {
    let ck = at(path, Checkpoint::load_kind(path, CODEC_KIND))?;
    Ok(LatentCodec::from_checkpoint(&ck)?)
}

/// Loads a denoiser; with `expected`, its configuration must match exactly.
pub fn load_denoiser(path: &Path, expected: Option<&RunConfig>) -> CliResult<DiffusionModel> {
    let ck = at(path, Checkpoint::load_kind(path, DENOISER_KIND))?;
    Ok(match expected {
        Some(cfg) => DiffusionModel::from_checkpoint_checked(&ck, &cfg.model)?,
        None => DiffusionModel::from_checkpoint(&ck)?,
    })
}

pub fn make_data(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    let (clips, manifest) = phantom_data::generate_dataset(&cfg.data)?;
    at(out, write_dataset(out, &clips, &manifest))
}

fn load_data(cfg: &RunConfig, dir: &Path) -> CliResult<Vec<VideoClip>> {
    let (clips, manifest) = at(dir, read_dataset(dir))?;
    if (manifest.height, manifest.width, manifest.frames) != (cfg.data.height, cfg.data.width, cfg.data.frames) {
        return Err(CliError::Mismatch(format!(
            "dataset is {}x{}x{}, config expects {}x{}x{}",
            manifest.frames, manifest.height, manifest.width, cfg.data.frames, cfg.data.height, cfg.data.width
        )));
    }
    Ok(clips)
}

/// Returns the reconstruction MAE on the training clips.
pub fn train_codec(cfg: &RunConfig, data: &Path, out: &Path, log: Option<&Path>) -> CliResult<f64> {
    let clips = load_data(cfg, data)?;
    let mut log_file = log.map(create).transpose()?;
    let (mut codec, report) =
        latent_codec::train_codec(&cfg.codec, &cfg.codec_train, &clips, log_file.as_mut().map(|w| w as &mut dyn Write))?;
    if let (Some(w), Some(p)) = (log_file.as_mut(), log) {
        w.flush().map_err(|e| CliError::io(p, e))?;
    }
    codec.fit_latent_stats(&clips)?;
    save(&with_echo(codec.to_checkpoint(report.losses.len() as u64, cfg.codec_train.seed), cfg), out)?;
    Ok(codec.reconstruction_mae(&clips)?)
}

/// Returns the per-step losses.
pub fn train(
    cfg: &RunConfig,
    data: &Path,
    codec_path: &Path,
    out: &Path,
    log: Option<&Path>,
    checkpoint_dir: Option<&Path>,
) -> CliResult<Vec<f64>> {
    let clips = load_data(cfg, data)?;
    let codec = load_codec(codec_path)?;
    if codec.config != cfg.codec {
        return Err(CliError::Mismatch("codec checkpoint does not match the [codec] section".into()));
    }
    let prepared = prepare_clips(&cfg.model, &codec, &clips)?;
    let mut model = DiffusionModel::new(cfg.model.clone(), cfg.train.seed, &codec.fingerprint())?;
    let mut log_file = log.map(create).transpose()?;
    let report = train_diffusion(
        &mut model,
        &cfg.train,
        &prepared,
        log_file.as_mut().map(|w| w as &mut dyn Write),
        checkpoint_dir,
    )?;
    if let (Some(w), Some(p)) = (log_file.as_mut(), log) {
        w.flush().map_err(|e| CliError::io(p, e))?;
    }
    save(&with_echo(model.to_checkpoint(cfg.train.steps as u64, cfg.train.seed), cfg), out)?;
    Ok(report.losses)
}

pub struct GenerateArgs<'a> {
    pub checkpoint: &'a Path,
    pub codec: &'a Path,
    /// ECMV clip holding the initial frame.
    pub frame: &'a Path,
    pub frame_index: usize,
    pub curves: &'a Path,
    pub out: &'a Path,
    pub seed: u64,
    /// 0 uses the model's configured count.
    pub steps: usize,
    pub config: Option<&'a RunConfig>,
    pub png_dir: Option<&'a Path>,
    pub plot: Option<&'a Path>,
}

/// Writes the generated clip as ECMV; its boxes are the target curve boxes.
pub fn generate(args: &GenerateArgs) -> CliResult<VideoClip> {
    let model = load_denoiser(args.checkpoint, args.config)?;
    let codec = load_codec(args.codec)?;
    let source = at(args.frame, read_clip(args.frame))?;
    if args.frame_index >= source.frames {
        return Err(CliError::Usage(format!("frame index {} outside a {}-frame clip", args.frame_index, source.frames)));
    }
    let curves = at(args.curves, MotionCurveSet::read(args.curves))?;
    let steps = if args.steps == 0 { model.config().sampling_steps } else { args.steps };
    let out = video_diffusion::generate(&model, &codec, source.frame(args.frame_index), &curves, steps, args.seed)?;
    let cfg = model.config();
    let boxes = curves.boxes(cfg.height, cfg.width).iter().map(|b| b.map(|v| v as f32)).collect();
    let clip = VideoClip {
        frames: curves.frames,
        height: cfg.height,
        width: cfg.width,
        categories: curves.categories,
        pixels: out.pixels,
        boxes,
        present: curves.present.clone(),
    };
    save_clip(&clip, args.out)?;
    if let Some(dir) = args.png_dir {
        plot::dump_frames(&clip, dir)?;
    }
    if let Some(p) = args.plot {
        plot::curve_plot(&curves, Some(&clip), p)?;
    }
    Ok(clip)
}

fn save_clip(clip: &VideoClip, path: &Path) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    at(path, write_clip(path, clip))
}

/// Curve file of one stored clip.
pub fn extract_curves(clip: &Path, out: &Path) -> CliResult<()> {
    let clip = at(clip, read_clip(clip))?;
    at(out, MotionCurveSet::from_clip(&clip).write(out))
}

#[derive(Clone, Debug, PartialEq)]
pub enum CurveEdit {
    Scale { category: usize, factor: f64 },
    Replace { category: usize, other: PathBuf },
    Resample { frames: usize },
}

/// Parses `cat:value`.
pub fn parse_pair(text: &str) -> CliResult<(usize, &str)> {
    let (c, v) = text.split_once(':').ok_or_else(|| CliError::Usage(format!("expected cat:value, got {text:?}")))?;
    let c = c.parse().map_err(|_| CliError::Usage(format!("bad category {c:?}")))?;
    Ok((c, v))
}

/// Returns the number of clamped coordinates (scaling only).
pub fn edit_curves(input: &Path, out: &Path, edit: &CurveEdit) -> CliResult<usize> {
    let curves = at(input, MotionCurveSet::read(input))?;
    let (edited, clamped) = match edit {
        CurveEdit::Scale { category, factor } => {
            let s = scale_curve(&curves, *category, *factor)?;
            (s.curves, s.clamped)
        }
        CurveEdit::Replace { category, other } => {
            let b = at(other, MotionCurveSet::read(other))?;
            (replace_curve(&curves, &b, *category)?, 0)
        }
        CurveEdit::Resample { frames } => (resample_curve(&curves, *frames)?, 0),
    };
    at(out, edited.write(out))?;
    Ok(clamped)
}

pub struct EvaluateArgs<'a> {
    pub generated: &'a [PathBuf],
    pub targets: &'a [PathBuf],
    pub out_dir: &'a Path,
    pub config: Option<&'a RunConfig>,
    /// Denoiser whose structure encoder supplies Fréchet features.
    pub features: Option<&'a Path>,
}

pub fn evaluate(args: &EvaluateArgs) -> CliResult<MetricReport> {
    if args.generated.len() != args.targets.len() || args.generated.is_empty() {
        return Err(CliError::Usage(format!("{} generated clips for {} targets", args.generated.len(), args.targets.len())));
    }
    let mut per_clip = Vec::new();
    let mut gen_frames = Vec::new();
    let mut tgt_frames = Vec::new();
    for (i, (g, t)) in args.generated.iter().zip(args.targets).enumerate() {
        let gen = at(g, read_clip(g))?;
        let tgt = at(t, read_clip(t))?;
        if (gen.frames, gen.height, gen.width) != (tgt.frames, tgt.height, tgt.width) {
            return Err(CliError::Mismatch(format!("{} and {} differ in shape", g.display(), t.display())));
        }
        let curves = MotionCurveSet::from_clip(&tgt);
        let iou = match eval_metrics::iou_consistency(&gen.pixels, gen.height, gen.width, &DEFAULT_BANDS, &curves) {
            Ok(v) => Some(v),
            Err(ecm_core::Error::Undefined(_)) => None,
            Err(e) => return Err(e.into()),
        };
        per_clip.push(ClipMetrics {
            clip: i,
            ssim: eval_metrics::ssim(&gen.pixels, &tgt.pixels, gen.frames, gen.height, gen.width)?,
            psnr: eval_metrics::psnr(&gen.pixels, &tgt.pixels)?,
            mae: eval_metrics::mae(&gen.pixels, &tgt.pixels)?,
            iou_consistency: iou,
        });
        gen_frames.push(gen);
        tgt_frames.push(tgt);
    }
    let frechet = match args.features {
        Some(path) => {
            let model = load_denoiser(path, None)?;
            let enc = &model.net.conditioner.encoder;
            let fx = StructureFeatures { encoder: enc, store: &model.store, dim: model.config().conditioning.dim };
            let frames = |clips: &[VideoClip]| -> Vec<Vec<f32>> {
                clips.iter().flat_map(|c| (0..c.frames).map(|t| c.frame(t).to_vec()).collect::<Vec<_>>()).collect()
            };
            let (a, b) = (frames(&gen_frames), frames(&tgt_frames));
            let ra: Vec<&[f32]> = a.iter().map(|v| v.as_slice()).collect();
            let rb: Vec<&[f32]> = b.iter().map(|v| v.as_slice()).collect();
            Some(eval_metrics::frechet_between(&fx, &ra, &rb, gen_frames[0].height, gen_frames[0].width)?)
        }
        None => None,
    };
    let echo = args.config.map(|c| c.to_toml()).unwrap_or_default();
    let report = MetricReport::new(echo, per_clip, frechet);
    at(args.out_dir, report.write(args.out_dir, "metrics"))?;
    Ok(report)
}

/// Curve plot, optionally with box traces detected on a generated clip.
pub fn plot_cmd(curves: &Path, generated: Option<&Path>, out: &Path) -> CliResult<()> {
    let curves = at(curves, MotionCurveSet::read(curves))?;
    let clip = generated.map(|p| at(p, read_clip(p))).transpose()?;
    plot::curve_plot(&curves, clip.as_ref(), out)
}
