//! Reconstruction, controllability and distribution metrics.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Tensor};
use crate::conditioning::{crop_rois, StructureEncoder};
use crate::autograd::ParamStore;
use crate::error::{Error, Result};
use crate::motion_curves::MotionCurveSet;
use crate::phantom_data::detect_boxes;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;
pub const PSNR_CAP: f64 = 100.0;

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let k: Vec<f64> = (0..SSIM_WINDOW).map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable weighted sum over every valid window of an `h × w` image.
fn filter_valid(img: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * img[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM of one frame pair (data range 1, Gaussian window, population
/// covariances, valid windows only).
pub fn ssim_frame(a: &[f32], b: &[f32], h: usize, w: usize) -> Result<f64> {
    if a.len() != h * w || b.len() != h * w {
        return Err(Error::Shape(format!("ssim frames must both be {h}x{w}")));
    }
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!("ssim needs frames of at least {SSIM_WINDOW}x{SSIM_WINDOW}")));
    }
    let k = gaussian_window();
    let x: Vec<f64> = a.iter().map(|&v| v as f64).collect();
    let y: Vec<f64> = b.iter().map(|&v| v as f64).collect();
    let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(u, v)| u * v).collect() };
    let mx = filter_valid(&x, h, w, &k);
    let my = filter_valid(&y, h, w, &k);
    let mxx = filter_valid(&prod(&x, &x), h, w, &k);
    let myy = filter_valid(&prod(&y, &y), h, w, &k);
    let mxy = filter_valid(&prod(&x, &y), h, w, &k);
    let (c1, c2) = (K1 * K1, K2 * K2);
    let mut total = 0.0;
    for i in 0..mx.len() {
        let (ux, uy) = (mx[i], my[i]);
        let (vx, vy, cxy) = (mxx[i] - ux * ux, myy[i] - uy * uy, mxy[i] - ux * uy);
        total += ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
    }
    Ok(total / mx.len() as f64)
}

fn check_clips(a: &[f32], b: &[f32], frames: usize, h: usize, w: usize) -> Result<()> {
    if a.len() != frames * h * w || b.len() != a.len() {
        return Err(Error::Shape(format!("clips must both be {frames}x{h}x{w}")));
    }
    Ok(())
}

/// SSIM averaged over frames.
pub fn ssim(a: &[f32], b: &[f32], frames: usize, h: usize, w: usize) -> Result<f64> {
    check_clips(a, b, frames, h, w)?;
    let n = h * w;
    let mut total = 0.0;
    for t in 0..frames {
        total += ssim_frame(&a[t * n..(t + 1) * n], &b[t * n..(t + 1) * n], h, w)?;
    }
    Ok(total / frames.max(1) as f64)
}

pub fn mae(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Shape("mae needs two non-empty buffers of equal length".into()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y).abs() as f64).sum::<f64>() / a.len() as f64)
}

/// `10·log10(1/MSE)` for data in `[0, 1]`, capped at [`PSNR_CAP`].
pub fn psnr(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Shape("psnr needs two non-empty buffers of equal length".into()));
    }
    let mse = a.iter().zip(b).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>() / a.len() as f64;
    if mse < 1e-10 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// Intersection over union of `(x_min, y_min, x_max, y_max)` boxes.
pub fn box_iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let ix = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let iy = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = ix * iy;
    let area = |r: [f64; 4]| (r[2] - r[0]).max(0.0) * (r[3] - r[1]).max(0.0);
    let union = area(a) + area(b) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Mean IoU between boxes detected on generated frames and the target
/// curve boxes, over (frame, structure) pairs present on both sides.
pub fn iou_consistency(pixels: &[f32], h: usize, w: usize, bands: &[(f64, f64)], curves: &MotionCurveSet) -> Result<f64> {
    if pixels.len() != curves.frames * h * w {
        return Err(Error::Shape(format!("{} pixels for {} frames of {h}x{w}", pixels.len(), curves.frames)));
    }
    if bands.len() != curves.categories {
        return Err(Error::Shape(format!("{} intensity bands for {} categories", bands.len(), curves.categories)));
    }
    let det = detect_boxes(pixels, curves.frames, h, w, bands);
    let (mut total, mut pairs) = (0.0, 0usize);
    for t in 0..curves.frames {
        let (boxes, present) = curves.frame_boxes(t, h, w);
        for c in 0..curves.categories {
            if present[c] && det.is_present(t, c) {
                total += box_iou(boxes[c], det.bbox(t, c).map(|v| v as f64));
                pairs += 1;
            }
        }
    }
    if pairs == 0 {
        return Err(Error::Undefined("no structure is present in both the detections and the curves".into()));
    }
    Ok(total / pairs as f64)
}

/// Mean and covariance of a feature set.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl FeatureStats {
    /// Unbiased covariance; needs at least two samples.
    pub fn from_features(features: &[Vec<f64>]) -> Result<Self> {
        let n = features.len();
        if n < 2 {
            return Err(Error::InvalidArgument("feature statistics need at least two samples".into()));
        }
        let d = features[0].len();
        if d == 0 || features.iter().any(|f| f.len() != d) {
            return Err(Error::Shape("feature vectors must share one non-zero width".into()));
        }
        let mut mean = DVector::zeros(d);
        for f in features {
            mean += DVector::from_column_slice(f);
        }
        mean /= n as f64;
        let mut cov = DMatrix::zeros(d, d);
        for f in features {
            let c = DVector::from_column_slice(f) - &mean;
            cov += &c * c.transpose();
        }
        cov /= (n - 1) as f64;
        Ok(Self { mean, cov })
    }
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Square root of a symmetric PSD matrix, negative eigenvalues clipped to 0.
pub fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetrize(m));
    let root = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose()
}

/// `‖μa − μb‖² + Tr(Σa + Σb − 2(Σa·Σb)^½)`.
///
/// The trace of the cross term is taken as `Tr((√Σa·Σb·√Σa)^½)`, which has
/// the same eigenvalues and stays symmetric.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    let d = a.mean.len();
    if b.mean.len() != d || a.cov.shape() != (d, d) || b.cov.shape() != (d, d) {
        return Err(Error::Shape(format!("feature statistics of width {d} and {} do not match", b.mean.len())));
    }
    if a == b {
        return Ok(0.0);
    }
    let (ca, cb) = (symmetrize(&a.cov), symmetrize(&b.cov));
    let ra = psd_sqrt(&ca);
    let inner = symmetrize(&(&ra * &cb * &ra));
    let cross: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let diff = (&a.mean - &b.mean).norm_squared();
    Ok((diff + ca.trace() + cb.trace() - 2.0 * cross).max(0.0))
}

/// Maps a frame to a feature vector for distribution metrics.
pub trait FeatureExtractor {
    fn dim(&self) -> usize;
    fn features(&self, frame: &[f32], h: usize, w: usize) -> Result<Vec<f64>>;
}

/// Features from a trained structure encoder applied to the whole frame.
pub struct StructureFeatures<'a> {
    pub encoder: &'a StructureEncoder,
    pub store: &'a ParamStore<f32>,
    pub dim: usize,
}

impl FeatureExtractor for StructureFeatures<'_> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn features(&self, frame: &[f32], h: usize, w: usize) -> Result<Vec<f64>> {
        if frame.len() != h * w {
            return Err(Error::Shape(format!("frame must be {h}x{w}")));
        }
        let p = self.encoder.patch;
        let patch = crop_rois(frame, h, w, &[[0.0, 0.0, w as f64, h as f64]], &[true], p).remove(0).expect("present box");
        let mut g = Graph::inference();
        let x = g.input(Tensor::new(&[1, p, p, 1], patch));
        let y = self.encoder.forward(&mut g, self.store, x)?;
        Ok(g.value(y).to_f64_vec())
    }
}

/// Fréchet distance between the feature distributions of two frame sets.
pub fn frechet_between(extractor: &dyn FeatureExtractor, a: &[&[f32]], b: &[&[f32]], h: usize, w: usize) -> Result<f64> {
    let feats = |set: &[&[f32]]| -> Result<Vec<Vec<f64>>> { set.iter().map(|f| extractor.features(f, h, w)).collect() };
    frechet_distance(&FeatureStats::from_features(&feats(a)?)?, &FeatureStats::from_features(&feats(b)?)?)
}

/// Metrics of one evaluated clip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipMetrics {
    pub clip: usize,
    pub ssim: f64,
    pub psnr: f64,
    pub mae: f64,
    /// `None` when no structure pair could be matched.
    pub iou_consistency: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub ssim: f64,
    pub psnr: f64,
    pub mae: f64,
    pub iou_consistency: Option<f64>,
    pub frechet: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// The run configuration the metrics were produced with.
    pub config: String,
    pub clips: Vec<ClipMetrics>,
    pub aggregates: Aggregates,
}

impl MetricReport {
    pub fn new(config: String, clips: Vec<ClipMetrics>, frechet: Option<f64>) -> Self {
        let n = clips.len().max(1) as f64;
        let ious: Vec<f64> = clips.iter().filter_map(|c| c.iou_consistency).collect();
        let aggregates = Aggregates {
            ssim: clips.iter().map(|c| c.ssim).sum::<f64>() / n,
            psnr: clips.iter().map(|c| c.psnr).sum::<f64>() / n,
            mae: clips.iter().map(|c| c.mae).sum::<f64>() / n,
            iou_consistency: (!ious.is_empty()).then(|| ious.iter().sum::<f64>() / ious.len() as f64),
            frechet,
        };
        Self { config, clips, aggregates }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "clip,ssim,psnr,mae,iou_consistency")?;
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        for c in &self.clips {
            writeln!(w, "{},{},{},{},{}", c.clip, c.ssim, c.psnr, c.mae, opt(c.iou_consistency))?;
        }
        let a = &self.aggregates;
        writeln!(w, "mean,{},{},{},{}", a.ssim, a.psnr, a.mae, opt(a.iou_consistency))?;
        Ok(())
    }

    /// Writes `<stem>.json` and `<stem>.csv`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(format!("{stem}.json")), self.to_json()?)?;
        let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join(format!("{stem}.csv")))?);
        self.write_csv(&mut f)?;
        f.flush()?;
        Ok(())
    }
}
