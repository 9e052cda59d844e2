use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use super::{MotionCurveSet, COORDS};
use crate::autograd::{Graph, Init, ParamId, ParamStore, Scalar, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{Activation, Mlp};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncodingMode {
    /// `sin/cos(2π·2^k·v)` of every coordinate value.
    #[default]
    PerCoordinate,
    /// Per-frame contribution of the first `L` temporal DFT harmonics of
    /// each coordinate's trajectory: `Re, Im` of `X_k·e^{2πikn/N}`.
    TemporalDft,
}

/// Raw Fourier features, `frames × categories × (16·levels)`; rows of absent
/// entries are zero.
pub fn fourier_features(curves: &MotionCurveSet, levels: usize, mode: EncodingMode) -> Vec<f64> {
    let e = 2 * COORDS * levels;
    let (n, c) = (curves.frames, curves.categories);
    let mut out = vec![0.0; n * c * e];
    match mode {
        EncodingMode::PerCoordinate => {
            for (row, (coords, &p)) in curves.coords.iter().zip(&curves.present).enumerate() {
                if !p {
                    continue;
                }
                let dst = &mut out[row * e..(row + 1) * e];
                for (j, &v) in coords.iter().enumerate() {
                    for k in 0..levels {
                        let arg = TAU * (1u64 << k) as f64 * v;
                        dst[(j * levels + k) * 2] = arg.sin();
                        dst[(j * levels + k) * 2 + 1] = arg.cos();
                    }
                }
            }
        }
        EncodingMode::TemporalDft => {
            for cat in 0..c {
                let frames: Vec<usize> = (0..n).filter(|&t| curves.is_present(t, cat)).collect();
                if frames.is_empty() {
                    continue;
                }
                for j in 0..COORDS {
                    // absent frames are filled with the present-frame mean
                    let mean = frames.iter().map(|&t| curves.at(t, cat)[j]).sum::<f64>() / frames.len() as f64;
                    let seq: Vec<f64> =
                        (0..n).map(|t| if curves.is_present(t, cat) { curves.at(t, cat)[j] } else { mean }).collect();
                    for k in 0..levels {
                        let (mut re, mut im) = (0.0, 0.0);
                        for (t, &v) in seq.iter().enumerate() {
                            let a = TAU * (k * t) as f64 / n as f64;
                            re += v * a.cos();
                            im -= v * a.sin();
                        }
                        let (re, im) = (re / n as f64, im / n as f64);
                        for &t in &frames {
                            let a = TAU * (k * t) as f64 / n as f64;
                            let row = t * c + cat;
                            out[row * e + (j * levels + k) * 2] = re * a.cos() - im * a.sin();
                            out[row * e + (j * levels + k) * 2 + 1] = re * a.sin() + im * a.cos();
                        }
                    }
                }
            }
        }
    }
    out
}

/// Fourier features with absent rows replaced by the category placeholder
/// (`placeholders` is `categories × 16·levels`).
pub fn fourier_encode(curves: &MotionCurveSet, levels: usize, mode: EncodingMode, placeholders: &[f64]) -> Result<Vec<f64>> {
    let e = 2 * COORDS * levels;
    if placeholders.len() != curves.categories * e {
        return Err(Error::Shape(format!("placeholder bank must be {}x{e}", curves.categories)));
    }
    let mut out = fourier_features(curves, levels, mode);
    for (row, &p) in curves.present.iter().enumerate() {
        if !p {
            let c = row % curves.categories;
            out[row * e..(row + 1) * e].copy_from_slice(&placeholders[c * e..(c + 1) * e]);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MotionEncoderConfig {
    /// Fourier frequency count `L` (encoded width `16·L`).
    pub levels: usize,
    /// Embedding width `D`.
    pub dim: usize,
    /// Number of linear layers in the MLP.
    pub depth: usize,
    pub activation: Activation,
    pub mode: EncodingMode,
}

impl Default for MotionEncoderConfig {
    fn default() -> Self {
        Self { levels: 8, dim: 256, depth: 2, activation: Activation::Silu, mode: EncodingMode::PerCoordinate }
    }
}

/// Fourier encoding, learnable per-category placeholders for absent
/// entries, and the per-token MLP.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionEncoder {
    pub config: MotionEncoderConfig,
    pub categories: usize,
    pub placeholders: ParamId,
    pub mlp: Mlp,
}

impl MotionEncoder {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        config: MotionEncoderConfig,
        categories: usize,
    ) -> Result<Self> {
        if config.levels == 0 || config.levels > 30 || config.depth == 0 || config.dim == 0 {
            return Err(Error::Config(format!("invalid motion encoder config {config:?}")));
        }
        let e = 2 * COORDS * config.levels;
        let placeholders = store.add(&format!("{name}.placeholders"), init.normal(&[categories, e], 0.7));
        let mut widths = vec![e];
        widths.extend(std::iter::repeat(config.dim).take(config.depth));
        let mlp = Mlp::new(store, init, &format!("{name}.mlp"), &widths, config.activation);
        Ok(Self { config, categories, placeholders, mlp })
    }

    pub fn encoded_width(&self) -> usize {
        2 * COORDS * self.config.levels
    }

    /// Encoded tokens `[frames·categories, E]`, placeholders substituted.
    pub fn encode<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, curves: &MotionCurveSet) -> Result<Var> {
        if curves.categories != self.categories {
            return Err(Error::Shape(format!("curves have {} categories, encoder expects {}", curves.categories, self.categories)));
        }
        let e = self.encoded_width();
        let rows = curves.frames * curves.categories;
        let feats = fourier_features(curves, self.config.levels, self.config.mode);
        let feats = g.input(Tensor::from_f64(&[rows, e], &feats));
        if curves.present.iter().all(|&p| p) {
            return Ok(feats);
        }
        let bank = g.param(store, self.placeholders);
        let table = g.concat_rows(&[feats, bank]);
        let idx: Vec<usize> =
            curves.present.iter().enumerate().map(|(i, &p)| if p { i } else { rows + i % curves.categories }).collect();
        Ok(g.gather_rows(table, &idx))
    }

    /// Applies the MLP to already-encoded `[tokens, E]` features.
    pub fn embed_encoded<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, encoded: Var) -> Result<Var> {
        let shape = g.shape(encoded);
        if shape.len() != 2 || shape[1] != self.encoded_width() {
            return Err(Error::Shape(format!("encoded motion must be [tokens, {}], got {shape:?}", self.encoded_width())));
        }
        Ok(self.mlp.forward(g, store, encoded))
    }

    /// Motion embedding `[frames·categories, D]`.
    pub fn embed<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, curves: &MotionCurveSet) -> Result<Var> {
        let x = self.encode(g, store, curves)?;
        self.embed_encoded(g, store, x)
    }
}
