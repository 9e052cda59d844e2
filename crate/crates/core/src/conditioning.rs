//! Structure-to-motion alignment: per-structure appearance embeddings from
//! the initial frame, fused with motion embeddings into per-frame tokens.
//!
//! Everything here works on a batch of `B` clips with `N` frames and `C`
//! categories; token rows are ordered `(clip, frame, category)`.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Init, ParamId, ParamStore, Scalar, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{Activation, Conv2d, Linear, Mlp};

/// Bilinear sample of a `h × w` image at continuous pixel-index coordinates
/// (pixel `i` has its centre at `i`), clamped at the borders.
fn bilinear(img: &[f32], h: usize, w: usize, x: f64, y: f64) -> f32 {
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let at = |yy: usize, xx: usize| img[yy * w + xx] as f64;
    let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
    let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
    (top * (1.0 - fy) + bottom * fy) as f32
}

/// Crops every present box of `frame` and resamples it to `patch × patch`.
/// Absent structures yield `None` (to be filled from the general feature
/// bank).
pub fn crop_rois(frame: &[f32], h: usize, w: usize, boxes: &[[f64; 4]], present: &[bool], patch: usize) -> Vec<Option<Vec<f32>>> {
    assert_eq!(frame.len(), h * w, "crop_rois: frame size");
    boxes
        .iter()
        .zip(present)
        .map(|(b, &p)| {
            if !p {
                return None;
            }
            let (sx, sy) = ((b[2] - b[0]) / patch as f64, (b[3] - b[1]) / patch as f64);
            let mut out = Vec::with_capacity(patch * patch);
            for i in 0..patch {
                for j in 0..patch {
                    let x = b[0] + (j as f64 + 0.5) * sx - 0.5;
                    let y = b[1] + (i as f64 + 0.5) * sy - 0.5;
                    out.push(bilinear(frame, h, w, x, y));
                }
            }
            Some(out)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConditioningConfig {
    /// ROI patch side `P`.
    pub patch: usize,
    /// Channels of the first structure-encoder conv block (doubled per block).
    pub encoder_channels: usize,
    /// Width `D` of structure (and motion) embeddings.
    pub dim: usize,
    /// Width `D_cond` of aligned tokens.
    pub cond_dim: usize,
    pub align_activation: Activation,
    pub bank_decay: f64,
}

impl Default for ConditioningConfig {
    fn default() -> Self {
        Self { patch: 24, encoder_channels: 8, dim: 256, cond_dim: 128, align_activation: Activation::Silu, bank_decay: 0.99 }
    }
}

/// Three stride-2 conv blocks and a two-layer MLP mapping a patch to a
/// `D`-vector. Category-agnostic: every patch goes through the same weights.
#[derive(Clone, Debug, PartialEq)]
pub struct StructureEncoder {
    pub patch: usize,
    pub convs: Vec<Conv2d>,
    pub mlp: Mlp,
    flat: usize,
}

impl StructureEncoder {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, init: &mut Init, name: &str, patch: usize, channels: usize, dim: usize) -> Self {
        let mut convs = Vec::new();
        let (mut cin, mut side) = (1, patch);
        for i in 0..3 {
            let cout = channels << i;
            convs.push(Conv2d::new(store, init, &format!("{name}.conv{i}"), cin, cout, 3, 2));
            cin = cout;
            side = side.div_ceil(2);
        }
        let flat = side * side * cin;
        let mlp = Mlp::new(store, init, &format!("{name}.mlp"), &[flat, dim, dim], Activation::Silu);
        Self { patch, convs, mlp, flat }
    }

    /// `patches` is `[B, P, P, 1]`; returns `[B, D]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, patches: Var) -> Result<Var> {
        let shape = g.shape(patches).to_vec();
        if shape.len() != 4 || shape[1] != self.patch || shape[2] != self.patch || shape[3] != 1 {
            return Err(Error::Shape(format!("structure patches must be [B, {0}, {0}, 1], got {shape:?}", self.patch)));
        }
        let mut h = patches;
        for conv in &self.convs {
            h = conv.forward(g, store, h);
            h = g.silu(h);
        }
        let h = g.reshape(h, &[shape[0], self.flat]);
        Ok(self.mlp.forward(g, store, h))
    }
}

/// Per-category mean structure embedding, substituted for absent
/// structures. Exact running mean for the first `1/(1−decay)` updates,
/// exponential moving average afterwards.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneralFeatureBank {
    pub values: ParamId,
    pub counts: ParamId,
    pub decay: f64,
}

impl GeneralFeatureBank {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, categories: usize, dim: usize, decay: f64) -> Self {
        let values = store.add_buffer(&format!("{name}.values"), Tensor::zeros(&[categories, dim]));
        let counts = store.add_buffer(&format!("{name}.counts"), Tensor::zeros(&[categories]));
        Self { values, counts, decay }
    }

    /// Folds one observed embedding of `category` into the bank.
    pub fn update<T: Scalar>(&self, store: &mut ParamStore<T>, category: usize, embedding: &[T]) {
        let k = store.value(self.counts).data[category].as_f64() + 1.0;
        store.value_mut(self.counts).data[category] = T::lit(k);
        let keep = (1.0 - 1.0 / k).min(self.decay);
        let dim = embedding.len();
        let row = &mut store.value_mut(self.values).data[category * dim..(category + 1) * dim];
        for (v, &e) in row.iter_mut().zip(embedding) {
            *v = T::lit(keep * v.as_f64() + (1.0 - keep) * e.as_f64());
        }
    }

    pub fn vector<'a, T: Scalar>(&self, store: &'a ParamStore<T>, category: usize) -> &'a [T] {
        let v = store.value(self.values);
        let d = v.last_dim();
        &v.data[category * d..(category + 1) * d]
    }
}

/// Initial-frame inputs of one clip.
#[derive(Clone, Debug)]
pub struct InitialFrame<'a> {
    pub pixels: &'a [f32],
    pub height: usize,
    pub width: usize,
    pub boxes: Vec<[f64; 4]>,
    pub present: Vec<bool>,
}

/// Structure encoder, feature bank and the alignment layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Conditioner {
    pub config: ConditioningConfig,
    pub categories: usize,
    pub encoder: StructureEncoder,
    pub bank: GeneralFeatureBank,
    pub align: Linear,
}

impl Conditioner {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, init: &mut Init, name: &str, config: ConditioningConfig, categories: usize) -> Self {
        let encoder = StructureEncoder::new(store, init, &format!("{name}.structure"), config.patch, config.encoder_channels, config.dim);
        let bank = GeneralFeatureBank::new(store, &format!("{name}.bank"), categories, config.dim, config.bank_decay);
        let align = Linear::new(store, init, &format!("{name}.align"), 2 * config.dim, config.cond_dim);
        Self { config, categories, encoder, bank, align }
    }

    /// Structure embeddings `[B·C, D]`, one row per (clip, category); absent
    /// categories take the bank vector. Also returns which rows were encoded.
    pub fn encode_structures<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        frames: &[InitialFrame],
    ) -> Result<(Var, Vec<bool>)> {
        let c = self.categories;
        let p = self.config.patch;
        let mut data = Vec::new();
        let mut slot = Vec::with_capacity(frames.len() * c);
        let mut present_rows = 0;
        for f in frames {
            if f.boxes.len() != c || f.present.len() != c {
                return Err(Error::Shape(format!("initial frame has {} boxes, expected {c}", f.boxes.len())));
            }
            for patch in crop_rois(f.pixels, f.height, f.width, &f.boxes, &f.present, p) {
                match patch {
                    Some(px) => {
                        data.extend(px.into_iter().map(|v| T::lit(v as f64)));
                        slot.push(Some(present_rows));
                        present_rows += 1;
                    }
                    None => slot.push(None),
                }
            }
        }
        let bank = g.input(store.value(self.bank.values).clone());
        let table = if present_rows > 0 {
            let patches = g.input(Tensor::new(&[present_rows, p, p, 1], data));
            let enc = self.encoder.forward(g, store, patches)?;
            g.concat_rows(&[enc, bank])
        } else {
            bank
        };
        let idx: Vec<usize> =
            slot.iter().enumerate().map(|(i, s)| s.unwrap_or(present_rows + i % c)).collect();
        let encoded = slot.iter().map(|s| s.is_some()).collect();
        Ok((g.gather_rows(table, &idx), encoded))
    }

    /// Eq.-1 style fusion: `act(W·[structure ‖ motion] + b)` per token.
    /// Both inputs are `[tokens, D]`; output `[tokens, D_cond]`.
    pub fn align<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, structure: Var, motion: Var) -> Result<Var> {
        let (s, m) = (g.shape(structure).to_vec(), g.shape(motion).to_vec());
        if s != m || s.len() != 2 || s[1] != self.config.dim {
            return Err(Error::Shape(format!("align inputs must both be [tokens, {}], got {s:?} and {m:?}", self.config.dim)));
        }
        let x = g.concat_last(&[structure, motion]);
        let y = self.align.forward(g, store, x);
        Ok(self.config.align_activation.apply(g, y))
    }

    /// Full conditioning: structure embeddings broadcast over `frames`, fused
    /// with the motion embedding `[B·N·C, D]` into tokens `[B·N·C, D_cond]`.
    pub fn tokens<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        initial: &[InitialFrame],
        frames: usize,
        motion: Var,
    ) -> Result<Var> {
        let c = self.categories;
        let rows = initial.len() * frames * c;
        if g.shape(motion).first() != Some(&rows) {
            return Err(Error::Shape(format!("motion embedding must have {rows} rows, got {:?}", g.shape(motion))));
        }
        let (per_clip, _) = self.encode_structures(g, store, initial)?;
        let idx: Vec<usize> = (0..rows).map(|r| (r / (frames * c)) * c + r % c).collect();
        let structure = g.gather_rows(per_clip, &idx);
        self.align(g, store, structure, motion)
    }

    /// Records the current structure embeddings of `initial` into the bank.
    pub fn update_bank(&self, store: &mut ParamStore<f32>, initial: &[InitialFrame]) -> Result<()> {
        let mut g = Graph::inference();
        let (emb, encoded) = self.encode_structures(&mut g, store, initial)?;
        let v = g.value(emb).clone();
        let d = self.config.dim;
        for (row, &e) in encoded.iter().enumerate() {
            if e {
                self.bank.update(store, row % self.categories, &v.data[row * d..(row + 1) * d]);
            }
        }
        Ok(())
    }
}
