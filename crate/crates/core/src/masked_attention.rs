//! Attention kernels: plain cross-attention, Gaussian corner masks and
//! Gaussian-weighted cross-attention.
//!
//! The masked kernel multiplies the scaled logits by the mask *inside* the
//! softmax argument, `softmax((QKᵀ/√d) ⊙ M) V`. With an all-ones mask the
//! multiplication is an exact identity, so the masked and plain kernels agree
//! bit for bit.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::Scalar;

/// Lower bound applied to rescaled masks. A zero entry would erase the sign of
/// a negative logit.
pub const MASK_FLOOR: f64 = 1e-3;

#[derive(Debug, Error, PartialEq)]
pub enum AttentionError {
    #[error("attention shape mismatch: {0}")]
    Shape(String),
}

/// How a mask enters the logits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// `logits ⊙ mask`.
    #[default]
    Multiplicative,
    /// `logits + ln(mask)`; kept for ablations only.
    Additive,
}

/// How the four corner Gaussians of a box are merged into one map.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CornerCombine {
    #[default]
    Max,
    Sum,
}

/// Borrowed query/key/value matrices, all row-major.
#[derive(Clone, Copy, Debug)]
pub struct AttentionInputs<'a, T> {
    /// `n_q × d`
    pub q: &'a [T],
    /// `n_k × d`
    pub k: &'a [T],
    /// `n_k × d_v`
    pub v: &'a [T],
    pub n_q: usize,
    pub n_k: usize,
    pub d: usize,
    pub d_v: usize,
}

impl<'a, T: Scalar> AttentionInputs<'a, T> {
    /// Square case where values share the head dimension.
    pub fn new(q: &'a [T], k: &'a [T], v: &'a [T], d: usize) -> Result<Self, AttentionError> {
        if d == 0 {
            return Err(AttentionError::Shape("head dimension must be positive".into()));
        }
        let n_q = q.len() / d;
        let n_k = k.len() / d;
        let inputs = Self { q, k, v, n_q, n_k, d, d_v: d };
        inputs.validate()?;
        Ok(inputs)
    }

    pub fn validate(&self) -> Result<(), AttentionError> {
        if self.d == 0 || self.n_k == 0 {
            return Err(AttentionError::Shape("need d > 0 and at least one key".into()));
        }
        if self.q.len() != self.n_q * self.d
            || self.k.len() != self.n_k * self.d
            || self.v.len() != self.n_k * self.d_v
        {
            return Err(AttentionError::Shape(format!(
                "q {} / k {} / v {} for n_q={} n_k={} d={} d_v={}",
                self.q.len(),
                self.k.len(),
                self.v.len(),
                self.n_q,
                self.n_k,
                self.d,
                self.d_v
            )));
        }
        Ok(())
    }
}

/// `softmax(QKᵀ/√d)·V`.
pub fn cross_attention<T: Scalar>(inputs: &AttentionInputs<'_, T>) -> Result<Vec<T>, AttentionError> {
    inputs.validate()?;
    Ok(run(inputs, None, MaskMode::Multiplicative).0)
}

/// `softmax((QKᵀ/√d) ⊙ M)·V` with `mask` laid out `n_q × n_k`.
pub fn masked_cross_attention<T: Scalar>(
    inputs: &AttentionInputs<'_, T>,
    mask: &[T],
) -> Result<Vec<T>, AttentionError> {
    masked_cross_attention_with(inputs, mask, MaskMode::Multiplicative)
}

pub fn masked_cross_attention_with<T: Scalar>(
    inputs: &AttentionInputs<'_, T>,
    mask: &[T],
    mode: MaskMode,
) -> Result<Vec<T>, AttentionError> {
    inputs.validate()?;
    check_mask(inputs, mask)?;
    Ok(run(inputs, Some(mask), mode).0)
}

/// Attention weights (`n_q × n_k`, rows sum to one).
pub fn attention_weights<T: Scalar>(
    inputs: &AttentionInputs<'_, T>,
    mask: Option<&[T]>,
    mode: MaskMode,
) -> Result<Vec<T>, AttentionError> {
    inputs.validate()?;
    if let Some(m) = mask {
        check_mask(inputs, m)?;
    }
    Ok(run(inputs, mask, mode).1)
}

fn check_mask<T>(inputs: &AttentionInputs<'_, T>, mask: &[T]) -> Result<(), AttentionError> {
    if mask.len() != inputs.n_q * inputs.n_k {
        return Err(AttentionError::Shape(format!(
            "mask has {} entries, expected {}x{}",
            mask.len(),
            inputs.n_q,
            inputs.n_k
        )));
    }
    Ok(())
}

fn run<T: Scalar>(inputs: &AttentionInputs<'_, T>, mask: Option<&[T]>, mode: MaskMode) -> (Vec<T>, Vec<T>) {
    let mut out = vec![T::zero(); inputs.n_q * inputs.d_v];
    let mut probs = vec![T::zero(); inputs.n_q * inputs.n_k];
    let mut scores = vec![T::zero(); inputs.n_q * inputs.n_k];
    attend(inputs, mask, mode, &mut scores, &mut probs, &mut out);
    (out, probs)
}

/// Forward kernel for one attention group.
///
/// Writes the scaled logits `QKᵀ/√d` (before masking) into `scores`, the
/// softmax weights into `probs` and the attended values into `out`.
pub(crate) fn attend<T: Scalar>(
    x: &AttentionInputs<'_, T>,
    mask: Option<&[T]>,
    mode: MaskMode,
    scores: &mut [T],
    probs: &mut [T],
    out: &mut [T],
) {
    let (n_q, n_k, d, d_v) = (x.n_q, x.n_k, x.d, x.d_v);
    let scale = T::one() / T::lit(d as f64).sqrt();
    for i in 0..n_q {
        let qi = &x.q[i * d..(i + 1) * d];
        let srow = &mut scores[i * n_k..(i + 1) * n_k];
        let prow = &mut probs[i * n_k..(i + 1) * n_k];
        for j in 0..n_k {
            let kj = &x.k[j * d..(j + 1) * d];
            let mut acc = T::zero();
            for t in 0..d {
                acc += qi[t] * kj[t];
            }
            srow[j] = acc * scale;
            prow[j] = match (mask, mode) {
                (None, _) => srow[j],
                (Some(m), MaskMode::Multiplicative) => srow[j] * m[i * n_k + j],
                (Some(m), MaskMode::Additive) => srow[j] + m[i * n_k + j].ln(),
            };
        }
        softmax_in_place(prow);
        let orow = &mut out[i * d_v..(i + 1) * d_v];
        orow.iter_mut().for_each(|o| *o = T::zero());
        for j in 0..n_k {
            let p = prow[j];
            let vj = &x.v[j * d_v..(j + 1) * d_v];
            for t in 0..d_v {
                orow[t] += p * vj[t];
            }
        }
    }
}

fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for z in row.iter_mut() {
        *z = (*z - max).exp();
        total += *z;
    }
    for z in row.iter_mut() {
        *z = *z / total;
    }
}

/// Gradient buffers for [`attend_backward`]; all are accumulated into.
pub(crate) struct AttentionGrads<'a, T> {
    pub dq: Option<&'a mut [T]>,
    pub dk: Option<&'a mut [T]>,
    pub dv: Option<&'a mut [T]>,
    pub dmask: Option<&'a mut [T]>,
}

/// Reverse pass for one attention group.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attend_backward<T: Scalar>(
    x: &AttentionInputs<'_, T>,
    mask: Option<&[T]>,
    mode: MaskMode,
    scores: &[T],
    probs: &[T],
    dout: &[T],
    grads: AttentionGrads<'_, T>,
) {
    let (n_q, n_k, d, d_v) = (x.n_q, x.n_k, x.d, x.d_v);
    let scale = T::one() / T::lit(d as f64).sqrt();
    let AttentionGrads { mut dq, mut dk, mut dv, mut dmask } = grads;
    let mut dp = vec![T::zero(); n_k];
    let mut dz = vec![T::zero(); n_k];
    for i in 0..n_q {
        let prow = &probs[i * n_k..(i + 1) * n_k];
        let go = &dout[i * d_v..(i + 1) * d_v];
        // out = P·V
        for j in 0..n_k {
            let vj = &x.v[j * d_v..(j + 1) * d_v];
            let mut acc = T::zero();
            for t in 0..d_v {
                acc += go[t] * vj[t];
            }
            dp[j] = acc;
            if let Some(dv) = dv.as_deref_mut() {
                let dvj = &mut dv[j * d_v..(j + 1) * d_v];
                for t in 0..d_v {
                    dvj[t] += prow[j] * go[t];
                }
            }
        }
        // softmax
        let dot: T = (0..n_k).map(|j| dp[j] * prow[j]).sum();
        for j in 0..n_k {
            dz[j] = prow[j] * (dp[j] - dot);
        }
        // masking
        for j in 0..n_k {
            let s = scores[i * n_k + j];
            let ds = match (mask, mode) {
                (None, _) => dz[j],
                (Some(m), MaskMode::Multiplicative) => {
                    let mv = m[i * n_k + j];
                    if let Some(dm) = dmask.as_deref_mut() {
                        dm[i * n_k + j] += dz[j] * s;
                    }
                    dz[j] * mv
                }
                (Some(m), MaskMode::Additive) => {
                    if let Some(dm) = dmask.as_deref_mut() {
                        dm[i * n_k + j] += dz[j] / m[i * n_k + j];
                    }
                    dz[j]
                }
            };
            let g = ds * scale;
            if let Some(dq) = dq.as_deref_mut() {
                let kj = &x.k[j * d..(j + 1) * d];
                let dqi = &mut dq[i * d..(i + 1) * d];
                for t in 0..d {
                    dqi[t] += g * kj[t];
                }
            }
            if let Some(dk) = dk.as_deref_mut() {
                let qi = &x.q[i * d..(i + 1) * d];
                let dkj = &mut dk[j * d..(j + 1) * d];
                for t in 0..d {
                    dkj[t] += g * qi[t];
                }
            }
        }
    }
}

/// Tiled variant with an online (streaming) softmax over key blocks.
///
/// Numerically equivalent to [`masked_cross_attention_with`] up to rounding.
pub fn cross_attention_blocked<T: Scalar>(
    inputs: &AttentionInputs<'_, T>,
    mask: Option<&[T]>,
    mode: MaskMode,
    block_q: usize,
    block_k: usize,
) -> Result<Vec<T>, AttentionError> {
    inputs.validate()?;
    if let Some(m) = mask {
        check_mask(inputs, m)?;
    }
    let (n_q, n_k, d, d_v) = (inputs.n_q, inputs.n_k, inputs.d, inputs.d_v);
    let block_q = block_q.max(1);
    let block_k = block_k.max(1);
    let scale = T::one() / T::lit(d as f64).sqrt();
    let mut out = vec![T::zero(); n_q * d_v];
    let mut row_max = vec![T::neg_infinity(); n_q];
    let mut row_sum = vec![T::zero(); n_q];
    for q0 in (0..n_q).step_by(block_q) {
        let q1 = (q0 + block_q).min(n_q);
        for k0 in (0..n_k).step_by(block_k) {
            let k1 = (k0 + block_k).min(n_k);
            for i in q0..q1 {
                let qi = &inputs.q[i * d..(i + 1) * d];
                let mut logits = Vec::with_capacity(k1 - k0);
                for j in k0..k1 {
                    let kj = &inputs.k[j * d..(j + 1) * d];
                    let s = qi.iter().zip(kj).map(|(&a, &b)| a * b).sum::<T>() * scale;
                    let z = match (mask, mode) {
                        (None, _) => s,
                        (Some(m), MaskMode::Multiplicative) => s * m[i * n_k + j],
                        (Some(m), MaskMode::Additive) => s + m[i * n_k + j].ln(),
                    };
                    logits.push(z);
                }
                let block_max = logits.iter().copied().fold(T::neg_infinity(), T::max);
                let new_max = row_max[i].max(block_max);
                let correction = (row_max[i] - new_max).exp();
                let orow = &mut out[i * d_v..(i + 1) * d_v];
                orow.iter_mut().for_each(|o| *o *= correction);
                row_sum[i] *= correction;
                for (jj, &z) in logits.iter().enumerate() {
                    let w = (z - new_max).exp();
                    row_sum[i] += w;
                    let vj = &inputs.v[(k0 + jj) * d_v..(k0 + jj + 1) * d_v];
                    for t in 0..d_v {
                        orow[t] += w * vj[t];
                    }
                }
                row_max[i] = new_max;
            }
        }
    }
    for i in 0..n_q {
        let inv = T::one() / row_sum[i];
        out[i * d_v..(i + 1) * d_v].iter_mut().for_each(|o| *o *= inv);
    }
    Ok(out)
}

/// Isotropic 2-D Gaussian density centred at `(mu_x, mu_y)`.
pub fn gaussian_density(x: f64, y: f64, mu_x: f64, mu_y: f64, sigma: f64) -> f64 {
    let s2 = sigma * sigma;
    let r2 = (x - mu_x).powi(2) + (y - mu_y).powi(2);
    (-r2 / (2.0 * s2)).exp() / (2.0 * std::f64::consts::PI * s2)
}

/// Options for [`build_gaussian_masks`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskOptions {
    /// Standard deviation in full-resolution pixels.
    pub sigma: f64,
    pub combine: CornerCombine,
}

impl Default for MaskOptions {
    fn default() -> Self {
        Self { sigma: 10.0, combine: CornerCombine::Max }
    }
}

/// Per-structure spatial weight maps, `C × h × w`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMaskStack {
    pub masks: Vec<f64>,
    pub categories: usize,
    pub h: usize,
    pub w: usize,
    pub sigma: f64,
    /// Corner centres (TL, TR, BL, BR) in full-resolution pixels.
    pub centers: Vec<[(f64, f64); 4]>,
}

impl GaussianMaskStack {
    pub fn mask(&self, c: usize) -> &[f64] {
        &self.masks[c * self.h * self.w..(c + 1) * self.h * self.w]
    }

    /// Area-average downsampling by an integer factor, then rescale + floor.
    pub fn downsample(&self, factor: usize) -> GaussianMaskStack {
        assert!(factor >= 1 && self.h % factor == 0 && self.w % factor == 0, "mask downsample factor");
        let (h, w) = (self.h / factor, self.w / factor);
        let mut masks = Vec::with_capacity(self.categories * h * w);
        for c in 0..self.categories {
            let src = self.mask(c);
            let mut dst = area_downsample(src, self.h, self.w, factor);
            normalize_mask(&mut dst);
            masks.extend(dst);
        }
        GaussianMaskStack { masks, categories: self.categories, h, w, sigma: self.sigma, centers: self.centers.clone() }
    }

    /// Attention layout: `(h·w) × C`, entry `(p, c)` is structure `c` at position `p`.
    pub fn attention_layout<T: Scalar>(&self) -> Vec<T> {
        let hw = self.h * self.w;
        let mut out = vec![T::zero(); hw * self.categories];
        for c in 0..self.categories {
            let m = self.mask(c);
            for p in 0..hw {
                out[p * self.categories + c] = T::lit(m[p]);
            }
        }
        out
    }
}

/// Unnormalised corner map for one box at full resolution (pixel centres).
pub fn raw_corner_map(
    bbox: [f64; 4],
    sigma: f64,
    height: usize,
    width: usize,
    combine: CornerCombine,
) -> Vec<f64> {
    let corners = box_corners(bbox);
    let mut map = vec![0.0; height * width];
    for y in 0..height {
        for x in 0..width {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let vals = corners.iter().map(|&(cx, cy)| gaussian_density(px, py, cx, cy, sigma));
            map[y * width + x] = match combine {
                CornerCombine::Max => vals.fold(0.0, f64::max),
                CornerCombine::Sum => vals.sum(),
            };
        }
    }
    map
}

fn box_corners(b: [f64; 4]) -> [(f64, f64); 4] {
    [(b[0], b[1]), (b[2], b[1]), (b[0], b[3]), (b[2], b[3])]
}

fn area_downsample(src: &[f64], h: usize, w: usize, f: usize) -> Vec<f64> {
    let (oh, ow) = (h / f, w / f);
    let norm = (f * f) as f64;
    let mut dst = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for dy in 0..f {
                for dx in 0..f {
                    acc += src[(y * f + dy) * w + x * f + dx];
                }
            }
            dst[y * ow + x] = acc / norm;
        }
    }
    dst
}

fn normalize_mask(m: &mut [f64]) {
    let max = m.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        m.iter_mut().for_each(|v| *v = (*v / max).max(MASK_FLOOR));
    } else {
        m.iter_mut().for_each(|v| *v = 1.0);
    }
}

/// Rasterise one Gaussian mask per structure and resize it to the latent grid.
///
/// `boxes` are `(x_min, y_min, x_max, y_max)` in pixels of a `height × width`
/// frame; `h × w` is the target grid (`height` must be a multiple of `h`).
/// Absent structures receive a uniform all-ones map.
pub fn build_gaussian_masks(
    boxes: &[[f64; 4]],
    present: &[bool],
    opts: MaskOptions,
    h: usize,
    w: usize,
    height: usize,
    width: usize,
) -> GaussianMaskStack {
    assert!(opts.sigma > 0.0, "sigma must be positive");
    assert_eq!(boxes.len(), present.len(), "boxes/present length");
    assert!(height % h == 0 && width % w == 0 && height / h == width / w, "latent grid must evenly divide the frame");
    let factor = height / h;
    let mut masks = Vec::with_capacity(boxes.len() * h * w);
    let mut centers = Vec::with_capacity(boxes.len());
    for (b, &p) in boxes.iter().zip(present) {
        centers.push(box_corners(*b));
        if !p {
            masks.extend(std::iter::repeat(1.0).take(h * w));
            continue;
        }
        let mut full = raw_corner_map(*b, opts.sigma, height, width, opts.combine);
        normalize_mask(&mut full);
        let mut small = if factor == 1 { full } else { area_downsample(&full, height, width, factor) };
        normalize_mask(&mut small);
        masks.extend(small);
    }
    GaussianMaskStack { masks, categories: boxes.len(), h, w, sigma: opts.sigma, centers }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inputs<'a>(q: &'a [f64], k: &'a [f64], v: &'a [f64], d: usize) -> AttentionInputs<'a, f64> {
        AttentionInputs::new(q, k, v, d).unwrap()
    }

    #[test]
    fn single_key_returns_value_row() {
        let q = [3.0, -1.0, 0.5, 2.0];
        let k = [0.2, 0.9];
        let v = [7.0, -4.0];
        let x = inputs(&q, &k, &v, 2);
        assert_eq!(cross_attention(&x).unwrap(), vec![7.0, -4.0, 7.0, -4.0]);
        assert_eq!(masked_cross_attention(&x, &[0.3, 0.001]).unwrap(), vec![7.0, -4.0, 7.0, -4.0]);
    }

    #[test]
    fn hand_computed_two_key_case() {
        // logits [1/√2, 0] -> softmax -> [0.66976, 0.33024]
        let x = inputs(&[1.0, 0.0], &[1.0, 0.0, 0.0, 1.0], &[1.0, 0.0, 0.0, 1.0], 2);
        let out = cross_attention(&x).unwrap();
        assert!((out[0] - 0.669_760_9).abs() < 1e-6, "{out:?}");
        assert!((out[1] - 0.330_239_1).abs() < 1e-6, "{out:?}");
    }

    #[test]
    fn masked_logit_is_shrunk_not_removed() {
        // logits [1/√2, 1/√2]; second masked to 1e-3
        let x = inputs(&[1.0, 1.0], &[1.0, 0.0, 0.0, 1.0], &[1.0, 0.0, 0.0, 1.0], 2);
        let w = attention_weights(&x, Some(&[1.0, 1e-3]), MaskMode::Multiplicative).unwrap();
        let z0 = std::f64::consts::FRAC_1_SQRT_2;
        let z1 = z0 * 1e-3;
        let p0 = z0.exp() / (z0.exp() + z1.exp());
        assert!((w[0] - p0).abs() < 1e-12);
        assert!((w[0] - 0.6697).abs() < 1e-4, "{w:?}");
        let out = masked_cross_attention(&x, &[1.0, 1e-3]).unwrap();
        assert!((out[0] - p0).abs() < 1e-12 && (out[1] - (1.0 - p0)).abs() < 1e-12);
    }

    #[test]
    fn identical_keys_give_common_value() {
        let x = inputs(&[0.3, -2.0], &[1.0, 1.0, 1.0, 1.0], &[0.25, 0.5, 0.25, 0.5], 2);
        assert_eq!(cross_attention(&x).unwrap(), vec![0.25, 0.5]);
    }

    #[test]
    fn mask_shape_checked() {
        let x = inputs(&[1.0, 0.0], &[1.0, 0.0, 0.0, 1.0], &[1.0, 0.0, 0.0, 1.0], 2);
        assert!(matches!(masked_cross_attention(&x, &[1.0]), Err(AttentionError::Shape(_))));
    }

    #[test]
    fn raw_density_at_corner_and_at_sigma() {
        let peak = gaussian_density(5.0, 5.0, 5.0, 5.0, 10.0);
        assert!((peak - 1.0 / (2.0 * std::f64::consts::PI * 100.0)).abs() < 1e-15);
        let at_sigma = gaussian_density(15.0, 5.0, 5.0, 5.0, 10.0);
        assert!((at_sigma - peak * (-0.5f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn masks_are_rescaled_and_positive() {
        let m = build_gaussian_masks(
            &[[10.0, 10.0, 30.0, 20.0], [0.0, 0.0, 64.0, 64.0]],
            &[true, false],
            MaskOptions::default(),
            16,
            16,
            64,
            64,
        );
        for c in 0..2 {
            let mask = m.mask(c);
            let max = mask.iter().copied().fold(0.0, f64::max);
            assert!((max - 1.0).abs() < 1e-12);
            assert!(mask.iter().all(|&v| v >= MASK_FLOOR && v <= 1.0));
        }
        assert!(m.mask(1).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn identical_boxes_identical_masks() {
        let b = [12.0, 20.0, 40.0, 44.0];
        let m = build_gaussian_masks(&[b, b], &[true, true], MaskOptions::default(), 16, 16, 64, 64);
        assert_eq!(m.mask(0), m.mask(1));
    }

    #[test]
    fn blocked_matches_naive() {
        let q: Vec<f64> = (0..5 * 3).map(|i| ((i * 7 % 11) as f64 - 5.0) / 4.0).collect();
        let k: Vec<f64> = (0..4 * 3).map(|i| ((i * 5 % 13) as f64 - 6.0) / 5.0).collect();
        let v: Vec<f64> = (0..4 * 3).map(|i| (i as f64).sin()).collect();
        let mask: Vec<f64> = (0..5 * 4).map(|i| 0.1 + (i % 7) as f64 / 7.0).collect();
        let x = inputs(&q, &k, &v, 3);
        let naive = masked_cross_attention(&x, &mask).unwrap();
        let blocked = cross_attention_blocked(&x, Some(&mask), MaskMode::Multiplicative, 2, 3).unwrap();
        for (a, b) in naive.iter().zip(&blocked) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
