//! Spatio-temporal UNet blocks. Activations are NHWC with one batch row per
//! frame, ordered `(clip, frame)`.

use crate::autograd::{BiasLayout, Graph, Init, ParamStore, Scalar, Var};
use crate::masked_attention::MaskMode;
use crate::nn::{Conv2d, GroupNorm, Linear};

/// GroupNorm → SiLU → conv → +time → GroupNorm → SiLU → conv, plus skip.
#[derive(Clone, Debug, PartialEq)]
pub struct ResBlock {
    pub norm1: GroupNorm,
    pub conv1: Conv2d,
    pub time: Linear,
    pub norm2: GroupNorm,
    pub conv2: Conv2d,
    pub skip: Option<Conv2d>,
}

impl ResBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        cin: usize,
        cout: usize,
        temb: usize,
        groups: usize,
    ) -> Self {
        Self {
            norm1: GroupNorm::new(store, &format!("{name}.norm1"), cin, groups),
            conv1: Conv2d::new(store, init, &format!("{name}.conv1"), cin, cout, 3, 1),
            time: Linear::new(store, init, &format!("{name}.time"), temb, cout),
            norm2: GroupNorm::new(store, &format!("{name}.norm2"), cout, groups),
            conv2: Conv2d::new(store, init, &format!("{name}.conv2"), cout, cout, 3, 1),
            skip: (cin != cout).then(|| Conv2d::new(store, init, &format!("{name}.skip"), cin, cout, 1, 1)),
        }
    }

    /// `x: [F, h, w, cin]`, `temb: [F, temb]` (already activated).
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, temb: Var) -> Var {
        let shape = g.shape(x).to_vec();
        let (frames, hw) = (shape[0], shape[1] * shape[2]);
        let h = self.norm1.forward(g, store, x, frames);
        let h = g.silu(h);
        let h = self.conv1.forward(g, store, h);
        let t = self.time.forward(g, store, temb);
        let h = g.add_bias(h, t, BiasLayout::Grouped(hw));
        let h = self.norm2.forward(g, store, h, frames);
        let h = g.silu(h);
        let h = self.conv2.forward(g, store, h);
        let skip = match &self.skip {
            Some(conv) => conv.forward(g, store, x),
            None => x,
        };
        g.add(h, skip)
    }
}

/// Per-frame cross-attention from spatial positions to that frame's
/// structure tokens, optionally reweighted by Gaussian position masks.
#[derive(Clone, Debug, PartialEq)]
pub struct CondAttention {
    pub norm: GroupNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
}

impl CondAttention {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, init: &mut Init, name: &str, channels: usize, cond_dim: usize, groups: usize) -> Self {
        Self {
            norm: GroupNorm::new(store, &format!("{name}.norm"), channels, groups),
            q: Linear::new(store, init, &format!("{name}.q"), channels, channels),
            k: Linear::new(store, init, &format!("{name}.k"), cond_dim, channels),
            v: Linear::new(store, init, &format!("{name}.v"), cond_dim, channels),
            out: Linear::zeroed(store, &format!("{name}.out"), channels, channels),
        }
    }

    /// `x: [F, h, w, ch]`, `tokens: [F·C, D_cond]`, `mask: [F, h·w, C]`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        tokens: Var,
        mask: Option<Var>,
        mode: MaskMode,
    ) -> Var {
        let shape = g.shape(x).to_vec();
        let (frames, hw, ch) = (shape[0], shape[1] * shape[2], shape[3]);
        let c = g.shape(tokens)[0] / frames;
        let n = self.norm.forward(g, store, x, frames);
        let n = g.reshape(n, &[frames, hw, ch]);
        let q = self.q.forward(g, store, n);
        let k = self.k.forward(g, store, tokens);
        let k = g.reshape(k, &[frames, c, ch]);
        let v = self.v.forward(g, store, tokens);
        let v = g.reshape(v, &[frames, c, ch]);
        let a = g.attention(q, k, v, mask, mode, frames);
        let o = self.out.forward(g, store, a);
        let o = g.reshape(o, &shape);
        g.add(x, o)
    }
}

/// Self-attention across the frames of each clip at every spatial position.
#[derive(Clone, Debug, PartialEq)]
pub struct TemporalAttention {
    pub norm: GroupNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
}

impl TemporalAttention {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, init: &mut Init, name: &str, channels: usize, groups: usize) -> Self {
        Self {
            norm: GroupNorm::new(store, &format!("{name}.norm"), channels, groups),
            q: Linear::new(store, init, &format!("{name}.q"), channels, channels),
            k: Linear::new(store, init, &format!("{name}.k"), channels, channels),
            v: Linear::new(store, init, &format!("{name}.v"), channels, channels),
            out: Linear::zeroed(store, &format!("{name}.out"), channels, channels),
        }
    }

    /// `x: [B·N, h, w, ch]`; `positions: [N, ch]` frame-position embedding.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, clips: usize, positions: Var) -> Var {
        let shape = g.shape(x).to_vec();
        let (rows, hw, ch) = (shape[0], shape[1] * shape[2], shape[3]);
        let frames = rows / clips;
        let n = self.norm.forward(g, store, x, rows);
        let n = g.swap_axes12(n, [clips, frames, hw, ch]);
        let n = g.add_bias(n, positions, BiasLayout::Tiled);
        let n = g.reshape(n, &[clips * hw, frames, ch]);
        let q = self.q.forward(g, store, n);
        let k = self.k.forward(g, store, n);
        let v = self.v.forward(g, store, n);
        let a = g.attention(q, k, v, None, MaskMode::Multiplicative, clips * hw);
        let o = self.out.forward(g, store, a);
        let o = g.swap_axes12(o, [clips, hw, frames, ch]);
        let o = g.reshape(o, &shape);
        g.add(x, o)
    }
}

/// Residual block, conditioning cross-attention, temporal attention.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatioTemporalBlock {
    pub res: ResBlock,
    pub cond: CondAttention,
    pub temporal: TemporalAttention,
}

/// Per-call inputs shared by every block at one resolution.
#[derive(Clone, Copy, Debug)]
pub struct BlockContext {
    pub clips: usize,
    pub temb: Var,
    pub tokens: Var,
    pub mask: Option<Var>,
    pub mode: MaskMode,
    pub positions: Var,
}

impl SpatioTemporalBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        cin: usize,
        cout: usize,
        temb: usize,
        cond_dim: usize,
        groups: usize,
    ) -> Self {
        Self {
            res: ResBlock::new(store, init, &format!("{name}.res"), cin, cout, temb, groups),
            cond: CondAttention::new(store, init, &format!("{name}.cond"), cout, cond_dim, groups),
            temporal: TemporalAttention::new(store, init, &format!("{name}.temporal"), cout, groups),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, ctx: &BlockContext) -> Var {
        let h = self.res.forward(g, store, x, ctx.temb);
        let h = self.cond.forward(g, store, h, ctx.tokens, ctx.mask, ctx.mode);
        self.temporal.forward(g, store, h, ctx.clips, ctx.positions)
    }
}
