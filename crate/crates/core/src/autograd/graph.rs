//! Define-by-run reverse-mode tape.
//!
//! Every forward call appends a node holding its value and the op that
//! produced it. [`Graph::backward`] walks the tape in reverse and returns
//! per-node gradients. Graphs built with [`Graph::inference`] keep no
//! backward state.

use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use super::tensor::{gemm, Scalar, Tensor};
use crate::masked_attention::{attend, attend_backward, AttentionGrads, AttentionInputs, MaskMode};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// How a bias tensor is broadcast over the rows of its input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BiasLayout {
    /// Row `r` uses bias row `r % bias_rows`.
    Tiled,
    /// Row `r` uses bias row `r / rows_per_group`.
    Grouped(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

enum Op<T> {
    Input,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddBias { x: Var, bias: Var, layout: BiasLayout },
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Silu(Var),
    Exp(Var),
    Conv2d { x: Var, w: Var, geom: ConvGeom, cols: Vec<T> },
    Upsample2x { x: Var, dims: [usize; 4] },
    ConcatLast { parts: Vec<(Var, usize)>, rows: usize },
    ConcatRows { parts: Vec<Var> },
    GatherRows { x: Var, idx: Vec<usize>, width: usize },
    GroupNorm(Box<GroupNormState<T>>),
    SwapAxes12 { x: Var, dims: [usize; 4] },
    Reshape(Var),
    Attention(Box<AttentionState<T>>),
    Mse { a: Var, b: Var },
    Sum(Var),
    Mean(Var),
}

struct GroupNormState<T> {
    x: Var,
    gamma: Var,
    beta: Var,
    batch: usize,
    spatial: usize,
    channels: usize,
    groups: usize,
    xhat: Vec<T>,
    rstd: Vec<T>,
}

struct AttentionState<T> {
    q: Var,
    k: Var,
    v: Var,
    mask: Option<Var>,
    mode: MaskMode,
    groups: usize,
    n_q: usize,
    n_k: usize,
    d: usize,
    d_v: usize,
    scores: Vec<T>,
    probs: Vec<T>,
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    record: bool,
    param_nodes: HashMap<ParamId, Var>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    /// A recording graph (supports [`Graph::backward`]).
    pub fn new() -> Self {
        Self { nodes: Vec::new(), record: true, param_nodes: HashMap::new() }
    }

    /// A forward-only graph; no intermediate state is retained.
    pub fn inference() -> Self {
        Self { nodes: Vec::new(), record: false, param_nodes: HashMap::new() }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let (op, requires_grad) = if self.record { (op, requires_grad) } else { (Op::Input, false) };
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    /// Constant input (no gradient).
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Input, false)
    }

    /// Input that gradients are tracked for (used by gradient checks).
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Input, true)
    }

    /// Places a stored parameter on the tape (once per graph).
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param(id), store.trainable(id));
        self.param_nodes.insert(id, v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape, vb.shape, "add: shape mismatch");
        let data = va.data.iter().zip(&vb.data).map(|(&x, &y)| x + y).collect();
        let t = Tensor::new(&va.shape.clone(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape, vb.shape, "sub: shape mismatch");
        let data = va.data.iter().zip(&vb.data).map(|(&x, &y)| x - y).collect();
        let t = Tensor::new(&va.shape.clone(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape, vb.shape, "mul: shape mismatch");
        let data = va.data.iter().zip(&vb.data).map(|(&x, &y)| x * y).collect();
        let t = Tensor::new(&va.shape.clone(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let va = self.value(a);
        let t = Tensor::new(&va.shape.clone(), va.data.iter().map(|&x| x * c).collect());
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, c), rg)
    }

    /// Adds `bias` (`[R0, C]` or `[C]`) to the rows of `x` (`[.., C]`).
    pub fn add_bias(&mut self, x: Var, bias: Var, layout: BiasLayout) -> Var {
        let vx = self.value(x);
        let vb = self.value(bias);
        let c = vx.last_dim();
        assert_eq!(vb.last_dim(), c, "add_bias: channel mismatch");
        let rows = vx.len() / c;
        let brows = vb.len() / c;
        let mut data = vx.data.clone();
        for r in 0..rows {
            let br = bias_row(r, brows, layout);
            let dst = &mut data[r * c..(r + 1) * c];
            let src = &vb.data[br * c..(br + 1) * c];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
        let t = Tensor::new(&vx.shape.clone(), data);
        let rg = self.rg(x) || self.rg(bias);
        self.push(t, Op::AddBias { x, bias, layout }, rg)
    }

    /// `x [.., k] · w [k, n] -> [.., n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        assert_eq!(vb.shape.len(), 2, "matmul: rhs must be 2-D");
        let k = va.last_dim();
        assert_eq!(vb.shape[0], k, "matmul: inner dimension {:?} x {:?}", va.shape, vb.shape);
        let n = vb.shape[1];
        let m = va.len() / k.max(1);
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, &va.data, false, &vb.data, false, &mut out, false);
        let mut shape = va.shape.clone();
        *shape.last_mut().unwrap() = n;
        let t = Tensor::new(&shape, out);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::MatMul { a, b, m, k, n }, rg)
    }

    /// `x·w + b` over the last axis.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let y = self.matmul(x, w);
        match b {
            Some(b) => self.add_bias(y, b, BiasLayout::Tiled),
            None => y,
        }
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let data = va.data.iter().map(|&x| x / (T::one() + (-x).exp())).collect();
        let t = Tensor::new(&va.shape.clone(), data);
        let rg = self.rg(a);
        self.push(t, Op::Silu(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let t = Tensor::new(&va.shape.clone(), va.data.iter().map(|x| x.exp()).collect());
        let rg = self.rg(a);
        self.push(t, Op::Exp(a), rg)
    }

    /// 2-D convolution, NHWC input and `[k, k, cin, cout]` weights.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let vx = self.value(x);
        let vw = self.value(w);
        assert_eq!(vx.shape.len(), 4, "conv2d: input must be NHWC");
        assert_eq!(vw.shape.len(), 4, "conv2d: weight must be [k,k,cin,cout]");
        let (batch, h, wd, cin) = (vx.shape[0], vx.shape[1], vx.shape[2], vx.shape[3]);
        let kernel = vw.shape[0];
        assert_eq!(vw.shape[1], kernel, "conv2d: square kernels only");
        assert_eq!(vw.shape[2], cin, "conv2d: cin mismatch {:?} vs {:?}", vx.shape, vw.shape);
        let cout = vw.shape[3];
        assert!(h + 2 * pad >= kernel && wd + 2 * pad >= kernel, "conv2d: kernel larger than input");
        let ho = (h + 2 * pad - kernel) / stride + 1;
        let wo = (wd + 2 * pad - kernel) / stride + 1;
        let geom = ConvGeom { batch, h, w: wd, cin, cout, kernel, stride, pad, ho, wo };
        let rows = batch * ho * wo;
        let kk = kernel * kernel * cin;
        let mut out = vec![T::zero(); rows * cout];
        let cols = if geom.pointwise() {
            gemm(rows, kk, cout, &vx.data, false, &vw.data, false, &mut out, false);
            Vec::new()
        } else {
            let cols = im2col(&vx.data, &geom);
            gemm(rows, kk, cout, &cols, false, &vw.data, false, &mut out, false);
            cols
        };
        let t = Tensor::new(&[batch, ho, wo, cout], out);
        let rg = self.rg(x) || self.rg(w);
        let cols = if self.record { cols } else { Vec::new() };
        self.push(t, Op::Conv2d { x, w, geom, cols }, rg)
    }

    /// Nearest-neighbour ×2 upsampling of an NHWC tensor.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let [b, h, w, c]: [usize; 4] = vx.shape.as_slice().try_into().expect("upsample2x: NHWC");
        let mut out = vec![T::zero(); b * 4 * h * w * c];
        for bi in 0..b {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    let src = ((bi * h + y / 2) * w + xx / 2) * c;
                    let dst = ((bi * 2 * h + y) * 2 * w + xx) * c;
                    out[dst..dst + c].copy_from_slice(&vx.data[src..src + c]);
                }
            }
        }
        let t = Tensor::new(&[b, 2 * h, 2 * w, c], out);
        let rg = self.rg(x);
        self.push(t, Op::Upsample2x { x, dims: [b, h, w, c] }, rg)
    }

    /// Concatenation along the last axis; leading shapes must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_last: no inputs");
        let lead: Vec<usize> = {
            let s = self.shape(parts[0]);
            s[..s.len() - 1].to_vec()
        };
        let rows: usize = lead.iter().product();
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let s = self.shape(p);
                assert_eq!(&s[..s.len() - 1], lead.as_slice(), "concat_last: leading shape mismatch");
                s[s.len() - 1]
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = vec![T::zero(); rows * total];
        let mut off = 0;
        for (&p, &wdt) in parts.iter().zip(&widths) {
            let src = &self.value(p).data;
            for r in 0..rows {
                out[r * total + off..r * total + off + wdt].copy_from_slice(&src[r * wdt..(r + 1) * wdt]);
            }
            off += wdt;
        }
        let mut shape = lead;
        shape.push(total);
        let t = Tensor::new(&shape, out);
        let rg = parts.iter().any(|&p| self.rg(p));
        let parts = parts.iter().copied().zip(widths).collect();
        self.push(t, Op::ConcatLast { parts, rows }, rg)
    }

    /// Concatenation along the first axis; trailing shapes must agree.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows: no inputs");
        let tail: Vec<usize> = self.shape(parts[0])[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            assert_eq!(&v.shape[1..], tail.as_slice(), "concat_rows: trailing shape mismatch");
            rows += v.shape[0];
            data.extend_from_slice(&v.data);
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let t = Tensor::new(&shape, data);
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(t, Op::ConcatRows { parts: parts.to_vec() }, rg)
    }

    /// Selects rows of a `[R, W]` tensor: output row `i` is input row `idx[i]`.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let vx = self.value(x);
        let width = vx.last_dim();
        let nrows = vx.len() / width;
        let mut out = Vec::with_capacity(idx.len() * width);
        for &i in idx {
            assert!(i < nrows, "gather_rows: index {i} out of {nrows}");
            out.extend_from_slice(&vx.data[i * width..(i + 1) * width]);
        }
        let t = Tensor::new(&[idx.len(), width], out);
        let rg = self.rg(x);
        self.push(t, Op::GatherRows { x, idx: idx.to_vec(), width }, rg)
    }

    /// Group normalisation of `x` viewed as `[batch, spatial, channels]`.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, batch: usize, groups: usize) -> Var {
        let eps = T::lit(1e-5);
        let vx = self.value(x);
        let channels = vx.last_dim();
        assert!(channels % groups == 0, "group_norm: {channels} channels not divisible by {groups}");
        assert_eq!(vx.len() % (batch * channels), 0, "group_norm: batch does not divide input");
        let spatial = vx.len() / (batch * channels);
        let cg = channels / groups;
        let count = T::lit((spatial * cg) as f64);
        let mut xhat = vec![T::zero(); vx.len()];
        let mut rstd = vec![T::zero(); batch * groups];
        for b in 0..batch {
            for g in 0..groups {
                let mut mean = T::zero();
                for s in 0..spatial {
                    let base = (b * spatial + s) * channels + g * cg;
                    for &v in &vx.data[base..base + cg] {
                        mean += v;
                    }
                }
                mean = mean / count;
                let mut var = T::zero();
                for s in 0..spatial {
                    let base = (b * spatial + s) * channels + g * cg;
                    for &v in &vx.data[base..base + cg] {
                        var += (v - mean) * (v - mean);
                    }
                }
                var = var / count;
                let r = T::one() / (var + eps).sqrt();
                rstd[b * groups + g] = r;
                for s in 0..spatial {
                    let base = (b * spatial + s) * channels + g * cg;
                    for i in base..base + cg {
                        xhat[i] = (vx.data[i] - mean) * r;
                    }
                }
            }
        }
        let (vg, vb) = (&self.value(gamma).data, &self.value(beta).data);
        assert_eq!(vg.len(), channels, "group_norm: gamma size");
        let mut out = xhat.clone();
        for (i, o) in out.iter_mut().enumerate() {
            let c = i % channels;
            *o = *o * vg[c] + vb[c];
        }
        let t = Tensor::new(&vx.shape.clone(), out);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let state = GroupNormState { x, gamma, beta, batch, spatial, channels, groups, xhat, rstd };
        self.push(t, Op::GroupNorm(Box::new(state)), rg)
    }

    /// `[p, a, b, c] -> [p, b, a, c]`
    pub fn swap_axes12(&mut self, x: Var, dims: [usize; 4]) -> Var {
        let vx = self.value(x);
        assert_eq!(vx.len(), dims.iter().product::<usize>(), "swap_axes12: size");
        let [p, a, b, c] = dims;
        let mut out = vec![T::zero(); vx.len()];
        for pi in 0..p {
            for ai in 0..a {
                for bi in 0..b {
                    let src = ((pi * a + ai) * b + bi) * c;
                    let dst = ((pi * b + bi) * a + ai) * c;
                    out[dst..dst + c].copy_from_slice(&vx.data[src..src + c]);
                }
            }
        }
        let t = Tensor::new(&[p, b, a, c], out);
        let rg = self.rg(x);
        self.push(t, Op::SwapAxes12 { x, dims }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let t = self.value(x).clone().reshape(shape);
        let rg = self.rg(x);
        self.push(t, Op::Reshape(x), rg)
    }

    /// Batched attention over `groups` independent problems.
    ///
    /// `q: [groups, n_q, d]`, `k: [groups, n_k, d]`, `v: [groups, n_k, d_v]`,
    /// optional `mask: [groups, n_q, n_k]`. Output `[groups, n_q, d_v]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, mask: Option<Var>, mode: MaskMode, groups: usize) -> Var {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let d = vq.last_dim();
        assert_eq!(vk.last_dim(), d, "attention: q/k head dim");
        let d_v = vv.last_dim();
        let n_q = vq.len() / (groups * d);
        let n_k = vk.len() / (groups * d);
        assert_eq!(vq.len(), groups * n_q * d, "attention: q size");
        assert_eq!(vk.len(), groups * n_k * d, "attention: k size");
        assert_eq!(vv.len(), groups * n_k * d_v, "attention: v size");
        let vm = mask.map(|m| &self.value(m).data);
        if let Some(m) = vm {
            assert_eq!(m.len(), groups * n_q * n_k, "attention: mask size");
        }
        let mut scores = vec![T::zero(); groups * n_q * n_k];
        let mut probs = vec![T::zero(); groups * n_q * n_k];
        let mut out = vec![T::zero(); groups * n_q * d_v];
        for g in 0..groups {
            let inputs = AttentionInputs {
                q: &vq.data[g * n_q * d..(g + 1) * n_q * d],
                k: &vk.data[g * n_k * d..(g + 1) * n_k * d],
                v: &vv.data[g * n_k * d_v..(g + 1) * n_k * d_v],
                n_q,
                n_k,
                d,
                d_v,
            };
            let gm = vm.map(|m| &m[g * n_q * n_k..(g + 1) * n_q * n_k]);
            attend(
                &inputs,
                gm,
                mode,
                &mut scores[g * n_q * n_k..(g + 1) * n_q * n_k],
                &mut probs[g * n_q * n_k..(g + 1) * n_q * n_k],
                &mut out[g * n_q * d_v..(g + 1) * n_q * d_v],
            );
        }
        let t = Tensor::new(&[groups, n_q, d_v], out);
        let rg = self.rg(q) || self.rg(k) || self.rg(v) || mask.is_some_and(|m| self.rg(m));
        let state = AttentionState { q, k, v, mask, mode, groups, n_q, n_k, d, d_v, scores, probs };
        self.push(t, Op::Attention(Box::new(state)), rg)
    }

    /// Mean squared difference, a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape, vb.shape, "mse: shape mismatch");
        let n = T::lit(va.len() as f64);
        let s: T = va.data.iter().zip(&vb.data).map(|(&x, &y)| (x - y) * (x - y)).sum();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::scalar(s / n), Op::Mse { a, b }, rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.value(a).data.iter().copied().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let s: T = va.data.iter().copied().sum::<T>() / T::lit(va.len() as f64);
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert!(self.record, "backward on an inference graph");
        assert_eq!(self.value(loss).len(), 1, "backward: loss must be a scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(&self.value(loss).shape.clone(), vec![T::one()]));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gout) = grads[i].take() else { continue };
            self.backprop_node(i, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, i: usize, gout: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let go = &gout.data;
        match &self.nodes[i].op {
            Op::Input | Op::Param(_) => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, |g| add_into(g, go));
                self.acc(grads, *b, |g| add_into(g, go));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |g| add_into(g, go));
                self.acc(grads, *b, |g| g.iter_mut().zip(go).for_each(|(x, &y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&self.value(*a).data, &self.value(*b).data);
                self.acc(grads, *a, |g| {
                    for ((x, &y), &z) in g.iter_mut().zip(go).zip(vb) {
                        *x += y * z;
                    }
                });
                self.acc(grads, *b, |g| {
                    for ((x, &y), &z) in g.iter_mut().zip(go).zip(va) {
                        *x += y * z;
                    }
                });
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.acc(grads, *a, |g| g.iter_mut().zip(go).for_each(|(x, &y)| *x += y * c));
            }
            Op::AddBias { x, bias, layout } => {
                self.acc(grads, *x, |g| add_into(g, go));
                let c = self.value(*x).last_dim();
                let rows = go.len() / c;
                let brows = self.value(*bias).len() / c;
                let layout = *layout;
                self.acc(grads, *bias, |g| {
                    for r in 0..rows {
                        let br = bias_row(r, brows, layout);
                        for j in 0..c {
                            g[br * c + j] += go[r * c + j];
                        }
                    }
                });
            }
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let (va, vb) = (&self.value(*a).data, &self.value(*b).data);
                // dA = dY · Bᵀ ; dB = Aᵀ · dY
                self.acc(grads, *a, |g| gemm(m, n, k, go, false, vb, true, g, true));
                self.acc(grads, *b, |g| gemm(k, m, n, va, true, go, false, g, true));
            }
            Op::Silu(a) => {
                let va = &self.value(*a).data;
                self.acc(grads, *a, |g| {
                    for ((x, &y), &v) in g.iter_mut().zip(go).zip(va) {
                        let s = T::one() / (T::one() + (-v).exp());
                        *x += y * (s + v * s * (T::one() - s));
                    }
                });
            }
            Op::Exp(a) => {
                let vy = &self.nodes[i].value.data;
                self.acc(grads, *a, |g| g.iter_mut().zip(go).zip(vy).for_each(|((x, &y), &e)| *x += y * e));
            }
            Op::Conv2d { x, w, geom, cols } => {
                let geom = *geom;
                let rows = geom.batch * geom.ho * geom.wo;
                let kk = geom.kernel * geom.kernel * geom.cin;
                let vw = &self.value(*w).data;
                let vx = &self.value(*x).data;
                let lhs: &[T] = if geom.pointwise() { vx } else { cols };
                self.acc(grads, *w, |g| gemm(kk, rows, geom.cout, lhs, true, go, false, g, true));
                if self.rg(*x) {
                    if geom.pointwise() {
                        self.acc(grads, *x, |g| gemm(rows, geom.cout, kk, go, false, vw, true, g, true));
                    } else {
                        let mut dcols = vec![T::zero(); rows * kk];
                        gemm(rows, geom.cout, kk, go, false, vw, true, &mut dcols, false);
                        self.acc(grads, *x, |g| col2im_add(&dcols, &geom, g));
                    }
                }
            }
            Op::Upsample2x { x, dims } => {
                let [b, h, w, c] = *dims;
                self.acc(grads, *x, |g| {
                    for bi in 0..b {
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                let dst = ((bi * h + y / 2) * w + xx / 2) * c;
                                let src = ((bi * 2 * h + y) * 2 * w + xx) * c;
                                for j in 0..c {
                                    g[dst + j] += go[src + j];
                                }
                            }
                        }
                    }
                });
            }
            Op::ConcatLast { parts, rows } => {
                let total: usize = parts.iter().map(|p| p.1).sum();
                let mut off = 0;
                for &(p, wdt) in parts {
                    self.acc(grads, p, |g| {
                        for r in 0..*rows {
                            for j in 0..wdt {
                                g[r * wdt + j] += go[r * total + off + j];
                            }
                        }
                    });
                    off += wdt;
                }
            }
            Op::ConcatRows { parts } => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    self.acc(grads, p, |g| add_into(g, &go[off..off + len]));
                    off += len;
                }
            }
            Op::GatherRows { x, idx, width } => {
                let width = *width;
                self.acc(grads, *x, |g| {
                    for (o, &src) in idx.iter().enumerate() {
                        for j in 0..width {
                            g[src * width + j] += go[o * width + j];
                        }
                    }
                });
            }
            Op::GroupNorm(st) => self.backprop_group_norm(st, go, grads),
            Op::SwapAxes12 { x, dims } => {
                let [p, a, b, c] = *dims;
                self.acc(grads, *x, |g| {
                    for pi in 0..p {
                        for ai in 0..a {
                            for bi in 0..b {
                                let src = ((pi * a + ai) * b + bi) * c;
                                let dst = ((pi * b + bi) * a + ai) * c;
                                for j in 0..c {
                                    g[src + j] += go[dst + j];
                                }
                            }
                        }
                    }
                });
            }
            Op::Reshape(x) => self.acc(grads, *x, |g| add_into(g, go)),
            Op::Attention(st) => self.backprop_attention(st, go, grads),
            Op::Mse { a, b } => {
                let (va, vb) = (&self.value(*a).data, &self.value(*b).data);
                let s = go[0] * T::lit(2.0) / T::lit(va.len() as f64);
                self.acc(grads, *a, |g| {
                    for ((x, &p), &q) in g.iter_mut().zip(va).zip(vb) {
                        *x += s * (p - q);
                    }
                });
                self.acc(grads, *b, |g| {
                    for ((x, &p), &q) in g.iter_mut().zip(va).zip(vb) {
                        *x -= s * (p - q);
                    }
                });
            }
            Op::Sum(a) => self.acc(grads, *a, |g| g.iter_mut().for_each(|x| *x += go[0])),
            Op::Mean(a) => {
                let s = go[0] / T::lit(self.value(*a).len() as f64);
                self.acc(grads, *a, |g| g.iter_mut().for_each(|x| *x += s));
            }
        }
    }

    fn backprop_group_norm(&self, st: &GroupNormState<T>, go: &[T], grads: &mut [Option<Tensor<T>>]) {
        let (batch, spatial, channels, groups) = (st.batch, st.spatial, st.channels, st.groups);
        let cg = channels / groups;
        let gamma = &self.value(st.gamma).data;
        self.acc(grads, st.gamma, |g| {
            for (i, &d) in go.iter().enumerate() {
                g[i % channels] += d * st.xhat[i];
            }
        });
        self.acc(grads, st.beta, |g| {
            for (i, &d) in go.iter().enumerate() {
                g[i % channels] += d;
            }
        });
        if !self.rg(st.x) {
            return;
        }
        let count = T::lit((spatial * cg) as f64);
        self.acc(grads, st.x, |g| {
            for b in 0..batch {
                for gi in 0..groups {
                    let mut sum_d = T::zero();
                    let mut sum_dx = T::zero();
                    for s in 0..spatial {
                        let base = (b * spatial + s) * channels + gi * cg;
                        for i in base..base + cg {
                            let dxh = go[i] * gamma[i % channels];
                            sum_d += dxh;
                            sum_dx += dxh * st.xhat[i];
                        }
                    }
                    let r = st.rstd[b * groups + gi];
                    for s in 0..spatial {
                        let base = (b * spatial + s) * channels + gi * cg;
                        for i in base..base + cg {
                            let dxh = go[i] * gamma[i % channels];
                            g[i] += r * (dxh - (sum_d + st.xhat[i] * sum_dx) / count);
                        }
                    }
                }
            }
        });
    }

    fn backprop_attention(&self, st: &AttentionState<T>, go: &[T], grads: &mut [Option<Tensor<T>>]) {
        let (n_q, n_k, d, d_v) = (st.n_q, st.n_k, st.d, st.d_v);
        let (vq, vk, vv) = (&self.value(st.q).data, &self.value(st.k).data, &self.value(st.v).data);
        let vm = st.mask.map(|m| &self.value(m).data);
        let mut dq = self.rg(st.q).then(|| vec![T::zero(); vq.len()]);
        let mut dk = self.rg(st.k).then(|| vec![T::zero(); vk.len()]);
        let mut dv = self.rg(st.v).then(|| vec![T::zero(); vv.len()]);
        let mut dm = st.mask.filter(|&m| self.rg(m)).map(|m| vec![T::zero(); self.value(m).len()]);
        for g in 0..st.groups {
            let inputs = AttentionInputs {
                q: &vq[g * n_q * d..(g + 1) * n_q * d],
                k: &vk[g * n_k * d..(g + 1) * n_k * d],
                v: &vv[g * n_k * d_v..(g + 1) * n_k * d_v],
                n_q,
                n_k,
                d,
                d_v,
            };
            let qk = g * n_q * n_k..(g + 1) * n_q * n_k;
            attend_backward(
                &inputs,
                vm.map(|m| &m[qk.clone()]),
                st.mode,
                &st.scores[qk.clone()],
                &st.probs[qk.clone()],
                &go[g * n_q * d_v..(g + 1) * n_q * d_v],
                AttentionGrads {
                    dq: dq.as_mut().map(|b| &mut b[g * n_q * d..(g + 1) * n_q * d]),
                    dk: dk.as_mut().map(|b| &mut b[g * n_k * d..(g + 1) * n_k * d]),
                    dv: dv.as_mut().map(|b| &mut b[g * n_k * d_v..(g + 1) * n_k * d_v]),
                    dmask: dm.as_mut().map(|b| &mut b[qk.clone()]),
                },
            );
        }
        for (var, buf) in [(Some(st.q), dq), (Some(st.k), dk), (Some(st.v), dv), (st.mask, dm)] {
            if let (Some(var), Some(buf)) = (var, buf) {
                self.acc(grads, var, |g| add_into(g, &buf));
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.rg(v) {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(&self.nodes[v.0].value.shape));
        }
        f(&mut slot.as_mut().unwrap().data);
    }

    /// Parameter nodes placed on this tape.
    pub fn param_vars(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.nodes.iter().enumerate().filter_map(|(i, n)| match n.op {
            Op::Param(id) => Some((id, Var(i))),
            _ => None,
        })
    }
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Adds parameter gradients into the store's gradient buffers.
    pub fn accumulate_into(&self, graph: &Graph<T>, store: &mut ParamStore<T>) {
        for (id, var) in graph.param_vars() {
            if let Some(g) = self.get(var) {
                store.grad_mut(id).add_assign(g);
            }
        }
    }
}

fn bias_row(r: usize, brows: usize, layout: BiasLayout) -> usize {
    match layout {
        BiasLayout::Tiled => r % brows,
        BiasLayout::Grouped(per) => r / per,
    }
}

fn add_into<T: Scalar>(g: &mut [T], src: &[T]) {
    for (x, &y) in g.iter_mut().zip(src) {
        *x += y;
    }
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let kk = g.kernel * g.kernel * g.cin;
    let mut cols = vec![T::zero(); g.batch * g.ho * g.wo * kk];
    for b in 0..g.batch {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let row = ((b * g.ho + oy) * g.wo + ox) * kk;
                for ky in 0..g.kernel {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.kernel {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let src = ((b * g.h + iy as usize) * g.w + ix as usize) * g.cin;
                        let dst = row + (ky * g.kernel + kx) * g.cin;
                        cols[dst..dst + g.cin].copy_from_slice(&x[src..src + g.cin]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add<T: Scalar>(dcols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let kk = g.kernel * g.kernel * g.cin;
    for b in 0..g.batch {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let row = ((b * g.ho + oy) * g.wo + ox) * kk;
                for ky in 0..g.kernel {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.kernel {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let dst = ((b * g.h + iy as usize) * g.w + ix as usize) * g.cin;
                        let src = row + (ky * g.kernel + kx) * g.cin;
                        for j in 0..g.cin {
                            dx[dst + j] += dcols[src + j];
                        }
                    }
                }
            }
        }
    }
}
