//! Parameterised layers built on the autodiff graph.
//!
//! Layers only hold [`ParamId`]s, so the same layer description can run
//! against an `f32` store for training and an `f64` copy for gradient checks.

use serde::{Deserialize, Serialize};

use crate::autograd::{BiasLayout, Graph, Init, ParamId, ParamStore, Scalar, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Silu,
    /// Pass-through; used for exact-identity test configurations.
    Identity,
}

impl Activation {
    pub fn apply<T: Scalar>(self, g: &mut Graph<T>, x: Var) -> Var {
        match self {
            Activation::Silu => g.silu(x),
            Activation::Identity => x,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, init: &mut Init, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let w = store.add(&format!("{name}.w"), init.fan_in(&[fan_in, fan_out], fan_in));
        let b = store.add(&format!("{name}.b"), Tensor::zeros(&[fan_out]));
        Self { w, b: Some(b), fan_in, fan_out }
    }

    /// Zero weight and bias (output starts at exactly zero).
    pub fn zeroed<T: Scalar>(store: &mut ParamStore<T>, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let w = store.add(&format!("{name}.w"), Tensor::zeros(&[fan_in, fan_out]));
        let b = store.add(&format!("{name}.b"), Tensor::zeros(&[fan_out]));
        Self { w, b: Some(b), fan_in, fan_out }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w = g.param(store, self.w);
        let b = self.b.map(|b| g.param(store, b));
        g.linear(x, w, b)
    }
}

/// Stack of linear layers with an activation between (not after) layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl Mlp {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        widths: &[usize],
        activation: Activation,
    ) -> Self {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, init, &format!("{name}.{i}"), w[0], w[1]))
            .collect();
        Self { layers, activation }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, mut x: Var) -> Var {
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                x = self.activation.apply(g, x);
            }
            x = layer.forward(g, store, x);
        }
        x
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        let fan_in = kernel * kernel * cin;
        let w = store.add(&format!("{name}.w"), init.fan_in(&[kernel, kernel, cin, cout], fan_in));
        let b = store.add(&format!("{name}.b"), Tensor::zeros(&[cout]));
        Self { w, b, kernel, stride, pad: kernel / 2 }
    }

    pub fn zeroed<T: Scalar>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, kernel: usize) -> Self {
        let w = store.add(&format!("{name}.w"), Tensor::zeros(&[kernel, kernel, cin, cout]));
        let b = store.add(&format!("{name}.b"), Tensor::zeros(&[cout]));
        Self { w, b, kernel, stride: 1, pad: kernel / 2 }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.conv2d(x, w, self.stride, self.pad);
        g.add_bias(y, b, BiasLayout::Tiled)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize, groups: usize) -> Self {
        let groups = largest_divisor_at_most(channels, groups);
        let gamma = store.add(&format!("{name}.gamma"), Tensor::full(&[channels], T::one()));
        let beta = store.add(&format!("{name}.beta"), Tensor::zeros(&[channels]));
        Self { gamma, beta, groups }
    }

    /// `x` is viewed as `[batch, spatial, channels]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, batch: usize) -> Var {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.group_norm(x, gamma, beta, batch, self.groups)
    }
}

fn largest_divisor_at_most(n: usize, k: usize) -> usize {
    (1..=k.min(n).max(1)).rev().find(|d| n % d == 0).unwrap_or(1)
}

/// Sinusoidal embedding of scalar positions (timesteps, frame indices).
pub fn sinusoidal_embedding(positions: &[f64], dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; positions.len() * dim];
    for (i, &p) in positions.iter().enumerate() {
        for j in 0..half {
            let freq = (-(10000f64.ln()) * j as f64 / half.max(1) as f64).exp();
            out[i * dim + j] = (p * freq).sin();
            out[i * dim + half + j] = (p * freq).cos();
        }
    }
    out
}
