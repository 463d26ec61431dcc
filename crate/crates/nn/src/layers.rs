//! Parameterized building blocks composed from graph ops.

use rand::Rng;

use crate::error::{NnError, Result};
use crate::graph::{Graph, Var};
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// `y = x W + b` over the trailing axis, with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        std: f32,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), Tensor::randn(&[in_dim, out_dim], std, rng));
        let bias = Some(store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim])));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.last() != Some(&self.in_dim) {
            return Err(NnError::shape("linear", &shape, &[self.in_dim, self.out_dim]));
        }
        let rows = shape[..shape.len() - 1].iter().product();
        let flat = if shape.len() == 2 { x } else { g.reshape(x, &[rows, self.in_dim])? };
        let w = g.param(self.weight);
        let mut y = g.matmul(flat, w)?;
        if let Some(b) = self.bias {
            let b = g.param(b);
            y = g.add_broadcast(y, b)?;
        }
        if shape.len() == 2 {
            return Ok(y);
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.out_dim;
        g.reshape(y, &out_shape)
    }

    pub fn num_scalars(&self) -> usize {
        self.in_dim * self.out_dim + if self.bias.is_some() { self.out_dim } else { 0 }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f32,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, eps: f32) -> Self {
        Self {
            gamma: store.add(format!("{name}.weight"), Tensor::ones(&[dim])),
            beta: store.add(format!("{name}.bias"), Tensor::zeros(&[dim])),
            eps,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (gamma, beta) = (g.param(self.gamma), g.param(self.beta));
        g.layer_norm(x, gamma, beta, self.eps)
    }
}

/// Layer norm across channels of an `[N, C, H, W]` map, per pixel.
#[derive(Clone, Debug)]
pub struct ChannelNorm(pub LayerNorm);

impl ChannelNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self(LayerNorm::new(store, name, channels, 1e-6))
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let nhwc = g.permute(x, &[0, 2, 3, 1])?;
        let y = self.0.forward(g, nhwc)?;
        g.permute(y, &[0, 3, 1, 2])
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// He-normal initialized convolution with a square kernel.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = (in_ch * kernel * kernel) as f32;
        let std = (2.0 / fan_in).sqrt();
        Self {
            weight: store.add(
                format!("{name}.weight"),
                Tensor::randn(&[out_ch, in_ch, kernel, kernel], std, rng),
            ),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[out_ch])),
            stride,
            pad,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.weight), g.param(self.bias));
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

/// Stride-two 2×2 transposed convolution (exact ×2 upsampling).
#[derive(Clone, Debug)]
pub struct ConvTranspose2x2 {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl ConvTranspose2x2 {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, in_ch: usize, out_ch: usize, rng: &mut R) -> Self {
        let std = (2.0 / in_ch as f32).sqrt();
        Self {
            weight: store.add(format!("{name}.weight"), Tensor::randn(&[in_ch, out_ch, 2, 2], std, rng)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[out_ch])),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.weight), g.param(self.bias));
        g.conv_transpose2x2(x, w, Some(b))
    }
}

/// Multi-head self-attention over `[B, L, D]`:
/// `softmax(Q K^T / sqrt(d_head)) V` per head, heads concatenated and projected.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub proj: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, heads: usize, std: f32, rng: &mut R) -> Self {
        assert!(heads > 0 && dim % heads == 0, "dim {dim} not divisible by {heads} heads");
        Self {
            query: Linear::new(store, &format!("{name}.q"), dim, dim, std, rng),
            key: Linear::new(store, &format!("{name}.k"), dim, dim, std, rng),
            value: Linear::new(store, &format!("{name}.v"), dim, dim, std, rng),
            proj: Linear::new(store, &format!("{name}.proj"), dim, dim, std, rng),
            heads,
        }
    }

    fn split_heads(&self, g: &mut Graph, x: Var, b: usize, l: usize, dh: usize) -> Result<Var> {
        let x = g.reshape(x, &[b, l, self.heads, dh])?;
        let x = g.permute(x, &[0, 2, 1, 3])?;
        g.reshape(x, &[b * self.heads, l, dh])
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 3 {
            return Err(NnError::shape("attention", &shape, &[3]));
        }
        let (b, l, d) = (shape[0], shape[1], shape[2]);
        let dh = d / self.heads;
        let q = self.query.forward(g, x)?;
        let k = self.key.forward(g, x)?;
        let v = self.value.forward(g, x)?;
        let q = self.split_heads(g, q, b, l, dh)?;
        let k = self.split_heads(g, k, b, l, dh)?;
        let v = self.split_heads(g, v, b, l, dh)?;
        let q = g.scale(q, 1.0 / (dh as f32).sqrt());
        let scores = g.matmul_ext(q, k, true)?;
        let attn = g.softmax(scores);
        let ctx = g.matmul(attn, v)?;
        let ctx = g.reshape(ctx, &[b, self.heads, l, dh])?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[b, l, d])?;
        self.proj.forward(g, ctx)
    }
}

/// Two-layer GELU feed-forward network.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, std: f32, rng: &mut R) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, std, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim, std, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, x)?;
        let h = g.gelu(h);
        self.fc2.forward(g, h)
    }
}

/// Drops the whole residual branch per sample with probability `p` during
/// training and rescales kept samples by `1 / (1 - p)`.
pub fn stochastic_depth<R: Rng + ?Sized>(g: &mut Graph, x: Var, p: f32, training: bool, rng: &mut R) -> Result<Var> {
    if !(0.0..1.0).contains(&p) {
        return Err(NnError::invalid("stochastic_depth", format!("drop rate {p} outside [0, 1)")));
    }
    if !training || p == 0.0 {
        return Ok(x);
    }
    let batch = g.shape(x)[0];
    let keep = 1.0 / (1.0 - p);
    let factors = (0..batch)
        .map(|_| if rng.random::<f32>() < p { 0.0 } else { keep })
        .collect();
    g.mul_per_sample(x, factors)
}

/// Inverted elementwise dropout.
pub fn dropout<R: Rng + ?Sized>(g: &mut Graph, x: Var, p: f32, training: bool, rng: &mut R) -> Result<Var> {
    if !(0.0..1.0).contains(&p) {
        return Err(NnError::invalid("dropout", format!("drop rate {p} outside [0, 1)")));
    }
    if !training || p == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - p);
    let shape = g.shape(x).to_vec();
    let n = shape.iter().product();
    let mask = (0..n)
        .map(|_| if rng.random::<f32>() < p { 0.0 } else { keep })
        .collect();
    g.mul_const(x, Tensor::new(&shape, mask)?)
}
