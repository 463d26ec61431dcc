//! ViT encoder over non-overlapping patches with learned 1-D positions.

use dit_nn::layers::{stochastic_depth, LayerNorm, Linear, Mlp, MultiHeadAttention};
use dit_nn::{Graph, ParamId, ParamStore, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::imaging::{normalize_default, patchify, resize, Image, PatchSequence};

/// Side of the positional-embedding grid (224 / 16).
pub const POS_GRID: usize = 14;
pub const INIT_STD: f32 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VitConfig {
    pub depth: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn: usize,
    pub patch_size: usize,
    pub in_channels: usize,
    pub drop_path: f32,
}

impl VitConfig {
    pub fn base() -> Self {
        Self { depth: 12, hidden: 768, heads: 12, ffn: 3072, patch_size: 16, in_channels: 1, drop_path: 0.1 }
    }

    pub fn large() -> Self {
        Self { depth: 24, hidden: 1024, heads: 16, ffn: 4096, patch_size: 16, in_channels: 1, drop_path: 0.1 }
    }

    pub fn tiny() -> Self {
        Self { depth: 4, hidden: 64, heads: 4, ffn: 128, patch_size: 16, in_channels: 1, drop_path: 0.1 }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "base" | "dit-b" => Some(Self::base()),
            "large" | "dit-l" => Some(Self::large()),
            "tiny" | "dit-tiny" => Some(Self::tiny()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(CoreError::invalid(
                "VitConfig",
                format!("depth {} hidden {} heads {}", self.depth, self.hidden, self.heads),
            ));
        }
        if self.patch_size == 0 || !(0.0..1.0).contains(&self.drop_path) {
            return Err(CoreError::invalid("VitConfig", "bad patch size or drop path"));
        }
        Ok(())
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.in_channels
    }

    /// Blocks `{d/3, d/2, 2d/3, d}` (1-based, rounded to nearest) feeding the
    /// pyramid adapter. Rounding agrees with truncation whenever 6 divides `d`
    /// and keeps the taps distinct for shallow stacks such as `d = 4`.
    pub fn fpn_taps(&self) -> [usize; 4] {
        let d = self.depth;
        [(d + 1) / 3, (d + 1) / 2, (2 * d + 1) / 3, d]
    }

    /// Drop-path rate of block `i`, rising linearly from 0 to `drop_path`.
    pub fn drop_rate(&self, i: usize) -> f32 {
        if self.depth <= 1 {
            return 0.0;
        }
        self.drop_path * i as f32 / (self.depth - 1) as f32
    }
}

/// Learned scalars of the encoder: patch projection, 196 positions, mask
/// token, blocks and final norm. Task heads are not counted.
pub fn param_count(cfg: &VitConfig) -> usize {
    let h = cfg.hidden;
    let patch = cfg.patch_dim() * h + h;
    let pos = POS_GRID * POS_GRID * h;
    let mask = h;
    let block = 2 * (2 * h) + 4 * (h * h + h) + (h * cfg.ffn + cfg.ffn) + (cfg.ffn * h + h);
    patch + pos + mask + cfg.depth * block + 2 * h
}

#[derive(Clone, Debug)]
struct Block {
    norm1: LayerNorm,
    attn: MultiHeadAttention,
    norm2: LayerNorm,
    mlp: Mlp,
    drop: f32,
}

#[derive(Clone, Debug)]
pub struct Vit {
    pub config: VitConfig,
    patch_embed: Linear,
    pub pos_embed: ParamId,
    pub mask_token: ParamId,
    blocks: Vec<Block>,
    norm: LayerNorm,
}

/// Encoder output: final (normalized) states and the post-block states of
/// each requested tap, all `[B, N, h]`.
pub struct EncoderOutput {
    pub last: Var,
    pub taps: Vec<Var>,
}

impl Vit {
    /// Registers all encoder parameters under `vit/` in `store`.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, config: VitConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let h = config.hidden;
        let patch_embed = Linear::new(store, "vit/patch_embed", config.patch_dim(), h, INIT_STD, rng);
        let pos_embed = store.add_with("vit/pos_embed", Tensor::randn(&[POS_GRID * POS_GRID, h], INIT_STD, rng), false);
        let mask_token = store.add("vit/mask_token", Tensor::randn(&[h], INIT_STD, rng));
        let blocks = (0..config.depth)
            .map(|i| {
                let name = format!("vit/blocks.{i}");
                Block {
                    norm1: LayerNorm::new(store, &format!("{name}.norm1"), h, 1e-6),
                    attn: MultiHeadAttention::new(store, &format!("{name}.attn"), h, config.heads, INIT_STD, rng),
                    norm2: LayerNorm::new(store, &format!("{name}.norm2"), h, 1e-6),
                    mlp: Mlp::new(store, &format!("{name}.mlp"), h, config.ffn, INIT_STD, rng),
                    drop: config.drop_rate(i),
                }
            })
            .collect();
        let norm = LayerNorm::new(store, "vit/norm", h, 1e-6);
        Ok(Self { config, patch_embed, pos_embed, mask_token, blocks, norm })
    }

    /// Positional embeddings `[gh*gw, h]`, bilinearly resampled from the
    /// 14×14 table when the grid differs.
    pub fn positions(&self, g: &mut Graph, gh: usize, gw: usize) -> Result<Var> {
        let pos = g.param(self.pos_embed);
        if (gh, gw) == (POS_GRID, POS_GRID) {
            return Ok(pos);
        }
        let h = self.config.hidden;
        let grid = g.reshape(pos, &[1, POS_GRID, POS_GRID, h])?;
        let chw = g.permute(grid, &[0, 3, 1, 2])?;
        let resized = g.interpolate_bilinear(chw, gh, gw)?;
        let hwc = g.permute(resized, &[0, 2, 3, 1])?;
        Ok(g.reshape(hwc, &[gh * gw, h])?)
    }

    /// Linear projection of `[B, N, P*P*C]` patches (no positions).
    pub fn project(&self, g: &mut Graph, patches: Var) -> Result<Var> {
        let s = g.shape(patches).to_vec();
        if s.len() != 3 || s[2] != self.config.patch_dim() {
            return Err(CoreError::invalid(
                "patch_embed",
                format!("patches {s:?}, expected [B, N, {}]", self.config.patch_dim()),
            ));
        }
        Ok(self.patch_embed.forward(g, patches)?)
    }

    /// Projection plus positions.
    pub fn embed(&self, g: &mut Graph, patches: Var, gh: usize, gw: usize) -> Result<Var> {
        let x = self.project(g, patches)?;
        if g.shape(x)[1] != gh * gw {
            return Err(CoreError::invalid("patch_embed", format!("{} patches for a {gh}x{gw} grid", g.shape(x)[1])));
        }
        let pos = self.positions(g, gh, gw)?;
        Ok(g.add_broadcast(x, pos)?)
    }

    /// Replaces masked rows (mask is `[B*N]`, row-major) by mask token + position.
    pub fn apply_mask(&self, g: &mut Graph, emb: Var, mask: &[bool], pos: Var) -> Result<Var> {
        let s = g.shape(emb).to_vec();
        if mask.len() != s[0] * s[1] {
            return Err(CoreError::invalid("apply_mask", format!("mask length {} for {} positions", mask.len(), s[0] * s[1])));
        }
        if !mask.iter().any(|&m| m) {
            return Ok(emb);
        }
        let tok = g.param(self.mask_token);
        let repl = g.add_broadcast(pos, tok)?;
        Ok(g.select_rows(emb, repl, mask)?)
    }

    /// Pre-norm Transformer stack. `taps` are 1-based block indices.
    pub fn encode<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        x: Var,
        taps: &[usize],
        training: bool,
        rng: &mut R,
    ) -> Result<EncoderOutput> {
        if let Some(&bad) = taps.iter().find(|&&t| t == 0 || t > self.config.depth) {
            return Err(CoreError::invalid("encoder_forward", format!("tap {bad} outside [1, {}]", self.config.depth)));
        }
        let mut h = x;
        let mut tapped = vec![None; taps.len()];
        for (i, b) in self.blocks.iter().enumerate() {
            let a = b.norm1.forward(g, h)?;
            let a = b.attn.forward(g, a)?;
            let a = stochastic_depth(g, a, b.drop, training, rng)?;
            h = g.add(h, a)?;
            let m = b.norm2.forward(g, h)?;
            let m = b.mlp.forward(g, m)?;
            let m = stochastic_depth(g, m, b.drop, training, rng)?;
            h = g.add(h, m)?;
            for (slot, &t) in tapped.iter_mut().zip(taps) {
                if t == i + 1 {
                    *slot = Some(h);
                }
            }
        }
        let last = self.norm.forward(g, h)?;
        Ok(EncoderOutput { last, taps: tapped.into_iter().map(|t| t.expect("validated tap")).collect() })
    }
}

/// Mean pooling over the sequence followed by a linear classifier.
#[derive(Clone, Debug)]
pub struct ClassHead {
    pub linear: Linear,
}

impl ClassHead {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, hidden: usize, num_classes: usize, rng: &mut R) -> Self {
        Self { linear: Linear::new(store, "cls_head", hidden, num_classes, INIT_STD, rng) }
    }

    /// `[B, N, h]` states to `[B, C]` logits.
    pub fn forward(&self, g: &mut Graph, states: Var) -> Result<Var> {
        let pooled = g.mean_axis(states, 1)?;
        Ok(self.linear.forward(g, pooled)?)
    }
}

/// Resize to `size`, scale to `[-1, 1]` and tile into patches.
pub fn preprocess(img: &Image, size: usize, patch: usize) -> Result<PatchSequence> {
    let img = if (img.width, img.height) == (size, size) { img.clone() } else { resize(img, size, size)? };
    patchify(&normalize_default(&img)?, patch)
}

/// Stacks equally shaped patch sequences into a `[B, N, D]` tensor.
pub fn stack_patches(seqs: &[PatchSequence]) -> Result<Tensor> {
    let first = seqs.first().ok_or_else(|| CoreError::invalid("stack_patches", "empty batch"))?;
    let (n, d) = (first.len(), first.patch_dim());
    let mut data = Vec::with_capacity(seqs.len() * n * d);
    for s in seqs {
        if s.len() != n || s.patch_dim() != d {
            return Err(CoreError::invalid("stack_patches", "sequences differ in shape"));
        }
        data.extend_from_slice(&s.patches);
    }
    Ok(Tensor::new(&[seqs.len(), n, d], data)?)
}
