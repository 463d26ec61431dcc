//! Discrete VAE image tokenizer.
//!
//! Three stride-2 conv stages (each followed by a residual block) map an image
//! to a grid of categorical logits over the codebook at 1/8 resolution. The
//! decoder mirrors it with 2×2 transposed convolutions.

use std::path::Path;

use dit_nn::layers::Conv2d;
use dit_nn::layers::ConvTranspose2x2;
use dit_nn::{AdamW, AdamWConfig, Graph, ParamStore, Rng as NnRng, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::imaging::Image;

pub const DOWNSAMPLE: usize = 8;
pub const TEMPERATURE_FLOOR: f32 = 1e-10;
pub const DEFAULT_LAMBDA: f32 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DvaeConfig {
    pub codebook_size: usize,
    pub code_dim: usize,
    /// Channel widths of the three encoder stages.
    pub hidden: [usize; 3],
    pub in_channels: usize,
}

impl DvaeConfig {
    pub fn full() -> Self {
        Self { codebook_size: 8192, code_dim: 256, hidden: [64, 128, 256], in_channels: 1 }
    }

    pub fn tiny() -> Self {
        Self { codebook_size: 64, code_dim: 32, hidden: [16, 32, 32], in_channels: 1 }
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    a: Conv2d,
    b: Conv2d,
}

impl ResBlock {
    fn new(store: &mut ParamStore, name: &str, ch: usize, rng: &mut NnRng) -> Self {
        let a = Conv2d::new(store, &format!("{name}.conv1"), ch, ch, 3, 1, 1, rng);
        let b = Conv2d::new(store, &format!("{name}.conv2"), ch, ch, 3, 1, 1, rng);
        // start close to identity
        for v in store.get_mut(b.weight).value.data_mut() {
            *v *= 0.1;
        }
        Self { a, b }
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.a.forward(g, x)?;
        let h = g.gelu(h);
        let h = self.b.forward(g, h)?;
        Ok(g.add(x, h)?)
    }
}

#[derive(Clone, Debug)]
struct Layers {
    enc_down: Vec<Conv2d>,
    enc_res: Vec<ResBlock>,
    enc_out: Conv2d,
    codebook: dit_nn::ParamId,
    dec_in: Conv2d,
    dec_res: Vec<ResBlock>,
    dec_up: Vec<ConvTranspose2x2>,
    dec_out: Conv2d,
}

/// Codebook assignment for one image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenMap {
    pub grid_h: usize,
    pub grid_w: usize,
    pub indices: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DvaeLoss {
    pub mse: f64,
    pub perplexity_loss: f64,
    pub total: f64,
}

pub struct Dvae {
    pub config: DvaeConfig,
    pub store: ParamStore,
    layers: Layers,
    loaded: bool,
}

/// Annealed Gumbel-softmax temperature `max(floor, exp(-5 t / T))`.
pub fn temperature_at(step: u64, total: u64) -> f32 {
    if total == 0 {
        return 1.0;
    }
    ((-5.0 * step as f64 / total as f64).exp() as f32).max(TEMPERATURE_FLOOR)
}

/// Standard Gumbel draw `-ln(-ln u)` with `u` kept away from 0 and 1.
pub fn gumbel_noise<R: Rng + ?Sized>(rng: &mut R) -> f32 {
    let u = rng.random::<f64>().clamp(1e-12, 1.0 - 1e-12);
    (-(-u.ln()).ln()) as f32
}

/// Relaxed categorical sample per row of `[M, K]` logits:
/// `softmax((logits + g) / tau)` with Gumbel noise `g` (omitted when `rng` is
/// `None`). In hard mode the forward value is the argmax one-hot while the
/// gradient follows the soft weights. Indices are the per-row argmax, lowest
/// index on ties.
pub fn quantize_gumbel<R: Rng + ?Sized>(
    g: &mut Graph,
    logits: Var,
    temperature: f32,
    rng: Option<&mut R>,
    hard: bool,
) -> Result<(Var, Vec<usize>)> {
    if !(temperature > 0.0) {
        return Err(CoreError::invalid("quantize_gumbel", format!("temperature {temperature}")));
    }
    let shape = g.shape(logits).to_vec();
    if shape.len() != 2 {
        return Err(CoreError::invalid("quantize_gumbel", format!("logits must be [M, K], got {shape:?}")));
    }
    let perturbed = match rng {
        Some(rng) => {
            let noise: Vec<f32> = (0..shape[0] * shape[1]).map(|_| gumbel_noise(rng)).collect();
            let noise = g.input(Tensor::new(&shape, noise)?);
            g.add(logits, noise)?
        }
        None => logits,
    };
    let indices = g.value(perturbed).argmax_rows();
    let scaled = g.scale(perturbed, 1.0 / temperature);
    let soft = g.softmax(scaled);
    if !hard {
        return Ok((soft, indices));
    }
    let k = shape[1];
    let mut onehot = vec![0.0f32; shape[0] * k];
    for (r, &i) in indices.iter().enumerate() {
        onehot[r * k + i] = 1.0;
    }
    let st = g.straight_through(soft, Tensor::new(&shape, onehot)?)?;
    Ok((st, indices))
}

/// Loss terms on plain tensors: MSE, normalized-entropy perplexity penalty
/// `(ln K - H(p)) / ln K`, and `mse + lambda * penalty`.
pub fn dvae_loss(recon: &Tensor, target: &Tensor, mean_code_probs: &[f32], lambda: f32) -> Result<DvaeLoss> {
    if recon.shape() != target.shape() {
        return Err(dit_nn::NnError::shape("dvae_loss", recon.shape(), target.shape()).into());
    }
    let total_p: f64 = mean_code_probs.iter().map(|&p| p as f64).sum();
    if (total_p - 1.0).abs() > 1e-4 || mean_code_probs.iter().any(|&p| p < 0.0) {
        return Err(CoreError::invalid("dvae_loss", format!("code probabilities sum to {total_p}")));
    }
    let n = recon.numel().max(1) as f64;
    let mse = recon
        .data()
        .iter()
        .zip(target.data())
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum::<f64>()
        / n;
    let k = mean_code_probs.len() as f64;
    let entropy: f64 = -mean_code_probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p as f64 * (p as f64).ln())
        .sum::<f64>();
    let perplexity_loss = (k.ln() - entropy) / k.ln();
    Ok(DvaeLoss { mse, perplexity_loss, total: mse + lambda as f64 * perplexity_loss })
}

/// Batch of gray images as a `[B, C, H, W]` tensor scaled to `[0, 1]`.
pub fn images_to_tensor(images: &[&Image]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| CoreError::invalid("images_to_tensor", "empty batch"))?;
    let (w, h, c) = (first.width, first.height, first.channels);
    let mut data = Vec::with_capacity(images.len() * w * h * c);
    for img in images {
        if (img.width, img.height, img.channels) != (w, h, c) {
            return Err(CoreError::invalid("images_to_tensor", "images differ in size"));
        }
        data.extend(img.to_chw().into_iter().map(|v| v / 255.0));
    }
    Ok(Tensor::new(&[images.len(), c, h, w], data)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DvaeTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub lambda: f32,
    pub seed: u64,
}

impl Default for DvaeTrainConfig {
    fn default() -> Self {
        Self { epochs: 3, batch_size: 8, lr: 5e-4, lambda: DEFAULT_LAMBDA, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mse: f64,
    pub perplexity_loss: f64,
    pub temperature: f32,
}

impl Dvae {
    pub fn new(config: DvaeConfig, seed: u64) -> Result<Self> {
        if config.codebook_size < 2 {
            return Err(CoreError::invalid("Dvae", "codebook needs at least 2 entries"));
        }
        let mut rng = dit_nn::seeded_rng(seed);
        let mut store = ParamStore::new();
        let s = &mut store;
        let h = config.hidden;
        let mut enc_down = Vec::new();
        let mut enc_res = Vec::new();
        let mut prev = config.in_channels;
        for (i, &ch) in h.iter().enumerate() {
            enc_down.push(Conv2d::new(s, &format!("dvae/enc.{i}.down"), prev, ch, 4, 2, 1, &mut rng));
            enc_res.push(ResBlock::new(s, &format!("dvae/enc.{i}.res"), ch, &mut rng));
            prev = ch;
        }
        let enc_out = Conv2d::new(s, "dvae/enc.logits", h[2], config.codebook_size, 1, 1, 0, &mut rng);
        let codebook = s.add(
            "dvae/codebook",
            Tensor::randn(&[config.codebook_size, config.code_dim], 1.0, &mut rng),
        );
        let dec_in = Conv2d::new(s, "dvae/dec.in", config.code_dim, h[2], 1, 1, 0, &mut rng);
        let mut dec_res = Vec::new();
        let mut dec_up = Vec::new();
        for i in (0..3).rev() {
            let out = if i == 0 { h[0] } else { h[i - 1] };
            dec_res.push(ResBlock::new(s, &format!("dvae/dec.{i}.res"), h[i], &mut rng));
            dec_up.push(ConvTranspose2x2::new(s, &format!("dvae/dec.{i}.up"), h[i], out, &mut rng));
        }
        let dec_out = Conv2d::new(s, "dvae/dec.out", h[0], config.in_channels, 1, 1, 0, &mut rng);
        let layers = Layers { enc_down, enc_res, enc_out, codebook, dec_in, dec_res, dec_up, dec_out };
        Ok(Self { config, store, layers, loaded: false })
    }

    pub fn is_loaded(&self) -> bool {
        self.loaded
    }

    /// Marks the current (e.g. freshly initialized) weights as usable for tokenization.
    pub fn mark_loaded(&mut self) {
        self.loaded = true;
    }

    fn check_dims(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1] != self.config.in_channels || shape[2] % DOWNSAMPLE != 0 || shape[3] % DOWNSAMPLE != 0 || shape[2] == 0 || shape[3] == 0 {
            return Err(CoreError::invalid(
                "dvae encode",
                format!("input {shape:?} must be [B, {}, H, W] with H, W divisible by 8", self.config.in_channels),
            ));
        }
        Ok(())
    }

    /// `[B, C, H, W]` in `[0, 1]` to `[B, K, H/8, W/8]` logits.
    pub fn encode(&self, g: &mut Graph, x: Var) -> Result<Var> {
        self.check_dims(g.shape(x))?;
        let mut h = x;
        for (down, res) in self.layers.enc_down.iter().zip(&self.layers.enc_res) {
            h = down.forward(g, h)?;
            h = g.gelu(h);
            h = res.forward(g, h)?;
        }
        Ok(self.layers.enc_out.forward(g, h)?)
    }

    /// `[B, K, h, w]` to `[B*h*w, K]`, row-major over cells.
    pub fn logits_rows(&self, g: &mut Graph, logits: Var) -> Result<Var> {
        let s = g.shape(logits).to_vec();
        let t = g.permute(logits, &[0, 2, 3, 1])?;
        Ok(g.reshape(t, &[s[0] * s[2] * s[3], s[1]])?)
    }

    /// Code weights `[B*h*w, K]` to an image `[B, C, 8h, 8w]`.
    pub fn decode(&self, g: &mut Graph, weights: Var, batch: usize, gh: usize, gw: usize) -> Result<Var> {
        let s = g.shape(weights).to_vec();
        if s != [batch * gh * gw, self.config.codebook_size] {
            return Err(dit_nn::NnError::shape("dvae decode", &s, &[batch * gh * gw, self.config.codebook_size]).into());
        }
        let cb = g.param(self.layers.codebook);
        let z = g.matmul(weights, cb)?;
        let z = g.reshape(z, &[batch, gh, gw, self.config.code_dim])?;
        let mut h = g.permute(z, &[0, 3, 1, 2])?;
        h = self.layers.dec_in.forward(g, h)?;
        for (res, up) in self.layers.dec_res.iter().zip(&self.layers.dec_up) {
            h = res.forward(g, h)?;
            h = up.forward(g, h)?;
            h = g.gelu(h);
        }
        Ok(self.layers.dec_out.forward(g, h)?)
    }

    /// Differentiable loss on a batch; returns `(total, mse, perplexity_loss)` nodes.
    pub fn loss_graph<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        batch: &Tensor,
        temperature: f32,
        lambda: f32,
        rng: Option<&mut R>,
    ) -> Result<(Var, Var, Var)> {
        let s = batch.shape().to_vec();
        let x = g.input(batch.clone());
        let logits = self.encode(g, x)?;
        let (gh, gw) = (s[2] / DOWNSAMPLE, s[3] / DOWNSAMPLE);
        let rows = self.logits_rows(g, logits)?;
        let (weights, _) = quantize_gumbel(g, rows, temperature, rng, false)?;
        let recon = self.decode(g, weights, s[0], gh, gw)?;
        let mse = g.mse(recon, batch.clone())?;
        let probs = g.softmax(rows);
        let mean_p = g.mean_axis(probs, 0)?;
        let logp = g.ln(mean_p);
        let plogp = g.mul(mean_p, logp)?;
        let neg_entropy = g.sum(plogp);
        let k = self.config.codebook_size as f32;
        let normalized = g.scale(neg_entropy, 1.0 / k.ln());
        let perplexity = g.add_scalar(normalized, 1.0);
        let weighted = g.scale(perplexity, lambda);
        let total = g.add(mse, weighted)?;
        Ok((total, mse, perplexity))
    }

    /// Deterministic evaluation: argmax codes, hard reconstruction, and the
    /// dataset-mean code probabilities.
    pub fn evaluate(&self, images: &[Image], lambda: f32) -> Result<DvaeLoss> {
        let k = self.config.codebook_size;
        let mut sq = 0.0f64;
        let mut count = 0usize;
        let mut probs = vec![0.0f64; k];
        let mut cells = 0usize;
        for chunk in images.chunks(8) {
            let refs: Vec<&Image> = chunk.iter().collect();
            let batch = images_to_tensor(&refs)?;
            let s = batch.shape().to_vec();
            let mut g = Graph::inference(&self.store);
            let x = g.input(batch.clone());
            let logits = self.encode(&mut g, x)?;
            let rows = self.logits_rows(&mut g, logits)?;
            let (weights, _) = quantize_gumbel::<NnRng>(&mut g, rows, 1.0, None, true)?;
            let recon = self.decode(&mut g, weights, s[0], s[2] / DOWNSAMPLE, s[3] / DOWNSAMPLE)?;
            for (a, b) in g.value(recon).data().iter().zip(batch.data()) {
                sq += (*a as f64 - *b as f64).powi(2);
            }
            count += batch.numel();
            let p = g.softmax(rows);
            for row in g.value(p).data().chunks(k) {
                for (acc, &v) in probs.iter_mut().zip(row) {
                    *acc += v as f64;
                }
                cells += 1;
            }
        }
        let mean_p: Vec<f32> = probs.iter().map(|&v| (v / cells as f64) as f32).collect();
        let mut out = dvae_loss(&Tensor::zeros(&[1]), &Tensor::zeros(&[1]), &mean_p, lambda)?;
        out.mse = sq / count as f64;
        out.total = out.mse + lambda as f64 * out.perplexity_loss;
        Ok(out)
    }

    /// Trains with soft Gumbel-softmax relaxation and an annealed temperature.
    pub fn train(&mut self, images: &[Image], cfg: &DvaeTrainConfig) -> Result<Vec<EpochStats>> {
        if images.is_empty() {
            return Err(CoreError::invalid("train_tokenizer", "empty corpus"));
        }
        if cfg.batch_size == 0 {
            return Err(CoreError::invalid("train_tokenizer", "batch size must be positive"));
        }
        let mut rng = dit_nn::seeded_rng(cfg.seed);
        let per_epoch = images.len().div_ceil(cfg.batch_size);
        let total = (cfg.epochs * per_epoch) as u64;
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() });
        let mut history = Vec::with_capacity(cfg.epochs);
        let mut step = 0u64;
        let mut order: Vec<usize> = (0..images.len()).collect();
        for epoch in 0..cfg.epochs {
            shuffle(&mut order, &mut rng);
            let (mut mse_sum, mut ppl_sum) = (0.0, 0.0);
            let mut tau = 1.0;
            for chunk in order.chunks(cfg.batch_size) {
                let refs: Vec<&Image> = chunk.iter().map(|&i| &images[i]).collect();
                let batch = images_to_tensor(&refs)?;
                tau = temperature_at(step, total);
                let grads = {
                    let mut g = Graph::with_params(&self.store);
                    let (loss, mse, ppl) = self.loss_graph(&mut g, &batch, tau, cfg.lambda, Some(&mut rng))?;
                    if !g.scalar_f64(loss)?.is_finite() {
                        return Err(dit_nn::NnError::NonFinite("dvae loss").into());
                    }
                    mse_sum += g.scalar_f64(mse)?;
                    ppl_sum += g.scalar_f64(ppl)?;
                    g.backward(loss)?
                };
                self.store.zero_grad();
                grads.accumulate(&mut self.store);
                opt.step(&mut self.store, cfg.lr);
                step += 1;
            }
            let stats = EpochStats {
                epoch,
                mse: mse_sum / per_epoch as f64,
                perplexity_loss: ppl_sum / per_epoch as f64,
                temperature: tau,
            };
            log::info!(
                "dvae epoch {epoch}: mse {:.5} perplexity_loss {:.4} tau {:.3e}",
                stats.mse,
                stats.perplexity_loss,
                stats.temperature
            );
            history.push(stats);
        }
        self.loaded = true;
        Ok(history)
    }

    /// Argmax codes for a batch of same-sized images.
    pub fn tokenize_batch(&self, images: &[&Image]) -> Result<Vec<TokenMap>> {
        if !self.loaded {
            return Err(CoreError::NotLoaded { what: "tokenizer" });
        }
        let batch = images_to_tensor(images)?;
        let s = batch.shape().to_vec();
        self.check_dims(&s)?;
        let mut g = Graph::inference(&self.store);
        let x = g.input(batch);
        let logits = self.encode(&mut g, x)?;
        let rows = self.logits_rows(&mut g, logits)?;
        let idx = g.value(rows).argmax_rows();
        let (gh, gw) = (s[2] / DOWNSAMPLE, s[3] / DOWNSAMPLE);
        Ok(idx
            .chunks(gh * gw)
            .map(|c| TokenMap { grid_h: gh, grid_w: gw, indices: c.to_vec() })
            .collect())
    }

    pub fn tokenize(&self, img: &Image) -> Result<TokenMap> {
        Ok(self.tokenize_batch(&[img])?.remove(0))
    }

    /// Decodes a token map to pixel intensities in `[0, 255]`.
    pub fn decode_tokens(&self, tokens: &TokenMap) -> Result<Image> {
        let k = self.config.codebook_size;
        let n = tokens.grid_h * tokens.grid_w;
        if tokens.indices.len() != n || tokens.indices.iter().any(|&i| i >= k) {
            return Err(CoreError::invalid("decode_tokens", "token map does not fit the codebook"));
        }
        let mut onehot = vec![0.0f32; n * k];
        for (r, &i) in tokens.indices.iter().enumerate() {
            onehot[r * k + i] = 1.0;
        }
        let mut g = Graph::inference(&self.store);
        let w = g.input(Tensor::new(&[n, k], onehot)?);
        let out = self.decode(&mut g, w, 1, tokens.grid_h, tokens.grid_w)?;
        let (h, wd) = (tokens.grid_h * DOWNSAMPLE, tokens.grid_w * DOWNSAMPLE);
        let pixels: Vec<f32> = g.value(out).data().iter().map(|v| (v * 255.0).clamp(0.0, 255.0)).collect();
        Image::from_chw(wd, h, self.config.in_channels, &pixels)
    }

    /// Tokenize then decode.
    pub fn reconstruct(&self, img: &Image) -> Result<Image> {
        self.decode_tokens(&self.tokenize(img)?)
    }

    /// Writes `<path>` (weights) and `<path>.json` (config).
    pub fn save(&self, path: &Path) -> Result<()> {
        self.store.save(path)?;
        std::fs::write(config_path(path), serde_json::to_vec_pretty(&self.config)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let config: DvaeConfig = serde_json::from_slice(&std::fs::read(config_path(path))?)?;
        let mut model = Self::new(config, 0)?;
        model.store.load_strict(path)?;
        model.loaded = true;
        Ok(model)
    }
}

pub(crate) fn config_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

/// Fisher-Yates shuffle driven by the workspace generator.
pub(crate) fn shuffle<T, R: Rng + ?Sized>(items: &mut [T], rng: &mut R) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}
