//! FPN adapter over encoder taps, anchors, a single-stage detection head,
//! box coding, NMS and the detection fine-tuning loop.

use std::path::Path;

use dit_nn::layers::{ChannelNorm, Conv2d, ConvTranspose2x2};
use dit_nn::{checkpoint, AdamW, AdamWConfig, Graph, LrSchedule, ParamStore, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::coco::{CocoAnnotation, Detection};
use crate::dvae::{config_path, shuffle};
use crate::error::{CoreError, Result};
use crate::imaging::{
    adaptive_binarize, normalize_default, pad_to_multiple, patchify, Image, MultiscalePlan, DEFAULT_BINARIZE_OFFSET,
    DEFAULT_BINARIZE_WINDOW,
};
use crate::metrics::{iou, score_order};
use crate::mim::LossRecord;
use crate::synthdoc::{CorpusItem, BACKGROUND};
use crate::vit::{stack_patches, Vit, VitConfig};

/// Strides of the four adapter outputs.
pub const PYRAMID_STRIDES: [usize; 4] = [4, 8, 16, 32];
/// Stride of the extra level obtained by pooling the stride-32 map.
pub const EXTRA_STRIDE: usize = 64;
pub const NUM_LEVELS: usize = 5;
pub const DEFAULT_RATIOS: [f32; 3] = [0.5, 1.0, 2.0];
pub const POS_IOU: f64 = 0.5;
pub const NEG_IOU: f64 = 0.4;
pub const NMS_IOU: f64 = 0.5;
pub const SMOOTH_L1_BETA: f32 = 1.0 / 9.0;
pub const DEFAULT_SCORE_THR: f32 = 0.05;
/// Probability of background the classifier starts with.
pub const BACKGROUND_PRIOR: f32 = 0.99;
/// Largest log-scale delta applied when decoding.
pub const MAX_LOG_SCALE: f32 = 4.135_166_6; // ln(1000 / 16)
/// Candidates kept per image before NMS.
pub const PRE_NMS_TOP_K: usize = 1000;
/// Operating point for F1-style evaluation of detections.
pub const EVAL_SCORE_THR: f32 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FpnConfig {
    pub channels: usize,
    /// Normalization and GELU between the two transposed convolutions of the ×4 branch.
    pub inner_norm: bool,
}

impl Default for FpnConfig {
    fn default() -> Self {
        Self { channels: 256, inner_norm: true }
    }
}

/// Four resamplers plus 1×1 projections to a common width.
#[derive(Clone, Debug)]
pub struct Fpn {
    pub config: FpnConfig,
    up4a: ConvTranspose2x2,
    up4_norm: Option<ChannelNorm>,
    up4b: ConvTranspose2x2,
    up2: ConvTranspose2x2,
    proj: Vec<Conv2d>,
}

impl Fpn {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, hidden: usize, config: FpnConfig, rng: &mut R) -> Self {
        let up4a = ConvTranspose2x2::new(store, "fpn/up4.0", hidden, hidden, rng);
        let up4_norm = config.inner_norm.then(|| ChannelNorm::new(store, "fpn/up4.norm", hidden));
        let up4b = ConvTranspose2x2::new(store, "fpn/up4.1", hidden, hidden, rng);
        let up2 = ConvTranspose2x2::new(store, "fpn/up2", hidden, hidden, rng);
        let proj = (0..4)
            .map(|i| Conv2d::new(store, &format!("fpn/proj.{i}"), hidden, config.channels, 1, 1, 0, rng))
            .collect();
        Self { config, up4a, up4_norm, up4b, up2, proj }
    }

    /// `taps` are four `[B, gh*gw, h]` states; returns maps at strides 4, 8, 16, 32.
    pub fn forward(&self, g: &mut Graph, taps: &[Var], grid: (usize, usize)) -> Result<Vec<Var>> {
        if taps.len() != 4 {
            return Err(CoreError::invalid("fpn_adapt", format!("{} taps, expected 4", taps.len())));
        }
        let first = g.shape(taps[0]).to_vec();
        let mut maps = Vec::with_capacity(4);
        for &t in taps {
            let s = g.shape(t).to_vec();
            if s.len() != 3 || s != first || s[1] != grid.0 * grid.1 {
                return Err(CoreError::invalid(
                    "fpn_adapt",
                    format!("tap {s:?} does not fit a {}x{} grid like {first:?}", grid.0, grid.1),
                ));
            }
            let x = g.reshape(t, &[s[0], grid.0, grid.1, s[2]])?;
            maps.push(g.permute(x, &[0, 3, 1, 2])?);
        }
        let mut x4 = self.up4a.forward(g, maps[0])?;
        if let Some(n) = &self.up4_norm {
            x4 = n.forward(g, x4)?;
            x4 = g.gelu(x4);
        }
        let x4 = self.up4b.forward(g, x4)?;
        let x2 = self.up2.forward(g, maps[1])?;
        let x05 = g.max_pool2x2(maps[3])?;
        [x4, x2, maps[2], x05]
            .into_iter()
            .zip(&self.proj)
            .map(|(x, p)| Ok(p.forward(g, x)?))
            .collect()
    }
}

/// Appends the stride-64 level by max-pooling the last map.
pub fn extend_pyramid(g: &mut Graph, mut maps: Vec<Var>) -> Result<Vec<Var>> {
    let last = *maps.last().ok_or_else(|| CoreError::invalid("extend_pyramid", "empty pyramid"))?;
    maps.push(g.max_pool2x2(last)?);
    Ok(maps)
}

pub fn level_stride(level: usize) -> usize {
    4 << level
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnchorPreset {
    Layout,
    Text,
}

impl AnchorPreset {
    pub fn sizes(self) -> [f32; NUM_LEVELS] {
        match self {
            AnchorPreset::Layout => [32.0, 64.0, 128.0, 256.0, 512.0],
            AnchorPreset::Text => [4.0, 8.0, 16.0, 32.0, 64.0],
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "layout" => Some(AnchorPreset::Layout),
            "text" => Some(AnchorPreset::Text),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnchorConfig {
    /// One size per level, strides 4 to 64.
    pub sizes: [f32; NUM_LEVELS],
    /// Height over width.
    pub ratios: Vec<f32>,
}

impl AnchorConfig {
    pub fn preset(p: AnchorPreset) -> Self {
        Self { sizes: p.sizes(), ratios: DEFAULT_RATIOS.to_vec() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sizes.windows(2).any(|w| w[0] >= w[1]) || self.sizes[0] <= 0.0 {
            return Err(CoreError::invalid("anchors", format!("sizes {:?} not strictly increasing", self.sizes)));
        }
        if self.ratios.is_empty() || self.ratios.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(CoreError::invalid("anchors", format!("bad ratios {:?}", self.ratios)));
        }
        Ok(())
    }

    pub fn per_cell(&self) -> usize {
        self.ratios.len()
    }
}

/// Anchors of one level for an image, cell-major (row by row) then ratio.
pub fn gen_anchors(level: usize, img_w: usize, img_h: usize, cfg: &AnchorConfig) -> Vec<[f32; 4]> {
    let stride = level_stride(level);
    let (gh, gw) = (img_h / stride, img_w / stride);
    let size = cfg.sizes[level.min(NUM_LEVELS - 1)];
    let mut out = Vec::with_capacity(gh * gw * cfg.ratios.len());
    for r in 0..gh {
        for c in 0..gw {
            let cx = (c as f32 + 0.5) * stride as f32;
            let cy = (r as f32 + 0.5) * stride as f32;
            for &ratio in &cfg.ratios {
                let w = size / ratio.sqrt();
                let h = size * ratio.sqrt();
                out.push([cx - w / 2.0, cy - h / 2.0, w, h]);
            }
        }
    }
    out
}

/// All anchors for an image, level by level.
pub fn all_anchors(img_w: usize, img_h: usize, cfg: &AnchorConfig) -> Vec<[f32; 4]> {
    (0..NUM_LEVELS).flat_map(|l| gen_anchors(l, img_w, img_h, cfg)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AnchorLabel {
    /// `class` is 1-based (0 is background); `gt` indexes the gt list.
    Positive { class: usize, gt: usize },
    Background,
    Ignore,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AnchorTarget {
    pub label: AnchorLabel,
    /// Regression target; zero unless positive.
    pub deltas: [f32; 4],
}

fn center(b: [f32; 4]) -> (f32, f32) {
    (b[0] + b[2] / 2.0, b[1] + b[3] / 2.0)
}

/// `(Δx/wa, Δy/ha, ln(wg/wa), ln(hg/ha))` of centers and sizes.
pub fn encode_box(anchor: [f32; 4], gt: [f32; 4]) -> [f32; 4] {
    let (ax, ay) = center(anchor);
    let (gx, gy) = center(gt);
    [(gx - ax) / anchor[2], (gy - ay) / anchor[3], (gt[2] / anchor[2]).ln(), (gt[3] / anchor[3]).ln()]
}

/// Labels every anchor against `gts` (`(box, 1-based class)`).
pub fn assign_targets(anchors: &[[f32; 4]], gts: &[([f32; 4], usize)], pos_iou: f64, neg_iou: f64) -> Result<Vec<AnchorTarget>> {
    if !(0.0..=1.0).contains(&neg_iou) || !(0.0..=1.0).contains(&pos_iou) || neg_iou > pos_iou {
        return Err(CoreError::invalid("assign_targets", format!("thresholds pos {pos_iou}, neg {neg_iou}")));
    }
    let mut best_for_gt = vec![(usize::MAX, 0.0f64); gts.len()];
    let mut out: Vec<AnchorTarget> = anchors
        .iter()
        .enumerate()
        .map(|(i, &a)| {
            let mut best: Option<(usize, f64)> = None;
            for (j, (g, _)) in gts.iter().enumerate() {
                let v = iou(a, *g);
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((j, v));
                }
                if v > best_for_gt[j].1 {
                    best_for_gt[j] = (i, v);
                }
            }
            let label = match best {
                Some((j, v)) if v >= pos_iou => AnchorLabel::Positive { class: gts[j].1, gt: j },
                Some((_, v)) if v >= neg_iou => AnchorLabel::Ignore,
                _ => AnchorLabel::Background,
            };
            AnchorTarget { label, deltas: [0.0; 4] }
        })
        .collect();
    for (j, &(i, v)) in best_for_gt.iter().enumerate() {
        if i != usize::MAX && v > 0.0 && !matches!(out[i].label, AnchorLabel::Positive { .. }) {
            out[i].label = AnchorLabel::Positive { class: gts[j].1, gt: j };
        }
    }
    for (t, &a) in out.iter_mut().zip(anchors) {
        if let AnchorLabel::Positive { gt, .. } = t.label {
            t.deltas = encode_box(a, gts[gt].0);
        }
    }
    Ok(out)
}

/// Inverse of [`encode_box`], clipped to `[0, img_w] × [0, img_h]`.
pub fn decode_boxes(anchors: &[[f32; 4]], deltas: &[[f32; 4]], img_w: f32, img_h: f32) -> Result<Vec<[f32; 4]>> {
    if anchors.len() != deltas.len() {
        return Err(CoreError::invalid("decode_boxes", format!("{} anchors, {} deltas", anchors.len(), deltas.len())));
    }
    anchors
        .iter()
        .zip(deltas)
        .map(|(&a, d)| {
            if d.iter().any(|v| !v.is_finite()) {
                return Err(CoreError::invalid("decode_boxes", format!("non-finite delta {d:?}")));
            }
            let (ax, ay) = center(a);
            let cx = ax + d[0] * a[2];
            let cy = ay + d[1] * a[3];
            let w = a[2] * d[2].min(MAX_LOG_SCALE).exp();
            let h = a[3] * d[3].min(MAX_LOG_SCALE).exp();
            let x0 = (cx - w / 2.0).clamp(0.0, img_w);
            let y0 = (cy - h / 2.0).clamp(0.0, img_h);
            let x1 = (cx + w / 2.0).clamp(0.0, img_w);
            let y1 = (cy + h / 2.0).clamp(0.0, img_h);
            Ok([x0, y0, x1 - x0, y1 - y0])
        })
        .collect()
}

/// Greedy per-category (and per-image) suppression; output is in descending
/// score order with ties kept in input order.
pub fn nms(dets: &[Detection], iou_thr: f64) -> Vec<Detection> {
    let scores: Vec<f32> = dets.iter().map(|d| d.score).collect();
    let mut kept: Vec<Detection> = Vec::new();
    for i in score_order(&scores) {
        let d = &dets[i];
        let clash = kept
            .iter()
            .any(|k| k.category_id == d.category_id && k.image_id == d.image_id && iou(k.bbox, d.bbox) >= iou_thr);
        if !clash {
            kept.push(d.clone());
        }
    }
    kept
}

/// Shared conv tower with per-anchor class and box outputs.
#[derive(Clone, Debug)]
pub struct DetHead {
    tower: Vec<Conv2d>,
    pub cls: Conv2d,
    pub reg: Conv2d,
    pub num_classes: usize,
    pub per_cell: usize,
}

/// Head outputs over all levels: `cls` is `[B, A, C+1]`, `reg` is `[B, A, 4]`.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    pub cls: Var,
    pub reg: Var,
}

impl DetHead {
    /// `num_classes` excludes background.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, channels: usize, num_classes: usize, per_cell: usize, rng: &mut R) -> Self {
        let tower = (0..2)
            .map(|i| Conv2d::new(store, &format!("det_head/tower.{i}"), channels, channels, 3, 1, 1, rng))
            .collect();
        let k = num_classes + 1;
        let cls = Conv2d::new(store, "det_head/cls", channels, per_cell * k, 1, 1, 0, rng);
        let reg = Conv2d::new(store, "det_head/reg", channels, per_cell * 4, 1, 1, 0, rng);
        for id in [cls.weight, reg.weight] {
            let shape = store.value(id).shape().to_vec();
            store.get_mut(id).value = Tensor::randn(&shape, 0.01, rng);
        }
        let prior = (BACKGROUND_PRIOR * num_classes as f32 / (1.0 - BACKGROUND_PRIOR)).ln();
        let bias = store.get_mut(cls.bias).value.data_mut();
        for a in 0..per_cell {
            bias[a * k] = prior;
        }
        Self { tower, cls, reg, num_classes, per_cell }
    }

    /// Runs every level of `maps` (each `[B, c, h, w]`) and concatenates.
    pub fn forward(&self, g: &mut Graph, maps: &[Var]) -> Result<HeadOutput> {
        let k = self.num_classes + 1;
        let mut cls = Vec::with_capacity(maps.len());
        let mut reg = Vec::with_capacity(maps.len());
        for &m in maps {
            let mut x = m;
            for conv in &self.tower {
                x = conv.forward(g, x)?;
                x = g.gelu(x);
            }
            let s = g.shape(x).to_vec();
            let n = s[2] * s[3] * self.per_cell;
            let c = self.cls.forward(g, x)?;
            let c = g.permute(c, &[0, 2, 3, 1])?;
            cls.push(g.reshape(c, &[s[0], n, k])?);
            let r = self.reg.forward(g, x)?;
            let r = g.permute(r, &[0, 2, 3, 1])?;
            reg.push(g.reshape(r, &[s[0], n, 4])?);
        }
        if maps.is_empty() {
            return Err(CoreError::invalid("det_head_forward", "empty pyramid"));
        }
        Ok(HeadOutput { cls: g.concat(&cls, 1)?, reg: g.concat(&reg, 1)? })
    }
}

/// Rows of the flattened `[B*A, ...]` outputs that enter the loss.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossTargets {
    pub cls_rows: Vec<usize>,
    pub cls_labels: Vec<usize>,
    pub box_rows: Vec<usize>,
    pub box_targets: Vec<[f32; 4]>,
}

/// Picks positives plus the `neg_ratio`× hardest background anchors of each
/// image, ranked by background cross-entropy under `cls` (`[B, A, C+1]` values).
pub fn select_targets(cls: &Tensor, targets: &[Vec<AnchorTarget>], neg_ratio: usize) -> Result<LossTargets> {
    let s = cls.shape();
    if s.len() != 3 || s[0] != targets.len() || targets.iter().any(|t| t.len() != s[1]) {
        return Err(CoreError::invalid("select_targets", format!("logits {s:?} for {} target lists", targets.len())));
    }
    let (a, k) = (s[1], s[2]);
    let mut out = LossTargets::default();
    for (b, t) in targets.iter().enumerate() {
        let mut negatives = Vec::new();
        let mut npos = 0;
        for (i, at) in t.iter().enumerate() {
            let row = b * a + i;
            match at.label {
                AnchorLabel::Positive { class, .. } => {
                    npos += 1;
                    out.cls_rows.push(row);
                    out.cls_labels.push(class);
                    out.box_rows.push(row);
                    out.box_targets.push(at.deltas);
                }
                AnchorLabel::Background => {
                    let logits = &cls.data()[row * k..(row + 1) * k];
                    let m = logits.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
                    let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f32>().ln();
                    negatives.push((row, lse - logits[0]));
                }
                AnchorLabel::Ignore => {}
            }
        }
        negatives.sort_by(|x, y| y.1.total_cmp(&x.1));
        for &(row, _) in negatives.iter().take(neg_ratio * npos.max(1)) {
            out.cls_rows.push(row);
            out.cls_labels.push(0);
        }
    }
    Ok(out)
}

pub struct DetLoss {
    pub total: Var,
    pub cls: Var,
    pub boxes: Option<Var>,
}

/// Cross-entropy over the selected rows plus smooth-L1 on positive deltas,
/// normalized by the number of positives.
pub fn detection_loss(g: &mut Graph, out: HeadOutput, t: &LossTargets) -> Result<DetLoss> {
    let cs = g.shape(out.cls).to_vec();
    let rs = g.shape(out.reg).to_vec();
    if t.cls_rows.is_empty() {
        return Err(CoreError::invalid("detection_loss", "no anchors selected"));
    }
    let cls_flat = g.reshape(out.cls, &[cs[0] * cs[1], cs[2]])?;
    let picked = g.gather_rows(cls_flat, &t.cls_rows)?;
    let cls = g.cross_entropy(picked, &t.cls_labels)?;
    if t.box_rows.is_empty() {
        return Ok(DetLoss { total: cls, cls, boxes: None });
    }
    let reg_flat = g.reshape(out.reg, &[rs[0] * rs[1], 4])?;
    let pos = g.gather_rows(reg_flat, &t.box_rows)?;
    let target = Tensor::new(&[t.box_rows.len(), 4], t.box_targets.iter().flatten().copied().collect())?;
    let boxes = g.smooth_l1(pos, target, SMOOTH_L1_BETA, t.box_rows.len() as f32)?;
    Ok(DetLoss { total: g.add(cls, boxes)?, cls, boxes: Some(boxes) })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorConfig {
    pub vit: VitConfig,
    pub fpn: FpnConfig,
    pub anchors: AnchorConfig,
    /// Category ids predicted, in class order (class `i + 1`).
    pub categories: Vec<u32>,
    /// Adaptive binarization before the encoder, in training and inference.
    #[serde(default)]
    pub binarize: bool,
}

/// Backbone, adapter and head sharing one parameter store.
pub struct Detector {
    pub config: DetectorConfig,
    pub store: ParamStore,
    pub vit: Vit,
    pub fpn: Fpn,
    pub head: DetHead,
    loaded: bool,
}

/// An image prepared for the network plus where its content sits.
struct Prepared {
    patches: crate::imaging::PatchSequence,
    width: usize,
    height: usize,
    offset: (usize, usize),
}

impl Detector {
    pub fn new(config: DetectorConfig, seed: u64) -> Result<Self> {
        config.anchors.validate()?;
        if config.categories.is_empty() {
            return Err(CoreError::invalid("detector", "no categories"));
        }
        let mut rng = dit_nn::seeded_rng(seed);
        let mut store = ParamStore::new();
        let vit = Vit::new(&mut store, config.vit.clone(), &mut rng)?;
        let fpn = Fpn::new(&mut store, config.vit.hidden, config.fpn.clone(), &mut rng);
        let head = DetHead::new(&mut store, config.fpn.channels, config.categories.len(), config.anchors.per_cell(), &mut rng);
        Ok(Self { config, store, vit, fpn, head, loaded: false })
    }

    pub fn is_loaded(&self) -> bool {
        self.loaded
    }

    pub fn mark_loaded(&mut self) {
        self.loaded = true;
    }

    /// Copies `vit/` weights from a pre-training checkpoint.
    pub fn load_backbone(&mut self, path: &Path) -> Result<()> {
        let tensors: Vec<_> = checkpoint::load(path)?.into_iter().filter(|(n, _)| n.starts_with("vit/")).collect();
        let n = self.store.load_tensors(&tensors)?;
        let expected = self.store.iter().filter(|(_, p)| p.name.starts_with("vit/")).count();
        if n != expected {
            return Err(CoreError::invalid("load_backbone", format!("{n} of {expected} encoder tensors in {}", path.display())));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.store.save(path)?;
        std::fs::write(config_path(path), serde_json::to_vec_pretty(&self.config)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let config: DetectorConfig = serde_json::from_slice(&std::fs::read(config_path(path))?)?;
        let mut model = Self::new(config, 0)?;
        model.store.load_strict(path)?;
        model.loaded = true;
        Ok(model)
    }

    pub fn class_of(&self, category_id: u32) -> Option<usize> {
        self.config.categories.iter().position(|&c| c == category_id).map(|i| i + 1)
    }

    /// Encoder, adapter (plus extra level) and head over `[B, N, D]` patches.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        patches: Var,
        grid: (usize, usize),
        training: bool,
        rng: &mut R,
    ) -> Result<HeadOutput> {
        let x = self.vit.embed(g, patches, grid.0, grid.1)?;
        let out = self.vit.encode(g, x, &self.config.vit.fpn_taps(), training, rng)?;
        let maps = self.fpn.forward(g, &out.taps, grid)?;
        let maps = extend_pyramid(g, maps)?;
        self.head.forward(g, &maps)
    }

    fn prepare(&self, img: &Image) -> Result<Prepared> {
        let gray = if img.channels == 1 { img.clone() } else { img.to_gray() };
        let gray = if self.config.binarize {
            adaptive_binarize(&gray, DEFAULT_BINARIZE_WINDOW, DEFAULT_BINARIZE_OFFSET)?
        } else {
            gray
        };
        let m = self.config.vit.patch_size.max(16);
        let (padded, offset) = pad_to_multiple(&gray, m, BACKGROUND);
        let patches = patchify(&normalize_default(&padded)?, self.config.vit.patch_size)?;
        Ok(Prepared { patches, width: padded.width, height: padded.height, offset })
    }

    /// Detections for one image, in original pixel coordinates (image id 0).
    pub fn detect(&self, img: &Image, score_thr: f32) -> Result<Vec<Detection>> {
        if !self.loaded {
            return Err(CoreError::NotLoaded { what: "detector" });
        }
        let p = self.prepare(img)?;
        let grid = (p.patches.grid_h, p.patches.grid_w);
        let anchors = all_anchors(p.width, p.height, &self.config.anchors);
        let (cls, reg) = {
            let mut g = Graph::inference(&self.store);
            let x = g.input(stack_patches(std::slice::from_ref(&p.patches))?);
            let mut rng = dit_nn::seeded_rng(0);
            let out = self.forward(&mut g, x, grid, false, &mut rng)?;
            (g.value(out.cls).clone(), g.value(out.reg).clone())
        };
        if cls.shape()[1] != anchors.len() {
            return Err(CoreError::invalid("detect", format!("{} anchors for {} outputs", anchors.len(), cls.shape()[1])));
        }
        let k = self.head.num_classes + 1;
        let mut cand: Vec<(usize, usize, f32)> = Vec::new();
        for (i, row) in cls.data().chunks(k).enumerate() {
            let m = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
            let z: f32 = row.iter().map(|v| (v - m).exp()).sum();
            for (c, &v) in row.iter().enumerate().skip(1) {
                let s = (v - m).exp() / z;
                if s >= score_thr && s > 0.0 {
                    cand.push((i, c, s));
                }
            }
        }
        let order = score_order(&cand.iter().map(|c| c.2).collect::<Vec<_>>());
        let cand: Vec<_> = order.into_iter().take(PRE_NMS_TOP_K).map(|i| cand[i]).collect();
        let picked: Vec<[f32; 4]> = cand.iter().map(|c| anchors[c.0]).collect();
        let deltas: Vec<[f32; 4]> = cand
            .iter()
            .map(|c| {
                let d = &reg.data()[c.0 * 4..c.0 * 4 + 4];
                [d[0], d[1], d[2], d[3]]
            })
            .collect();
        let boxes = decode_boxes(&picked, &deltas, p.width as f32, p.height as f32)?;
        let (ox, oy) = (p.offset.0 as f32, p.offset.1 as f32);
        let (iw, ih) = (img.width as f32, img.height as f32);
        let dets: Vec<Detection> = cand
            .iter()
            .zip(boxes)
            .filter_map(|(c, b)| {
                let x0 = (b[0] - ox).clamp(0.0, iw);
                let y0 = (b[1] - oy).clamp(0.0, ih);
                let x1 = (b[0] + b[2] - ox).clamp(0.0, iw);
                let y1 = (b[1] + b[3] - oy).clamp(0.0, ih);
                (x1 > x0 && y1 > y0).then(|| Detection {
                    image_id: 0,
                    category_id: self.config.categories[c.1 - 1],
                    bbox: [x0, y0, x1 - x0, y1 - y0],
                    score: c.2,
                })
            })
            .collect();
        Ok(nms(&dets, NMS_IOU))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetTrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub peak_lr: f32,
    pub warmup_steps: u64,
    pub weight_decay: f32,
    /// Short sides for random multi-scale resizing; empty disables it.
    pub short_sides: Vec<usize>,
    pub max_side: usize,
    pub neg_ratio: usize,
    pub seed: u64,
}

impl Default for DetTrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 2,
            peak_lr: 1e-4,
            warmup_steps: 100,
            weight_decay: 0.05,
            short_sides: Vec::new(),
            max_side: crate::imaging::MULTISCALE_MAX_SIDE,
            neg_ratio: 3,
            seed: 0,
        }
    }
}

fn place(img: &Image, w: usize, h: usize) -> Image {
    if (img.width, img.height) == (w, h) {
        return img.clone();
    }
    let mut out = Image::filled(w, h, 1, BACKGROUND);
    for y in 0..img.height {
        out.data[y * w..y * w + img.width].copy_from_slice(&img.data[y * img.width..(y + 1) * img.width]);
    }
    out
}

/// Fine-tunes the whole detector on annotated pages. Elements of categories
/// outside the detector's list are ignored.
pub fn train_detector(det: &mut Detector, items: &[CorpusItem], cfg: &DetTrainConfig) -> Result<Vec<LossRecord>> {
    if items.is_empty() || cfg.batch_size == 0 {
        return Err(CoreError::invalid("finetune_detect", "empty corpus or batch"));
    }
    let pages: Vec<(Image, Vec<([f32; 4], usize)>)> = items
        .iter()
        .map(|it| {
            let gray = if it.image.channels == 1 { it.image.clone() } else { it.image.to_gray() };
            let gray = if det.config.binarize {
                adaptive_binarize(&gray, DEFAULT_BINARIZE_WINDOW, DEFAULT_BINARIZE_OFFSET)?
            } else {
                gray
            };
            let gts = it.elements.iter().filter_map(|e| det.class_of(e.category.id()).map(|c| (e.bbox, c))).collect();
            Ok((gray, gts))
        })
        .collect::<Result<_>>()?;
    let schedule = LrSchedule::new(cfg.peak_lr, cfg.warmup_steps, cfg.steps)?;
    let mut opt = AdamW::new(AdamWConfig { weight_decay: cfg.weight_decay, ..AdamWConfig::default() });
    let mut rng = dit_nn::seeded_rng(cfg.seed);
    let patch = det.config.vit.patch_size;
    let align = patch.max(16);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut log = Vec::with_capacity(cfg.steps as usize);
    for step in 1..=cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if cursor == order.len() {
                order = (0..pages.len()).collect();
                shuffle(&mut order, &mut rng);
                cursor = 0;
            }
            let (img, gts) = &pages[order[cursor]];
            cursor += 1;
            if cfg.short_sides.is_empty() {
                batch.push((img.clone(), gts.clone()));
            } else {
                let plan = MultiscalePlan::sample_with(img.width, img.height, &cfg.short_sides, cfg.max_side, &mut rng);
                let moved = gts
                    .iter()
                    .filter_map(|(b, c)| plan.map_box(img.width, img.height, *b).map(|b| (b, *c)))
                    .collect();
                batch.push((plan.apply(img)?, moved));
            }
        }
        let w = batch.iter().map(|b| b.0.width).max().unwrap_or(0).div_ceil(align) * align;
        let h = batch.iter().map(|b| b.0.height).max().unwrap_or(0).div_ceil(align) * align;
        let anchors = all_anchors(w, h, &det.config.anchors);
        let mut seqs = Vec::with_capacity(batch.len());
        let mut targets = Vec::with_capacity(batch.len());
        for (img, gts) in &batch {
            seqs.push(patchify(&normalize_default(&place(img, w, h))?, patch)?);
            targets.push(assign_targets(&anchors, gts, POS_IOU, NEG_IOU)?);
        }
        let grid = (h / patch, w / patch);
        let input = stack_patches(&seqs)?;
        let lr = schedule.lr_at(step)?;
        let (loss, grads) = {
            let mut g = Graph::with_params(&det.store);
            let x = g.input(input);
            let out = det.forward(&mut g, x, grid, true, &mut rng)?;
            let sel = select_targets(g.value(out.cls), &targets, cfg.neg_ratio)?;
            let l = detection_loss(&mut g, out, &sel)?;
            let loss = g.scalar_f64(l.total)?;
            if !loss.is_finite() {
                return Err(dit_nn::NnError::NonFinite("detection loss").into());
            }
            (loss, g.backward(l.total)?)
        };
        det.store.zero_grad();
        grads.accumulate(&mut det.store);
        opt.step(&mut det.store, lr);
        log::debug!("detect step {step} lr {lr:.3e} loss {loss:.4}");
        log.push(LossRecord { step, lr, loss });
    }
    det.loaded = true;
    Ok(log)
}

/// Detections for every item, tagged with the item's image id.
pub fn predict_corpus(det: &Detector, items: &[CorpusItem], score_thr: f32) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    for it in items {
        out.extend(det.detect(&it.image, score_thr)?.into_iter().map(|d| Detection { image_id: it.image_id, ..d }));
    }
    Ok(out)
}

/// Ground-truth boxes of the given categories, numbered in order.
pub fn corpus_annotations(items: &[CorpusItem], categories: &[u32]) -> Vec<CocoAnnotation> {
    items
        .iter()
        .flat_map(|it| {
            it.elements
                .iter()
                .filter(|e| categories.contains(&e.category.id()))
                .map(|e| (it.image_id, e.category.id(), e.bbox))
        })
        .enumerate()
        .map(|(i, (image_id, category_id, bbox))| CocoAnnotation { id: i as u64 + 1, image_id, category_id, bbox })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stride_four_anchor_count() {
        let cfg = AnchorConfig::preset(AnchorPreset::Layout);
        let a = gen_anchors(0, 224, 224, &cfg);
        assert_eq!(a.len(), 56 * 56 * 3);
        let sq = a[1];
        assert_eq!((sq[2], sq[3]), (32.0, 32.0));
        assert_eq!(center(sq), (2.0, 2.0));
    }

    #[test]
    fn nms_chain_keeps_ends() {
        let d = |x: f32, w: f32, s: f32| Detection { image_id: 0, category_id: 4, bbox: [x, 0.0, w, 10.0], score: s };
        // B covers A and C, each half of it
        let a = d(0.0, 5.0, 0.9);
        let b = d(0.0, 10.0, 0.8);
        let c = d(5.0, 5.0, 0.7);
        assert_eq!(iou(a.bbox, b.bbox), 0.5);
        assert_eq!(iou(b.bbox, c.bbox), 0.5);
        assert_eq!(iou(a.bbox, c.bbox), 0.0);
        let kept = nms(&[c.clone(), a.clone(), b], 0.5);
        assert_eq!(kept, vec![a, c]);
    }

    #[test]
    fn bias_prior_gives_background() {
        let mut store = ParamStore::new();
        let mut rng = dit_nn::seeded_rng(0);
        let h = DetHead::new(&mut store, 4, 2, 3, &mut rng);
        let b = store.value(h.cls.bias).data();
        let p = b[0].exp() / (b[0].exp() + 2.0);
        assert!((p - BACKGROUND_PRIOR).abs() < 1e-5);
    }
}
