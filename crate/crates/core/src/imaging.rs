//! Raster images, resampling, augmentation, binarization and patch tiling.

use std::path::Path;

use image::{DynamicImage, GrayImage, RgbImage};
use rand::Rng;

use crate::error::{CoreError, Result};

pub const DEFAULT_MEAN: f32 = 0.5;
pub const DEFAULT_STD: f32 = 0.5;
pub const DEFAULT_CROP_AREA: (f32, f32) = (0.7, 1.0);
pub const DEFAULT_CROP_ASPECT: (f32, f32) = (3.0 / 4.0, 4.0 / 3.0);
pub const DEFAULT_BINARIZE_WINDOW: usize = 31;
pub const DEFAULT_BINARIZE_OFFSET: f32 = 10.0;

/// Channel-interleaved raster. Values are raw intensities in `[0, 255]`
/// until [`normalize`] maps them to floats around zero.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(CoreError::invalid("Image", format!("zero dimension {width}x{height}")));
        }
        if channels != 1 && channels != 3 {
            return Err(CoreError::invalid("Image", format!("{channels} channels")));
        }
        if data.len() != width * height * channels {
            return Err(CoreError::invalid(
                "Image",
                format!("{} values for {width}x{height}x{channels}", data.len()),
            ));
        }
        Ok(Self { width, height, channels, data })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f32) -> Self {
        Self::new(width, height, channels, vec![value; width * height * channels]).expect("valid dims")
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f32) {
        let i = (y * self.width + x) * self.channels + c;
        self.data[i] = v;
    }

    /// Planar `[C, H, W]` copy of the pixel data.
    pub fn to_chw(&self) -> Vec<f32> {
        let plane = self.width * self.height;
        let mut out = vec![0.0; plane * self.channels];
        for (i, px) in self.data.chunks(self.channels).enumerate() {
            for (c, &v) in px.iter().enumerate() {
                out[c * plane + i] = v;
            }
        }
        out
    }

    pub fn from_chw(width: usize, height: usize, channels: usize, planar: &[f32]) -> Result<Self> {
        let plane = width * height;
        if planar.len() != plane * channels {
            return Err(CoreError::invalid("from_chw", "length mismatch"));
        }
        let mut data = vec![0.0; planar.len()];
        for c in 0..channels {
            for i in 0..plane {
                data[i * channels + c] = planar[c * plane + i];
            }
        }
        Self::new(width, height, channels, data)
    }

    pub fn crop(&self, r: CropRect) -> Result<Image> {
        if r.w == 0 || r.h == 0 || r.x + r.w > self.width || r.y + r.h > self.height {
            return Err(CoreError::invalid(
                "crop",
                format!("{r:?} outside {}x{}", self.width, self.height),
            ));
        }
        let mut data = Vec::with_capacity(r.w * r.h * self.channels);
        for y in r.y..r.y + r.h {
            let start = (y * self.width + r.x) * self.channels;
            data.extend_from_slice(&self.data[start..start + r.w * self.channels]);
        }
        Image::new(r.w, r.h, self.channels, data)
    }

    /// Mean over channels, yielding a single-channel image.
    pub fn to_gray(&self) -> Image {
        if self.channels == 1 {
            return self.clone();
        }
        let data = self
            .data
            .chunks(self.channels)
            .map(|px| px.iter().sum::<f32>() / self.channels as f32)
            .collect();
        Image::new(self.width, self.height, 1, data).expect("same dims")
    }

    /// Clamps and rounds to 8-bit and writes a PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().map(|&v| v.round().clamp(0.0, 255.0) as u8).collect();
        let (w, h) = (self.width as u32, self.height as u32);
        let dynimg = match self.channels {
            1 => DynamicImage::ImageLuma8(GrayImage::from_raw(w, h, bytes).expect("sized")),
            _ => DynamicImage::ImageRgb8(RgbImage::from_raw(w, h, bytes).expect("sized")),
        };
        dynimg
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| CoreError::Decode { path: path.to_owned(), msg: e.to_string() })
    }
}

/// Decodes PNG (8-bit gray or RGB) and binary PGM files.
pub fn load_image(path: &Path) -> Result<Image> {
    let decode_err = |msg: String| CoreError::Decode { path: path.to_owned(), msg };
    let reader = image::ImageReader::open(path)?
        .with_guessed_format()
        .map_err(|e| decode_err(e.to_string()))?;
    let img = reader.decode().map_err(|e| decode_err(e.to_string()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w == 0 || h == 0 {
        return Err(decode_err("zero-dimension image".into()));
    }
    let gray = matches!(
        img,
        DynamicImage::ImageLuma8(_) | DynamicImage::ImageLumaA8(_) | DynamicImage::ImageLuma16(_)
    );
    if gray {
        let data = img.to_luma8().into_raw().into_iter().map(f32::from).collect();
        Image::new(w, h, 1, data)
    } else {
        let data = img.to_rgb8().into_raw().into_iter().map(f32::from).collect();
        Image::new(w, h, 3, data)
    }
}

/// Source taps for one output axis, half-pixel centers, edges clamped.
fn axis_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f32)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let frac = if i1 == i0 { 0.0 } else { (src - i0 as f64) as f32 };
            (i0, i1, frac)
        })
        .collect()
}

/// Bilinear resampling with align-corners-false geometry.
pub fn resize(img: &Image, w: usize, h: usize) -> Result<Image> {
    if w == 0 || h == 0 {
        return Err(CoreError::invalid("resize", format!("target {w}x{h}")));
    }
    if w == img.width && h == img.height {
        return Ok(img.clone());
    }
    let xs = axis_taps(img.width, w);
    let ys = axis_taps(img.height, h);
    let c = img.channels;
    let mut data = vec![0.0; w * h * c];
    for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
            for ch in 0..c {
                let top = img.at(x0, y0, ch) * (1.0 - fx) + img.at(x1, y0, ch) * fx;
                let bot = img.at(x0, y1, ch) * (1.0 - fx) + img.at(x1, y1, ch) * fx;
                data[(oy * w + ox) * c + ch] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Image::new(w, h, c, data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropRect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

/// Samples a crop with area fraction in `area` and aspect (w/h) in `aspect`,
/// retrying ten times before falling back to a center crop.
pub fn sample_crop_rect<R: Rng + ?Sized>(
    width: usize,
    height: usize,
    rng: &mut R,
    area: (f32, f32),
    aspect: (f32, f32),
) -> Result<CropRect> {
    if !(area.0 > 0.0 && area.0 <= area.1 && area.1 <= 1.0) {
        return Err(CoreError::invalid("random_resized_crop", format!("area range {area:?}")));
    }
    if !(aspect.0 > 0.0 && aspect.0 <= aspect.1) {
        return Err(CoreError::invalid("random_resized_crop", format!("aspect range {aspect:?}")));
    }
    let total = (width * height) as f64;
    let (log_lo, log_hi) = ((aspect.0 as f64).ln(), (aspect.1 as f64).ln());
    for _ in 0..10 {
        let target = total * rng.random_range(area.0 as f64..=area.1 as f64);
        let ratio = rng.random_range(log_lo..=log_hi).exp();
        let w = (target * ratio).sqrt().round() as usize;
        let h = (target / ratio).sqrt().round() as usize;
        if w > 0 && h > 0 && w <= width && h <= height {
            let y = rng.random_range(0..=height - h);
            let x = rng.random_range(0..=width - w);
            let rect = CropRect { x, y, w, h };
            log::debug!("crop rect {rect:?}");
            return Ok(rect);
        }
    }
    let in_ratio = width as f64 / height as f64;
    let (w, h) = if in_ratio < aspect.0 as f64 {
        (width, ((width as f64 / aspect.0 as f64).round() as usize).clamp(1, height))
    } else if in_ratio > aspect.1 as f64 {
        (((height as f64 * aspect.1 as f64).round() as usize).clamp(1, width), height)
    } else {
        (width, height)
    };
    let rect = CropRect { x: (width - w) / 2, y: (height - h) / 2, w, h };
    log::debug!("crop rect {rect:?} (center fallback)");
    Ok(rect)
}

pub fn random_resized_crop<R: Rng + ?Sized>(
    img: &Image,
    rng: &mut R,
    area: (f32, f32),
    aspect: (f32, f32),
    out: usize,
) -> Result<Image> {
    let rect = sample_crop_rect(img.width, img.height, rng, area, aspect)?;
    resize(&img.crop(rect)?, out, out)
}

pub const MULTISCALE_SHORT_SIDES: [usize; 11] = [480, 512, 544, 576, 608, 640, 672, 704, 736, 768, 800];
pub const MULTISCALE_MAX_SIDE: usize = 1333;

/// Output size for a requested short side, shrunk if the long side would exceed 1333.
pub fn multiscale_target_size(width: usize, height: usize, short: usize) -> (usize, usize) {
    scaled_size(width, height, short, MULTISCALE_MAX_SIDE)
}

fn scaled_size(width: usize, height: usize, short: usize, max_side: usize) -> (usize, usize) {
    let (w, h) = (width as f64, height as f64);
    let mut scale = short as f64 / w.min(h);
    if w.max(h) * scale > max_side as f64 {
        scale = max_side as f64 / w.max(h);
    }
    (((w * scale).round() as usize).max(1), ((h * scale).round() as usize).max(1))
}

/// A sampled multi-scale transform: optional crop, then resize.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MultiscalePlan {
    pub crop: Option<CropRect>,
    pub out_w: usize,
    pub out_h: usize,
}

impl MultiscalePlan {
    pub fn sample<R: Rng + ?Sized>(width: usize, height: usize, rng: &mut R) -> Self {
        Self::sample_with(width, height, &MULTISCALE_SHORT_SIDES, MULTISCALE_MAX_SIDE, rng)
    }

    /// Like [`MultiscalePlan::sample`] with a custom short-side list and long-side cap.
    pub fn sample_with<R: Rng + ?Sized>(
        width: usize,
        height: usize,
        short_sides: &[usize],
        max_side: usize,
        rng: &mut R,
    ) -> Self {
        let crop = if rng.random_bool(0.5) {
            let w = rng.random_range(width.div_ceil(2)..=width);
            let h = rng.random_range(height.div_ceil(2)..=height);
            let x = rng.random_range(0..=width - w);
            let y = rng.random_range(0..=height - h);
            Some(CropRect { x, y, w, h })
        } else {
            None
        };
        let (cw, ch) = crop.map_or((width, height), |r| (r.w, r.h));
        let short = short_sides[rng.random_range(0..short_sides.len())];
        let (out_w, out_h) = scaled_size(cw, ch, short, max_side);
        Self { crop, out_w, out_h }
    }

    pub fn apply(&self, img: &Image) -> Result<Image> {
        let src = match self.crop {
            Some(r) => img.crop(r)?,
            None => img.clone(),
        };
        resize(&src, self.out_w, self.out_h)
    }

    /// Maps an `(x, y, w, h)` box through the transform; `None` if it leaves the crop.
    pub fn map_box(&self, src_w: usize, src_h: usize, b: [f32; 4]) -> Option<[f32; 4]> {
        let (ox, oy, cw, ch) = self.crop.map_or((0, 0, src_w, src_h), |r| (r.x, r.y, r.w, r.h));
        let x0 = (b[0] - ox as f32).max(0.0);
        let y0 = (b[1] - oy as f32).max(0.0);
        let x1 = (b[0] + b[2] - ox as f32).min(cw as f32);
        let y1 = (b[1] + b[3] - oy as f32).min(ch as f32);
        if x1 <= x0 || y1 <= y0 {
            return None;
        }
        let sx = self.out_w as f32 / cw as f32;
        let sy = self.out_h as f32 / ch as f32;
        Some([x0 * sx, y0 * sy, (x1 - x0) * sx, (y1 - y0) * sy])
    }
}

pub fn multiscale_resize<R: Rng + ?Sized>(img: &Image, rng: &mut R) -> Result<Image> {
    MultiscalePlan::sample(img.width, img.height, rng).apply(img)
}

/// Normalized 1-D Gaussian taps, with sigma derived from the window the way
/// OpenCV does when none is given.
fn gaussian_kernel(window: usize) -> Vec<f64> {
    let sigma = 0.3 * ((window as f64 - 1.0) * 0.5 - 1.0) + 0.8;
    let half = (window / 2) as f64;
    let raw: Vec<f64> = (0..window)
        .map(|i| {
            let d = i as f64 - half;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Local-threshold binarization: a pixel turns white (255) when it exceeds the
/// Gaussian-weighted mean of its neighborhood minus `offset`.
pub fn adaptive_binarize(img: &Image, window: usize, offset: f32) -> Result<Image> {
    if img.channels != 1 {
        return Err(CoreError::invalid("adaptive_binarize", format!("{} channels, need 1", img.channels)));
    }
    if window < 3 || window % 2 == 0 {
        return Err(CoreError::invalid("adaptive_binarize", format!("window {window} must be odd and >= 3")));
    }
    let (w, h) = (img.width, img.height);
    let k = gaussian_kernel(window);
    let r = (window / 2) as isize;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut rows = vec![0.0f64; w * h];
    for y in 0..h {
        for x in 0..w {
            rows[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, &kv)| kv * img.data[y * w + clamp(x as isize + i as isize - r, w)] as f64)
                .sum();
        }
    }
    let mut data = vec![0.0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            let mean: f64 = k
                .iter()
                .enumerate()
                .map(|(i, &kv)| kv * rows[clamp(y as isize + i as isize - r, h) * w + x])
                .sum();
            let v = img.data[y * w + x] as f64;
            data[y * w + x] = if v > mean - offset as f64 { 255.0 } else { 0.0 };
        }
    }
    Image::new(w, h, 1, data)
}

/// Non-overlapping `P×P` tiles in row-major order. Each patch is flattened
/// row by row with channels interleaved.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSequence {
    pub patch_size: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub channels: usize,
    /// `grid_h * grid_w` rows of `patch_dim()` values.
    pub patches: Vec<f32>,
}

impl PatchSequence {
    pub fn len(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn patch(&self, i: usize) -> &[f32] {
        let d = self.patch_dim();
        &self.patches[i * d..(i + 1) * d]
    }
}

pub fn patchify(img: &Image, p: usize) -> Result<PatchSequence> {
    if p == 0 || img.width % p != 0 || img.height % p != 0 {
        return Err(CoreError::invalid(
            "patchify",
            format!("{}x{} not divisible by patch size {p}", img.width, img.height),
        ));
    }
    let (gh, gw, c) = (img.height / p, img.width / p, img.channels);
    let mut patches = Vec::with_capacity(img.data.len());
    for gy in 0..gh {
        for gx in 0..gw {
            for y in gy * p..(gy + 1) * p {
                let start = (y * img.width + gx * p) * c;
                patches.extend_from_slice(&img.data[start..start + p * c]);
            }
        }
    }
    Ok(PatchSequence { patch_size: p, grid_h: gh, grid_w: gw, channels: c, patches })
}

pub fn unpatchify(seq: &PatchSequence) -> Result<Image> {
    let (p, c) = (seq.patch_size, seq.channels);
    let (w, h) = (seq.grid_w * p, seq.grid_h * p);
    if seq.patches.len() != w * h * c {
        return Err(CoreError::invalid("unpatchify", "patch buffer length mismatch"));
    }
    let mut data = vec![0.0; w * h * c];
    let mut src = seq.patches.chunks(p * c);
    for gy in 0..seq.grid_h {
        for gx in 0..seq.grid_w {
            for y in gy * p..(gy + 1) * p {
                let start = (y * w + gx * p) * c;
                data[start..start + p * c].copy_from_slice(src.next().expect("sized"));
            }
        }
    }
    Image::new(w, h, c, data)
}

/// `(pixel / 255 - mean) / std` per channel.
pub fn normalize(img: &Image, mean: &[f32], std: &[f32]) -> Result<Image> {
    if mean.len() != img.channels || std.len() != img.channels {
        return Err(CoreError::invalid("normalize", "statistics must match channel count"));
    }
    if let Some(s) = std.iter().find(|&&s| s <= 0.0 || !s.is_finite()) {
        return Err(CoreError::invalid("normalize", format!("std {s} must be positive")));
    }
    let c = img.channels;
    let data = img
        .data
        .iter()
        .enumerate()
        .map(|(i, &v)| (v / 255.0 - mean[i % c]) / std[i % c])
        .collect();
    Image::new(img.width, img.height, c, data)
}

pub fn normalize_default(img: &Image) -> Result<Image> {
    normalize(img, &vec![DEFAULT_MEAN; img.channels], &vec![DEFAULT_STD; img.channels])
}

/// Pads with `fill` so both sides become multiples of `m`, splitting the
/// padding evenly. Returns the padded image and the `(x, y)` offset of the
/// original content.
pub fn pad_to_multiple(img: &Image, m: usize, fill: f32) -> (Image, (usize, usize)) {
    let w = img.width.div_ceil(m) * m;
    let h = img.height.div_ceil(m) * m;
    if w == img.width && h == img.height {
        return (img.clone(), (0, 0));
    }
    let (ox, oy) = ((w - img.width) / 2, (h - img.height) / 2);
    let c = img.channels;
    let mut out = Image::filled(w, h, c, fill);
    for y in 0..img.height {
        let src = &img.data[y * img.width * c..(y + 1) * img.width * c];
        let start = ((y + oy) * w + ox) * c;
        out.data[start..start + img.width * c].copy_from_slice(src);
    }
    (out, (ox, oy))
}
