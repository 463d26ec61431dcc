//! Deterministic synthetic document pages with exact layout boxes.
//!
//! Pages are rendered from bars, grids and filled rectangles, so every box is
//! known to the pixel.

use std::fs;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::coco::{AnnotationFile, CocoAnnotation, CocoCategory, CocoImage};
use crate::error::{CoreError, Result};
use crate::imaging::{load_image, Image};

pub const NUM_TEMPLATES: usize = 16;
pub const BACKGROUND: f32 = 255.0;
pub const MIN_PAGE_SIDE: usize = 64;

pub const TEMPLATE_NAMES: [&str; NUM_TEMPLATES] = [
    "letter",
    "form",
    "email",
    "handwritten",
    "advertisement",
    "scientific_report",
    "scientific_publication",
    "specification",
    "file_folder",
    "news_article",
    "budget",
    "invoice",
    "presentation",
    "questionnaire",
    "resume",
    "memo",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Text = 1,
    Title = 2,
    List = 3,
    Table = 4,
    Figure = 5,
    Word = 6,
}

impl Category {
    pub const ALL: [Category; 6] = [
        Category::Text,
        Category::Title,
        Category::List,
        Category::Table,
        Category::Figure,
        Category::Word,
    ];

    pub fn id(self) -> u32 {
        self as u32
    }

    pub fn from_id(id: u32) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.id() == id)
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::Text => "text",
            Category::Title => "title",
            Category::List => "list",
            Category::Table => "table",
            Category::Figure => "figure",
            Category::Word => "word",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayoutElement {
    pub category: Category,
    /// `[x, y, w, h]` in pixels.
    pub bbox: [f32; 4],
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthDocument {
    pub image: Image,
    pub elements: Vec<LayoutElement>,
    pub class_id: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DocSpec {
    pub template: usize,
    pub width: usize,
    pub height: usize,
}

type Slot = (Category, [f32; 4]);

/// Slot layouts as page fractions `[x0, y0, x1, y1]`. Neighbouring slots keep
/// a gap so rendered elements never touch.
fn template_slots(template: usize) -> Vec<Slot> {
    use Category::*;
    let rows = |cat: Category, x0: f32, x1: f32, y0: f32, step: f32, h: f32, n: usize| -> Vec<Slot> {
        (0..n)
            .map(|i| {
                let y = y0 + step * i as f32;
                (cat, [x0, y, x1, y + h])
            })
            .collect()
    };
    let mut s: Vec<Slot> = Vec::new();
    match template {
        0 => {
            s.push((Word, [0.6, 0.05, 0.92, 0.09]));
            s.push((Word, [0.6, 0.11, 0.92, 0.15]));
            s.push((Text, [0.08, 0.25, 0.92, 0.45]));
            s.push((Text, [0.08, 0.5, 0.92, 0.7]));
            s.push((Word, [0.08, 0.8, 0.35, 0.84]));
        }
        1 => {
            s.extend(rows(Word, 0.08, 0.3, 0.08, 0.08, 0.04, 7));
            s.extend(rows(Word, 0.4, 0.9, 0.08, 0.08, 0.04, 7));
            s.push((Table, [0.08, 0.68, 0.92, 0.92]));
        }
        2 => {
            s.push((Title, [0.08, 0.05, 0.5, 0.1]));
            s.extend(rows(Word, 0.08, 0.45, 0.14, 0.06, 0.03, 4));
            s.push((Text, [0.08, 0.42, 0.92, 0.9]));
        }
        3 => s.push((List, [0.1, 0.1, 0.9, 0.9])),
        4 => {
            s.push((Figure, [0.1, 0.05, 0.9, 0.55]));
            s.push((Title, [0.2, 0.6, 0.8, 0.68]));
            s.push((Text, [0.2, 0.72, 0.8, 0.9]));
        }
        5 => {
            s.push((Title, [0.1, 0.04, 0.9, 0.1]));
            s.push((Text, [0.08, 0.15, 0.92, 0.38]));
            s.push((Table, [0.08, 0.43, 0.92, 0.7]));
            s.push((Text, [0.08, 0.75, 0.92, 0.92]));
        }
        6 => {
            s.push((Title, [0.1, 0.03, 0.9, 0.09]));
            s.push((Text, [0.06, 0.14, 0.47, 0.5]));
            s.push((Figure, [0.06, 0.55, 0.47, 0.92]));
            s.push((Table, [0.53, 0.14, 0.94, 0.45]));
            s.push((Text, [0.53, 0.5, 0.94, 0.92]));
        }
        7 => {
            s.push((Table, [0.08, 0.08, 0.92, 0.6]));
            s.push((List, [0.08, 0.66, 0.92, 0.92]));
        }
        8 => {
            s.push((Word, [0.1, 0.08, 0.5, 0.14]));
            s.push((Figure, [0.05, 0.3, 0.95, 0.95]));
        }
        9 => {
            s.push((Title, [0.05, 0.03, 0.95, 0.1]));
            s.push((Text, [0.04, 0.15, 0.32, 0.95]));
            s.push((Figure, [0.36, 0.15, 0.64, 0.45]));
            s.push((Text, [0.36, 0.5, 0.64, 0.95]));
            s.push((Text, [0.68, 0.15, 0.96, 0.95]));
        }
        10 => {
            s.push((Title, [0.25, 0.04, 0.75, 0.1]));
            s.push((Table, [0.05, 0.15, 0.95, 0.92]));
        }
        11 => {
            s.extend(rows(Word, 0.08, 0.4, 0.05, 0.06, 0.03, 3));
            s.push((Title, [0.6, 0.05, 0.92, 0.11]));
            s.push((Table, [0.08, 0.35, 0.92, 0.75]));
            s.push((Word, [0.6, 0.8, 0.92, 0.84]));
        }
        12 => {
            s.push((Title, [0.1, 0.08, 0.9, 0.2]));
            s.push((List, [0.15, 0.3, 0.85, 0.85]));
        }
        13 => {
            s.push((List, [0.08, 0.1, 0.92, 0.3]));
            s.push((List, [0.08, 0.38, 0.92, 0.58]));
            s.push((List, [0.08, 0.66, 0.92, 0.86]));
        }
        14 => {
            s.push((Title, [0.08, 0.04, 0.5, 0.11]));
            s.push((Word, [0.6, 0.06, 0.92, 0.1]));
            s.push((Title, [0.08, 0.17, 0.35, 0.22]));
            s.push((List, [0.08, 0.25, 0.92, 0.45]));
            s.push((Title, [0.08, 0.5, 0.35, 0.55]));
            s.push((List, [0.08, 0.58, 0.92, 0.8]));
        }
        15 => {
            s.push((Title, [0.08, 0.05, 0.4, 0.11]));
            s.extend(rows(Word, 0.08, 0.6, 0.16, 0.05, 0.025, 3));
            s.push((Text, [0.08, 0.4, 0.92, 0.6]));
            s.push((Text, [0.08, 0.65, 0.92, 0.85]));
        }
        _ => unreachable!("template ids are validated by the caller"),
    }
    s
}

struct Canvas {
    img: Image,
}

impl Canvas {
    fn fill(&mut self, x0: usize, y0: usize, x1: usize, y1: usize, v: f32) {
        for y in y0..y1 {
            for x in x0..x1 {
                self.img.set(x, y, 0, v);
            }
        }
    }
}

const INK_TEXT: f32 = 30.0;
const INK_TITLE: f32 = 10.0;
const INK_RULE: f32 = 50.0;
const INK_FIGURE: f32 = 150.0;
const INK_FIGURE_EDGE: f32 = 70.0;

/// Px rectangle `[x0, y0, x1, y1)` of a slot, or `None` if degenerate.
fn slot_px(frac: [f32; 4], w: usize, h: usize) -> Option<[usize; 4]> {
    let x0 = (frac[0] * w as f32).round() as usize;
    let y0 = (frac[1] * h as f32).round() as usize;
    let x1 = ((frac[2] * w as f32).round() as usize).min(w);
    let y1 = ((frac[3] * h as f32).round() as usize).min(h);
    (x1 > x0 && y1 > y0).then_some([x0, y0, x1, y1])
}

/// Draws bars, one per row of `line`, each `len[i]` wide starting at `x`.
/// Returns the tight extent.
fn draw_lines(c: &mut Canvas, x: usize, y: usize, line: usize, gap: usize, lens: &[usize], ink: f32) -> [usize; 4] {
    let mut right = x;
    for (i, &len) in lens.iter().enumerate() {
        let top = y + i * (line + gap);
        c.fill(x, top, x + len, top + line, ink);
        right = right.max(x + len);
    }
    let n = lens.len();
    [x, y, right, y + n * line + (n - 1) * gap]
}

fn draw_element<R: Rng + ?Sized>(
    c: &mut Canvas,
    cat: Category,
    [x0, y0, x1, y1]: [usize; 4],
    line: usize,
    rng: &mut R,
) -> Option<[usize; 4]> {
    let (sw, sh) = (x1 - x0, y1 - y0);
    let jitter = |rng: &mut R, lo: f32, hi: f32, full: usize| ((full as f32 * rng.random_range(lo..=hi)).round() as usize).clamp(1, full);
    match cat {
        Category::Text => {
            let n = (sh + line) / (2 * line);
            if n == 0 {
                return None;
            }
            let mut lens: Vec<usize> = (0..n).map(|_| jitter(rng, 0.75, 1.0, sw)).collect();
            if n > 1 {
                lens[n - 1] = jitter(rng, 0.3, 0.7, sw);
            }
            Some(draw_lines(c, x0, y0, line, line, &lens, INK_TEXT))
        }
        Category::Word => {
            let h = line.min(sh);
            let len = jitter(rng, 0.4, 1.0, sw);
            Some(draw_lines(c, x0, y0, h, 0, &[len], INK_TEXT))
        }
        Category::Title => {
            let h = (2 * line).min(sh);
            let len = jitter(rng, 0.55, 1.0, sw);
            let x = x0 + (sw - len) / 2;
            Some(draw_lines(c, x, y0, h, 0, &[len], INK_TITLE))
        }
        Category::List => {
            let n = (sh + line) / (3 * line);
            let indent = 2 * line;
            if n == 0 || sw <= indent + 1 {
                return None;
            }
            let lens: Vec<usize> = (0..n).map(|_| jitter(rng, 0.4, 1.0, sw - indent)).collect();
            let bullets = vec![line; n];
            let a = draw_lines(c, x0, y0, line, 2 * line, &bullets, INK_TEXT);
            let b = draw_lines(c, x0 + indent, y0, line, 2 * line, &lens, INK_TEXT);
            Some([a[0], a[1], b[2], b[3]])
        }
        Category::Table => {
            let w = jitter(rng, 0.8, 1.0, sw);
            let h = jitter(rng, 0.8, 1.0, sh);
            if w < 8 || h < 8 {
                return None;
            }
            let rows = rng.random_range(3..=6usize).min(h / 3);
            let cols = rng.random_range(2..=5usize).min(w / 3);
            let t = (line / 2).max(1);
            let (x1, y1) = (x0 + w, y0 + h);
            for r in 0..=rows {
                let y = if r == rows { y1 - t } else { y0 + r * (h - t) / rows };
                c.fill(x0, y, x1, y + t, INK_RULE);
            }
            for k in 0..=cols {
                let x = if k == cols { x1 - t } else { x0 + k * (w - t) / cols };
                c.fill(x, y0, x + t, y1, INK_RULE);
            }
            Some([x0, y0, x1, y1])
        }
        Category::Figure => {
            let w = jitter(rng, 0.7, 1.0, sw);
            let h = jitter(rng, 0.7, 1.0, sh);
            if w < 4 || h < 4 {
                return None;
            }
            let (x1, y1) = (x0 + w, y0 + h);
            c.fill(x0, y0, x1, y1, INK_FIGURE_EDGE);
            c.fill(x0 + 1, y0 + 1, x1 - 1, y1 - 1, INK_FIGURE);
            // diagonal hatching
            let spacing = (2 * line).max(3);
            for y in y0 + 1..y1 - 1 {
                for x in x0 + 1..x1 - 1 {
                    if (x + y) % spacing == 0 {
                        c.img.set(x, y, 0, INK_FIGURE_EDGE);
                    }
                }
            }
            Some([x0, y0, x1, y1])
        }
    }
}

/// Text line thickness for a page of this height.
fn line_height(height: usize) -> usize {
    (height / 80).max(1)
}

pub fn generate_document<R: Rng + ?Sized>(rng: &mut R, spec: DocSpec) -> Result<SynthDocument> {
    if spec.template >= NUM_TEMPLATES {
        return Err(CoreError::invalid("generate_document", format!("template {} not in [0, 16)", spec.template)));
    }
    if spec.width < MIN_PAGE_SIDE || spec.height < MIN_PAGE_SIDE {
        return Err(CoreError::invalid(
            "generate_document",
            format!("page {}x{} too small, need {MIN_PAGE_SIDE} per side", spec.width, spec.height),
        ));
    }
    let line = line_height(spec.height);
    let mut canvas = Canvas { img: Image::filled(spec.width, spec.height, 1, BACKGROUND) };
    let mut elements = Vec::new();
    for (cat, frac) in template_slots(spec.template) {
        let rect = slot_px(frac, spec.width, spec.height)
            .and_then(|r| draw_element(&mut canvas, cat, r, line, rng))
            .ok_or_else(|| {
                CoreError::invalid(
                    "generate_document",
                    format!("page {}x{} too small for a {} element", spec.width, spec.height, cat.name()),
                )
            })?;
        let [x0, y0, x1, y1] = rect;
        elements.push(LayoutElement {
            category: cat,
            bbox: [x0 as f32, y0 as f32, (x1 - x0) as f32, (y1 - y0) as f32],
        });
    }
    Ok(SynthDocument { image: canvas.img, elements, class_id: spec.template })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSpec {
    pub width: usize,
    pub height: usize,
    /// Relative template frequencies, one per template.
    pub mix: [f64; NUM_TEMPLATES],
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self { width: 224, height: 224, mix: [1.0; NUM_TEMPLATES] }
    }
}

impl CorpusSpec {
    pub fn only(template: usize, width: usize, height: usize) -> Self {
        let mut mix = [0.0; NUM_TEMPLATES];
        mix[template.min(NUM_TEMPLATES - 1)] = 1.0;
        Self { width, height, mix }
    }
}

/// Document `index` of a corpus; it depends only on `seed ^ index`.
pub fn corpus_document(seed: u64, index: u64, spec: &CorpusSpec) -> Result<SynthDocument> {
    let dist = WeightedIndex::new(spec.mix).map_err(|e| CoreError::invalid("corpus", format!("mix weights: {e}")))?;
    let mut rng = dit_nn::seeded_rng(seed ^ index);
    let template = dist.sample(&mut rng);
    generate_document(&mut rng, DocSpec { template, width: spec.width, height: spec.height })
}

pub fn generate_documents(n: usize, seed: u64, spec: &CorpusSpec) -> Result<Vec<SynthDocument>> {
    (0..n as u64).map(|i| corpus_document(seed, i, spec)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file_name: String,
    pub class_id: usize,
    pub elements: usize,
}

pub fn file_name(index: usize) -> String {
    format!("{index:06}.png")
}

pub const ANNOTATION_FILE: &str = "annotations.json";

pub fn categories() -> Vec<CocoCategory> {
    Category::ALL.iter().map(|c| CocoCategory { id: c.id(), name: c.name().into() }).collect()
}

/// Writes `n` PNG pages plus `annotations.json` into `out_dir`.
pub fn generate_corpus(n: usize, seed: u64, out_dir: &Path, spec: &CorpusSpec) -> Result<Vec<ManifestEntry>> {
    if n == 0 {
        return Err(CoreError::invalid("generate_corpus", "n must be at least 1"));
    }
    fs::create_dir_all(out_dir)?;
    let mut ann = AnnotationFile { categories: categories(), ..Default::default() };
    let mut manifest = Vec::with_capacity(n);
    for i in 0..n {
        let doc = corpus_document(seed, i as u64, spec)?;
        let name = file_name(i);
        doc.image.save_png(&out_dir.join(&name))?;
        ann.images.push(CocoImage {
            id: i as u64,
            file_name: name.clone(),
            width: doc.image.width as u32,
            height: doc.image.height as u32,
            class_id: doc.class_id as u32,
        });
        for e in &doc.elements {
            ann.annotations.push(CocoAnnotation {
                id: ann.annotations.len() as u64,
                image_id: i as u64,
                category_id: e.category.id(),
                bbox: e.bbox,
            });
        }
        manifest.push(ManifestEntry { file_name: name, class_id: doc.class_id, elements: doc.elements.len() });
    }
    ann.write(&out_dir.join(ANNOTATION_FILE))?;
    Ok(manifest)
}

/// A page read back from a corpus directory.
#[derive(Clone, Debug)]
pub struct CorpusItem {
    pub image_id: u64,
    pub image: Image,
    pub class_id: usize,
    pub elements: Vec<LayoutElement>,
}

pub fn load_corpus(dir: &Path) -> Result<Vec<CorpusItem>> {
    let ann = AnnotationFile::read(&dir.join(ANNOTATION_FILE))?;
    ann.images
        .iter()
        .map(|im| {
            let image = load_image(&dir.join(&im.file_name))?.to_gray();
            let elements = ann
                .annotations_for(im.id)
                .filter_map(|a| Category::from_id(a.category_id).map(|category| LayoutElement { category, bbox: a.bbox }))
                .collect();
            Ok(CorpusItem { image_id: im.id, image, class_id: im.class_id as usize, elements })
        })
        .collect()
}

impl From<SynthDocument> for CorpusItem {
    fn from(d: SynthDocument) -> Self {
        CorpusItem { image_id: 0, image: d.image, class_id: d.class_id, elements: d.elements }
    }
}
