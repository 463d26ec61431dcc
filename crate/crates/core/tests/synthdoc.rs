use dit_core::coco::AnnotationFile;
use dit_core::imaging::{load_image, Image};
use dit_core::metrics::iou;
use dit_core::synthdoc::*;
use proptest::prelude::*;

fn doc(template: usize, seed: u64, w: usize, h: usize) -> SynthDocument {
    generate_document(&mut dit_nn::seeded_rng(seed), DocSpec { template, width: w, height: h }).unwrap()
}

fn ink(img: &Image, x: usize, y: usize) -> bool {
    img.at(x, y, 0) != BACKGROUND
}

#[test]
fn repeated_generation_is_identical() {
    assert_eq!(doc(0, 7, 448, 448), doc(0, 7, 448, 448));
}

#[test]
fn table_rules_lie_inside_table_box() {
    // template 1 carries exactly one table
    let d = doc(1, 11, 448, 448);
    let tables: Vec<_> = d.elements.iter().filter(|e| e.category == Category::Table).collect();
    assert_eq!(tables.len(), 1);
    let [x, y, w, h] = tables[0].bbox.map(|v| v as usize);
    let rule = 50.0;
    for py in 0..d.image.height {
        for px in 0..d.image.width {
            if d.image.at(px, py, 0) == rule {
                assert!(px >= x && px < x + w && py >= y && py < y + h, "rule pixel ({px},{py}) outside table");
            }
        }
    }
}

#[test]
fn templates_map_to_distinct_classes() {
    let ids: std::collections::BTreeSet<usize> = (0..NUM_TEMPLATES).map(|t| doc(t, 0, 224, 224).class_id).collect();
    assert_eq!(ids, (0..16).collect());
}

#[test]
fn bad_template_and_tiny_page_fail() {
    let mut rng = dit_nn::seeded_rng(0);
    assert!(generate_document(&mut rng, DocSpec { template: 16, width: 224, height: 224 }).is_err());
    assert!(generate_document(&mut rng, DocSpec { template: 0, width: 32, height: 224 }).is_err());
}

#[test]
fn corpus_files_and_regeneration() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_corpus(4, 1, dir.path(), &CorpusSpec::default()).unwrap();
    assert_eq!(m.len(), 4);
    for e in &m {
        assert!(dir.path().join(&e.file_name).exists());
    }
    let ann = AnnotationFile::read(&dir.path().join(ANNOTATION_FILE)).unwrap();
    assert_eq!(ann.images.len(), 4);
    assert_eq!(ann.annotations.len(), m.iter().map(|e| e.elements).sum::<usize>());

    let alone = corpus_document(1, 2, &CorpusSpec::default()).unwrap();
    let copy = dir.path().join(file_name(2));
    let tmp = dir.path().join("alone.png");
    alone.image.save_png(&tmp).unwrap();
    assert_eq!(std::fs::read(&copy).unwrap(), std::fs::read(&tmp).unwrap());
    assert_eq!(load_image(&copy).unwrap(), alone.image);

    let items = load_corpus(dir.path()).unwrap();
    assert_eq!(items[2].elements, alone.elements);
    assert_eq!(items[2].class_id, alone.class_id);
}

#[test]
fn single_template_mix() {
    let docs = generate_documents(12, 5, &CorpusSpec::only(3, 128, 128)).unwrap();
    assert!(docs.iter().all(|d| d.class_id == 3));
}

#[test]
fn corpus_is_order_independent() {
    let spec = CorpusSpec::default();
    let all = generate_documents(6, 9, &spec).unwrap();
    for i in (0..6).rev() {
        assert_eq!(all[i], corpus_document(9, i as u64, &spec).unwrap());
    }
}

fn check_tight(d: &SynthDocument) -> Result<(), TestCaseError> {
    let (pw, ph) = (d.image.width, d.image.height);
    for e in &d.elements {
        let [x, y, w, h] = e.bbox;
        prop_assert!(w > 0.0 && h > 0.0);
        prop_assert!(x >= 0.0 && y >= 0.0 && x + w <= pw as f32 && y + h <= ph as f32);
        let (x0, y0, x1, y1) = (x as usize, y as usize, (x + w) as usize, (y + h) as usize);
        // each border line of the box holds ink
        prop_assert!((x0..x1).any(|px| ink(&d.image, px, y0)));
        prop_assert!((x0..x1).any(|px| ink(&d.image, px, y1 - 1)));
        prop_assert!((y0..y1).any(|py| ink(&d.image, x0, py)));
        prop_assert!((y0..y1).any(|py| ink(&d.image, x1 - 1, py)));
        // the one-pixel ring outside is background
        let (rx0, rx1) = (x0.saturating_sub(1), (x1 + 1).min(pw));
        if y0 > 0 {
            prop_assert!((rx0..rx1).all(|px| !ink(&d.image, px, y0 - 1)));
        }
        if y1 < ph {
            prop_assert!((rx0..rx1).all(|px| !ink(&d.image, px, y1)));
        }
        let (ry0, ry1) = (y0.saturating_sub(1), (y1 + 1).min(ph));
        if x0 > 0 {
            prop_assert!((ry0..ry1).all(|py| !ink(&d.image, x0 - 1, py)));
        }
        if x1 < pw {
            prop_assert!((ry0..ry1).all(|py| !ink(&d.image, x1, py)));
        }
    }
    for (i, a) in d.elements.iter().enumerate() {
        for b in &d.elements[i + 1..] {
            prop_assert!(iou(a.bbox, b.bbox) <= 0.05);
        }
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn boxes_are_tight(template in 0usize..16, seed in any::<u64>(), side in prop_oneof![Just(128usize), Just(224), Just(300)]) {
        check_tight(&doc(template, seed, side, side))?;
    }

    #[test]
    fn pages_are_grayscale_in_range(template in 0usize..16, seed in any::<u64>()) {
        let d = doc(template, seed, 96, 96);
        prop_assert_eq!(d.image.channels, 1);
        prop_assert!(d.image.data.iter().all(|&v| (0.0..=255.0).contains(&v)));
        prop_assert_eq!(d.class_id, template);
    }
}
