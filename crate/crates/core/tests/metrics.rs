use dit_core::coco::{CocoAnnotation, Detection};
use dit_core::metrics::*;
use proptest::prelude::*;

mod common;
use common::{oracle_iou, oracle_map};

fn gt(image_id: u64, category_id: u32, bbox: [f32; 4]) -> CocoAnnotation {
    CocoAnnotation { id: 0, image_id, category_id, bbox }
}

fn det(image_id: u64, category_id: u32, bbox: [f32; 4], score: f32) -> Detection {
    Detection { image_id, category_id, bbox, score }
}

#[test]
fn iou_examples() {
    let a = [0.0, 0.0, 2.0, 2.0];
    assert_eq!(iou(a, a), 1.0);
    assert_eq!(iou(a, [5.0, 5.0, 1.0, 1.0]), 0.0);
    assert!((iou(a, [1.0, 1.0, 2.0, 2.0]) - 0.142857).abs() < 1e-6);
}

#[test]
fn prf1_examples() {
    assert_eq!(prf1(10, 0, 0), Prf1 { precision: 1.0, recall: 1.0, f1: 1.0 });
    assert_eq!(prf1(0, 5, 5), Prf1 { precision: 0.0, recall: 0.0, f1: 0.0 });
    let r = prf1(3, 1, 2);
    assert!((r.f1 - 0.6667).abs() < 1e-4);
}

#[test]
fn weighted_f1_table_rows() {
    let first = weighted_f1([96.97, 95.99, 95.14, 90.22]).unwrap();
    let large = weighted_f1([97.83, 97.41, 96.29, 92.93]).unwrap();
    assert!((first - 94.23).abs() <= 0.01, "{first}");
    assert!((large - 95.85).abs() <= 0.01, "{large}");
    assert_eq!(weighted_f1([1.0; 4]).unwrap(), 1.0);
    assert!(weighted_f1([0.9, 90.0, 0.9, 0.9]).is_err());
    assert!(weighted_f1([f64::NAN, 0.5, 0.5, 0.5]).is_err());
}

#[test]
fn matching_examples() {
    let g = vec![gt(1, 1, [0.0, 0.0, 10.0, 10.0]), gt(1, 1, [20.0, 20.0, 5.0, 5.0])];
    let perfect: Vec<_> = g.iter().map(|a| det(1, 1, a.bbox, 0.9)).collect();
    let m = match_detections(&perfect, &g, 0.5);
    assert_eq!((m.tp, m.fp, m.fn_), (2, 0, 0));
    let m = match_detections(&[], &g, 0.5);
    assert_eq!((m.tp, m.fp, m.fn_), (0, 0, 2));
    // a box in another image or category never matches
    let m = match_detections(&[det(2, 1, g[0].bbox, 0.9), det(1, 2, g[0].bbox, 0.9)], &g, 0.5);
    assert_eq!((m.tp, m.fp, m.fn_), (0, 2, 2));
}

#[test]
fn ap_examples() {
    let g = vec![gt(1, 1, [0.0, 0.0, 10.0, 10.0])];
    assert_eq!(average_precision(&[det(1, 1, g[0].bbox, 0.9)], &g, 0.5), 1.0);
    assert_eq!(average_precision(&[det(1, 1, [50.0, 50.0, 5.0, 5.0], 0.9)], &g, 0.5), 0.0);
    let p = [det(1, 1, g[0].bbox, 0.9), det(1, 1, [50.0, 50.0, 5.0, 5.0], 0.8)];
    assert_eq!(average_precision(&p, &g, 0.5), 1.0);

    // hit, miss, hit over three gts: precision 1 up to recall 1/3, then 2/3 up to recall 2/3
    let g3 = vec![gt(1, 1, [0.0, 0.0, 10.0, 10.0]), gt(1, 1, [20.0, 0.0, 10.0, 10.0]), gt(1, 1, [40.0, 0.0, 10.0, 10.0])];
    let p3 = [det(1, 1, g3[0].bbox, 0.9), det(1, 1, [0.0, 50.0, 5.0, 5.0], 0.8), det(1, 1, g3[1].bbox, 0.7)];
    assert!((average_precision(&p3, &g3, 0.5) - 56.0 / 101.0).abs() < 1e-12);
}

#[test]
fn map_range_examples() {
    let g = vec![gt(1, 1, [0.0, 0.0, 10.0, 10.0]), gt(2, 1, [5.0, 5.0, 20.0, 10.0])];
    let p: Vec<_> = g.iter().map(|a| det(a.image_id, 1, a.bbox, 0.5)).collect();
    let r = map_range(&p, &g, &[1, 7]);
    assert_eq!(r.overall, 1.0);
    assert_eq!(r.categories[1].ap, None);
    assert_eq!(coco_iou_thresholds()[9], 0.95);
}

#[test]
fn accuracy_examples() {
    assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
    assert_eq!(accuracy(&[0, 0], &[1, 1]).unwrap(), 0.0);
    assert_eq!(accuracy(&[1, 2, 3, 4], &[1, 2, 3, 0]).unwrap(), 0.75);
    assert!(accuracy(&[1], &[1, 2]).is_err());
}

#[test]
fn map_matches_oracle_on_hand_scenarios() {
    let g = vec![
        gt(1, 1, [0.0, 0.0, 10.0, 10.0]),
        gt(1, 1, [30.0, 0.0, 10.0, 10.0]),
        gt(2, 1, [0.0, 0.0, 20.0, 20.0]),
        gt(1, 2, [0.0, 40.0, 30.0, 10.0]),
        gt(2, 2, [10.0, 10.0, 10.0, 30.0]),
        gt(2, 2, [40.0, 40.0, 8.0, 8.0]),
    ];
    let p = vec![
        det(1, 1, [1.0, 0.0, 10.0, 10.0], 0.95),
        det(1, 1, [30.0, 2.0, 10.0, 9.0], 0.6),
        det(2, 1, [3.0, 3.0, 20.0, 20.0], 0.7),
        det(1, 2, [0.0, 41.0, 28.0, 10.0], 0.4),
        det(2, 2, [10.0, 12.0, 10.0, 30.0], 0.9),
        det(2, 2, [60.0, 60.0, 8.0, 8.0], 0.85),
    ];
    let r = map_range(&p, &g, &[1, 2, 3]);
    assert!((r.overall - oracle_map(&p, &g, &[1, 2, 3])).abs() < 1e-9);
    assert!(r.overall > 0.0 && r.overall < 1.0);
}

fn arb_box() -> impl Strategy<Value = [f32; 4]> {
    (0u8..40, 0u8..40, 1u8..30, 1u8..30).prop_map(|(x, y, w, h)| [x as f32, y as f32, w as f32, h as f32])
}

fn arb_scene() -> impl Strategy<Value = (Vec<Detection>, Vec<CocoAnnotation>)> {
    let gts = prop::collection::vec((0u64..2, 1u32..3, arb_box()), 0..6)
        .prop_map(|v| v.into_iter().map(|(i, c, b)| gt(i, c, b)).collect::<Vec<_>>());
    let preds = prop::collection::vec((0u64..2, 1u32..3, arb_box(), 0u8..10), 0..8)
        .prop_map(|v| v.into_iter().map(|(i, c, b, s)| det(i, c, b, s as f32 / 10.0)).collect::<Vec<_>>());
    (preds, gts)
}

proptest! {
    #[test]
    fn map_agrees_with_oracle((p, g) in arb_scene()) {
        let r = map_range(&p, &g, &[1, 2]);
        prop_assert!((r.overall - oracle_map(&p, &g, &[1, 2])).abs() < 1e-9);
        prop_assert!((0.0..=1.0).contains(&r.overall));
    }

    #[test]
    fn lowest_fp_never_raises_ap((p, g) in arb_scene(), b in arb_box()) {
        let g: Vec<_> = g.into_iter().filter(|a| a.category_id == 1).collect();
        let p: Vec<_> = p.into_iter().filter(|d| d.category_id == 1).collect();
        let base = average_precision(&p, &g, 0.5);
        let mut more = p.clone();
        // a different image with no gts guarantees a false positive
        more.push(det(9, 1, b, -1.0));
        prop_assert!(average_precision(&more, &g, 0.5) <= base + 1e-12);
    }

    #[test]
    fn match_conservation((p, g) in arb_scene(), thr in 0.1f64..0.95) {
        let m = match_detections(&p, &g, thr);
        prop_assert_eq!(m.tp + m.fp, p.len());
        prop_assert_eq!(m.tp + m.fn_, g.len());
        prop_assert_eq!(m.pairs.len(), m.tp);
    }

    #[test]
    fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
        let v = iou(a, b);
        prop_assert_eq!(v, iou(b, a));
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert!((v - oracle_iou(a, b)).abs() < 1e-12);
    }

    #[test]
    fn weighted_f1_monotone(x in prop::array::uniform4(0.0f64..1.0), i in 0usize..4, d in 0.0f64..0.5) {
        let base = weighted_f1(x).unwrap();
        let mut y = x;
        y[i] = (y[i] + d).min(1.0);
        prop_assert!(weighted_f1(y).unwrap() >= base - 1e-12);
        prop_assert!((weighted_f1([x[0]; 4]).unwrap() - x[0]).abs() < 1e-12);
    }
}
