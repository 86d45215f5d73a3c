mod common;

use cfuseg::evalkit::{
    connected_components, count_colonies, default_thresholds, evaluate_masks, extract_instances, format_table,
    instance_iou, mae, map_over_thresholds, match_at_threshold, pixel_confusion, pixel_pr, render_overlay,
    ColonyCounts, InstanceSet, MatchCounts, BOX_COLOR,
};
use cfuseg::mask::{Class, ColonyKind, LabelMask};
use cfuseg::RgbImage;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn mask_from(rows: &[&str]) -> LabelMask {
    let h = rows.len();
    let w = rows[0].len();
    let labels = rows
        .iter()
        .flat_map(|r| r.bytes().map(|b| match b {
            b'+' => 1,
            b'-' => 2,
            b'#' => 3,
            _ => 0,
        }))
        .collect();
    LabelMask::new(h, w, labels).unwrap()
}

#[test]
fn flood_fill_oracle_agrees_on_random_masks() {
    assert_eq!(common::components_oracle_mismatches(1000, 0), 0);
}

#[test]
fn diagonal_neighbours_are_separate() {
    let m = mask_from(&["+.", ".+"]);
    assert_eq!(connected_components(&m, ColonyKind::BvgPlus).len(), 2);
}

#[test]
fn diagonal_border_seam_bisects_a_blob() {
    let m = mask_from(&[
        "++++#",
        "+++#+",
        "++#++",
        "+#+++",
        "#++++",
    ]);
    assert_eq!(connected_components(&m, ColonyKind::BvgPlus).len(), 2);
    assert_eq!(count_colonies(&m), ColonyCounts { bvg_plus: 2, bvg_minus: 0 });
}

#[test]
fn counting_rules() {
    assert_eq!(count_colonies(&LabelMask::background(5, 5)), ColonyCounts::default());
    // Two fused colonies without a seam count once.
    let fused = mask_from(&[".++..", "+++++", ".++++", "..++."]);
    assert_eq!(count_colonies(&fused).bvg_plus, 1);
    let mixed = mask_from(&["+-.", "-+.", "..-"]);
    assert_eq!(count_colonies(&mixed), ColonyCounts { bvg_plus: 2, bvg_minus: 3 });
}

#[test]
fn instances_exclude_border_and_background() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..50 {
        let m = common::random_mask(12, 12, &mut rng);
        let set = extract_instances(&m);
        let mut owner = vec![None; 144];
        for (i, inst) in set.instances.iter().enumerate() {
            for &p in &inst.pixels {
                assert_eq!(m.labels()[p as usize], inst.kind.class().label());
                assert!(owner[p as usize].is_none());
                owner[p as usize] = Some(i);
            }
        }
    }
}

#[test]
fn mae_examples() {
    let c = |p| ColonyCounts { bvg_plus: p, bvg_minus: 0 };
    assert_eq!(mae(&[c(21)], &[c(20)], ColonyKind::BvgPlus).unwrap(), 1.0);
    assert_eq!(mae(&[c(3), c(7)], &[c(3), c(7)], ColonyKind::BvgPlus).unwrap(), 0.0);
    assert!(mae(&[c(1)], &[c(1), c(2)], ColonyKind::BvgPlus).is_err());
}

#[test]
fn pixel_pr_edge_cases() {
    let gt = mask_from(&["++.", "-.."]);
    let pr = pixel_pr(&gt, &gt, Class::BvgPlus).unwrap();
    assert_eq!((pr.precision, pr.recall), (Some(1.0), Some(1.0)));
    let none = LabelMask::background(2, 3);
    let pr = pixel_pr(&none, &gt, Class::BvgPlus).unwrap();
    assert_eq!((pr.precision, pr.recall), (None, Some(0.0)));
    assert!(pixel_pr(&LabelMask::background(3, 3), &gt, Class::BvgPlus).is_err());
}

#[test]
fn pixel_pr_matches_confusion_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..100 {
        let (p, g) = (common::random_mask(8, 8, &mut rng), common::random_mask(8, 8, &mut rng));
        for class in Class::ALL {
            let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
            for (a, b) in p.labels().iter().zip(g.labels()) {
                let (pa, gb) = (*a == class.label(), *b == class.label());
                tp += (pa && gb) as u64;
                fp += (pa && !gb) as u64;
                fn_ += (!pa && gb) as u64;
            }
            let c = pixel_confusion(&p, &g, class).unwrap();
            assert_eq!((c.tp, c.fp, c.fn_), (tp, fp, fn_));
            let pr = pixel_pr(&p, &g, class).unwrap();
            assert_eq!(pr.precision, (tp + fp > 0).then(|| tp as f64 / (tp + fp) as f64));
            assert_eq!(pr.recall, (tp + fn_ > 0).then(|| tp as f64 / (tp + fn_) as f64));
        }
    }
}

#[test]
fn iou_fixtures() {
    assert!((common::iou_square_fixture() - 1.0 / 3.0).abs() < 1e-12);
    let a = common::rect(2, 2, 3, 3, 10);
    assert_eq!(instance_iou(&a, &a), 1.0);
    assert_eq!(instance_iou(&a, &common::rect(6, 6, 2, 2, 10)), 0.0);
}

#[test]
fn iou_062_matching_and_map() {
    let (pred, gt) = common::iou_062_masks();
    let (p, g) = (extract_instances(&pred), extract_instances(&gt));
    assert!((instance_iou(&p.instances[0].pixels, &g.instances[0].pixels) - 0.62).abs() < 1e-12);
    assert_eq!(match_at_threshold(&p, &g, 0.5), MatchCounts { tp: 1, fp: 0, fn_: 0 });
    assert_eq!(match_at_threshold(&p, &g, 0.65), MatchCounts { tp: 0, fp: 1, fn_: 1 });
    assert!((common::map_062_fixture() - 0.3).abs() < 1e-12);
}

#[test]
fn kind_mismatch_is_a_counting_error() {
    let gt = mask_from(&["+++.", "+++.", "...."]);
    let pred = mask_from(&["---.", "---.", "...."]);
    let m = match_at_threshold(&extract_instances(&pred), &extract_instances(&gt), 0.5);
    assert_eq!(m, MatchCounts { tp: 0, fp: 1, fn_: 1 });
}

#[test]
fn map_edge_cases() {
    let gt = mask_from(&["++..", "....", "..--"]);
    let g = extract_instances(&gt);
    let t = default_thresholds();
    assert_eq!(t.len(), 10);
    assert_eq!(map_over_thresholds(&[g.clone(), g.clone()], &[g.clone(), g.clone()], &t).unwrap(), 1.0);
    let empty = extract_instances(&LabelMask::background(3, 4));
    assert_eq!(map_over_thresholds(&[empty.clone()], &[g.clone()], &t).unwrap(), 0.0);
    assert_eq!(map_over_thresholds(&[empty.clone()], &[empty], &t).unwrap(), 1.0);
    assert!(map_over_thresholds(&[g.clone()], &[], &t).is_err());
}

#[test]
fn overlay_boxes_and_untouched_background() {
    let img = RgbImage::filled(10, 10, [50, 60, 70]);
    let ov = render_overlay(&img, &LabelMask::background(10, 10)).unwrap();
    assert_eq!(ov.image, img);
    assert!(ov.boxes.is_empty());

    let mut m = LabelMask::background(10, 10);
    for y in 3..6 {
        for x in 2..7 {
            m.set(y, x, Class::BvgMinus);
        }
    }
    let ov = render_overlay(&img, &m).unwrap();
    assert_eq!(ov.boxes.len(), 1);
    let b = ov.boxes[0];
    assert_eq!((b.x0, b.y0, b.x1, b.y1), (2, 3, 6, 5));
    assert_eq!(ov.image.get(3, 2), BOX_COLOR);
    assert!(render_overlay(&img, &LabelMask::background(9, 10)).is_err());
}

#[test]
fn report_has_table_and_json() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let gt: Vec<LabelMask> = (0..3).map(|_| common::random_mask(8, 8, &mut rng)).collect();
    let pred: Vec<LabelMask> = (0..3).map(|_| common::random_mask(8, 8, &mut rng)).collect();
    let ids: Vec<String> = (0..3).map(|i| format!("{i:03}")).collect();
    let r = evaluate_masks(&ids, &pred, &gt).unwrap();
    for c in [&r.bvg_plus, &r.bvg_minus, &r.border] {
        for v in [c.precision, c.recall].into_iter().flatten() {
            assert!((0.0..=1.0).contains(&v));
        }
    }
    assert!(r.bvg_plus.mae.unwrap() >= 0.0);
    assert_eq!(r.per_image.len(), 3);
    let table = format_table(&[("test", &r)]);
    assert!(table.contains("bvg+") && table.contains("border") && table.contains("mAP"));
    let json = serde_json::to_value(&r).unwrap();
    assert!(json.get("bvg_plus").is_some());
    let self_report = evaluate_masks(&ids, &gt, &gt).unwrap();
    assert_eq!(self_report.map, 1.0);
}

fn random_set(rng: &mut ChaCha8Rng) -> InstanceSet {
    extract_instances(&common::random_mask(10, 10, rng))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn matching_conserves_counts(seed in any::<u64>(), t in 0.05f64..=1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (p, g) = (random_set(&mut rng), random_set(&mut rng));
        let m = match_at_threshold(&p, &g, t);
        prop_assert_eq!(m.tp + m.fp, p.len());
        prop_assert_eq!(m.tp + m.fn_, g.len());
    }

    #[test]
    fn iou_is_symmetric_and_one_only_for_equal_sets(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = || {
            let mut v: Vec<u32> = (0..rng.random_range(0..20)).map(|_| rng.random_range(0..40)).collect();
            v.sort_unstable();
            v.dedup();
            v
        };
        let (a, b) = (draw(), draw());
        prop_assert_eq!(instance_iou(&a, &b), instance_iou(&b, &a));
        prop_assert_eq!(instance_iou(&a, &b) == 1.0, a == b);
    }

    #[test]
    fn mae_is_symmetric(a in prop::collection::vec((0usize..40, 0usize..10), 1..8), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<ColonyCounts> = a.iter().map(|&(p, m)| ColonyCounts { bvg_plus: p, bvg_minus: m }).collect();
        let y: Vec<ColonyCounts> = x.iter().map(|_| ColonyCounts { bvg_plus: rng.random_range(0..40), bvg_minus: rng.random_range(0..10) }).collect();
        for kind in ColonyKind::ALL {
            prop_assert_eq!(mae(&x, &x, kind).unwrap(), 0.0);
            prop_assert_eq!(mae(&x, &y, kind).unwrap(), mae(&y, &x, kind).unwrap());
        }
    }

    #[test]
    fn per_threshold_score_is_non_increasing(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (p, g) = (random_set(&mut rng), random_set(&mut rng));
        let scores: Vec<f64> = (1..=20)
            .map(|k| map_over_thresholds(std::slice::from_ref(&p), std::slice::from_ref(&g), &[k as f64 / 20.0]).unwrap())
            .collect();
        prop_assert!(scores.windows(2).all(|w| w[1] <= w[0]));
        // Hence a threshold below all others can only raise the mean.
        let mut with = vec![0.01];
        with.extend(default_thresholds());
        let a = map_over_thresholds(std::slice::from_ref(&p), std::slice::from_ref(&g), &with).unwrap();
        let b = map_over_thresholds(&[p], &[g], &default_thresholds()).unwrap();
        prop_assert!(a >= b - 1e-12);
    }
}
