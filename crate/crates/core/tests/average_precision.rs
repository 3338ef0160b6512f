mod common;

use common::*;
use proptest::prelude::*;
use uplvp::eval::{average_precision, average_precision_images, iou_thresholds, ApMode, ApReport, Detection};
use uplvp::BBox;

fn boxes() -> impl Strategy<Value = BBox> {
    (0usize..8, 0usize..8, 1usize..6, 1usize..6).prop_map(|(r, c, h, w)| BBox::new(r, c, r + h - 1, c + w - 1))
}

fn instance() -> impl Strategy<Value = (Vec<Detection>, Vec<BBox>)> {
    (prop::collection::vec(boxes(), 0..=6), prop::collection::vec(boxes(), 0..=4)).prop_flat_map(|(d, g)| {
        let n = d.len();
        (Just(d), Just(g), Just(n).prop_flat_map(|n| Just((0..n).collect::<Vec<_>>()).prop_shuffle()))
            .prop_map(|(d, g, order)| {
                let dets = d
                    .into_iter()
                    .zip(order)
                    .enumerate()
                    .map(|(i, (bbox, rank))| Detection { bbox, score: (rank + 1) as f32 / 8.0, source: i })
                    .collect();
                (dets, g)
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2_000))]

    #[test]
    fn matches_brute_force((dets, gts) in instance(), t in 0usize..10) {
        let thr = iou_thresholds()[t];
        prop_assert!((average_precision(&dets, &gts, thr) - brute_force_ap(&dets, &gts, thr)).abs() < 1e-12);
    }

    #[test]
    fn invariant_under_monotone_rescaling((dets, gts) in instance()) {
        let moved: Vec<Detection> = dets
            .iter()
            .map(|d| Detection { score: (d.score * 3.0).powi(3) + 0.25, ..*d })
            .collect();
        for t in iou_thresholds() {
            prop_assert_eq!(average_precision(&dets, &gts, t), average_precision(&moved, &gts, t));
        }
    }

    #[test]
    fn ap_is_a_fraction((dets, gts) in instance()) {
        for t in iou_thresholds() {
            let ap = average_precision(&dets, &gts, t);
            prop_assert!((0.0..=1.0).contains(&ap));
        }
    }
}

fn separated_gts(n: usize) -> Vec<BBox> {
    (0..n).map(|i| BBox::new(i * 10, 0, i * 10 + 5, 5)).collect()
}

#[test]
fn perfect_and_complete_is_one_everywhere() {
    for n in 1..=4 {
        let gts = separated_gts(n);
        let dets: Vec<Detection> = gts
            .iter()
            .enumerate()
            .map(|(i, &b)| Detection { bbox: b, score: 0.9 - i as f32 * 0.1, source: i })
            .collect();
        for t in iou_thresholds() {
            assert_eq!(average_precision(&dets, &gts, t), 1.0);
        }
    }
}

#[test]
fn removing_a_true_positive_lowers_ap() {
    let gts = separated_gts(4);
    let far = Detection { bbox: BBox::new(100, 100, 101, 101), score: 0.95, source: 9 };
    let mut dets: Vec<Detection> = gts
        .iter()
        .enumerate()
        .map(|(i, &b)| Detection { bbox: b, score: 0.8 - i as f32 * 0.1, source: i })
        .collect();
    dets.push(far);
    let full = average_precision(&dets, &gts, 0.5);
    for drop in 0..4 {
        let fewer: Vec<Detection> = dets.iter().enumerate().filter(|(i, _)| *i != drop).map(|(_, d)| *d).collect();
        assert!(average_precision(&fewer, &gts, 0.5) < full);
    }
}

#[test]
fn pooled_images_and_report() {
    let g1 = [BBox::new(0, 0, 4, 4)];
    let g2 = [BBox::new(2, 2, 6, 6)];
    let d1 = [Detection { bbox: g1[0], score: 0.9, source: 0 }];
    let d2 = [Detection { bbox: BBox::new(20, 20, 22, 22), score: 0.95, source: 0 }];
    // ranked: FP (0.95) then TP (0.9); one of two gts found
    let ap = average_precision_images(&[(&d1, &g1), (&d2, &g2)], 0.5, ApMode::AllPoint);
    assert!((ap - 0.25).abs() < 1e-12);
    let report = ApReport::compute(&[(&d1, &g1)], ApMode::AllPoint, "test");
    assert_eq!(report.map, 1.0);
    assert_eq!(report.ap_at(0.75), Some(1.0));
    let csv = report.to_csv();
    assert!(csv.starts_with("# score: test"));
    assert_eq!(csv.lines().count(), 1 + 1 + 10 + 1);
}
