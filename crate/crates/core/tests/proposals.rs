mod common;

use common::*;
use uplvp::encoders::LayoutItem;
use uplvp::proposals::{binarize_and_split, propose, score_map, ProposalConfig};
use uplvp::{BBox, NormMode, Tensor};

#[test]
fn noise_free_layouts_are_recovered_exactly() {
    let world = NoiseFree::new(3);
    let mut r = rng(8);
    let mut seen = 0;
    while seen < 50 {
        let layout = world.layout(&mut r);
        let scene = world.scene(&layout);
        let props = propose(&scene, &world.bank, &ProposalConfig::default()).unwrap();
        assert_eq!(props.len(), scene.gt_masks.len());
        for g in &scene.gt_masks {
            assert!(props.proposals.iter().any(|p| p.class_id == g.class_id && p.mask == g.mask));
        }
        seen += 1;
    }
}

#[test]
fn minmax_scores_stay_in_unit_interval() {
    let world = NoiseFree::new(5);
    let mut r = rng(2);
    for _ in 0..10 {
        let layout = world.layout(&mut r);
        let scene = world.scene(&layout);
        let l2 = propose(&scene, &world.bank, &ProposalConfig::default()).unwrap();
        let scores = score_map(&scene.pixel_features, &world.bank.embeddings, NormMode::MinMax).unwrap();
        assert!(scores.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(l2.len(), scene.gt_masks.len());
    }
}

#[test]
fn translation_equivariance() {
    let world = NoiseFree::new(9);
    let mut r = rng(4);
    for _ in 0..20 {
        let layout: Vec<LayoutItem> = world
            .layout(&mut r)
            .into_iter()
            .filter(|it| it.bbox.row_max + 3 < 32 && it.bbox.col_max + 2 < 32)
            .collect();
        let moved: Vec<LayoutItem> = layout
            .iter()
            .map(|it| LayoutItem {
                bbox: it.bbox.translate(3, 2),
                class_id: it.class_id,
            })
            .collect();
        let cfg = ProposalConfig::default();
        let a = propose(&world.scene(&layout), &world.bank, &cfg).unwrap();
        let b = propose(&world.scene(&moved), &world.bank, &cfg).unwrap();
        assert_eq!(a.len(), b.len());
        for (p, q) in a.proposals.iter().zip(&b.proposals) {
            assert_eq!(p.bbox.translate(3, 2), q.bbox);
            assert_eq!(p.class_id, q.class_id);
            for i in 0..32 * 32 {
                let (row, col) = (i / 32, i % 32);
                let moved_on = row >= 3 && col >= 2 && p.mask.at(&[row - 3, col - 2]) > 0.5;
                assert_eq!(q.mask.at(&[row, col]) > 0.5, moved_on);
            }
        }
    }
}

#[test]
fn components_partition_the_thresholded_pixels() {
    let mut r = rng(6);
    for _ in 0..30 {
        let s = gaussian(&mut r, &[12, 12, 3], 1.0);
        let props = binarize_and_split(&s, 0.5, 1);
        for c in 0..3 {
            let mut covered = vec![0u32; 144];
            for p in props.proposals.iter().filter(|p| p.class_id == c) {
                for (i, &v) in p.mask.data().iter().enumerate() {
                    covered[i] += (v > 0.5) as u32;
                }
                assert!(p.bbox.fits(12, 12));
            }
            for (i, &n) in covered.iter().enumerate() {
                assert_eq!(n, (s.data()[i * 3 + c] > 0.5) as u32, "pixel {i} class {c}");
            }
        }
        let keys: Vec<_> = props
            .proposals
            .iter()
            .map(|p| (p.class_id, p.bbox.row_min, p.bbox.col_min))
            .collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
    }
}

#[test]
fn proposal_scores_are_in_mask_means() {
    let mut s = Tensor::zeros([3, 3, 1]).into_data();
    s[0] = 0.6;
    s[1] = 0.8;
    let s = Tensor::new([3, 3, 1], s).unwrap();
    let p = binarize_and_split(&s, 0.5, 1);
    assert_eq!(p.len(), 1);
    assert!((p.proposals[0].score - 0.7).abs() < 1e-6);
    assert_eq!(p.proposals[0].bbox, BBox::new(0, 0, 0, 1));
}
