//! Class-agnostic box AP and kernel activation analysis.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoders::Scene;
use crate::error::{Error, Result};
use crate::head::{forward, Model};
use crate::numerics::Tensor;
use crate::pgm;
use crate::proposals::{tight_bbox, BBox, ProposalSet};

/// Side length of atlas maps.
pub const ATLAS_SIZE: usize = 200;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f32,
    /// Kernel or proposal index the box came from.
    pub source: usize,
}

/// Intersection over union with inclusive pixel areas.
pub fn box_iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    inter as f64 / union as f64
}

/// How the precision-recall curve is integrated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ApMode {
    /// Exact area under the interpolated curve.
    #[default]
    AllPoint,
    /// Interpolated precision sampled at recall 0, 0.01, ..., 1.
    Point101,
}

/// Thresholds 0.50, 0.55, ..., 0.95.
pub fn iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

/// Greedy matching in descending score order. Returns the TP flag of every
/// detection in ranked order and the total gt count.
fn rank_and_match(images: &[(&[Detection], &[BBox])], iou_thr: f64) -> (Vec<bool>, usize) {
    let mut ranked: Vec<(usize, usize)> = images
        .iter()
        .enumerate()
        .flat_map(|(i, (dets, _))| (0..dets.len()).map(move |d| (i, d)))
        .collect();
    // stable: equal scores keep input order
    ranked.sort_by(|&(ia, da), &(ib, db)| images[ib].0[db].score.total_cmp(&images[ia].0[da].score));
    let mut taken: Vec<Vec<bool>> = images.iter().map(|(_, g)| vec![false; g.len()]).collect();
    let tp = ranked
        .iter()
        .map(|&(i, d)| {
            let det = &images[i].0[d];
            let mut best: Option<(usize, f64)> = None;
            for (j, gt) in images[i].1.iter().enumerate() {
                if taken[i][j] {
                    continue;
                }
                let iou = box_iou(&det.bbox, gt);
                if iou >= iou_thr && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((j, iou));
                }
            }
            match best {
                Some((j, _)) => {
                    taken[i][j] = true;
                    true
                }
                None => false,
            }
        })
        .collect();
    (tp, images.iter().map(|(_, g)| g.len()).sum())
}

fn integrate(tp: &[bool], n_gt: usize, mode: ApMode) -> f64 {
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (k, &t) in tp.iter().enumerate() {
        hits += t as usize;
        precision.push(hits as f64 / (k + 1) as f64);
        recall.push(hits as f64 / n_gt as f64);
    }
    // precision envelope: max precision at any equal or higher recall
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    match mode {
        ApMode::AllPoint => {
            let mut ap = 0.0;
            let mut prev = 0.0;
            for (&p, &r) in precision.iter().zip(&recall) {
                ap += (r - prev) * p;
                prev = r;
            }
            ap
        }
        ApMode::Point101 => {
            let total: f64 = (0..=100)
                .map(|i| {
                    let r = i as f64 / 100.0;
                    recall
                        .iter()
                        .position(|&x| x >= r)
                        .map_or(0.0, |k| precision[k])
                })
                .sum();
            total / 101.0
        }
    }
}

/// AP pooled over several images.
pub fn average_precision_images(images: &[(&[Detection], &[BBox])], iou_thr: f64, mode: ApMode) -> f64 {
    let (tp, n_gt) = rank_and_match(images, iou_thr);
    if n_gt == 0 {
        return if tp.is_empty() { 1.0 } else { 0.0 };
    }
    integrate(&tp, n_gt, mode)
}

/// All-point AP of one image's detections.
pub fn average_precision(dets: &[Detection], gts: &[BBox], iou_thr: f64) -> f64 {
    average_precision_images(&[(dets, gts)], iou_thr, ApMode::AllPoint)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApReport {
    pub thresholds: Vec<f64>,
    pub ap: Vec<f64>,
    pub map: f64,
    pub mode: ApMode,
    /// Where detection scores came from.
    pub score_source: String,
}

impl ApReport {
    pub fn compute(images: &[(&[Detection], &[BBox])], mode: ApMode, score_source: &str) -> Self {
        let thresholds = iou_thresholds();
        let ap: Vec<f64> = thresholds
            .iter()
            .map(|&t| average_precision_images(images, t, mode))
            .collect();
        let map = ap.iter().sum::<f64>() / ap.len() as f64;
        Self {
            thresholds,
            ap,
            map,
            mode,
            score_source: score_source.to_string(),
        }
    }

    pub fn ap_at(&self, thr: f64) -> Option<f64> {
        self.thresholds
            .iter()
            .position(|&t| (t - thr).abs() < 1e-9)
            .map(|i| self.ap[i])
    }

    pub fn to_csv(&self) -> String {
        let mode = match self.mode {
            ApMode::AllPoint => "all-point",
            ApMode::Point101 => "101-point",
        };
        let mut out = format!("# score: {}; integration: {mode}\nthreshold,ap\n", self.score_source);
        for (t, ap) in self.thresholds.iter().zip(&self.ap) {
            writeln!(out, "{t:.2},{ap}").expect("write to string");
        }
        writeln!(out, "mAP,{}", self.map).expect("write to string");
        out
    }
}

/// Boxes of the scene's ground-truth masks.
pub fn gt_boxes(scene: &Scene) -> Result<Vec<BBox>> {
    scene.gt_masks.iter().map(|g| tight_bbox(&g.mask)).collect()
}

/// Pseudo-mask boxes scored by their mean in-mask channel score.
pub fn proposal_detections(props: &ProposalSet) -> Vec<Detection> {
    props
        .proposals
        .iter()
        .enumerate()
        .map(|(i, p)| Detection {
            bbox: p.bbox,
            score: p.score,
            source: i,
        })
        .collect()
}

/// Boxes of the model's final-stage masks (σ > 0.5), scored by the
/// highest class probability other than no-object. Kernels with an empty
/// mask produce no detection.
pub fn model_detections(model: &Model, scene: &Scene) -> Result<Vec<Detection>> {
    let stages = forward(model, &scene.fpn_features, None)?;
    let last = stages.last().ok_or_else(|| Error::Contract("model has no stages".into()))?;
    let probs = last.class_logits.softmax(1)?;
    let c1 = probs.dim(1);
    let mut out = Vec::new();
    for n in 0..last.mask_logits.dim(0) {
        let mask = last.mask_logits.row(n).map(|x| (x > 0.0) as u8 as f32);
        let bbox = match tight_bbox(&mask) {
            Ok(b) => b,
            Err(Error::EmptyMask) => continue,
            Err(e) => return Err(e),
        };
        let score = probs.row(n).data()[..c1 - 1].iter().cloned().fold(0.0, f32::max);
        out.push(Detection {
            bbox,
            score,
            source: n,
        });
    }
    Ok(out)
}

/// Mean final-stage kernel activation across scenes.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationAtlas {
    /// One `ATLAS_SIZE×ATLAS_SIZE` map per kernel.
    pub maps: Vec<Tensor>,
    pub images: usize,
}

/// Forward without injection, sigmoid of the final masks, resize, average.
pub fn activation_atlas(model: &Model, scenes: &[Scene]) -> Result<ActivationAtlas> {
    if scenes.is_empty() {
        return Err(Error::Contract("atlas needs at least one scene".into()));
    }
    let n = model.config.kernels;
    let cells = ATLAS_SIZE * ATLAS_SIZE;
    let mut acc = vec![vec![0f64; cells]; n];
    for scene in scenes {
        let stages = forward(model, &scene.fpn_features, None)?;
        let last = stages.last().ok_or_else(|| Error::Contract("model has no stages".into()))?;
        let act = last.mask_logits.sigmoid();
        for (k, sum) in acc.iter_mut().enumerate() {
            let resized = act.row(k).resize_bilinear(ATLAS_SIZE, ATLAS_SIZE)?;
            for (s, &v) in sum.iter_mut().zip(resized.data()) {
                *s += v as f64;
            }
        }
    }
    let count = scenes.len() as f64;
    let maps = acc
        .into_iter()
        .map(|sum| {
            let data = sum.into_iter().map(|v| (v / count).clamp(0.0, 1.0) as f32).collect();
            Tensor::new([ATLAS_SIZE, ATLAS_SIZE], data)
        })
        .collect::<Result<_>>()?;
    Ok(ActivationAtlas {
        maps,
        images: scenes.len(),
    })
}

/// Writes `kernel_XXX.pgm` per map into `dir`.
pub fn write_atlas(dir: impl AsRef<Path>, atlas: &ActivationAtlas) -> Result<Vec<std::path::PathBuf>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    atlas
        .maps
        .iter()
        .enumerate()
        .map(|(k, m)| {
            let path = dir.join(format!("kernel_{k:03}.pgm"));
            pgm::write(&path, m.dim(1), m.dim(0), &pgm::quantize(m.data()))?;
            Ok(path)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    /// Mean IoU of top-decile regions over kernel pairs; lower is more
    /// diverse.
    pub mean_pairwise_iou: f64,
    /// `(row, col)` centroid of each kernel's region.
    pub centroids: Vec<(f64, f64)>,
    /// Mean distance of the centroids from their mean.
    pub centroid_scatter: f64,
}

/// Nearest-rank 90th percentile.
fn percentile90(values: &[f32]) -> f32 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f32::total_cmp);
    let rank = ((0.9 * sorted.len() as f64).ceil() as usize).max(1);
    sorted[rank - 1]
}

/// Pixels above the map's 90th percentile, or at it when nothing is above.
pub fn top_region(map: &Tensor) -> Vec<bool> {
    let p = percentile90(map.data());
    let strict: Vec<bool> = map.data().iter().map(|&v| v > p).collect();
    if strict.iter().any(|&b| b) {
        strict
    } else {
        map.data().iter().map(|&v| v >= p).collect()
    }
}

/// IoU of two pixel sets; two empty sets count as identical.
pub fn region_iou(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

pub fn diversity_report(atlas: &ActivationAtlas) -> Result<DiversityReport> {
    let n = atlas.maps.len();
    if n < 2 {
        return Err(Error::Contract(format!("diversity needs at least 2 kernels, got {n}")));
    }
    let regions: Vec<Vec<bool>> = atlas.maps.iter().map(top_region).collect();
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..n {
        for j in i + 1..n {
            total += region_iou(&regions[i], &regions[j]);
            pairs += 1;
        }
    }
    let centroids: Vec<(f64, f64)> = atlas
        .maps
        .iter()
        .zip(&regions)
        .map(|(m, region)| {
            let w = m.dim(1);
            let (mut r, mut c, mut count) = (0.0, 0.0, 0usize);
            for (p, _) in region.iter().enumerate().filter(|(_, &on)| on) {
                r += (p / w) as f64;
                c += (p % w) as f64;
                count += 1;
            }
            let count = count.max(1) as f64;
            (r / count, c / count)
        })
        .collect();
    let mr = centroids.iter().map(|c| c.0).sum::<f64>() / n as f64;
    let mc = centroids.iter().map(|c| c.1).sum::<f64>() / n as f64;
    let scatter = centroids
        .iter()
        .map(|&(r, c)| ((r - mr).powi(2) + (c - mc).powi(2)).sqrt())
        .sum::<f64>()
        / n as f64;
    Ok(DiversityReport {
        mean_pairwise_iou: total / pairs as f64,
        centroids,
        centroid_scatter: scatter,
    })
}

impl DiversityReport {
    pub fn to_csv(&self) -> String {
        let mut out = format!(
            "# mean_pairwise_iou,{}\n# centroid_scatter,{}\nkernel,centroid_row,centroid_col\n",
            self.mean_pairwise_iou, self.centroid_scatter
        );
        for (k, (r, c)) in self.centroids.iter().enumerate() {
            writeln!(out, "{k},{r},{c}").expect("write to string");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(b: BBox, score: f32) -> Detection {
        Detection { bbox: b, score, source: 0 }
    }

    #[test]
    fn iou_examples() {
        let a = BBox::new(0, 0, 1, 1);
        assert_eq!(box_iou(&a, &a), 1.0);
        assert_eq!(box_iou(&a, &BBox::new(5, 5, 6, 6)), 0.0);
        assert!((box_iou(&a, &BBox::new(1, 1, 2, 2)) - 1.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn ap_examples() {
        let gt = BBox::new(0, 0, 9, 9);
        for t in iou_thresholds() {
            assert_eq!(average_precision(&[det(gt, 0.9)], &[gt], t), 1.0);
        }
        // 10x10 gt vs 4x10 det: IoU 0.4
        let low = BBox::new(0, 0, 3, 9);
        assert!((box_iou(&low, &gt) - 0.4).abs() < 1e-12);
        assert_eq!(average_precision(&[det(low, 0.9)], &[gt], 0.5), 0.0);
        let far = BBox::new(20, 20, 25, 25);
        assert_eq!(average_precision(&[det(gt, 0.9), det(far, 0.1)], &[gt], 0.5), 1.0);
        assert_eq!(average_precision(&[det(gt, 0.1), det(far, 0.9)], &[gt], 0.5), 0.5);
    }

    #[test]
    fn ap_empty_conventions() {
        assert_eq!(average_precision(&[], &[], 0.5), 1.0);
        assert_eq!(average_precision(&[det(BBox::new(0, 0, 1, 1), 0.5)], &[], 0.5), 0.0);
        assert_eq!(average_precision(&[], &[BBox::new(0, 0, 1, 1)], 0.5), 0.0);
    }

    #[test]
    fn point101_of_perfect_is_one() {
        let gt = BBox::new(0, 0, 3, 3);
        let d = [det(gt, 1.0)];
        let ap = average_precision_images(&[(&d, &[gt])], 0.5, ApMode::Point101);
        assert!((ap - 1.0).abs() < 1e-12);
    }

    #[test]
    fn diversity_extremes() {
        let same = Tensor::from_fn([4, 4], |i| i as f32 / 16.0);
        let atlas = ActivationAtlas { maps: vec![same.clone(), same], images: 1 };
        assert_eq!(diversity_report(&atlas).unwrap().mean_pairwise_iou, 1.0);
        let hot = |k: usize| Tensor::from_fn([4, 4], |i| (i == k) as u8 as f32);
        let atlas = ActivationAtlas { maps: vec![hot(0), hot(5), hot(15)], images: 1 };
        let r = diversity_report(&atlas).unwrap();
        assert_eq!(r.mean_pairwise_iou, 0.0);
        assert_eq!(r.centroids[1], (1.0, 1.0));
        let one = ActivationAtlas { maps: vec![hot(0)], images: 1 };
        assert!(diversity_report(&one).is_err());
    }
}
