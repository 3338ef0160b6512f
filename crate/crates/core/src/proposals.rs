//! Pseudo-mask generation from aligned pixel and text embeddings.
//!
//! The score map is the per-pixel product of normalised pixel features and
//! normalised class embeddings. Each class channel is thresholded and split
//! into 4-connected components; every component large enough becomes one
//! [`MaskProposal`] labelled with its channel's class.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::encoders::{Scene, TextBank};
use crate::error::{dim_err, Error, Result};
use crate::numerics::{NormMode, Tensor};

/// Inclusive pixel box.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub row_min: usize,
    pub col_min: usize,
    pub row_max: usize,
    pub col_max: usize,
}

impl BBox {
    pub fn new(row_min: usize, col_min: usize, row_max: usize, col_max: usize) -> Self {
        Self {
            row_min,
            col_min,
            row_max,
            col_max,
        }
    }

    pub fn height(&self) -> usize {
        self.row_max - self.row_min + 1
    }

    pub fn width(&self) -> usize {
        self.col_max - self.col_min + 1
    }

    pub fn area(&self) -> usize {
        self.height() * self.width()
    }

    pub fn contains(&self, r: usize, c: usize) -> bool {
        (self.row_min..=self.row_max).contains(&r) && (self.col_min..=self.col_max).contains(&c)
    }

    pub fn fits(&self, height: usize, width: usize) -> bool {
        self.row_min <= self.row_max
            && self.col_min <= self.col_max
            && self.row_max < height
            && self.col_max < width
    }

    pub fn translate(&self, dr: usize, dc: usize) -> Self {
        Self::new(
            self.row_min + dr,
            self.col_min + dc,
            self.row_max + dr,
            self.col_max + dc,
        )
    }

    /// Number of pixels shared by both boxes.
    pub fn intersection_area(&self, other: &BBox) -> usize {
        let r0 = self.row_min.max(other.row_min);
        let r1 = self.row_max.min(other.row_max);
        let c0 = self.col_min.max(other.col_min);
        let c1 = self.col_max.min(other.col_max);
        if r0 > r1 || c0 > c1 {
            0
        } else {
            (r1 - r0 + 1) * (c1 - c0 + 1)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskProposal {
    /// Binary `H×W` mask (values 0 or 1).
    pub mask: Tensor,
    pub class_id: usize,
    /// Mean channel score over the mask's pixels.
    pub score: f32,
    pub bbox: BBox,
}

impl MaskProposal {
    pub fn area(&self) -> usize {
        self.mask.data().iter().filter(|&&v| v > 0.5).count()
    }
}

/// Proposals of one scene, ordered by (class id, row_min, col_min).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ProposalSet {
    pub proposals: Vec<MaskProposal>,
    pub scene_id: String,
}

impl ProposalSet {
    pub fn len(&self) -> usize {
        self.proposals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.proposals.is_empty()
    }

    pub fn with_scene_id(mut self, id: impl Into<String>) -> Self {
        self.scene_id = id.into();
        self
    }
}

/// Threshold settings for [`propose`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProposalConfig {
    pub norm_mode: NormMode,
    pub tau: f32,
    pub min_area: usize,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        Self {
            norm_mode: NormMode::L2,
            tau: 0.5,
            min_area: 16,
        }
    }
}

impl ProposalConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = match self.norm_mode {
            NormMode::L2 => self.tau > -1.0 && self.tau < 1.0,
            NormMode::MinMax => self.tau > 0.0 && self.tau < 1.0,
        };
        if !ok {
            return Err(Error::Config(format!(
                "tau {} out of range for {:?} mode",
                self.tau, self.norm_mode
            )));
        }
        Ok(())
    }
}

/// Per-pixel class scores `H×W×C` from pixel features `H×W×D` and text
/// embeddings `D×C`.
///
/// In l2 mode the result is a cosine in `[-1, 1]`. In minmax mode both
/// sides are mapped onto `[0, 1]` and the dot product is divided by `D`,
/// which keeps scores in `[0, 1]`.
pub fn score_map(xi: &Tensor, xt: &Tensor, mode: NormMode) -> Result<Tensor> {
    if xi.ndim() != 3 || xt.ndim() != 2 || xi.dim(2) != xt.dim(0) {
        return Err(dim_err("score_map", xi.shape(), xt.shape()));
    }
    let (h, w, d) = (xi.dim(0), xi.dim(1), xi.dim(2));
    let c = xt.dim(1);
    let pixels = xi.reshape([h * w, d])?.normalize(1, mode)?;
    let text = xt.normalize(0, mode)?;
    let mut scores = pixels.matmul(&text)?;
    let (lo, hi) = match mode {
        NormMode::L2 => (-1.0, 1.0),
        NormMode::MinMax => {
            scores = scores.scale(1.0 / d.max(1) as f32);
            (0.0, 1.0)
        }
    };
    // rounding can overshoot the bound by an ulp
    let scores = scores.map(|v| v.clamp(lo, hi));
    debug_assert!(scores.data().iter().all(|v| (lo..=hi).contains(v)));
    scores.reshape([h, w, c])
}

/// Thresholds each channel at `score > tau` and turns every 4-connected
/// component of at least `min_area` pixels into a proposal.
pub fn binarize_and_split(scores: &Tensor, tau: f32, min_area: usize) -> ProposalSet {
    assert_eq!(scores.ndim(), 3, "scores must be H×W×C");
    let (h, w, c) = (scores.dim(0), scores.dim(1), scores.dim(2));
    let data = scores.data();
    let mut proposals = Vec::new();
    let mut label = vec![false; h * w];
    let mut queue = VecDeque::new();

    for class_id in 0..c {
        let above: Vec<bool> = (0..h * w).map(|p| data[p * c + class_id] > tau).collect();
        label.iter_mut().for_each(|l| *l = false);
        let mut found = Vec::new();
        for start in 0..h * w {
            if !above[start] || label[start] {
                continue;
            }
            let mut pixels = Vec::new();
            label[start] = true;
            queue.push_back(start);
            while let Some(p) = queue.pop_front() {
                pixels.push(p);
                let (r, col) = (p / w, p % w);
                let mut visit = |q: usize| {
                    if above[q] && !label[q] {
                        label[q] = true;
                        queue.push_back(q);
                    }
                };
                if r > 0 {
                    visit(p - w);
                }
                if r + 1 < h {
                    visit(p + w);
                }
                if col > 0 {
                    visit(p - 1);
                }
                if col + 1 < w {
                    visit(p + 1);
                }
            }
            if pixels.len() < min_area.max(1) {
                continue;
            }
            let mut mask = vec![0f32; h * w];
            let mut total = 0f64;
            for &p in &pixels {
                mask[p] = 1.0;
                total += data[p * c + class_id] as f64;
            }
            let mask = Tensor::new([h, w], mask).expect("mask shape");
            let bbox = tight_bbox(&mask).expect("component is non-empty");
            found.push(MaskProposal {
                mask,
                class_id,
                score: (total / pixels.len() as f64) as f32,
                bbox,
            });
        }
        // stable: components sharing a corner keep scan order
        found.sort_by_key(|p| (p.bbox.row_min, p.bbox.col_min));
        proposals.extend(found);
    }
    ProposalSet {
        proposals,
        scene_id: String::new(),
    }
}

/// Smallest inclusive box covering every foreground (> 0.5) pixel.
pub fn tight_bbox(mask: &Tensor) -> Result<BBox> {
    if mask.ndim() != 2 {
        return Err(dim_err("tight_bbox", mask.shape(), &[]));
    }
    let w = mask.dim(1);
    let mut bbox: Option<BBox> = None;
    for (i, _) in mask.data().iter().enumerate().filter(|(_, &v)| v > 0.5) {
        let (r, c) = (i / w, i % w);
        bbox = Some(match bbox {
            None => BBox::new(r, c, r, c),
            Some(b) => BBox::new(
                b.row_min.min(r),
                b.col_min.min(c),
                b.row_max.max(r),
                b.col_max.max(c),
            ),
        });
    }
    bbox.ok_or(Error::EmptyMask)
}

/// Score map followed by thresholding for one scene.
pub fn propose(scene: &Scene, bank: &TextBank, cfg: &ProposalConfig) -> Result<ProposalSet> {
    cfg.validate()?;
    let scores = score_map(&scene.pixel_features, &bank.embeddings, cfg.norm_mode)?;
    Ok(binarize_and_split(&scores, cfg.tau, cfg.min_area).with_scene_id(scene.id.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_from(h: usize, w: usize, on: &[(usize, usize)]) -> Tensor {
        let mut m = Tensor::zeros([h, w]).into_data();
        for &(r, c) in on {
            m[r * w + c] = 1.0;
        }
        Tensor::new([h, w], m).unwrap()
    }

    #[test]
    fn tight_bbox_cases() {
        let m = mask_from(5, 5, &[(1, 1), (3, 4)]);
        assert_eq!(tight_bbox(&m).unwrap(), BBox::new(1, 1, 3, 4));
        let m = mask_from(5, 5, &[(2, 2)]);
        assert_eq!(tight_bbox(&m).unwrap(), BBox::new(2, 2, 2, 2));
        assert!(matches!(tight_bbox(&Tensor::zeros([3, 3])), Err(Error::EmptyMask)));
    }

    #[test]
    fn score_map_one_hot_for_basis_text() {
        let xt = Tensor::eye(4);
        let mut px = vec![0f32; 2 * 2 * 4];
        px[2] = 1.0; // pixel (0,0) = e2
        let xi = Tensor::new([2, 2, 4], px).unwrap();
        let s = score_map(&xi, &xt, NormMode::L2).unwrap();
        assert_eq!(s.shape(), &[2, 2, 4]);
        assert_eq!(&s.data()[..4], &[0., 0., 1., 0.]);
        // zero pixels score zero everywhere
        assert!(s.data()[4..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn score_map_rejects_width_mismatch() {
        let err = score_map(&Tensor::zeros([2, 2, 3]), &Tensor::zeros([4, 2]), NormMode::L2);
        assert!(matches!(err, Err(Error::Dimension { .. })));
    }

    #[test]
    fn minmax_scores_stay_in_unit_interval() {
        let xi = Tensor::from_fn([3, 3, 5], |i| ((i * 7919) % 13) as f32 - 6.0);
        let xt = Tensor::from_fn([5, 2], |i| (i as f32).cos());
        let s = score_map(&xi, &xt, NormMode::MinMax).unwrap();
        assert!(s.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn below_threshold_is_empty() {
        let s = Tensor::full([4, 4, 2], 0.3);
        assert!(binarize_and_split(&s, 0.5, 1).is_empty());
    }

    #[test]
    fn area_filter() {
        let mut s = Tensor::zeros([4, 4, 1]).into_data();
        s[5] = 0.9;
        let s = Tensor::new([4, 4, 1], s).unwrap();
        assert!(binarize_and_split(&s, 0.5, 2).is_empty());
        let one = binarize_and_split(&s, 0.5, 1);
        assert_eq!(one.len(), 1);
        assert_eq!(one.proposals[0].bbox, BBox::new(1, 1, 1, 1));
        assert!((one.proposals[0].score - 0.9).abs() < 1e-7);
    }

    #[test]
    fn diagonal_pixels_are_separate_components() {
        // 4-connectivity: diagonal neighbours do not join
        let mut s = vec![0f32; 9];
        s[0] = 1.0;
        s[4] = 1.0;
        let s = Tensor::new([3, 3, 1], s).unwrap();
        assert_eq!(binarize_and_split(&s, 0.5, 1).len(), 2);
    }

    #[test]
    fn ordering_is_class_then_position() {
        // class 1 at top-left, class 0 at bottom-right and top-right
        let (h, w, c) = (6, 6, 2);
        let mut s = vec![0f32; h * w * c];
        let mut set = |r: usize, col: usize, ch: usize| s[(r * w + col) * c + ch] = 1.0;
        set(0, 0, 1);
        set(5, 5, 0);
        set(0, 5, 0);
        let s = Tensor::new([h, w, c], s).unwrap();
        let p = binarize_and_split(&s, 0.5, 1);
        let keys: Vec<_> = p
            .proposals
            .iter()
            .map(|p| (p.class_id, p.bbox.row_min, p.bbox.col_min))
            .collect();
        assert_eq!(keys, vec![(0, 0, 5), (0, 5, 5), (1, 0, 0)]);
    }
}
