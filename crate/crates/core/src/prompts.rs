//! Language-vision prompts and prompt-kernel matching.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::numerics::Tensor;
use crate::proposals::ProposalSet;

/// One prompt per proposal: the box-averaged FPN feature.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptSet {
    /// `L×D'`
    pub vectors: Tensor,
    /// Index of the source proposal for each row.
    pub source: Vec<usize>,
}

impl PromptSet {
    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }

    pub fn width(&self) -> usize {
        self.vectors.dim(1)
    }
}

/// How prompts are assigned to kernels during pre-training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InjectionStrategy {
    /// Highest cosine similarity per kernel.
    #[default]
    Cosine,
    /// Uniform draw per kernel, reseeded every step.
    Random,
    /// Kernel `n` takes prompt `n mod L`.
    Sequential,
    /// No injection.
    None,
}

impl InjectionStrategy {
    pub fn as_str(&self) -> &'static str {
        match self {
            InjectionStrategy::Cosine => "cosine",
            InjectionStrategy::Random => "random",
            InjectionStrategy::Sequential => "sequential",
            InjectionStrategy::None => "none",
        }
    }
}

impl std::str::FromStr for InjectionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "cosine" => Ok(Self::Cosine),
            "random" => Ok(Self::Random),
            "sequential" => Ok(Self::Sequential),
            "none" => Ok(Self::None),
            other => Err(Error::Config(format!("unknown strategy `{other}`"))),
        }
    }
}

impl std::fmt::Display for InjectionStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Matcher used by [`match_prompts`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Matcher {
    Cosine,
    Random { seed: u64 },
    Sequential,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    /// `N×L` cosine similarities.
    pub similarity: Tensor,
    /// Chosen prompt per kernel.
    pub chosen: Vec<usize>,
}

/// Pools `f` (`D'×H×W`) over each proposal's box.
pub fn extract_prompts(f: &Tensor, props: &ProposalSet) -> Result<PromptSet> {
    if f.ndim() != 3 {
        return Err(dim_err("extract_prompts", f.shape(), &[]));
    }
    let width = f.dim(0);
    let rows = props
        .proposals
        .iter()
        .map(|p| f.avg_pool_region(&p.bbox))
        .collect::<Result<Vec<_>>>()?;
    Ok(PromptSet {
        vectors: Tensor::stack_rows(&rows, width)?,
        source: (0..props.len()).collect(),
    })
}

/// Row-wise cosine similarity `N×L`; zero-norm rows give 0.
pub fn similarity_matrix(k0: &Tensor, p: &Tensor) -> Result<Tensor> {
    if k0.ndim() != 2 || p.ndim() != 2 || k0.dim(1) != p.dim(1) {
        return Err(dim_err("similarity_matrix", k0.shape(), p.shape()));
    }
    let kn = k0.normalize(1, crate::NormMode::L2)?;
    let pn = p.normalize(1, crate::NormMode::L2)?;
    Ok(kn.matmul(&pn.transpose()?)?.map(|v| v.clamp(-1.0, 1.0)))
}

/// Picks one prompt per kernel. Returns `None` when there are no prompts,
/// in which case the caller skips injection.
pub fn match_prompts(e: &Tensor, matcher: Matcher) -> Option<Vec<usize>> {
    let (n, l) = (e.dim(0), e.dim(1));
    if l == 0 {
        return None;
    }
    Some(match matcher {
        Matcher::Cosine => (0..n)
            .map(|row| {
                let r = &e.data()[row * l..(row + 1) * l];
                // first maximum wins ties
                let mut best = 0;
                for (j, &v) in r.iter().enumerate() {
                    if v > r[best] {
                        best = j;
                    }
                }
                best
            })
            .collect(),
        Matcher::Sequential => (0..n).map(|row| row % l).collect(),
        Matcher::Random { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..n).map(|_| rng.random_range(0..l)).collect()
        }
    })
}

/// Similarity matrix and matched indices in one call.
pub fn match_kernels(k0: &Tensor, prompts: &PromptSet, matcher: Matcher) -> Result<Option<MatchResult>> {
    if prompts.is_empty() {
        return Ok(None);
    }
    let similarity = similarity_matrix(k0, &prompts.vectors)?;
    Ok(match_prompts(&similarity, matcher).map(|chosen| MatchResult { similarity, chosen }))
}

/// The `N×D'` block of prompt rows gathered by `chosen`.
pub fn gather_prompts(p: &PromptSet, chosen: &[usize]) -> Result<Tensor> {
    let rows = chosen
        .iter()
        .map(|&c| {
            if c >= p.len() {
                Err(Error::Bounds(format!("prompt index {c} of {}", p.len())))
            } else {
                Ok(p.vectors.row(c))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack_rows(&rows, p.width())
}

/// `k0[n] + p[chosen[n]]` for every kernel.
pub fn inject(k0: &Tensor, p: &PromptSet, chosen: &[usize]) -> Result<Tensor> {
    if p.is_empty() {
        return Ok(k0.clone());
    }
    if chosen.len() != k0.dim(0) || p.width() != k0.dim(1) {
        return Err(dim_err("inject", k0.shape(), p.vectors.shape()));
    }
    k0.add(&gather_prompts(p, chosen)?)
}

/// Adds the mean of one class's support features to every kernel.
pub fn inject_support(k: &Tensor, supports: &[Tensor]) -> Result<Tensor> {
    if supports.is_empty() {
        return Err(Error::Contract("support list is empty".into()));
    }
    let width = k.dim(1);
    let mut mean = vec![0f64; width];
    for s in supports {
        if s.numel() != width {
            return Err(dim_err("inject_support", k.shape(), s.shape()));
        }
        mean.iter_mut().zip(s.data()).for_each(|(m, &v)| *m += v as f64);
    }
    let count = supports.len() as f64;
    Ok(Tensor::from_fn(k.shape().to_vec(), |i| {
        (k.data()[i] as f64 + mean[i % width] / count) as f32
    }))
}

/// One injected kernel bank per episode class.
pub fn inject_support_episode(k: &Tensor, per_class: &[Vec<Tensor>]) -> Result<Vec<Tensor>> {
    per_class.iter().map(|s| inject_support(k, s)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::proposals::{BBox, MaskProposal};

    fn t(shape: &[usize], d: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), d.to_vec()).unwrap()
    }

    fn proposal(b: BBox, h: usize, w: usize) -> MaskProposal {
        let mut m = vec![0f32; h * w];
        for r in b.row_min..=b.row_max {
            for c in b.col_min..=b.col_max {
                m[r * w + c] = 1.0;
            }
        }
        MaskProposal {
            mask: Tensor::new([h, w], m).unwrap(),
            class_id: 0,
            score: 1.0,
            bbox: b,
        }
    }

    #[test]
    fn extract_cases() {
        let f = Tensor::full([3, 4, 4], 0.75);
        let props = ProposalSet {
            proposals: vec![proposal(BBox::new(0, 0, 1, 2), 4, 4)],
            scene_id: String::new(),
        };
        let p = extract_prompts(&f, &props).unwrap();
        assert_eq!(p.vectors.data(), &[0.75; 3]);
        let empty = extract_prompts(&f, &ProposalSet::default()).unwrap();
        assert_eq!(empty.len(), 0);
        assert_eq!(empty.vectors.shape(), &[0, 3]);
        let g = Tensor::from_fn([2, 3, 3], |i| i as f32);
        let props = ProposalSet {
            proposals: vec![proposal(BBox::new(2, 1, 2, 1), 3, 3)],
            scene_id: String::new(),
        };
        let p = extract_prompts(&g, &props).unwrap();
        assert_eq!(p.vectors.data(), &[g.at(&[0, 2, 1]), g.at(&[1, 2, 1])]);
    }

    #[test]
    fn similarity_cases() {
        let e = similarity_matrix(&t(&[1, 2], &[1., 0.]), &t(&[1, 2], &[1., 1.])).unwrap();
        assert!((e.data()[0] - std::f32::consts::FRAC_1_SQRT_2).abs() < 1e-5);
        let e = similarity_matrix(&t(&[1, 2], &[0.3, 0.4]), &t(&[1, 2], &[0.3, 0.4])).unwrap();
        assert!((e.data()[0] - 1.0).abs() < 1e-6);
        let e = similarity_matrix(&t(&[1, 2], &[1., 0.]), &t(&[1, 2], &[0., 2.])).unwrap();
        assert_eq!(e.data()[0], 0.0);
        let e = similarity_matrix(&t(&[1, 2], &[0., 0.]), &t(&[1, 2], &[1., 2.])).unwrap();
        assert_eq!(e.data()[0], 0.0);
        assert!(similarity_matrix(&Tensor::zeros([2, 3]), &Tensor::zeros([2, 2])).is_err());
    }

    #[test]
    fn matcher_cases() {
        let e = t(&[2, 2], &[0.9, 0.1, 0.2, 0.8]);
        assert_eq!(match_prompts(&e, Matcher::Cosine).unwrap(), vec![0, 1]);
        let e = t(&[1, 2], &[0.5, 0.5]);
        assert_eq!(match_prompts(&e, Matcher::Cosine).unwrap(), vec![0]);
        let e = Tensor::zeros([3, 2]);
        assert_eq!(match_prompts(&e, Matcher::Sequential).unwrap(), vec![0, 1, 0]);
        assert!(match_prompts(&Tensor::zeros([3, 0]), Matcher::Cosine).is_none());
        let r1 = match_prompts(&Tensor::zeros([16, 3]), Matcher::Random { seed: 4 }).unwrap();
        let r2 = match_prompts(&Tensor::zeros([16, 3]), Matcher::Random { seed: 4 }).unwrap();
        assert_eq!(r1, r2);
        assert!(r1.iter().all(|&i| i < 3));
    }

    #[test]
    fn inject_cases() {
        let k = t(&[1, 2], &[1., 2.]);
        let p = PromptSet {
            vectors: t(&[1, 2], &[3., 4.]),
            source: vec![0],
        };
        assert_eq!(inject(&k, &p, &[0]).unwrap().data(), &[4., 6.]);
        let none = PromptSet {
            vectors: Tensor::zeros([0, 2]),
            source: vec![],
        };
        assert_eq!(inject(&k, &none, &[]).unwrap(), k);
        let zero = PromptSet {
            vectors: Tensor::zeros([2, 2]),
            source: vec![0, 1],
        };
        assert_eq!(inject(&k, &zero, &[1]).unwrap(), k);
        assert!(matches!(inject(&k, &p, &[3]), Err(Error::Bounds(_))));
    }

    #[test]
    fn support_cases() {
        let k = Tensor::from_fn([3, 2], |i| i as f32);
        let s = t(&[2], &[0.5, -1.0]);
        let out = inject_support(&k, std::slice::from_ref(&s)).unwrap();
        for r in 0..3 {
            assert_eq!(out.at(&[r, 0]), k.at(&[r, 0]) + 0.5);
            assert_eq!(out.at(&[r, 1]), k.at(&[r, 1]) - 1.0);
        }
        assert_eq!(inject_support(&k, &[s.clone(), s.scale(-1.0)]).unwrap(), k);
        assert!(matches!(inject_support(&k, &[]), Err(Error::Contract(_))));
        let ep = inject_support_episode(&k, &[vec![s.clone()], vec![s.scale(2.0)]]).unwrap();
        assert_eq!(ep.len(), 2);
        assert_eq!(ep[1].at(&[0, 0]), 1.0);
    }

    #[test]
    fn strategy_parsing() {
        assert_eq!("cosine".parse::<InjectionStrategy>().unwrap(), InjectionStrategy::Cosine);
        assert!("greedy".parse::<InjectionStrategy>().is_err());
        assert_eq!(InjectionStrategy::Sequential.to_string(), "sequential");
    }
}
