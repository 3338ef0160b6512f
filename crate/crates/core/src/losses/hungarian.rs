//! Exact minimum-cost assignment (Kuhn–Munkres with potentials).

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Kernel-to-target pairing.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    /// `(kernel, target)` pairs sorted by kernel index.
    pub pairs: Vec<(usize, usize)>,
    pub pair_costs: Vec<f64>,
    pub total_cost: f64,
    pub unmatched_kernels: Vec<usize>,
}

impl Assignment {
    pub fn empty(kernels: usize) -> Self {
        Self {
            pairs: Vec::new(),
            pair_costs: Vec::new(),
            total_cost: 0.0,
            unmatched_kernels: (0..kernels).collect(),
        }
    }

    /// Target matched to each kernel, if any.
    pub fn target_of(&self, kernels: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; kernels];
        for &(n, j) in &self.pairs {
            out[n] = Some(j);
        }
        out
    }
}

/// Solves an `N×L` cost matrix given as a tensor.
pub fn hungarian(cost: &Tensor) -> Result<Assignment> {
    if cost.ndim() != 2 {
        return Err(Error::Contract(format!(
            "cost matrix must be 2-D, got {:?}",
            cost.shape()
        )));
    }
    let data: Vec<f64> = cost.data().iter().map(|&v| v as f64).collect();
    hungarian_f64(&data, cost.dim(0), cost.dim(1))
}

/// Solves a row-major `rows×cols` cost matrix. Rectangular inputs are
/// padded with zero-cost dummies to a square; exactly `min(rows, cols)`
/// real pairs are returned.
pub fn hungarian_f64(cost: &[f64], rows: usize, cols: usize) -> Result<Assignment> {
    assert_eq!(cost.len(), rows * cols, "cost length");
    if let Some(bad) = cost.iter().find(|v| !v.is_finite()) {
        return Err(Error::Contract(format!("non-finite cost {bad}")));
    }
    if rows == 0 || cols == 0 {
        return Ok(Assignment::empty(rows));
    }
    let n = rows.max(cols);
    let a = |i: usize, j: usize| -> f64 {
        if i < rows && j < cols {
            cost[i * cols + j]
        } else {
            0.0
        }
    };

    // 1-based potentials; p[j] is the row matched to column j
    let mut u = vec![0f64; n + 1];
    let mut v = vec![0f64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = a(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut pairs: Vec<(usize, usize)> = (1..=n)
        .filter(|&j| p[j] != 0 && p[j] - 1 < rows && j - 1 < cols)
        .map(|j| (p[j] - 1, j - 1))
        .collect();
    pairs.sort_unstable();
    let pair_costs: Vec<f64> = pairs.iter().map(|&(i, j)| cost[i * cols + j]).collect();
    let mut matched = vec![false; rows];
    pairs.iter().for_each(|&(i, _)| matched[i] = true);
    Ok(Assignment {
        total_cost: pair_costs.iter().sum(),
        pair_costs,
        pairs,
        unmatched_kernels: (0..rows).filter(|&i| !matched[i]).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_cases() {
        let a = hungarian_f64(&[1., 2., 2., 1.], 2, 2).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(a.total_cost, 2.0);
        let a = hungarian_f64(&[5.], 1, 1).unwrap();
        assert_eq!(a.pairs, vec![(0, 0)]);
        assert_eq!(a.total_cost, 5.0);
    }

    #[test]
    fn rectangular() {
        // 3 kernels, 1 target: cheapest kernel wins
        let a = hungarian_f64(&[4., 1., 3.], 3, 1).unwrap();
        assert_eq!(a.pairs, vec![(1, 0)]);
        assert_eq!(a.unmatched_kernels, vec![0, 2]);
        // 1 kernel, 3 targets
        let a = hungarian_f64(&[4., 1., 3.], 1, 3).unwrap();
        assert_eq!(a.pairs, vec![(0, 1)]);
        assert!(a.unmatched_kernels.is_empty());
        let a = hungarian_f64(&[], 3, 0).unwrap();
        assert!(a.pairs.is_empty());
        assert_eq!(a.unmatched_kernels, vec![0, 1, 2]);
    }

    #[test]
    fn nan_is_rejected() {
        assert!(matches!(
            hungarian_f64(&[1., f64::NAN], 1, 2),
            Err(Error::Contract(_))
        ));
    }
}
