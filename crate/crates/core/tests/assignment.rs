mod common;

use common::*;
use proptest::prelude::*;
use uplvp::losses::{hungarian, hungarian_f64};
use uplvp::{Error, Tensor};

fn costs() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (1usize..=6, 1usize..=6).prop_flat_map(|(r, c)| {
        (Just(r), Just(c), prop::collection::vec(-50.0f64..50.0, r * c))
    })
}

proptest! {
    #[test]
    fn matches_brute_force((rows, cols, cost) in costs()) {
        let a = hungarian_f64(&cost, rows, cols).unwrap();
        let best = brute_force_assignment(&cost, rows, cols);
        prop_assert!((a.total_cost - best).abs() < 1e-9);
        prop_assert_eq!(a.pairs.len(), rows.min(cols));
    }

    #[test]
    fn pairs_are_one_to_one((rows, cols, cost) in costs()) {
        let a = hungarian_f64(&cost, rows, cols).unwrap();
        let mut ks: Vec<usize> = a.pairs.iter().map(|p| p.0).collect();
        let mut ts: Vec<usize> = a.pairs.iter().map(|p| p.1).collect();
        prop_assert!(ks.windows(2).all(|w| w[0] < w[1]), "sorted by kernel");
        ts.sort();
        ts.dedup();
        prop_assert_eq!(ts.len(), a.pairs.len());
        let sum: f64 = a.pairs.iter().map(|&(k, t)| cost[k * cols + t]).sum();
        prop_assert!((sum - a.total_cost).abs() < 1e-9);
        for (c, &(k, t)) in a.pair_costs.iter().zip(&a.pairs) {
            prop_assert_eq!(*c, cost[k * cols + t]);
        }
        ks.extend(a.unmatched_kernels.iter().copied());
        ks.sort();
        prop_assert_eq!(ks, (0..rows).collect::<Vec<_>>());
    }

    #[test]
    fn shifting_a_row_shifts_the_optimum(
        (n, cost) in (1usize..=6).prop_flat_map(|n| (Just(n), prop::collection::vec(-50.0f64..50.0, n * n))),
        shift in -10.0f64..10.0,
    ) {
        // square problems match every row exactly once
        let (rows, cols) = (n, n);
        let a = hungarian_f64(&cost, rows, cols).unwrap();
        let mut moved = cost.clone();
        moved[..cols].iter_mut().for_each(|v| *v += shift);
        let b = hungarian_f64(&moved, rows, cols).unwrap();
        prop_assert!((b.total_cost - a.total_cost - shift).abs() < 1e-9);
    }
}

#[test]
fn tensor_entry_point() {
    let cost = Tensor::new([2, 3], vec![4., 1., 3., 2., 0., 5.]).unwrap();
    let a = hungarian(&cost).unwrap();
    assert_eq!(a.total_cost, 3.0);
    assert_eq!(a.pairs, vec![(0, 1), (1, 0)]);
    assert!(matches!(hungarian(&Tensor::zeros([3])), Err(Error::Contract(_))));
}

#[test]
fn more_kernels_than_targets() {
    let cost = vec![5., 1., 2., 9.];
    let a = hungarian_f64(&cost, 4, 1).unwrap();
    assert_eq!(a.pairs, vec![(1, 0)]);
    assert_eq!(a.unmatched_kernels, vec![0, 2, 3]);
}

#[test]
fn infinite_cost_rejected() {
    assert!(hungarian_f64(&[1.0, f64::INFINITY], 1, 2).is_err());
}
