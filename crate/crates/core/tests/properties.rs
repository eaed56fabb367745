use std::collections::BTreeSet;

use icpa_core::align::{gate_loss, sliced_align_loss, ProjectionSet};
use icpa_core::eval::{chain_score, f_measure_at_k, ndcg_at_k, RankedList};
use icpa_core::oracle::exact_ot_1d;
use icpa_core::pareto::{min_norm_weights, tnt, FW_GAP_TOL, FW_MAX_ITERS};
use proptest::prelude::*;

fn ranked(labels: &[f64]) -> RankedList {
    RankedList::new(
        0,
        labels
            .iter()
            .enumerate()
            .map(|(i, &l)| (i + 1, -(i as f64), l))
            .collect(),
    )
}

fn quad(gram: &[Vec<f64>], w: &[f64]) -> f64 {
    gram.iter()
        .zip(w)
        .map(|(row, wi)| wi * row.iter().zip(w).map(|(g, wj)| g * wj).sum::<f64>())
        .sum()
}

/// Smallest `w'Gw` over the simplex: on every support, solve the
/// stationarity system `G_S w = mu 1, sum w = 1` and keep feasible solutions.
fn exact_min_norm(gram: &[Vec<f64>]) -> f64 {
    let k = gram.len();
    let mut best = (0..k).map(|i| gram[i][i]).fold(f64::INFINITY, f64::min);
    for mask in 1u32..(1 << k) {
        let support: Vec<usize> = (0..k).filter(|&i| mask >> i & 1 == 1).collect();
        let s = support.len();
        // Unknowns: w over the support, then mu.
        let mut a = vec![vec![0.0; s + 2]; s + 1];
        for (r, &i) in support.iter().enumerate() {
            for (c, &j) in support.iter().enumerate() {
                a[r][c] = gram[i][j];
            }
            a[r][s] = -1.0;
        }
        for c in 0..s {
            a[s][c] = 1.0;
        }
        a[s][s + 1] = 1.0;
        let Some(x) = solve(a) else { continue };
        if x[..s].iter().any(|&v| v < -1e-12) {
            continue;
        }
        let mut w = vec![0.0; k];
        for (r, &i) in support.iter().enumerate() {
            w[i] = x[r].max(0.0);
        }
        best = best.min(quad(gram, &w));
    }
    best
}

/// Gaussian elimination with partial pivoting on an augmented matrix.
fn solve(mut a: Vec<Vec<f64>>) -> Option<Vec<f64>> {
    let n = a.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs()))?;
        if a[piv][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, piv);
        for r in 0..n {
            if r != col {
                let f = a[r][col] / a[col][col];
                for c in col..=n {
                    a[r][c] -= f * a[col][c];
                }
            }
        }
    }
    Some((0..n).map(|r| a[r][n] / a[r][r]).collect())
}

fn paired_sets() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1usize..=7).prop_flat_map(|n| {
        (
            prop::collection::vec(-3.0f64..3.0, n),
            prop::collection::vec(-3.0f64..3.0, n),
        )
    })
}

proptest! {
    #[test]
    fn one_dimensional_sliced_cost_is_exact_ot((a, b) in paired_sets()) {
        let reps = vec![
            a.iter().map(|&x| vec![x]).collect::<Vec<_>>(),
            b.iter().map(|&x| vec![x]).collect::<Vec<_>>(),
        ];
        let gates = vec![vec![vec![1.0]; a.len()]; 2];
        let p = ProjectionSet::from_vectors(vec![vec![1.0]]);
        let sliced = sliced_align_loss(&reps, &gates, &p, None).unwrap();
        let exact = exact_ot_1d(&a, &b).unwrap();
        prop_assert!((sliced.value - exact).abs() <= 1e-9 * exact.max(1.0));
        prop_assert!((sliced.ungated - sliced.value).abs() <= 1e-12 * exact.max(1.0));
    }

    #[test]
    fn sliced_cost_ignores_node_order((a, b) in paired_sets(), seed in any::<u64>()) {
        let reps = vec![
            a.iter().map(|&x| vec![x, 0.5 * x]).collect::<Vec<_>>(),
            b.iter().map(|&x| vec![-x, x]).collect::<Vec<_>>(),
        ];
        let gates = vec![vec![vec![1.0]; a.len()]; 2];
        let p = ProjectionSet::new(8, 2, seed);
        let base = sliced_align_loss(&reps, &gates, &p, None).unwrap().value;
        let mut shuffled = reps.clone();
        shuffled[0].reverse();
        shuffled[1].rotate_left(1);
        let again = sliced_align_loss(&shuffled, &gates, &p, None).unwrap().value;
        prop_assert!((base - again).abs() <= 1e-9 * base.max(1.0));
    }

    #[test]
    fn gate_loss_is_bounded_and_symmetric(t in prop::collection::vec(0.001f64..0.999, 1..40)) {
        let (v, g) = gate_loss(&t).unwrap();
        let ln2 = std::f64::consts::LN_2;
        prop_assert!(v >= -ln2 - 1e-12 && v <= ln2 + 1e-12);
        let mut rev = t.clone();
        rev.reverse();
        let (vr, _) = gate_loss(&rev).unwrap();
        prop_assert!((v - vr).abs() < 1e-12);
        let flipped: Vec<f64> = t.iter().map(|x| 1.0 - x).collect();
        let (vf, gf) = gate_loss(&flipped).unwrap();
        prop_assert!((v - vf).abs() < 1e-9);
        for (a, b) in g.iter().zip(&gf) {
            prop_assert!((a + b).abs() < 1e-6 * a.abs().max(1.0));
        }
    }

    #[test]
    fn min_norm_point_meets_frank_wolfe_bounds(
        vecs in (1usize..5, 1usize..5).prop_flat_map(|(k, d)| prop::collection::vec(prop::collection::vec(-2.0f64..2.0, d), k))
    ) {
        let gram: Vec<Vec<f64>> = vecs
            .iter()
            .map(|a| vecs.iter().map(|b| a.iter().zip(b).map(|(x, y)| x * y).sum()).collect())
            .collect();
        let (w, iters) = min_norm_weights(&gram);
        prop_assert!(w.iter().all(|&x| x >= -1e-12));
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let norm = quad(&gram, &w);
        let best = exact_min_norm(&gram);
        let k = gram.len();
        let diam = (0..k)
            .flat_map(|a| (0..k).map(move |b| (a, b)))
            .map(|(a, b)| gram[a][a] + gram[b][b] - 2.0 * gram[a][b])
            .fold(0.0f64, f64::max);
        prop_assert!(norm >= best - 1e-9);
        if iters < FW_MAX_ITERS {
            prop_assert!(norm - best <= FW_GAP_TOL + 1e-9);
        }
        prop_assert!(norm - best <= 4.0 * diam / (iters as f64 + 2.0) + 1e-9);
    }

    #[test]
    fn tnt_is_the_excess_over_baseline(
        pairs in prop::collection::vec((0.0f64..5.0, 0.0f64..5.0), 1..6)
    ) {
        let (losses, base): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let r = tnt(&losses, &base).unwrap();
        for j in 0..losses.len() {
            prop_assert!((r.epsilon[j] - (losses[j] - base[j])).abs() < 1e-12);
        }
    }

    #[test]
    fn ndcg_is_at_most_one_and_one_when_ideal(labels in prop::collection::vec(0.0f64..3.0, 1..12), k in 1usize..12) {
        let v = ndcg_at_k(&ranked(&labels), k);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&v));
        let mut ideal = labels.clone();
        ideal.sort_by(|a, b| b.total_cmp(a));
        if ideal.iter().any(|&x| x > 0.0) {
            prop_assert!((ndcg_at_k(&ranked(&ideal), k) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn f_measure_ignores_order_below_k(n in 3usize..12, k in 1usize..3, truth in prop::collection::btree_set(1usize..14, 0..6)) {
        let items: Vec<(usize, f64, f64)> = (1..=n).map(|i| (i, -(i as f64), 0.0)).collect();
        let mut tail = items.clone();
        tail[k..].reverse();
        for (i, it) in tail.iter_mut().enumerate() {
            it.1 = -(i as f64);
        }
        let a = f_measure_at_k(&RankedList::new(0, items), k, &truth);
        let b = f_measure_at_k(&RankedList::new(0, tail), k, &truth);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn chain_score_is_a_convex_combination(
        hist in prop::collection::vec((0.01f64..5.0, 0.0f64..1.0), 1..8)
    ) {
        let history: Vec<(usize, f64)> = hist.iter().enumerate().map(|(i, &(w, _))| (i, w)).collect();
        let probs: Vec<f64> = hist.iter().map(|&(_, p)| p).collect();
        let v = chain_score(&history, |i| Ok(probs[i])).unwrap();
        let lo = probs.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = probs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
    }
}

#[test]
fn f_measure_hand_value() {
    let truth: BTreeSet<usize> = [2, 7, 8, 9].into();
    assert!((f_measure_at_k(&ranked(&[0.0; 4]), 2, &truth) - 1.0 / 3.0).abs() < 1e-12);
}
