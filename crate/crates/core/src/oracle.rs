//! Brute-force reference implementations used to cross-check the fast
//! paths. Nothing here calls into the modules it verifies.

use crate::error::{IcpaError, Result};

/// Largest instance accepted by [`exact_ot_1d`].
pub const MAX_OT_SIZE: usize = 12;

/// Minimum over all bijections of `sum (a_i - b_sigma(i))^2`, solved exactly
/// by dynamic programming over subsets of `b`.
pub fn exact_ot_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(IcpaError::LengthMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    let n = a.len();
    if n > MAX_OT_SIZE {
        return Err(IcpaError::Invalid(format!("instance of size {n} exceeds {MAX_OT_SIZE}")));
    }
    // best[mask]: cheapest way to assign a[0..popcount(mask)] to the b's in mask.
    let mut best = vec![f64::INFINITY; 1 << n];
    best[0] = 0.0;
    for mask in 0usize..(1 << n) {
        let cur = best[mask];
        if cur == f64::INFINITY {
            continue;
        }
        let i = mask.count_ones() as usize;
        if i == n {
            continue;
        }
        for k in 0..n {
            if mask & (1 << k) == 0 {
                let c = cur + (a[i] - b[k]) * (a[i] - b[k]);
                let next = mask | (1 << k);
                if c < best[next] {
                    best[next] = c;
                }
            }
        }
    }
    Ok(best[(1 << n) - 1])
}

fn weakly_better_everywhere(a: &[f64], b: &[f64]) -> bool {
    a.iter().zip(b).all(|(x, y)| x <= y) && a.iter().zip(b).any(|(x, y)| x < y)
}

/// Indices of points no other point dominates, by pairwise comparison.
pub fn enumerate_front(space: &[Vec<f64>]) -> Vec<usize> {
    (0..space.len())
        .filter(|&i| {
            !space
                .iter()
                .enumerate()
                .any(|(k, p)| k != i && weakly_better_everywhere(p, &space[i]))
        })
        .collect()
}

/// For every objective `j`, a front point attaining the smallest `L_j` in
/// the space. Errors if some objective has no such witness.
pub fn verify_minima_on_front(space: &[Vec<f64>]) -> Result<Vec<usize>> {
    if space.is_empty() {
        return Err(IcpaError::Empty("model space"));
    }
    let m = space[0].len();
    let front = enumerate_front(space);
    let mut witnesses = Vec::with_capacity(m);
    for j in 0..m {
        let best = space.iter().map(|p| p[j]).fold(f64::INFINITY, f64::min);
        match front.iter().find(|&&f| space[f][j] == best) {
            Some(&f) => witnesses.push(f),
            None => {
                return Err(IcpaError::Invalid(format!(
                    "no front point attains the minimum {best} of objective {j}"
                )))
            }
        }
    }
    Ok(witnesses)
}

#[derive(Debug, Clone, PartialEq)]
pub enum ConstrainedOutcome {
    /// No point meets the improvement constraints.
    Infeasible,
    Witness {
        /// Smallest excess `L_j - min L_j` among feasible points.
        epsilon: f64,
        /// Feasible points attaining it.
        minimizers: Vec<usize>,
        /// Those minimizers that are on the front.
        on_front: Vec<usize>,
    },
}

/// Minimizes the excess loss of objective `j` over points that improve
/// every other objective `j'` on `f1` by at least `delta[j']`, and checks
/// that the minimizer set meets the front.
pub fn verify_constrained_minimum(space: &[Vec<f64>], j: usize, f1: usize, delta: &[f64]) -> Result<ConstrainedOutcome> {
    if space.is_empty() {
        return Err(IcpaError::Empty("model space"));
    }
    let m = space[0].len();
    if j >= m || f1 >= space.len() || delta.len() != m {
        return Err(IcpaError::Invalid("objective, reference point or constraint out of range".into()));
    }
    let nu = space.iter().map(|p| p[j]).fold(f64::INFINITY, f64::min);
    let feasible: Vec<usize> = (0..space.len())
        .filter(|&i| (0..m).all(|k| k == j || space[i][k] <= space[f1][k] - delta[k]))
        .collect();
    if feasible.is_empty() {
        return Ok(ConstrainedOutcome::Infeasible);
    }
    let best = feasible.iter().map(|&i| space[i][j]).fold(f64::INFINITY, f64::min);
    let minimizers: Vec<usize> = feasible.into_iter().filter(|&i| space[i][j] == best).collect();
    let front = enumerate_front(space);
    let on_front: Vec<usize> = minimizers.iter().copied().filter(|i| front.contains(i)).collect();
    if on_front.is_empty() {
        return Err(IcpaError::Invalid(format!(
            "constrained minimizers {minimizers:?} of objective {j} miss the front"
        )));
    }
    Ok(ConstrainedOutcome::Witness {
        epsilon: best - nu,
        minimizers,
        on_front,
    })
}

/// Improvement vectors realizable from `f1`: for each front point that is
/// no worse than `f1` on every objective except `j`, the per-objective gain.
pub fn achievable_deltas(space: &[Vec<f64>], j: usize, f1: usize) -> Vec<Vec<f64>> {
    let m = space[f1].len();
    enumerate_front(space)
        .into_iter()
        .filter(|&g| (0..m).all(|k| k == j || space[g][k] <= space[f1][k]))
        .map(|g| {
            (0..m)
                .map(|k| if k == j { 0.0 } else { space[f1][k] - space[g][k] })
                .collect()
        })
        .collect()
}

/// Volume estimate counting grid cells whose centers lie above `baseline`
/// and below both `ceiling` and at least one front point.
pub fn grid_hypervolume(front: &[Vec<f64>], baseline: &[f64], ceiling: &[f64], resolution: usize) -> Result<f64> {
    if resolution < 10 {
        return Err(IcpaError::Invalid("resolution must be at least 10".into()));
    }
    let m = baseline.len();
    if ceiling.len() != m || front.iter().any(|p| p.len() != m) {
        return Err(IcpaError::LengthMismatch {
            expected: m,
            actual: ceiling.len(),
        });
    }
    let step: Vec<f64> = (0..m).map(|k| (ceiling[k] - baseline[k]) / resolution as f64).collect();
    if step.iter().any(|&s| s <= 0.0) {
        return Ok(0.0);
    }
    let cell: f64 = step.iter().product();
    let mut idx = vec![0usize; m];
    let mut center = vec![0.0; m];
    let mut count = 0u64;
    'outer: loop {
        for k in 0..m {
            center[k] = baseline[k] + (idx[k] as f64 + 0.5) * step[k];
        }
        if front.iter().any(|p| center.iter().zip(p).all(|(c, v)| c <= v)) {
            count += 1;
        }
        for k in 0..m {
            idx[k] += 1;
            if idx[k] < resolution {
                continue 'outer;
            }
            idx[k] = 0;
        }
        break;
    }
    Ok(count as f64 * cell)
}

/// Largest front accepted by [`exact_hypervolume`].
pub const MAX_EXACT_FRONT: usize = 16;

/// Volume of the union of boxes `[baseline, min(p, ceiling)]` by
/// inclusion-exclusion over every subset of the front.
pub fn exact_hypervolume(front: &[Vec<f64>], baseline: &[f64], ceiling: &[f64]) -> Result<f64> {
    if front.len() > MAX_EXACT_FRONT {
        return Err(IcpaError::Invalid(format!("front larger than {MAX_EXACT_FRONT}")));
    }
    let m = baseline.len();
    if ceiling.len() != m || front.iter().any(|p| p.len() != m) {
        return Err(IcpaError::LengthMismatch {
            expected: m,
            actual: ceiling.len(),
        });
    }
    let mut total = 0.0;
    for mask in 1u32..(1 << front.len()) {
        let mut corner = ceiling.to_vec();
        for (i, p) in front.iter().enumerate() {
            if mask >> i & 1 == 1 {
                for k in 0..m {
                    corner[k] = corner[k].min(p[k]);
                }
            }
        }
        let v: f64 = corner.iter().zip(baseline).map(|(c, b)| (c - b).max(0.0)).product();
        if mask.count_ones() % 2 == 1 {
            total += v;
        } else {
            total -= v;
        }
    }
    Ok(total)
}

/// Central-difference gradient of `f` at `x`.
pub fn central_difference<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Relative error `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ot_examples() {
        assert_eq!(exact_ot_1d(&[0.5, -1.0, 3.0], &[3.0, 0.5, -1.0]).unwrap(), 0.0);
        assert_eq!(exact_ot_1d(&[0.0, 2.0], &[1.0, 3.0]).unwrap(), 2.0);
        assert_eq!(exact_ot_1d(&[2.0, 0.0], &[3.0, 1.0]).unwrap(), 2.0);
        assert!(exact_ot_1d(&[1.0], &[]).is_err());
    }

    #[test]
    fn exact_hypervolume_examples() {
        let two = [vec![1.0, 3.0], vec![3.0, 1.0]];
        assert_eq!(exact_hypervolume(&two, &[0.0, 0.0], &[3.0, 3.0]).unwrap(), 5.0);
        let cubes = [vec![2.0, 1.0, 1.0], vec![1.0, 2.0, 1.0], vec![1.0, 1.0, 2.0]];
        assert_eq!(exact_hypervolume(&cubes, &[0.0; 3], &[2.0; 3]).unwrap(), 4.0);
        assert_eq!(exact_hypervolume(&[vec![1.0, 1.0]], &[2.0, 0.0], &[3.0, 3.0]).unwrap(), 0.0);
        let g = grid_hypervolume(&cubes, &[0.0; 3], &[2.0; 3], 40).unwrap();
        assert!((g - 4.0).abs() < 1e-9);
    }

    #[test]
    fn front_examples() {
        assert_eq!(enumerate_front(&[vec![1.0, 2.0], vec![2.0, 1.0]]), vec![0, 1]);
        assert_eq!(
            enumerate_front(&[vec![3.0, 3.0], vec![1.0, 1.0], vec![2.0, 2.0]]),
            vec![1]
        );
    }

    #[test]
    fn front_property_checks() {
        let single = vec![vec![1.0, 2.0, 3.0]];
        assert_eq!(verify_minima_on_front(&single).unwrap(), vec![0, 0, 0]);
        let space = vec![
            vec![1.0, 4.0],
            vec![2.0, 2.0],
            vec![4.0, 1.0],
            vec![3.0, 3.0],
            vec![5.0, 5.0],
        ];
        assert_eq!(verify_minima_on_front(&space).unwrap(), vec![0, 2]);
        // Against the worst point, zero improvements constrain nothing.
        match verify_constrained_minimum(&space, 0, 4, &[0.0, 0.0]).unwrap() {
            ConstrainedOutcome::Witness { epsilon, on_front, .. } => {
                assert_eq!(epsilon, 0.0);
                assert_eq!(on_front, vec![0]);
            }
            other => panic!("{other:?}"),
        }
        match verify_constrained_minimum(&space, 0, 3, &[0.0, 1.0]).unwrap() {
            ConstrainedOutcome::Witness { epsilon, on_front, .. } => {
                assert_eq!(epsilon, 1.0);
                assert_eq!(on_front, vec![1]);
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(
            verify_constrained_minimum(&space, 0, 3, &[0.0, 5.0]).unwrap(),
            ConstrainedOutcome::Infeasible
        );
    }

    #[test]
    fn grid_volumes() {
        let a = grid_hypervolume(&[vec![2.0, 3.0]], &[0.0, 0.0], &[2.0, 3.0], 50).unwrap();
        assert!((a - 6.0).abs() < 1e-9);
        let two = grid_hypervolume(&[vec![1.0, 3.0], vec![3.0, 1.0]], &[0.0, 0.0], &[3.0, 3.0], 300).unwrap();
        assert!((two - 5.0).abs() < 0.05);
        assert_eq!(grid_hypervolume(&[vec![0.0, 0.0]], &[0.0, 0.0], &[0.0, 0.0], 10).unwrap(), 0.0);
    }

    #[test]
    fn finite_differences() {
        let g = central_difference(|x| x[0] * x[0] + 3.0 * x[1], &[2.0, 1.0], 1e-5);
        assert!((g[0] - 4.0).abs() < 1e-8 && (g[1] - 3.0).abs() < 1e-8);
    }
}
