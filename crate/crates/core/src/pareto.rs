//! Multi-objective bookkeeping: dominance, fronts, hypervolumes, transfer
//! accounting and preference-constrained descent weights.

use rand::Rng;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{IcpaError, Result};

/// `a` is no worse than `b` everywhere and strictly better somewhere.
pub fn dominates(a: &[f64], b: &[f64]) -> Result<bool> {
    if a.len() != b.len() {
        return Err(IcpaError::LengthMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    let mut strict = false;
    for (x, y) in a.iter().zip(b) {
        if x > y {
            return Ok(false);
        }
        if x < y {
            strict = true;
        }
    }
    Ok(strict)
}

fn dom(a: &[f64], b: &[f64]) -> bool {
    dominates(a, b).unwrap_or(false)
}

/// Indices of the non-dominated points, ascending. Duplicates of a front
/// point are all kept.
pub fn extract_front(points: &[Vec<f64>]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    // After a lexicographic sort, a point can only be dominated by an earlier one,
    // and anything that dominates it is dominated by (or equal to) a kept point.
    order.sort_by(|&a, &b| {
        points[a]
            .iter()
            .zip(&points[b])
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut front: Vec<usize> = Vec::new();
    for i in order {
        if !front.iter().any(|&f| dom(&points[f], &points[i])) {
            front.push(i);
        }
    }
    front.sort_unstable();
    front
}

fn check_above(points: &[Vec<f64>], baseline: &[f64]) -> Result<()> {
    for (index, p) in points.iter().enumerate() {
        if p.len() != baseline.len() {
            return Err(IcpaError::LengthMismatch {
                expected: baseline.len(),
                actual: p.len(),
            });
        }
        for (&v, &b) in p.iter().zip(baseline) {
            if v < b {
                return Err(IcpaError::BelowBaseline {
                    index,
                    value: v,
                    baseline: b,
                });
            }
        }
    }
    Ok(())
}

/// Hypervolume estimate; `std_error` is zero for exact computations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Volume {
    pub value: f64,
    pub std_error: f64,
}

/// Samples used by the Monte Carlo estimate for three or more objectives.
pub const HUF_SAMPLES: usize = 200_000;

/// Measure of the region above `baseline`, below `ceiling`, and below at
/// least one front point. Exact for up to two objectives; Monte Carlo
/// otherwise.
pub fn huf<R: Rng + ?Sized>(
    front: &[Vec<f64>],
    baseline: &[f64],
    ceiling: &[f64],
    rng: &mut R,
) -> Result<Volume> {
    huf_with_samples(front, baseline, ceiling, HUF_SAMPLES, rng)
}

pub fn huf_with_samples<R: Rng + ?Sized>(
    front: &[Vec<f64>],
    baseline: &[f64],
    ceiling: &[f64],
    samples: usize,
    rng: &mut R,
) -> Result<Volume> {
    check_above(front, baseline)?;
    if ceiling.len() != baseline.len() {
        return Err(IcpaError::LengthMismatch {
            expected: baseline.len(),
            actual: ceiling.len(),
        });
    }
    let m = baseline.len();
    // Clip every point to the ceiling; the region is unchanged.
    let pts: Vec<Vec<f64>> = front
        .iter()
        .map(|p| p.iter().zip(ceiling).map(|(v, c)| v.min(*c)).collect())
        .collect();
    if pts.is_empty() || m == 0 {
        return Ok(Volume {
            value: 0.0,
            std_error: 0.0,
        });
    }
    match m {
        1 => Ok(Volume {
            value: pts.iter().map(|p| (p[0] - baseline[0]).max(0.0)).fold(0.0, f64::max),
            std_error: 0.0,
        }),
        2 => {
            let mut sorted: Vec<(f64, f64)> = pts
                .iter()
                .map(|p| ((p[0] - baseline[0]).max(0.0), (p[1] - baseline[1]).max(0.0)))
                .collect();
            sorted.sort_by(|a, b| b.0.total_cmp(&a.0).then(b.1.total_cmp(&a.1)));
            // Sweep x from right to left; each step adds a strip of height max y so far.
            let mut area = 0.0;
            let mut best_y = 0.0f64;
            for (k, &(x, y)) in sorted.iter().enumerate() {
                best_y = best_y.max(y);
                let next_x = sorted.get(k + 1).map_or(0.0, |p| p.0);
                area += (x - next_x) * best_y;
            }
            Ok(Volume {
                value: area,
                std_error: 0.0,
            })
        }
        _ => {
            let box_vol: f64 = (0..m).map(|j| (ceiling[j] - baseline[j]).max(0.0)).product();
            if box_vol == 0.0 || samples == 0 {
                return Ok(Volume {
                    value: 0.0,
                    std_error: 0.0,
                });
            }
            let mut hits = 0usize;
            let mut x = vec![0.0; m];
            for _ in 0..samples {
                for j in 0..m {
                    x[j] = baseline[j] + rng.random::<f64>() * (ceiling[j] - baseline[j]);
                }
                if pts.iter().any(|p| x.iter().zip(p).all(|(a, b)| a <= b)) {
                    hits += 1;
                }
            }
            let frac = hits as f64 / samples as f64;
            Ok(Volume {
                value: box_vol * frac,
                std_error: box_vol * (frac * (1.0 - frac) / samples as f64).sqrt(),
            })
        }
    }
}

/// Componentwise maximum, the default HUF ceiling.
pub fn componentwise_max(points: &[Vec<f64>]) -> Vec<f64> {
    let m = points.first().map_or(0, Vec::len);
    (0..m)
        .map(|j| points.iter().map(|p| p[j]).fold(f64::NEG_INFINITY, f64::max))
        .collect()
}

/// Hyperrectangle volume `prod(L - baseline)` and its AM-GM upper bound.
pub fn v_rec(losses: &[f64], baseline: &[f64]) -> Result<(f64, f64)> {
    check_above(&[losses.to_vec()], baseline)?;
    let gaps: Vec<f64> = losses.iter().zip(baseline).map(|(l, b)| l - b).collect();
    let m = gaps.len() as f64;
    let product = gaps.iter().product();
    let bound = (gaps.iter().sum::<f64>() / m).powf(m);
    Ok((product, bound))
}

/// Per-source excess loss over the single-source baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct TntReport {
    pub epsilon: Vec<f64>,
}

pub fn tnt(losses: &[f64], baseline: &[f64]) -> Result<TntReport> {
    if losses.len() != baseline.len() {
        return Err(IcpaError::LengthMismatch {
            expected: baseline.len(),
            actual: losses.len(),
        });
    }
    Ok(TntReport {
        epsilon: losses.iter().zip(baseline).map(|(l, b)| l - b).collect(),
    })
}

/// Uniform draws normalized by their sum.
pub fn sample_lambda<R: Rng + ?Sized>(m: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let raw: Vec<f64> = (0..m).map(|_| rng.random::<f64>()).collect();
        let s: f64 = raw.iter().sum();
        if s > 0.0 {
            return raw.into_iter().map(|x| x / s).collect();
        }
    }
}

/// Near one-hot preference on a target source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preference {
    pub target: usize,
    pub z: Vec<f64>,
}

impl Preference {
    pub fn new(m: usize, target: usize, eps: f64) -> Result<Self> {
        if target >= m {
            return Err(IcpaError::UnknownSource(target));
        }
        if !(eps >= 0.0) {
            return Err(IcpaError::Config("preference epsilon must be non-negative".into()));
        }
        let mut z = vec![eps; m];
        z[target] = 1.0;
        Ok(Self { target, z })
    }

    /// Sources whose preference-weighted loss `z_j * L_j` exceeds that of
    /// the target. With `z_j = 0` a source is never active.
    pub fn active(&self, losses: &[f64]) -> Vec<usize> {
        let t = self.target;
        let reference = self.z[t] * losses[t];
        (0..losses.len())
            .filter(|&j| j != t && self.z[j] * losses[j] > reference)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PmtlWeights {
    pub w: Vec<f64>,
    /// Set when no common descent direction was found and the weights fell
    /// back to the target alone.
    pub restricted: bool,
    pub active: Vec<usize>,
    pub iterations: usize,
}

pub const FW_MAX_ITERS: usize = 100;
pub const FW_GAP_TOL: f64 = 1e-6;
const CONTRACT_TOL: f64 = 1e-8;

/// Minimum-norm point of the convex hull of the vectors with Gram matrix
/// `gram`, by Frank-Wolfe with exact line search. Returns the simplex
/// weights and the iteration count.
pub fn min_norm_weights(gram: &[Vec<f64>]) -> (Vec<f64>, usize) {
    let k = gram.len();
    if k == 0 {
        return (Vec::new(), 0);
    }
    // Start at the vertex of smallest norm.
    let start = (0..k)
        .min_by(|&a, &b| gram[a][a].total_cmp(&gram[b][b]))
        .unwrap();
    let mut w = vec![0.0; k];
    w[start] = 1.0;
    let mut iters = 0;
    for _ in 0..FW_MAX_ITERS {
        iters += 1;
        // g = G w is the gradient of 0.5 w'Gw.
        let g: Vec<f64> = (0..k).map(|i| (0..k).map(|l| gram[i][l] * w[l]).sum()).collect();
        let wgw: f64 = (0..k).map(|i| w[i] * g[i]).sum();
        let s = (0..k).min_by(|&a, &b| g[a].total_cmp(&g[b])).unwrap();
        let gap = wgw - g[s];
        if gap < FW_GAP_TOL {
            break;
        }
        // Line search between d = Gw and e_s: minimize |(1-γ)d + γ v_s|².
        let dd = wgw;
        let ds = g[s];
        let ss = gram[s][s];
        let denom = dd - 2.0 * ds + ss;
        let gamma = if denom <= 0.0 {
            1.0
        } else {
            ((dd - ds) / denom).clamp(0.0, 1.0)
        };
        for (i, wi) in w.iter_mut().enumerate() {
            *wi *= 1.0 - gamma;
            if i == s {
                *wi += gamma;
            }
        }
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= s);
    (w, iters)
}

/// Loss weights whose combined gradient does not increase the target loss
/// nor, when possible, any active constraint. `gradients` are flattened
/// per-source gradients over a common parameter vector.
pub fn pmtl_weights(losses: &[f64], gradients: &[Vec<f64>], pref: &Preference) -> Result<PmtlWeights> {
    let m = losses.len();
    if gradients.len() != m || pref.z.len() != m {
        return Err(IcpaError::LengthMismatch {
            expected: m,
            actual: gradients.len(),
        });
    }
    let j = pref.target;
    let one_hot = |restricted: bool, active: Vec<usize>, iterations: usize| {
        let mut w = vec![0.0; m];
        w[j] = 1.0;
        PmtlWeights {
            w,
            restricted,
            active,
            iterations,
        }
    };
    if m == 1 {
        return Ok(one_hot(false, Vec::new(), 0));
    }
    let active = pref.active(losses);
    let mut set = vec![j];
    set.extend(active.iter().copied());
    let gram: Vec<Vec<f64>> = set
        .iter()
        .map(|&a| set.iter().map(|&b| crate::nn::dot(&gradients[a], &gradients[b])).collect())
        .collect();
    let (sub, iterations) = min_norm_weights(&gram);
    let d_norm2: f64 = (0..set.len())
        .map(|x| (0..set.len()).map(|y| sub[x] * sub[y] * gram[x][y]).sum::<f64>())
        .sum();
    // <d, g_a> for each member of the set.
    let inner: Vec<f64> = (0..set.len())
        .map(|x| (0..set.len()).map(|y| sub[y] * gram[x][y]).sum())
        .collect();
    let scale = gram.iter().enumerate().map(|(x, r)| r[x]).fold(0.0, f64::max).max(1e-300);
    if d_norm2 <= 1e-12 * scale || inner.iter().any(|&v| v < -CONTRACT_TOL) {
        return Ok(one_hot(true, active, iterations));
    }
    let mut w = vec![0.0; m];
    for (x, &a) in set.iter().enumerate() {
        w[a] = sub[x];
    }
    Ok(PmtlWeights {
        w,
        restricted: false,
        active,
        iterations,
    })
}

/// Fraction of front points that lie on the lower convex hull (two
/// objectives only; `None` otherwise).
pub fn convexity_diagnostic(front: &[Vec<f64>]) -> Option<f64> {
    if front.is_empty() || front[0].len() != 2 {
        return None;
    }
    let mut pts: Vec<(f64, f64)> = front.iter().map(|p| (p[0], p[1])).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let mut hull: Vec<(f64, f64)> = Vec::new();
    for &p in &pts {
        while hull.len() >= 2 {
            let a = hull[hull.len() - 2];
            let b = hull[hull.len() - 1];
            let cross = (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
            if cross <= 0.0 {
                hull.pop();
            } else {
                break;
            }
        }
        hull.push(p);
    }
    let on = pts.iter().filter(|p| hull.contains(p)).count();
    Some(on as f64 / pts.len() as f64)
}
