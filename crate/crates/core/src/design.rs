//! Space-filling designs on the unit cube: Latin hypercubes, a maximin
//! refinement pass, and rejection sampling inside a membership predicate.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// A set of points in `[-1, 1]^d` plus the seed that generated them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignMatrix {
    pub points: Vec<Vec<f64>>,
    pub seed: u64,
}

impl DesignMatrix {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dimension(&self) -> usize {
        self.points.first().map_or(0, Vec::len)
    }

    pub fn min_pairwise_distance(&self) -> f64 {
        min_pairwise_distance(&self.points)
    }
}

/// Index of the stratum of `[-1, 1]` split into `n` equal pieces that holds `v`.
pub fn stratum(v: f64, n: usize) -> usize {
    let k = ((v + 1.0) * 0.5 * n as f64).floor();
    (k.max(0.0) as usize).min(n - 1)
}

fn stratum_value(k: usize, n: usize, u: f64) -> f64 {
    (-1.0 + 2.0 * (k as f64 + u) / n as f64).clamp(-1.0, 1.0)
}

/// Latin hypercube of `n` points in `d` dimensions: on every axis each of the
/// `n` equal-width strata holds exactly one point.
pub fn latin_hypercube(n: usize, d: usize, seed: u64) -> DesignMatrix {
    let mut rng = seed::rng(seed);
    let mut points = vec![vec![0.0; d]; n];
    let mut perm: Vec<usize> = (0..n).collect();
    for j in 0..d {
        perm.shuffle(&mut rng);
        for (i, &k) in perm.iter().enumerate() {
            points[i][j] = stratum_value(k, n, rng.random::<f64>());
        }
    }
    DesignMatrix { points, seed }
}

/// True if every axis of `points` has exactly one point per stratum.
pub fn is_latin(points: &[Vec<f64>]) -> bool {
    let n = points.len();
    if n == 0 {
        return true;
    }
    let d = points[0].len();
    (0..d).all(|j| {
        let mut seen = vec![false; n];
        points.iter().all(|p| {
            let k = stratum(p[j], n);
            !std::mem::replace(&mut seen[k], true)
        })
    })
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn min_pairwise_distance(points: &[Vec<f64>]) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..points.len() {
        for j in 0..i {
            best = best.min(sq_dist(&points[i], &points[j]));
        }
    }
    best.sqrt()
}

/// Improves the minimum pairwise (Euclidean) distance of a Latin hypercube.
///
/// Two kinds of move are proposed: swapping one coordinate between two points,
/// and redrawing one coordinate inside its own stratum. Both keep the Latin
/// property. A move is kept only if the minimum pairwise distance does not
/// shrink.
pub fn maximin_improve(design: &DesignMatrix, iterations: usize, seed: u64) -> DesignMatrix {
    let n = design.len();
    if iterations == 0 || n < 2 {
        return design.clone();
    }
    let d = design.dimension();
    let mut rng = seed::rng(seed);
    let mut pts = design.points.clone();
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..i {
            let v = sq_dist(&pts[i], &pts[j]);
            dist[i * n + j] = v;
            dist[j * n + i] = v;
        }
    }
    let global_min = |dist: &[f64]| {
        let mut m = f64::INFINITY;
        for i in 0..n {
            for j in 0..i {
                m = m.min(dist[i * n + j]);
            }
        }
        m
    };
    let mut current = global_min(&dist);
    let mut saved_rows = vec![vec![0.0; n]; 2];

    for _ in 0..iterations {
        let col = rng.random_range(0..d);
        let a = rng.random_range(0..n);
        let swap = rng.random_bool(0.5);
        let b = if swap {
            let mut b = rng.random_range(0..n - 1);
            if b >= a {
                b += 1;
            }
            b
        } else {
            a
        };
        let (old_a, old_b) = (pts[a][col], pts[b][col]);
        if swap {
            pts[a][col] = old_b;
            pts[b][col] = old_a;
        } else {
            pts[a][col] = stratum_value(stratum(old_a, n), n, rng.random::<f64>());
        }
        for (slot, &r) in [a, b].iter().enumerate() {
            for k in 0..n {
                saved_rows[slot][k] = dist[r * n + k];
            }
        }
        for &r in &[a, b] {
            for k in 0..n {
                if k != r {
                    let v = sq_dist(&pts[r], &pts[k]);
                    dist[r * n + k] = v;
                    dist[k * n + r] = v;
                }
            }
        }
        let candidate = global_min(&dist);
        if candidate >= current {
            current = candidate;
        } else {
            pts[a][col] = old_a;
            pts[b][col] = old_b;
            for (slot, &r) in [a, b].iter().enumerate() {
                for k in 0..n {
                    dist[r * n + k] = saved_rows[slot][k];
                    dist[k * n + r] = saved_rows[slot][k];
                }
            }
        }
    }
    DesignMatrix {
        points: pts,
        seed: design.seed,
    }
}

/// Result of sampling inside a membership region.
#[derive(Debug, Clone)]
pub struct ConstrainedDesign {
    pub design: DesignMatrix,
    /// Total candidates tested against the predicate.
    pub candidates: usize,
    /// Candidates that satisfied the predicate (before thinning to `n`).
    pub accepted: usize,
    /// Set when fewer than the requested number of points could be found.
    pub short: bool,
}

impl ConstrainedDesign {
    pub fn acceptance_rate(&self) -> f64 {
        self.accepted as f64 / self.candidates.max(1) as f64
    }
}

/// Draws `n` points inside `membership` by rejection from successive Latin
/// hypercube candidate pools of size `oversample * n`.
///
/// Sampling stops once `n` points are accepted or `oversample * n * 100`
/// candidates were tried. Surplus acceptances are thinned to `n` by greedy
/// farthest-point selection, keeping the design spread out.
pub fn constrained_design<F>(
    n: usize,
    d: usize,
    membership: F,
    oversample: f64,
    seed: u64,
) -> Result<ConstrainedDesign>
where
    F: Fn(&[f64]) -> bool + Sync,
{
    use rayon::prelude::*;

    if !(oversample >= 1.0) {
        return Err(Error::config("oversample", "must be >= 1"));
    }
    let pool = ((n as f64 * oversample).ceil() as usize).max(1);
    let budget = pool.saturating_mul(100);
    let mut accepted: Vec<Vec<f64>> = Vec::new();
    let mut tried = 0usize;
    let mut round = 0u64;
    while accepted.len() < n && tried < budget {
        let size = pool.min(budget - tried);
        let cand = latin_hypercube(size, d, seed::derive(seed, &[round]));
        let keep: Vec<bool> = cand.points.par_iter().map(|p| membership(p)).collect();
        accepted.extend(
            cand.points
                .into_iter()
                .zip(keep)
                .filter_map(|(p, k)| k.then_some(p)),
        );
        tried += size;
        round += 1;
    }
    if accepted.is_empty() && n > 0 {
        return Err(Error::EmptyRegion { candidates: tried });
    }
    let n_accepted = accepted.len();
    let short = n_accepted < n;
    if short {
        log::warn!("constrained design found only {n_accepted} of {n} points in {tried} candidates");
    }
    let points = if n_accepted > n {
        farthest_point_subset(accepted, n)
    } else {
        accepted
    };
    Ok(ConstrainedDesign {
        design: DesignMatrix { points, seed },
        candidates: tried,
        accepted: n_accepted,
        short,
    })
}

/// Greedy maximin subset: start from the first point, repeatedly add the point
/// farthest from those already chosen.
fn farthest_point_subset(points: Vec<Vec<f64>>, n: usize) -> Vec<Vec<f64>> {
    let mut nearest: Vec<f64> = vec![f64::INFINITY; points.len()];
    let mut chosen = Vec::with_capacity(n);
    let mut next = 0usize;
    for _ in 0..n {
        chosen.push(next);
        let c = &points[next];
        let mut best = (f64::NEG_INFINITY, 0usize);
        for (i, p) in points.iter().enumerate() {
            nearest[i] = nearest[i].min(sq_dist(p, c));
            if nearest[i] > best.0 {
                best = (nearest[i], i);
            }
        }
        next = best.1;
    }
    chosen.into_iter().map(|i| points[i].clone()).collect()
}
