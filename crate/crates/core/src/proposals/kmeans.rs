//! One-dimensional K-means for anchor lengths and kernel sizes.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::util::derive_seed;

pub const MAX_ITERATIONS: usize = 300;
pub const RESTARTS: usize = 16;
/// Instances with `n²·k` up to this size also get the exact dynamic-programming solution.
const EXACT_BUDGET: usize = 20_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    /// Sorted ascending.
    pub centroids: Vec<f64>,
    pub inertia: f64,
}

pub fn inertia(values: &[f64], centroids: &[f64]) -> f64 {
    values
        .iter()
        .map(|v| {
            centroids
                .iter()
                .map(|c| (v - c) * (v - c))
                .fold(f64::INFINITY, f64::min)
        })
        .sum()
}

fn nearest(v: f64, centroids: &[f64]) -> usize {
    let mut best = 0;
    for (j, c) in centroids.iter().enumerate() {
        if (v - c).abs() < (v - centroids[best]).abs() {
            best = j;
        }
    }
    best
}

/// Seeded k-means++ initialisation followed by Lloyd iterations. Empty clusters are
/// reseeded to the point farthest from its centroid.
pub fn lloyd(values: &[f64], k: usize, rng: &mut impl Rng) -> Clustering {
    let mut centroids = Vec::with_capacity(k);
    centroids.push(*values.choose(rng).expect("non-empty values"));
    while centroids.len() < k {
        let d2: Vec<f64> = values
            .iter()
            .map(|v| {
                centroids
                    .iter()
                    .map(|c| (v - c) * (v - c))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut r = rng.random_range(0.0..total);
            let mut pick = values.len() - 1;
            for (i, w) in d2.iter().enumerate() {
                if r < *w {
                    pick = i;
                    break;
                }
                r -= w;
            }
            values[pick]
        } else {
            *values.choose(rng).expect("non-empty values")
        };
        centroids.push(next);
    }

    let mut assign = vec![usize::MAX; values.len()];
    for _ in 0..MAX_ITERATIONS {
        let mut changed = false;
        for (i, v) in values.iter().enumerate() {
            let j = nearest(*v, &centroids);
            if assign[i] != j {
                assign[i] = j;
                changed = true;
            }
        }
        let mut sums = vec![0.0; k];
        let mut counts = vec![0usize; k];
        for (i, v) in values.iter().enumerate() {
            sums[assign[i]] += v;
            counts[assign[i]] += 1;
        }
        for j in 0..k {
            if counts[j] > 0 {
                centroids[j] = sums[j] / counts[j] as f64;
            } else {
                let far = (0..values.len())
                    .max_by(|&a, &b| {
                        let da = (values[a] - centroids[assign[a]]).abs();
                        let db = (values[b] - centroids[assign[b]]).abs();
                        da.total_cmp(&db).then(b.cmp(&a))
                    })
                    .expect("non-empty values");
                centroids[j] = values[far];
                assign[far] = j;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    centroids.sort_by(f64::total_cmp);
    Clustering {
        inertia: inertia(values, &centroids),
        centroids,
    }
}

/// Globally optimal 1-D clustering; clusters are contiguous runs of the sorted values.
pub fn exact(values: &[f64], k: usize) -> Clustering {
    let mut xs = values.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    let mut s1 = vec![0.0; n + 1];
    let mut s2 = vec![0.0; n + 1];
    for i in 0..n {
        s1[i + 1] = s1[i] + xs[i];
        s2[i + 1] = s2[i] + xs[i] * xs[i];
    }
    // cost of xs[i..j]
    let cost = |i: usize, j: usize| {
        let m = (j - i) as f64;
        let s = s1[j] - s1[i];
        (s2[j] - s2[i] - s * s / m).max(0.0)
    };
    let mut dp = vec![vec![f64::INFINITY; n + 1]; k + 1];
    let mut cut = vec![vec![0usize; n + 1]; k + 1];
    dp[0][0] = 0.0;
    for c in 1..=k {
        for j in c..=n {
            for i in (c - 1)..j {
                let v = dp[c - 1][i] + cost(i, j);
                if v < dp[c][j] {
                    dp[c][j] = v;
                    cut[c][j] = i;
                }
            }
        }
    }
    let mut centroids = Vec::with_capacity(k);
    let mut j = n;
    for c in (1..=k).rev() {
        let i = cut[c][j];
        centroids.push((s1[j] - s1[i]) / (j - i) as f64);
        j = i;
    }
    centroids.sort_by(f64::total_cmp);
    Clustering {
        inertia: inertia(values, &centroids),
        centroids,
    }
}

/// Best of [`RESTARTS`] seeded Lloyd runs and, when affordable, the exact solution.
pub fn kmeans(values: &[f64], k: usize, seed: u64) -> Result<Clustering> {
    if k == 0 {
        return Err(Error::config("cluster count must be at least 1"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::data("non-finite value in clustering input"));
    }
    let mut distinct = values.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < k {
        return Err(Error::data(format!(
            "{} distinct lengths, need at least {k}",
            distinct.len()
        )));
    }
    let mut best: Option<Clustering> = None;
    let mut consider = |c: Clustering| {
        if best.as_ref().is_none_or(|b| c.inertia < b.inertia) {
            best = Some(c);
        }
    };
    for r in 0..RESTARTS {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, r as u64));
        consider(lloyd(values, k, &mut rng));
    }
    let n = values.len();
    if n.saturating_mul(n).saturating_mul(k) <= EXACT_BUDGET {
        consider(exact(values, k));
    }
    Ok(best.expect("at least one restart"))
}
