use serde::{Deserialize, Serialize};

use super::DiscoveryError;
use crate::rng::CounterRng;

pub const DEFAULT_MAX_ITER: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clustering {
    /// Cluster id in `[0, k)` for each input vector, in input order.
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Sum of squared distances to assigned centroids.
    pub inertia: f64,
    /// Inertia after initialization and after every Lloyd step.
    pub inertia_history: Vec<f64>,
    pub seed: u64,
    pub iterations: usize,
    pub converged: bool,
    /// Number of times an empty cluster was re-seeded.
    pub reseeds: usize,
}

impl Clustering {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn members(&self, cluster: usize) -> Vec<usize> {
        self.assignments.iter().enumerate().filter(|(_, &c)| c == cluster).map(|(i, _)| i).collect()
    }
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn assign(vectors: &[Vec<f64>], centroids: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let mut inertia = 0.0;
    let labels = vectors
        .iter()
        .map(|v| {
            let (j, d) = nearest(v, centroids);
            inertia += d;
            j
        })
        .collect();
    (labels, inertia)
}

fn validate(vectors: &[Vec<f64>], k: usize) -> Result<usize, DiscoveryError> {
    if k == 0 {
        return Err(DiscoveryError::InvalidArgument("k must be ≥ 1".into()));
    }
    if k > vectors.len() {
        return Err(DiscoveryError::InvalidArgument(format!("k = {k} exceeds item count {}", vectors.len())));
    }
    let dim = vectors[0].len();
    if dim == 0 {
        return Err(DiscoveryError::InvalidArgument("vectors have dimension 0".into()));
    }
    for (i, v) in vectors.iter().enumerate() {
        if v.len() != dim {
            return Err(DiscoveryError::InvalidArgument(format!("vector {i} has dimension {}, expected {dim}", v.len())));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(DiscoveryError::InvalidArgument(format!("vector {i} has non-finite components")));
        }
    }
    Ok(dim)
}

/// k-means++ seeding: the first centroid uniformly, each next one with
/// probability proportional to squared distance from the nearest chosen.
fn plus_plus(vectors: &[Vec<f64>], k: usize, rng: &mut CounterRng) -> Vec<Vec<f64>> {
    let n = vectors.len();
    let mut chosen = vec![rng.below(n as u64) as usize];
    let mut d2: Vec<f64> = vectors.iter().map(|v| sq_dist(v, &vectors[chosen[0]])).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let target = rng.next_f64() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 {
                    acc += w;
                    pick = Some(i);
                    if acc > target {
                        break;
                    }
                }
            }
            pick.expect("positive total has a positive weight")
        } else {
            // every point coincides with a centroid
            (0..n).find(|i| !chosen.contains(i)).expect("k ≤ n")
        };
        chosen.push(next);
        for (i, v) in vectors.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(v, &vectors[next]));
        }
    }
    chosen.into_iter().map(|i| vectors[i].clone()).collect()
}

/// Lloyd's algorithm from a seeded k-means++ start.
///
/// Stops when an update leaves every assignment unchanged or after
/// `max_iter` updates. A cluster left empty by an update is re-seeded at
/// the point farthest from its own centroid. Distance ties go to the lower
/// cluster id.
pub fn kmeans(vectors: &[Vec<f64>], k: usize, seed: u64, max_iter: usize) -> Result<Clustering, DiscoveryError> {
    if vectors.is_empty() {
        return Err(DiscoveryError::InvalidArgument("no vectors to cluster".into()));
    }
    let dim = validate(vectors, k)?;
    let mut rng = CounterRng::derive(seed, "kmeans++");
    let mut centroids = plus_plus(vectors, k, &mut rng);
    let (mut labels, inertia) = assign(vectors, &centroids);
    let mut history = vec![inertia];
    let mut converged = false;
    let mut iterations = 0;
    let mut reseeds = 0;

    while iterations < max_iter {
        iterations += 1;
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (v, &c) in vectors.iter().zip(&labels) {
            counts[c] += 1;
            for (s, x) in sums[c].iter_mut().zip(v) {
                *s += x;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                centroids[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
        for j in (0..k).filter(|&j| counts[j] == 0) {
            let far = vectors
                .iter()
                .zip(&labels)
                .enumerate()
                .map(|(i, (v, &c))| (i, sq_dist(v, &centroids[c])))
                .fold((0, f64::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best });
            centroids[j] = vectors[far.0].clone();
            labels[far.0] = j;
            reseeds += 1;
        }

        let (next, inertia) = assign(vectors, &centroids);
        debug_assert!(inertia <= history.last().unwrap() * (1.0 + 1e-12) + 1e-300);
        history.push(inertia);
        let unchanged = next == labels;
        labels = next;
        if unchanged {
            converged = true;
            break;
        }
    }

    let inertia = *history.last().unwrap();
    Ok(Clustering { assignments: labels, centroids, inertia, inertia_history: history, seed, iterations, converged, reseeds })
}
