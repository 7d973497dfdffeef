//! Spherical k-means with value slots filled from cluster counts.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{dot, norm};
use crate::memory::{MemoryConfig, MemoryState, NORM_EPS};

fn unit(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if !(n > NORM_EPS) {
        return Err(Error::DegenerateNorm { norm: n, eps: NORM_EPS });
    }
    Ok(v.iter().map(|x| x / n).collect())
}

fn assign(points: &[Vec<f64>], centroids: &[Vec<f64>]) -> Vec<(usize, f64)> {
    points
        .iter()
        .map(|p| {
            let mut best = (0, f64::NEG_INFINITY);
            for (l, c) in centroids.iter().enumerate() {
                let s = dot(p, c);
                if s > best.1 {
                    best = (l, s);
                }
            }
            best
        })
        .collect()
}

/// Spherical k-means over unit-normalized points. Returns unit centroids and
/// the final assignment. Empty clusters are re-seeded from the points least
/// similar to their own centroid.
pub fn spherical_kmeans(
    points: &[Vec<f64>],
    clusters: usize,
    iters: usize,
    seed: u64,
) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    if points.len() < clusters || clusters == 0 {
        return Err(Error::Config(format!(
            "k-means needs at least {clusters} points, got {}",
            points.len()
        )));
    }
    let pts: Vec<Vec<f64>> = points.iter().map(|p| unit(p)).collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids: Vec<Vec<f64>> = sample(&mut rng, pts.len(), clusters)
        .into_iter()
        .map(|i| pts[i].clone())
        .collect();
    let dim = pts[0].len();

    for _ in 0..iters {
        let labels = assign(&pts, &centroids);
        let mut sums = vec![vec![0.0; dim]; clusters];
        let mut counts = vec![0usize; clusters];
        for (p, &(l, _)) in pts.iter().zip(&labels) {
            crate::linalg::axpy(1.0, p, &mut sums[l]);
            counts[l] += 1;
        }
        // farthest points first, for re-seeding
        let mut far: Vec<usize> = (0..pts.len()).collect();
        far.sort_by(|&a, &b| labels[a].1.total_cmp(&labels[b].1).then(a.cmp(&b)));
        let mut far = far.into_iter();
        for l in 0..clusters {
            let n = norm(&sums[l]);
            if counts[l] == 0 || !(n > NORM_EPS) {
                if let Some(i) = far.next() {
                    centroids[l] = pts[i].clone();
                }
            } else {
                centroids[l] = sums[l].iter().map(|x| x / n).collect();
            }
        }
    }
    let labels = assign(&pts, &centroids).into_iter().map(|(l, _)| l).collect();
    Ok((centroids, labels))
}

/// Count-based value slots: `D[y, l] = n[y, l] / sum_y n[y, l]` and
/// `R[y, l] = n[y, l] / sum_l n[y, l]`. Empty columns/rows are uniform.
pub fn count_targets(assignments: &[usize], labels: &[usize], num_classes: usize, slots: usize) -> (Vec<f64>, Vec<f64>) {
    let mut n = vec![0.0; num_classes * slots];
    for (&l, &y) in assignments.iter().zip(labels) {
        n[y * slots + l] += 1.0;
    }
    let mut d = vec![0.0; num_classes * slots];
    for l in 0..slots {
        let total: f64 = (0..num_classes).map(|y| n[y * slots + l]).sum();
        for y in 0..num_classes {
            d[y * slots + l] = if total > 0.0 {
                n[y * slots + l] / total
            } else {
                1.0 / num_classes as f64
            };
        }
    }
    let mut r = vec![0.0; num_classes * slots];
    for y in 0..num_classes {
        let total: f64 = n[y * slots..(y + 1) * slots].iter().sum();
        for l in 0..slots {
            r[y * slots + l] = if total > 0.0 {
                n[y * slots + l] / total
            } else {
                1.0 / slots as f64
            };
        }
    }
    (d, r)
}

/// Memory replacement: spherical k-means keys with count-based value slots.
pub fn kmeans_memory(
    features: &[Vec<f64>],
    labels: &[usize],
    num_classes: usize,
    config: MemoryConfig,
    iters: usize,
    seed: u64,
) -> Result<MemoryState> {
    if features.len() != labels.len() {
        return Err(Error::LengthMismatch { expected: features.len(), got: labels.len() });
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= num_classes) {
        return Err(Error::OutOfRange { index: y, len: num_classes });
    }
    let slots = config.grid_w * config.grid_w;
    let (keys, assignment) = spherical_kmeans(features, slots, iters, seed)?;
    let (d, r) = count_targets(&assignment, labels, num_classes, slots);
    MemoryState::from_parts(config, keys, d, r, num_classes)
}
