//! Lloyd's k-means with k-means++ seeding.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Mat;
use crate::util::rng_for;

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansFit {
    pub centroids: Mat,
    pub assignments: Vec<usize>,
    /// Sum of squared distances after each iteration; the last entry is for
    /// the returned assignments.
    pub distortion_history: Vec<f64>,
    pub iterations: usize,
}

impl KMeansFit {
    pub fn distortion(&self) -> f64 {
        *self.distortion_history.last().unwrap_or(&0.0)
    }
}

#[inline]
pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid (lowest index on ties) and its squared distance.
pub fn nearest(point: &[f64], centroids: &Mat) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for c in 0..centroids.rows() {
        let d = squared_distance(point, centroids.row(c));
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

const CHUNK: usize = 256;

/// Assigns every row of `points`; chunks are processed in parallel and
/// re-joined in order.
pub fn assign_all(points: &Mat, centroids: &Mat) -> (Vec<usize>, Vec<f64>) {
    let n = points.rows();
    let chunks: Vec<(Vec<usize>, Vec<f64>)> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            (c * CHUNK..n.min((c + 1) * CHUNK))
                .map(|i| nearest(points.row(i), centroids))
                .unzip()
        })
        .collect();
    let mut labels = Vec::with_capacity(n);
    let mut dists = Vec::with_capacity(n);
    for (l, d) in chunks {
        labels.extend(l);
        dists.extend(d);
    }
    (labels, dists)
}

fn kmeans_plus_plus(points: &Mat, k: usize, rng: &mut impl Rng) -> Mat {
    let n = points.rows();
    let mut centroids = Mat::zeros(k, points.cols());
    let first = rng.random_range(0..n);
    centroids.row_mut(0).copy_from_slice(points.row(first));
    let mut min_d: Vec<f64> = (0..n).map(|i| squared_distance(points.row(i), points.row(first))).collect();
    for c in 1..k {
        let total: f64 = min_d.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = None;
            for (i, &d) in min_d.iter().enumerate() {
                acc += d;
                if d > 0.0 && acc >= target {
                    chosen = Some(i);
                    break;
                }
            }
            // rounding can leave `acc` just short of `target`
            chosen.unwrap_or_else(|| min_d.iter().rposition(|&d| d > 0.0).unwrap())
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(c).copy_from_slice(points.row(pick));
        for (i, d) in min_d.iter_mut().enumerate() {
            *d = d.min(squared_distance(points.row(i), centroids.row(c)));
        }
    }
    centroids
}

/// Fits `k` centroids to the rows of `points`.
///
/// Iterates until the largest centroid shift drops below `tol` or
/// `max_iters` is reached. An emptied cluster is re-seeded at the point
/// farthest from its assigned centroid. The returned assignments are the
/// nearest-centroid labels for the returned centroids.
pub fn fit_kmeans(points: &Mat, k: usize, max_iters: usize, tol: f64, seed: u64) -> Result<KMeansFit> {
    let n = points.rows();
    if k == 0 {
        return Err(Error::InvalidGmpConfig("k must be positive".into()));
    }
    if n < k {
        return Err(Error::TooFewPoints { points: n, k });
    }
    let dim = points.cols();
    let mut rng = rng_for(seed, "kmeans", &[k as u64]);
    let mut centroids = kmeans_plus_plus(points, k, &mut rng);
    let mut history = Vec::new();
    let mut iterations = 0;
    for _ in 0..max_iters {
        iterations += 1;
        let (labels, _) = assign_all(points, &centroids);
        let mut sums = Mat::zeros(k, dim);
        let mut counts = vec![0usize; k];
        for (i, &l) in labels.iter().enumerate() {
            counts[l] += 1;
            for (s, v) in sums.row_mut(l).iter_mut().zip(points.row(i)) {
                *s += v;
            }
        }
        let mut shift: f64 = 0.0;
        let mut updated = centroids.clone();
        for c in 0..k {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                updated.row_mut(c).iter_mut().zip(sums.row(c)).for_each(|(u, s)| *u = s * inv);
            }
        }
        let distortion: f64 = labels.iter().enumerate().map(|(i, &l)| squared_distance(points.row(i), updated.row(l))).sum();
        history.push(distortion);
        // Re-seed empty clusters; they hold no points, so the recorded
        // distortion is unaffected.
        let mut taken = vec![false; n];
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..n)
                    .filter(|&i| !taken[i])
                    .max_by(|&a, &b| {
                        let da = squared_distance(points.row(a), updated.row(labels[a]));
                        let db = squared_distance(points.row(b), updated.row(labels[b]));
                        da.total_cmp(&db).then(b.cmp(&a))
                    })
                    .expect("n >= k");
                taken[far] = true;
                updated.row_mut(c).copy_from_slice(points.row(far));
                shift = f64::INFINITY;
            }
        }
        for c in 0..k {
            shift = shift.max(squared_distance(centroids.row(c), updated.row(c)).sqrt());
        }
        centroids = updated;
        if shift < tol {
            break;
        }
    }
    let (assignments, dists) = assign_all(points, &centroids);
    // Never above the last entry: every point keeps the option of its
    // previous centroid, which re-seeding leaves untouched.
    history.push(dists.iter().sum());
    Ok(KMeansFit { centroids, assignments, distortion_history: history, iterations })
}
