use crate::error::{Error, Result};

use super::{Matrix, RngStream};

const MAX_ITERATIONS: usize = 100;

#[derive(Clone, Debug)]
pub struct KMeansResult {
    pub labels: Vec<usize>,
    pub centroids: Matrix,
    /// Within-cluster sum of squares after every update step.
    pub objective_history: Vec<f64>,
}

impl KMeansResult {
    pub fn objective(&self) -> f64 {
        self.objective_history.last().copied().unwrap_or(0.0)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's k-means with k-means++ seeding drawn from `rng`.
///
/// Nearest-centroid ties go to the lowest centroid index. When every
/// remaining point coincides with a chosen seed (zero total D²), the next
/// seed is forced to the lowest-index unchosen point. An empty cluster
/// reclaims its own seed point.
pub fn kmeans(points: &Matrix, k: usize, rng: &mut RngStream) -> Result<KMeansResult> {
    let n = points.rows();
    if k == 0 {
        return Err(Error::Argument("k must be positive".into()));
    }
    if k > n {
        return Err(Error::Argument(format!(
            "k = {k} exceeds the number of points ({n})"
        )));
    }

    let seeds = plus_plus_seeds(points, k, rng);
    let mut centroids = points.select_rows(&seeds);
    let mut labels = vec![usize::MAX; n];
    let mut history = Vec::new();

    for _ in 0..MAX_ITERATIONS {
        let mut next: Vec<usize> = (0..n)
            .map(|i| nearest(points.row(i), &centroids).0)
            .collect();
        refill_empty(&mut next, &seeds, k);
        let changed = next != labels;
        labels = next;
        centroids = means(points, &labels, k);
        history.push(objective(points, &labels, &centroids));
        if !changed {
            break;
        }
    }

    Ok(KMeansResult {
        labels,
        centroids,
        objective_history: history,
    })
}

fn plus_plus_seeds(points: &Matrix, k: usize, rng: &mut RngStream) -> Vec<usize> {
    let n = points.rows();
    let mut seeds = vec![rng.index(n)];
    let mut d2: Vec<f64> = (0..n)
        .map(|i| sq_dist(points.row(i), points.row(seeds[0])))
        .collect();
    while seeds.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.uniform() * total;
            let mut acc = 0.0;
            let mut chosen = None;
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if d > 0.0 && acc > target {
                    chosen = Some(i);
                    break;
                }
            }
            // rounding can leave target at the very end of the cumulative sum
            chosen.unwrap_or_else(|| d2.iter().rposition(|&d| d > 0.0).unwrap())
        } else {
            (0..n).find(|i| !seeds.contains(i)).unwrap()
        };
        seeds.push(pick);
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(points.row(i), points.row(pick)));
        }
    }
    seeds
}

fn nearest(p: &[f64], centroids: &Matrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for c in 0..centroids.rows() {
        let d = sq_dist(p, centroids.row(c));
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn refill_empty(labels: &mut [usize], seeds: &[usize], k: usize) {
    let mut counts = vec![0usize; k];
    for &l in labels.iter() {
        counts[l] += 1;
    }
    for j in 0..k {
        if counts[j] > 0 {
            continue;
        }
        let seed = seeds[j];
        let donor = if counts[labels[seed]] > 1 {
            Some(seed)
        } else {
            (0..labels.len()).find(|&i| counts[labels[i]] > 1)
        };
        if let Some(i) = donor {
            counts[labels[i]] -= 1;
            labels[i] = j;
            counts[j] = 1;
        }
    }
}

fn means(points: &Matrix, labels: &[usize], k: usize) -> Matrix {
    let mut sums = Matrix::zeros(k, points.cols());
    let mut counts = vec![0usize; k];
    for (i, &l) in labels.iter().enumerate() {
        counts[l] += 1;
        for (s, &v) in sums.row_mut(l).iter_mut().zip(points.row(i)) {
            *s += v;
        }
    }
    for (j, &count) in counts.iter().enumerate() {
        if count > 0 {
            sums.row_mut(j).iter_mut().for_each(|s| *s /= count as f64);
        }
    }
    sums
}

fn objective(points: &Matrix, labels: &[usize], centroids: &Matrix) -> f64 {
    labels
        .iter()
        .enumerate()
        .map(|(i, &l)| sq_dist(points.row(i), centroids.row(l)))
        .sum()
}
