use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::matrix::Matrix;
use crate::scalar::{squared_distance, Scalar};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KMeansParams {
    pub restarts: usize,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for KMeansParams {
    fn default() -> Self {
        Self { restarts: 10, max_iter: 300, tol: 1e-6 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterAssignment<T> {
    pub cluster_of: Vec<usize>,
    pub centroids: Matrix<T>,
    pub inertia: T,
}

impl<T: Scalar> ClusterAssignment<T> {
    pub fn num_clusters(&self) -> usize {
        self.centroids.rows()
    }
}

/// k-means with k-means++ seeding, keeping the lowest-inertia of `params.restarts`
/// runs. Restart `r` uses seed `seed + r`, so the result does not depend on how
/// restarts are scheduled.
pub fn kmeans_pp<T: Scalar>(
    data: &Matrix<T>,
    k: usize,
    seed: u64,
    params: &KMeansParams,
) -> Result<ClusterAssignment<T>> {
    if k == 0 {
        return Err(Error::OutOfRange("cluster count must be at least 1".into()));
    }
    if k > data.rows() {
        return Err(Error::OutOfRange(format!("{k} clusters for {} points", data.rows())));
    }
    if !data.all_finite() {
        return Err(Error::NonFinite("clustering input".into()));
    }
    let runs: Vec<ClusterAssignment<T>> = (0..params.restarts.max(1) as u64)
        .into_par_iter()
        .map(|r| single_run(data, k, seed.wrapping_add(r), params))
        .collect();
    // first minimum wins, matching a sequential scan
    let best = runs
        .into_iter()
        .reduce(|best, run| if run.inertia < best.inertia { run } else { best })
        .expect("at least one restart");
    Ok(best)
}

fn single_run<T: Scalar>(data: &Matrix<T>, k: usize, seed: u64, params: &KMeansParams) -> ClusterAssignment<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = seed_plus_plus(data, k, &mut rng);
    let mut assignment = vec![0usize; data.rows()];
    let mut previous = T::infinity();
    let mut inertia = T::infinity();
    for _ in 0..params.max_iter.max(1) {
        assign_nearest(data, &centroids, &mut assignment);
        repair_empty(data, &centroids, &mut assignment, k);
        centroids = cluster_means(data, &assignment, k);
        inertia = total_inertia(data, &centroids, &assignment);
        if inertia == T::zero() {
            break;
        }
        let change = ((previous - inertia).abs() / previous).to_f64_lossy();
        if change < params.tol {
            break;
        }
        previous = inertia;
    }
    ClusterAssignment { cluster_of: assignment, centroids, inertia }
}

/// First centroid uniform over the data, each further one drawn with probability
/// proportional to the squared distance to the nearest chosen centroid.
fn seed_plus_plus<T: Scalar>(data: &Matrix<T>, k: usize, rng: &mut ChaCha8Rng) -> Matrix<T> {
    let n = data.rows();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut nearest: Vec<f64> =
        data.iter_rows().map(|x| squared_distance(x, data.row(chosen[0])).to_f64_lossy()).collect();
    while chosen.len() < k {
        let total: f64 = nearest.iter().sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &w) in nearest.iter().enumerate() {
                acc += w;
                if w > 0.0 && acc > target {
                    pick = Some(i);
                    break;
                }
            }
            // rounding can leave the target just past the last positive weight
            pick.unwrap_or_else(|| nearest.iter().rposition(|&w| w > 0.0).expect("positive total"))
        } else {
            // every point coincides with a centroid; take an unused row
            let unused: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            unused[rng.random_range(0..unused.len())]
        };
        chosen.push(next);
        let c = data.row(next);
        for (w, x) in nearest.iter_mut().zip(data.iter_rows()) {
            *w = w.min(squared_distance(x, c).to_f64_lossy());
        }
    }
    data.select_rows(&chosen)
}

fn nearest_centroid<T: Scalar>(x: &[T], centroids: &Matrix<T>) -> (usize, T) {
    let mut best = (0, T::infinity());
    for (j, c) in centroids.iter_rows().enumerate() {
        let d = squared_distance(x, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn assign_nearest<T: Scalar>(data: &Matrix<T>, centroids: &Matrix<T>, assignment: &mut [usize]) {
    assignment.par_iter_mut().enumerate().for_each(|(i, a)| *a = nearest_centroid(data.row(i), centroids).0);
}

/// Moves the point farthest from its centroid (among clusters with more than
/// one member) into each empty cluster.
fn repair_empty<T: Scalar>(data: &Matrix<T>, centroids: &Matrix<T>, assignment: &mut [usize], k: usize) {
    let mut sizes = vec![0usize; k];
    for &a in assignment.iter() {
        sizes[a] += 1;
    }
    while let Some(empty) = sizes.iter().position(|&s| s == 0) {
        let mut far: Option<(usize, T)> = None;
        for (i, &a) in assignment.iter().enumerate() {
            if sizes[a] < 2 {
                continue;
            }
            let d = squared_distance(data.row(i), centroids.row(a));
            if far.is_none_or(|(_, best)| d > best) {
                far = Some((i, d));
            }
        }
        let (i, _) = far.expect("k <= n leaves a cluster with two members");
        sizes[assignment[i]] -= 1;
        assignment[i] = empty;
        sizes[empty] += 1;
    }
}

fn cluster_means<T: Scalar>(data: &Matrix<T>, assignment: &[usize], k: usize) -> Matrix<T> {
    let mut sums = Matrix::zeros(k, data.cols());
    let mut counts = vec![0usize; k];
    for (x, &a) in data.iter_rows().zip(assignment) {
        counts[a] += 1;
        for (s, &v) in sums.row_mut(a).iter_mut().zip(x) {
            *s = *s + v;
        }
    }
    for (j, &count) in counts.iter().enumerate() {
        let n = T::from_usize_lossy(count.max(1));
        sums.row_mut(j).iter_mut().for_each(|s| *s = *s / n);
    }
    sums
}

fn total_inertia<T: Scalar>(data: &Matrix<T>, centroids: &Matrix<T>, assignment: &[usize]) -> T {
    data.iter_rows().zip(assignment).fold(T::zero(), |acc, (x, &a)| acc + squared_distance(x, centroids.row(a)))
}
