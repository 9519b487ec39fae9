//! Lloyd's k-means with k-means++ or uniform initialization.
//!
//! Assignment ties go to the lowest centroid index. An empty cluster is
//! repaired by moving the point farthest from its own centroid into it, so a
//! run over at least `k` points always returns `k` non-empty clusters.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::vecstore::{squared_euclidean, ItemId, PointSet};

/// Below this many `points × k × dim` multiply-adds the assignment step runs sequentially.
const PARALLEL_WORK: usize = 1 << 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Init {
    KMeansPlusPlus,
    Random,
}

impl std::str::FromStr for Init {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kmeanspp" | "kmeans++" => Ok(Init::KMeansPlusPlus),
            "random" => Ok(Init::Random),
            other => Err(Error::invalid(format!("unknown init method {other:?}"))),
        }
    }
}

impl std::fmt::Display for Init {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Init::KMeansPlusPlus => "kmeanspp",
            Init::Random => "random",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansConfig {
    pub k: usize,
    pub max_iter: usize,
    /// Stop once no centroid moves farther than this in one update.
    pub tol: f64,
    pub seed: u64,
    pub init: Init,
}

impl KMeansConfig {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            max_iter: 50,
            tol: 1e-4,
            seed: 0,
            init: Init::KMeansPlusPlus,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::invalid("k must be at least 1"));
        }
        if self.max_iter == 0 {
            return Err(Error::invalid("max_iter must be at least 1"));
        }
        if !(self.tol >= 0.0) {
            return Err(Error::invalid("tol must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    /// Cluster index of each input point, in input order.
    pub assignments: Vec<usize>,
    /// `k × dim` row-major centroids.
    pub centroids: Vec<f32>,
    pub dim: usize,
    /// Sum of squared distances from points to their assigned centroid.
    pub inertia: f64,
    pub iterations_run: usize,
}

impl Clustering {
    pub fn k(&self) -> usize {
        self.centroids.len() / self.dim
    }

    pub fn centroid(&self, cluster: usize) -> &[f32] {
        &self.centroids[cluster * self.dim..(cluster + 1) * self.dim]
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k()];
        for &a in &self.assignments {
            sizes[a] += 1;
        }
        sizes
    }

    /// Positions (into the clustered point set) of each cluster's members, ascending.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.k()];
        for (i, &a) in self.assignments.iter().enumerate() {
            out[a].push(i);
        }
        out
    }
}

pub fn kmeans<P: PointSet + Sync + ?Sized>(points: &P, config: &KMeansConfig) -> Result<Clustering> {
    config.validate()?;
    let n = points.len();
    if n == 0 {
        return Err(Error::invalid("cannot cluster an empty point set"));
    }
    let dim = points.dim();
    let k = config.k.min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let seeds = match config.init {
        Init::KMeansPlusPlus => kmeanspp_init(points, k, &mut rng),
        Init::Random => sample(&mut rng, n, k).into_vec(),
    };
    let mut centroids: Vec<f32> = seeds.iter().flat_map(|&i| points.point(i).iter().copied()).collect();

    let (mut assignments, mut inertia) = assign(points, &centroids, dim);
    let mut iterations_run = 0;
    let mut settled = false;
    while iterations_run < config.max_iter {
        iterations_run += 1;
        let updated = update_centroids(points, &mut assignments, k, dim);
        let movement = max_movement(&centroids, &updated, dim);
        centroids = updated;

        let (next, next_inertia) = assign(points, &centroids, dim);
        debug_assert!(
            next_inertia <= inertia * (1.0 + 1e-9) + 1e-9,
            "inertia increased from {inertia} to {next_inertia}"
        );
        let changed = next != assignments;
        assignments = next;
        inertia = next_inertia;
        if !changed {
            settled = true;
            break;
        }
        if movement < config.tol {
            break;
        }
    }
    if !settled {
        // End on centroids that are the means of the final assignment.
        centroids = update_centroids(points, &mut assignments, k, dim);
        inertia = assignments
            .iter()
            .enumerate()
            .map(|(i, &a)| squared_euclidean(points.point(i), &centroids[a * dim..(a + 1) * dim]))
            .sum();
    }

    Ok(Clustering {
        assignments,
        centroids,
        dim,
        inertia,
        iterations_run,
    })
}

/// k-means++ seeding: first center uniform, then proportional to squared distance
/// to the nearest chosen center. Returns point positions.
pub(crate) fn kmeanspp_init<P: PointSet + ?Sized>(points: &P, k: usize, rng: &mut impl Rng) -> Vec<usize> {
    let n = points.len();
    let mut chosen = Vec::with_capacity(k);
    chosen.push(rng.random_range(0..n));
    let mut nearest: Vec<f64> = (0..n)
        .map(|i| squared_euclidean(points.point(i), points.point(chosen[0])))
        .collect();
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
            // Rounding can leave `target` just past the final sum.
            pick.unwrap_or_else(|| nearest.iter().rposition(|&w| w > 0.0).unwrap())
        } else {
            // Every point coincides with a center; fall back to any unchosen point.
            let free: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen.push(next);
        let c = points.point(next);
        for (i, d) in nearest.iter_mut().enumerate() {
            *d = d.min(squared_euclidean(points.point(i), c));
        }
    }
    chosen
}

fn nearest_centroid(p: &[f32], centroids: &[f32], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.chunks_exact(dim).enumerate() {
        let d = squared_euclidean(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn assign<P: PointSet + Sync + ?Sized>(points: &P, centroids: &[f32], dim: usize) -> (Vec<usize>, f64) {
    let n = points.len();
    let k = centroids.len() / dim;
    let pairs: Vec<(usize, f64)> = if n * k * dim >= PARALLEL_WORK {
        (0..n)
            .into_par_iter()
            .map(|i| nearest_centroid(points.point(i), centroids, dim))
            .collect()
    } else {
        (0..n).map(|i| nearest_centroid(points.point(i), centroids, dim)).collect()
    };
    // Sequential sum keeps the result independent of the thread count.
    let inertia = pairs.iter().map(|p| p.1).sum();
    (pairs.into_iter().map(|p| p.0).collect(), inertia)
}

fn means<P: PointSet + ?Sized>(points: &P, assignments: &[usize], k: usize, dim: usize) -> (Vec<f32>, Vec<usize>) {
    let mut sums = vec![0f64; k * dim];
    let mut counts = vec![0usize; k];
    for (i, &a) in assignments.iter().enumerate() {
        counts[a] += 1;
        for (s, &x) in sums[a * dim..(a + 1) * dim].iter_mut().zip(points.point(i)) {
            *s += x as f64;
        }
    }
    let mut out = vec![0f32; k * dim];
    for j in 0..k {
        if counts[j] > 0 {
            let c = counts[j] as f64;
            for d in 0..dim {
                out[j * dim + d] = (sums[j * dim + d] / c) as f32;
            }
        }
    }
    (out, counts)
}

/// Recomputes centroids as cluster means, repairing empty clusters in place.
fn update_centroids<P: PointSet + ?Sized>(
    points: &P,
    assignments: &mut [usize],
    k: usize,
    dim: usize,
) -> Vec<f32> {
    let (mut centroids, mut counts) = means(points, assignments, k, dim);
    while let Some(empty) = counts.iter().position(|&c| c == 0) {
        let mut far: Option<(usize, f64)> = None;
        for (i, &a) in assignments.iter().enumerate() {
            if counts[a] < 2 {
                continue;
            }
            let d = squared_euclidean(points.point(i), &centroids[a * dim..(a + 1) * dim]);
            if far.is_none_or(|(_, best)| d > best) {
                far = Some((i, d));
            }
        }
        let Some((i, _)) = far else {
            // Fewer points than clusters; callers clamp k so this is unreachable.
            break;
        };
        assignments[i] = empty;
        let recomputed = means(points, assignments, k, dim);
        centroids = recomputed.0;
        counts = recomputed.1;
    }
    centroids
}

fn max_movement(old: &[f32], new: &[f32], dim: usize) -> f64 {
    old.chunks_exact(dim)
        .zip(new.chunks_exact(dim))
        .map(|(a, b)| squared_euclidean(a, b).sqrt())
        .fold(0.0, f64::max)
}

/// The `m` members closest to `centroid`, nearest first; ties go to the lower id.
pub fn nearest_to_centroid<P: PointSet + ?Sized>(
    points: &P,
    member_ids: &[ItemId],
    centroid: &[f32],
    m: usize,
) -> Result<Vec<ItemId>> {
    if member_ids.is_empty() {
        return Err(Error::invalid("no members to choose representatives from"));
    }
    if centroid.len() != points.dim() {
        return Err(Error::invalid("centroid dimension does not match points"));
    }
    let mut scored: Vec<(f64, ItemId)> = member_ids
        .iter()
        .map(|&id| (squared_euclidean(points.point(id as usize), centroid), id))
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(scored.into_iter().take(m).map(|(_, id)| id).collect())
}
