//! K-means over raw frame pixels, splitting a clip into gait-phase bags.
//!
//! Seeding and every reduction walk the points in lexicographic value order,
//! so permuting the input permutes the assignment and leaves centroids
//! bit-identical for a fixed generator state.

use std::cmp::Ordering;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::sampling::SampledClip;
use crate::scalar::Scalar;

pub const DEFAULT_MAX_ITER: usize = 50;
/// Bags per clip unless configured otherwise.
pub const DEFAULT_BAGS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult<T> {
    pub assignment: Vec<usize>,
    pub centroids: Vec<Vec<T>>,
    pub inertia: T,
    /// Inertia after every Lloyd update, first to last.
    pub history: Vec<T>,
}

impl<T: Scalar> KMeansResult<T> {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }
}

fn sq_dist<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

fn lex_cmp<T: Scalar>(a: &[T], b: &[T]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.partial_cmp(y).unwrap_or(Ordering::Equal))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// Lloyd's algorithm with k-means++ seeding and squared Euclidean distance.
///
/// When fewer than `k` distinct points exist, the number of clusters shrinks
/// to the distinct count. Empty clusters are refilled with the point farthest
/// from its centroid.
pub fn kmeans<T: Scalar, P: AsRef<[T]>, R: Rng + ?Sized>(
    points: &[P],
    k: usize,
    rng: &mut R,
    max_iter: usize,
) -> Result<KMeansResult<T>> {
    if points.is_empty() {
        return Err(Error::Argument("k-means needs at least one point".into()));
    }
    if k == 0 || max_iter == 0 {
        return Err(Error::Argument("k and max_iter must be at least 1".into()));
    }
    let dim = points[0].as_ref().len();
    if points.iter().any(|p| p.as_ref().len() != dim) {
        return Err(Error::Argument("points differ in dimension".into()));
    }
    let pts: Vec<&[T]> = points.iter().map(|p| p.as_ref()).collect();
    let n = pts.len();

    // Canonical order: by value, ties (exact duplicates) by input position.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| lex_cmp(pts[a], pts[b]).then(a.cmp(&b)));
    let distinct = 1 + order
        .windows(2)
        .filter(|w| lex_cmp(pts[w[0]], pts[w[1]]).is_ne())
        .count();
    let k_eff = k.min(distinct);

    let mut centroids = seed_plus_plus(&pts, &order, k_eff, rng);
    let mut assignment = vec![usize::MAX; n];
    let mut history = Vec::new();
    for _ in 0..max_iter {
        let mut next = assign(&pts, &centroids);
        repair_empty(&pts, &order, &mut centroids, &mut next);
        let changed = next != assignment;
        assignment = next;
        centroids = update(&pts, &order, &assignment, k_eff, dim);
        history.push(inertia(&pts, &order, &centroids, &assignment));
        if !changed {
            break;
        }
    }
    let inertia = *history.last().expect("at least one iteration");
    Ok(KMeansResult {
        assignment,
        centroids,
        inertia,
        history,
    })
}

/// Lowest-inertia result over `restarts` independent seedings.
pub fn kmeans_best_of<T: Scalar, P: AsRef<[T]>, R: Rng + ?Sized>(
    points: &[P],
    k: usize,
    rng: &mut R,
    max_iter: usize,
    restarts: usize,
) -> Result<KMeansResult<T>> {
    let mut best: Option<KMeansResult<T>> = None;
    for _ in 0..restarts.max(1) {
        let r = kmeans(points, k, rng, max_iter)?;
        if best.as_ref().is_none_or(|b| r.inertia < b.inertia) {
            best = Some(r);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn seed_plus_plus<T: Scalar, R: Rng + ?Sized>(
    pts: &[&[T]],
    order: &[usize],
    k: usize,
    rng: &mut R,
) -> Vec<Vec<T>> {
    let first = order[rng.random_range(0..order.len())];
    let mut centroids = vec![pts[first].to_vec()];
    let mut d2: Vec<f64> = order
        .iter()
        .map(|&i| sq_dist(pts[i], &centroids[0]).to_f64().unwrap_or(0.0))
        .collect();
    while centroids.len() < k {
        // k <= distinct points, so some weight is positive.
        let pick = match WeightedIndex::new(&d2) {
            Ok(w) => w.sample(rng),
            Err(_) => d2
                .iter()
                .position(|&d| d > 0.0)
                .expect("a point not yet chosen as a center"),
        };
        let c = pts[order[pick]].to_vec();
        for (slot, &i) in d2.iter_mut().zip(order) {
            *slot = slot.min(sq_dist(pts[i], &c).to_f64().unwrap_or(0.0));
        }
        centroids.push(c);
    }
    centroids
}

/// Nearest centroid; ties go to the lower centroid index.
fn assign<T: Scalar>(pts: &[&[T]], centroids: &[Vec<T>]) -> Vec<usize> {
    pts.iter()
        .map(|p| {
            let mut best = 0;
            let mut best_d = sq_dist(p, &centroids[0]);
            for (j, c) in centroids.iter().enumerate().skip(1) {
                let d = sq_dist(p, c);
                if d < best_d {
                    best = j;
                    best_d = d;
                }
            }
            best
        })
        .collect()
}

fn repair_empty<T: Scalar>(
    pts: &[&[T]],
    order: &[usize],
    centroids: &mut [Vec<T>],
    assignment: &mut [usize],
) {
    let k = centroids.len();
    loop {
        let mut sizes = vec![0usize; k];
        for &a in assignment.iter() {
            sizes[a] += 1;
        }
        let Some(empty) = sizes.iter().position(|&s| s == 0) else {
            return;
        };
        // Farthest point among clusters that can spare one; first in
        // canonical order wins ties.
        let mut victim = None;
        let mut far = T::neg_infinity();
        for &i in order {
            if sizes[assignment[i]] < 2 {
                continue;
            }
            let d = sq_dist(pts[i], &centroids[assignment[i]]);
            if d > far {
                far = d;
                victim = Some(i);
            }
        }
        let Some(v) = victim else {
            return;
        };
        assignment[v] = empty;
        centroids[empty] = pts[v].to_vec();
    }
}

fn update<T: Scalar>(
    pts: &[&[T]],
    order: &[usize],
    assignment: &[usize],
    k: usize,
    dim: usize,
) -> Vec<Vec<T>> {
    let mut sums = vec![vec![T::zero(); dim]; k];
    let mut counts = vec![0usize; k];
    for &i in order {
        let c = assignment[i];
        counts[c] += 1;
        for (s, &x) in sums[c].iter_mut().zip(pts[i]) {
            *s += x;
        }
    }
    for (s, &n) in sums.iter_mut().zip(&counts) {
        let inv = T::one() / T::from_usize(n.max(1)).expect("count fits");
        s.iter_mut().for_each(|v| *v *= inv);
    }
    sums
}

fn inertia<T: Scalar>(pts: &[&[T]], order: &[usize], centroids: &[Vec<T>], assignment: &[usize]) -> T {
    order
        .iter()
        .map(|&i| sq_dist(pts[i], &centroids[assignment[i]]))
        .sum()
}

/// K-way split of one clip's frames into bags.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BagPartition {
    /// Bag of every frame, in clip order.
    pub assignment: Vec<usize>,
    pub k_requested: usize,
    pub k_eff: usize,
    #[serde(skip)]
    pub centroids: Vec<Vec<f32>>,
    pub inertia: f32,
}

impl BagPartition {
    /// Every frame in one bag.
    pub fn single(frames: usize) -> Self {
        Self {
            assignment: vec![0; frames],
            k_requested: 1,
            k_eff: 1,
            centroids: Vec::new(),
            inertia: 0.0,
        }
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k_eff];
        for &a in &self.assignment {
            sizes[a] += 1;
        }
        sizes
    }

    /// Frame indices of each bag, ascending.
    pub fn bags(&self) -> Vec<Vec<usize>> {
        let mut bags = vec![Vec::new(); self.k_eff];
        for (i, &a) in self.assignment.iter().enumerate() {
            bags[a].push(i);
        }
        bags
    }

    /// Every bag nonempty and sizes summing to the clip length.
    pub fn validate(&self, frames: usize) -> Result<()> {
        if self.assignment.len() != frames {
            return Err(Error::Numeric(format!(
                "partition covers {} of {frames} frames",
                self.assignment.len()
            )));
        }
        if self.k_eff == 0 || self.k_eff > self.k_requested {
            return Err(Error::Numeric(format!(
                "effective bag count {} outside 1..={}",
                self.k_eff, self.k_requested
            )));
        }
        if self.assignment.iter().any(|&a| a >= self.k_eff) {
            return Err(Error::Numeric("bag index out of range".into()));
        }
        let sizes = self.sizes();
        if sizes.contains(&0) || sizes.iter().sum::<usize>() != frames {
            return Err(Error::Numeric(format!("invalid bag sizes {sizes:?}")));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("partition serializes")
    }
}

/// Cluster a clip's frames (flattened pixels) into at most `k` bags.
pub fn partition_clip<R: Rng + ?Sized>(clip: &SampledClip, k: usize, rng: &mut R) -> Result<BagPartition> {
    let points: Vec<&[f32]> = clip.frames.iter().map(|f| f.pixels()).collect();
    let r = kmeans(&points, k, rng, DEFAULT_MAX_ITER)?;
    let partition = BagPartition {
        k_requested: k,
        k_eff: r.k(),
        assignment: r.assignment,
        centroids: r.centroids,
        inertia: r.inertia,
    };
    partition.validate(clip.len())?;
    Ok(partition)
}
