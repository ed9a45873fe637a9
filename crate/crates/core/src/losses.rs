//! Batch-all triplet loss over part embeddings, per-part cross-entropy, and
//! their sum.

use std::sync::atomic::{AtomicUsize, Ordering};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::network::{CLASSES, PARTS};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_MARGIN: f64 = 0.2;

static EMPTY_TRIPLET_BATCHES: AtomicUsize = AtomicUsize::new(0);

/// Batches seen so far (process-wide) whose labels admit no triplet at all.
pub fn empty_triplet_batches() -> usize {
    EMPTY_TRIPLET_BATCHES.load(Ordering::Relaxed)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossBreakdown<T> {
    pub triplet: T,
    pub ce: T,
    pub total: T,
    pub n_valid_per_part: Vec<usize>,
}

/// Euclidean distances between all samples of one part, `N x N` row-major.
pub fn part_distances<T: Scalar>(metric: &Tensor<T>, part: usize) -> Vec<T> {
    let (n, parts, d) = (metric.shape()[0], metric.shape()[1], metric.shape()[2]);
    let row = |i: usize| &metric.data()[(i * parts + part) * d..(i * parts + part + 1) * d];
    let mut out = vec![T::zero(); n * n];
    for i in 0..n {
        for j in i + 1..n {
            let dist = row(i)
                .iter()
                .zip(row(j))
                .map(|(&a, &b)| (a - b) * (a - b))
                .sum::<T>()
                .sqrt();
            out[i * n + j] = dist;
            out[j * n + i] = dist;
        }
    }
    out
}

fn check_metric<T: Scalar>(metric: &Tensor<T>, labels: &[usize]) -> Result<(usize, usize, usize)> {
    let &[n, parts, d] = metric.shape() else {
        return Err(Error::Argument(format!("expected [N, parts, d], got {:?}", metric.shape())));
    };
    if labels.len() != n {
        return Err(Error::Argument(format!("{} labels for {n} samples", labels.len())));
    }
    Ok((n, parts, d))
}

/// Batch-all triplet loss averaged over parts, with its gradient.
///
/// Each part averages the hinge over the triplets with a positive hinge;
/// parts without any such triplet contribute 0.
pub fn triplet_loss_with_grad<T: Scalar>(
    metric: &Tensor<T>,
    labels: &[usize],
    margin: T,
) -> Result<(T, Vec<usize>, Tensor<T>)> {
    let (n, parts, d) = check_metric(metric, labels)?;
    let structurally_empty = !(0..n).any(|a| {
        (0..n).any(|p| p != a && labels[p] == labels[a]) && (0..n).any(|q| labels[q] != labels[a])
    });
    if structurally_empty {
        EMPTY_TRIPLET_BATCHES.fetch_add(1, Ordering::Relaxed);
    }
    let parts_f = T::from_usize(parts).expect("size fits");
    let mut grad = Tensor::zeros(metric.shape());
    let mut n_valid = vec![0; parts];
    let mut active = 0usize;
    let mut residual = T::zero();
    let mut coef = vec![T::zero(); n * n];
    for s in 0..parts {
        let dist = part_distances(metric, s);
        coef.iter_mut().for_each(|c| *c = T::zero());
        let mut count = 0usize;
        let mut sum = T::zero();
        for a in 0..n {
            for p in 0..n {
                if p == a || labels[p] != labels[a] {
                    continue;
                }
                let dap = dist[a * n + p];
                for q in 0..n {
                    if labels[q] == labels[a] {
                        continue;
                    }
                    let dan = dist[a * n + q];
                    if margin + dap - dan > T::zero() {
                        count += 1;
                        sum += dap - dan;
                        coef[a * n + p] += T::one();
                        coef[a * n + q] -= T::one();
                    }
                }
            }
        }
        n_valid[s] = count;
        if count == 0 {
            continue;
        }
        active += 1;
        let inv = T::one() / T::from_usize(count).expect("size fits");
        residual += sum * inv;
        let scale = inv / parts_f;
        let g = grad.data_mut();
        for i in 0..n {
            for j in 0..n {
                let k = coef[i * n + j];
                let dij = dist[i * n + j];
                if k == T::zero() || dij == T::zero() {
                    continue;
                }
                let f = k * scale / dij;
                for t in 0..d {
                    let diff = metric.data()[(i * parts + s) * d + t] - metric.data()[(j * parts + s) * d + t];
                    g[(i * parts + s) * d + t] += f * diff;
                    g[(j * parts + s) * d + t] -= f * diff;
                }
            }
        }
    }
    // Grouped so that identical embeddings give exactly the margin.
    let active_f = T::from_usize(active).expect("size fits");
    let loss = margin * (active_f / parts_f) + residual / parts_f;
    Ok((loss, n_valid, grad))
}

pub fn triplet_loss<T: Scalar>(metric: &Tensor<T>, labels: &[usize], margin: T) -> Result<(T, Vec<usize>)> {
    triplet_loss_with_grad(metric, labels, margin).map(|(l, n, _)| (l, n))
}

/// Softmax cross-entropy averaged over samples and parts, with its gradient.
pub fn ce_loss_with_grad<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let &[n, parts, k] = logits.shape() else {
        return Err(Error::Argument(format!("expected [N, parts, classes], got {:?}", logits.shape())));
    };
    if labels.len() != n {
        return Err(Error::Argument(format!("{} labels for {n} samples", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::Argument(format!("class label {bad} outside 0..{k}")));
    }
    let inv = T::one() / T::from_usize(n * parts).expect("size fits");
    let mut grad = Tensor::zeros(logits.shape());
    let mut total = T::zero();
    for i in 0..n {
        for s in 0..parts {
            let o = (i * parts + s) * k;
            let row = &logits.data()[o..o + k];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let sum_exp: T = row.iter().map(|&v| (v - max).exp()).sum();
            let log_z = max + sum_exp.ln();
            total += log_z - row[labels[i]];
            let g = &mut grad.data_mut()[o..o + k];
            for (c, gc) in g.iter_mut().enumerate() {
                let p = (row[c] - log_z).exp();
                let target = if c == labels[i] { T::one() } else { T::zero() };
                *gc = (p - target) * inv;
            }
        }
    }
    Ok((total * inv, grad))
}

pub fn ce_loss<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<T> {
    ce_loss_with_grad(logits, labels).map(|(l, _)| l)
}

/// Derivatives of the total loss.
#[derive(Debug, Clone)]
pub struct LossGrad<T> {
    pub metric: Tensor<T>,
    pub logits: Tensor<T>,
}

pub fn total_loss_with_grad<T: Scalar>(
    metric: &Tensor<T>,
    logits: &Tensor<T>,
    triplet_labels: &[usize],
    class_labels: &[usize],
    margin: T,
) -> Result<(LossBreakdown<T>, LossGrad<T>)> {
    if metric.shape().get(1) != Some(&PARTS) || logits.shape().get(2) != Some(&CLASSES) {
        return Err(Error::Argument("loss expects 16 parts and 3 classes".into()));
    }
    let (triplet, n_valid_per_part, d_metric) = triplet_loss_with_grad(metric, triplet_labels, margin)?;
    let (ce, d_logits) = ce_loss_with_grad(logits, class_labels)?;
    Ok((
        LossBreakdown {
            triplet,
            ce,
            total: triplet + ce,
            n_valid_per_part,
        },
        LossGrad {
            metric: d_metric,
            logits: d_logits,
        },
    ))
}

pub fn total_loss<T: Scalar>(
    metric: &Tensor<T>,
    logits: &Tensor<T>,
    triplet_labels: &[usize],
    class_labels: &[usize],
    margin: T,
) -> Result<LossBreakdown<T>> {
    total_loss_with_grad(metric, logits, triplet_labels, class_labels, margin).map(|(b, _)| b)
}
