//! Part-based head: horizontal strip pooling, per-part projection into the
//! metric space, and the BNNeck classifier.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{matmul, Scalar, Trans};
use crate::tensor::Tensor;

/// Horizontal strips per feature map.
pub const PARTS: usize = 16;
pub const CLASSES: usize = 3;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Indices of the strip maxima, kept for the backward pass.
pub(crate) struct PoolTrace {
    argmax: Vec<usize>,
    strip_len: usize,
}

/// Pool `[N, c, H, W]` into `[N, parts, c]`: each part is `max + mean` over
/// its `H / parts` rows.
pub fn horizontal_pool<T: Scalar>(x: &Tensor<T>, parts: usize) -> Result<Tensor<T>> {
    horizontal_pool_traced(x, parts).map(|(z, _)| z)
}

pub(crate) fn horizontal_pool_traced<T: Scalar>(x: &Tensor<T>, parts: usize) -> Result<(Tensor<T>, PoolTrace)> {
    let &[n, c, h, w] = x.shape() else {
        return Err(Error::Argument(format!("expected [N, c, H, W], got {:?}", x.shape())));
    };
    if parts == 0 || h % parts != 0 {
        return Err(Error::Config(format!(
            "feature height {h} is not divisible into {parts} strips"
        )));
    }
    let rows = h / parts;
    let strip_len = rows * w;
    let inv = T::one() / T::from_usize(strip_len).expect("size fits");
    let mut z = vec![T::zero(); n * parts * c];
    let mut argmax = vec![0; n * parts * c];
    let data = x.data();
    for b in 0..n {
        for ch in 0..c {
            let plane = &data[((b * c) + ch) * h * w..((b * c) + ch + 1) * h * w];
            for s in 0..parts {
                let strip = &plane[s * strip_len..(s + 1) * strip_len];
                let mut best = 0;
                for (i, &v) in strip.iter().enumerate() {
                    if v > strip[best] {
                        best = i;
                    }
                }
                let mean = strip.iter().copied().sum::<T>() * inv;
                let o = (b * parts + s) * c + ch;
                z[o] = strip[best] + mean;
                argmax[o] = s * strip_len + best;
            }
        }
    }
    Ok((Tensor::from_vec(&[n, parts, c], z)?, PoolTrace { argmax, strip_len }))
}

pub(crate) fn horizontal_pool_backward<T: Scalar>(
    shape: &[usize],
    trace: &PoolTrace,
    dz: &Tensor<T>,
) -> Tensor<T> {
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let parts = dz.shape()[1];
    let inv = T::one() / T::from_usize(trace.strip_len).expect("size fits");
    let mut dx = Tensor::zeros(shape);
    let out = dx.data_mut();
    for b in 0..n {
        for s in 0..parts {
            for ch in 0..c {
                let o = (b * parts + s) * c + ch;
                let g = dz.data()[o];
                let plane = ((b * c) + ch) * h * w;
                let strip = &mut out[plane + s * trace.strip_len..plane + (s + 1) * trace.strip_len];
                let share = g * inv;
                strip.iter_mut().for_each(|v| *v += share);
                out[plane + trace.argmax[o]] += g;
            }
        }
    }
    dx
}

/// Independent bias-free linear map per part: `[N, P, c] x [P, c, d]`.
pub fn part_projection<T: Scalar>(z: &Tensor<T>, weight: &Tensor<T>) -> Result<Tensor<T>> {
    let &[n, parts, c] = z.shape() else {
        return Err(Error::Argument(format!("expected [N, parts, c], got {:?}", z.shape())));
    };
    let &[wp, wc, d] = weight.shape() else {
        return Err(Error::Argument("projection weight must be [parts, c, d]".into()));
    };
    if wp != parts || wc != c {
        return Err(Error::Argument(format!(
            "projection weight {:?} does not match input {:?}",
            weight.shape(),
            z.shape()
        )));
    }
    let mut e = vec![T::zero(); n * parts * d];
    let mut zs = vec![T::zero(); n * c];
    let mut es = vec![T::zero(); n * d];
    for s in 0..parts {
        gather_part(z.data(), n, parts, c, s, &mut zs);
        matmul(n, c, d, &zs, Trans::No, &weight.data()[s * c * d..(s + 1) * c * d], Trans::No, T::zero(), &mut es);
        scatter_part(&es, n, parts, d, s, &mut e);
    }
    Tensor::from_vec(&[n, parts, d], e)
}

/// Returns `dz` and accumulates into `d_weight`.
pub(crate) fn part_projection_backward<T: Scalar>(
    z: &Tensor<T>,
    weight: &Tensor<T>,
    de: &Tensor<T>,
    d_weight: &mut Tensor<T>,
) -> Tensor<T> {
    let (n, parts, c) = (z.shape()[0], z.shape()[1], z.shape()[2]);
    let d = weight.shape()[2];
    let mut dz = vec![T::zero(); n * parts * c];
    let mut zs = vec![T::zero(); n * c];
    let mut des = vec![T::zero(); n * d];
    let mut dzs = vec![T::zero(); n * c];
    for s in 0..parts {
        gather_part(z.data(), n, parts, c, s, &mut zs);
        gather_part(de.data(), n, parts, d, s, &mut des);
        let gw = &mut d_weight.data_mut()[s * c * d..(s + 1) * c * d];
        matmul(c, n, d, &zs, Trans::Yes, &des, Trans::No, T::one(), gw);
        matmul(n, d, c, &des, Trans::No, &weight.data()[s * c * d..(s + 1) * c * d], Trans::Yes, T::zero(), &mut dzs);
        scatter_part(&dzs, n, parts, c, s, &mut dz);
    }
    Tensor::from_vec(&[n, parts, c], dz).expect("shape")
}

fn gather_part<T: Scalar>(x: &[T], n: usize, parts: usize, width: usize, s: usize, out: &mut [T]) {
    for b in 0..n {
        let src = &x[(b * parts + s) * width..(b * parts + s + 1) * width];
        out[b * width..(b + 1) * width].copy_from_slice(src);
    }
}

fn scatter_part<T: Scalar>(x: &[T], n: usize, parts: usize, width: usize, s: usize, out: &mut [T]) {
    for b in 0..n {
        out[(b * parts + s) * width..(b * parts + s + 1) * width].copy_from_slice(&x[b * width..(b + 1) * width]);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Per-part running statistics of the BNNeck, `[parts, d]` each.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats<T> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

impl<T: Scalar> BnStats<T> {
    /// Mean 0, variance 1.
    pub fn identity(parts: usize, d: usize) -> Self {
        Self {
            mean: Tensor::zeros(&[parts, d]),
            var: Tensor::full(&[parts, d], T::one()),
        }
    }

    /// Exponential moving update from one batch's (biased) statistics.
    pub fn update(&mut self, batch: &BnStats<T>, batch_size: usize) {
        let m = T::lit(BN_MOMENTUM);
        let keep = T::one() - m;
        let unbias = if batch_size > 1 {
            T::from_usize(batch_size).unwrap() / T::from_usize(batch_size - 1).unwrap()
        } else {
            T::one()
        };
        for (r, &b) in self.mean.data_mut().iter_mut().zip(batch.mean.data()) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in self.var.data_mut().iter_mut().zip(batch.var.data()) {
            *r = keep * *r + m * b * unbias;
        }
    }
}

/// Triplet-side and classifier-side outputs of the network.
#[derive(Debug, Clone, PartialEq)]
pub struct PartEmbeddingSet<T> {
    /// Pre-normalization embeddings `[N, parts, d]`.
    pub metric: Tensor<T>,
    /// Class scores `[N, parts, classes]`.
    pub logits: Tensor<T>,
}

impl<T: Scalar> PartEmbeddingSet<T> {
    pub fn batch(&self) -> usize {
        self.metric.shape()[0]
    }

    /// Logits averaged over parts, `[N][classes]`.
    pub fn mean_logits(&self) -> Vec<[T; CLASSES]> {
        let &[n, parts, k] = self.logits.shape() else {
            unreachable!("logits are rank 3")
        };
        let inv = T::one() / T::from_usize(parts).unwrap();
        (0..n)
            .map(|b| {
                let mut acc = [T::zero(); CLASSES];
                for s in 0..parts {
                    for (a, &l) in acc.iter_mut().zip(&self.logits.data()[(b * parts + s) * k..(b * parts + s + 1) * k]) {
                        *a += l;
                    }
                }
                acc.map(|a| a * inv)
            })
            .collect()
    }

    /// Arg-max class of the part-averaged logits.
    pub fn predictions(&self) -> Vec<usize> {
        self.mean_logits()
            .iter()
            .map(|l| {
                (0..CLASSES)
                    .fold(0, |best, k| if l[k] > l[best] { k } else { best })
            })
            .collect()
    }
}

pub(crate) struct BnTrace<T> {
    normalized: Vec<T>,
    inv_std: Vec<T>,
    scaled: Vec<T>,
}

/// BNNeck: per-part normalization (learnable scale, zero shift) followed by
/// a bias-free per-part classifier `[parts, d, classes]`.
///
/// In train mode the batch statistics are returned for the caller to fold
/// into the running statistics; eval mode reads `stats` only.
pub fn bnneck<T: Scalar>(
    e: &Tensor<T>,
    scale: &Tensor<T>,
    classifier: &Tensor<T>,
    stats: &BnStats<T>,
    mode: Mode,
) -> Result<(PartEmbeddingSet<T>, Option<BnStats<T>>)> {
    bnneck_traced(e, scale, classifier, stats, mode).map(|(out, batch, _)| (out, batch))
}

#[allow(clippy::type_complexity)]
pub(crate) fn bnneck_traced<T: Scalar>(
    e: &Tensor<T>,
    scale: &Tensor<T>,
    classifier: &Tensor<T>,
    stats: &BnStats<T>,
    mode: Mode,
) -> Result<(PartEmbeddingSet<T>, Option<BnStats<T>>, BnTrace<T>)> {
    let &[n, parts, d] = e.shape() else {
        return Err(Error::Argument(format!("expected [N, parts, d], got {:?}", e.shape())));
    };
    if scale.shape() != [parts, d] || classifier.shape() != [parts, d, CLASSES] || stats.mean.shape() != [parts, d] {
        return Err(Error::Argument("BNNeck parameter shapes do not match embeddings".into()));
    }
    let eps = T::lit(BN_EPS);
    let inv_n = T::one() / T::from_usize(n).expect("size fits");
    let x = e.data();
    let (mean, var) = match mode {
        Mode::Train => {
            let mut mean = vec![T::zero(); parts * d];
            let mut var = vec![T::zero(); parts * d];
            for b in 0..n {
                for (m, &v) in mean.iter_mut().zip(&x[b * parts * d..(b + 1) * parts * d]) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m *= inv_n);
            for b in 0..n {
                for ((s, &v), &m) in var.iter_mut().zip(&x[b * parts * d..(b + 1) * parts * d]).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
            var.iter_mut().for_each(|s| *s *= inv_n);
            (mean, var)
        }
        Mode::Eval => (stats.mean.data().to_vec(), stats.var.data().to_vec()),
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut normalized = vec![T::zero(); n * parts * d];
    let mut scaled = vec![T::zero(); n * parts * d];
    for b in 0..n {
        for i in 0..parts * d {
            let o = b * parts * d + i;
            normalized[o] = (x[o] - mean[i]) * inv_std[i];
            scaled[o] = normalized[o] * scale.data()[i];
        }
    }
    let mut logits = vec![T::zero(); n * parts * CLASSES];
    let mut xs = vec![T::zero(); n * d];
    let mut ls = vec![T::zero(); n * CLASSES];
    for s in 0..parts {
        gather_part(&scaled, n, parts, d, s, &mut xs);
        let c = &classifier.data()[s * d * CLASSES..(s + 1) * d * CLASSES];
        matmul(n, d, CLASSES, &xs, Trans::No, c, Trans::No, T::zero(), &mut ls);
        scatter_part(&ls, n, parts, CLASSES, s, &mut logits);
    }
    let batch = (mode == Mode::Train).then(|| BnStats {
        mean: Tensor::from_vec(&[parts, d], mean).expect("shape"),
        var: Tensor::from_vec(&[parts, d], var).expect("shape"),
    });
    Ok((
        PartEmbeddingSet {
            metric: e.clone(),
            logits: Tensor::from_vec(&[n, parts, CLASSES], logits)?,
        },
        batch,
        BnTrace {
            normalized,
            inv_std,
            scaled,
        },
    ))
}

/// Train-mode BNNeck backward. Returns the gradient with respect to the
/// embeddings and accumulates scale and classifier gradients.
pub(crate) fn bnneck_backward<T: Scalar>(
    trace: &BnTrace<T>,
    shape: &[usize],
    scale: &Tensor<T>,
    classifier: &Tensor<T>,
    d_logits: &Tensor<T>,
    d_scale: &mut Tensor<T>,
    d_classifier: &mut Tensor<T>,
) -> Tensor<T> {
    let (n, parts, d) = (shape[0], shape[1], shape[2]);
    let mut d_scaled = vec![T::zero(); n * parts * d];
    let mut xs = vec![T::zero(); n * d];
    let mut gl = vec![T::zero(); n * CLASSES];
    let mut gx = vec![T::zero(); n * d];
    for s in 0..parts {
        gather_part(&trace.scaled, n, parts, d, s, &mut xs);
        gather_part(d_logits.data(), n, parts, CLASSES, s, &mut gl);
        let gc = &mut d_classifier.data_mut()[s * d * CLASSES..(s + 1) * d * CLASSES];
        matmul(d, n, CLASSES, &xs, Trans::Yes, &gl, Trans::No, T::one(), gc);
        let c = &classifier.data()[s * d * CLASSES..(s + 1) * d * CLASSES];
        matmul(n, CLASSES, d, &gl, Trans::No, c, Trans::Yes, T::zero(), &mut gx);
        scatter_part(&gx, n, parts, d, s, &mut d_scaled);
    }
    let nf = T::from_usize(n).expect("size fits");
    let mut dx = vec![T::zero(); n * parts * d];
    for i in 0..parts * d {
        let gamma = scale.data()[i];
        let mut sum_dn = T::zero();
        let mut sum_dn_n = T::zero();
        let mut sum_ds = T::zero();
        for b in 0..n {
            let o = b * parts * d + i;
            let dn = d_scaled[o] * gamma;
            sum_dn += dn;
            sum_dn_n += dn * trace.normalized[o];
            sum_ds += d_scaled[o] * trace.normalized[o];
        }
        d_scale.data_mut()[i] += sum_ds;
        let k = trace.inv_std[i] / nf;
        for b in 0..n {
            let o = b * parts * d + i;
            let dn = d_scaled[o] * gamma;
            dx[o] = k * (nf * dn - sum_dn - trace.normalized[o] * sum_dn_n);
        }
    }
    Tensor::from_vec(&[n, parts, d], dx).expect("shape")
}
