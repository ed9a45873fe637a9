//! Softmax attention pooling over a set of feature maps.
//!
//! The same mechanism weights frames inside a bag and bags inside a clip:
//! each instance map `[c, H, W]` is summarized by its per-channel spatial mean
//! `u`, scored as `w . tanh(V^T u)`, and the pooled map is the
//! softmax-weighted sum of the instance maps.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::network::FeatureVolume;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams<T> {
    /// `[c, d_att]`
    pub v: Tensor<T>,
    /// `[d_att]`
    pub w: Tensor<T>,
}

impl<T: Scalar> AttentionParams<T> {
    pub fn zeros(channels: usize, hidden: usize) -> Self {
        Self {
            v: Tensor::zeros(&[channels, hidden]),
            w: Tensor::zeros(&[hidden]),
        }
    }

    pub fn init<R: Rng + ?Sized>(channels: usize, hidden: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(channels, hidden);
        let sv = 1.0 / (channels as f64).sqrt();
        let sw = 1.0 / (hidden as f64).sqrt();
        for x in p.v.data_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *x = T::lit(z * sv);
        }
        for x in p.w.data_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *x = T::lit(z * sw);
        }
        p
    }

    pub fn channels(&self) -> usize {
        self.v.shape()[0]
    }

    pub fn hidden(&self) -> usize {
        self.v.shape()[1]
    }
}

/// Intermediate values of one attention pooling, kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct AttendTrace<T> {
    descriptors: Vec<Vec<T>>,
    hidden: Vec<Vec<T>>,
    pub(crate) weights: Vec<T>,
}

/// Per-channel mean over the spatial positions of a `[c, spatial]` map.
fn descriptor<T: Scalar>(map: &[T], channels: usize) -> Vec<T> {
    let spatial = map.len() / channels;
    let inv = T::one() / T::from_usize(spatial).expect("size fits");
    map.chunks(spatial)
        .map(|plane| plane.iter().copied().sum::<T>() * inv)
        .collect()
}

/// Softmax over the unmasked entries; masked entries get exactly zero.
pub(crate) fn masked_softmax<T: Scalar>(scores: &[T], mask: Option<&[bool]>) -> Vec<T> {
    let live = |j: usize| mask.is_none_or(|m| m[j]);
    let max = (0..scores.len())
        .filter(|&j| live(j))
        .map(|j| scores[j])
        .fold(T::neg_infinity(), T::max);
    let ex: Vec<T> = (0..scores.len())
        .map(|j| if live(j) { (scores[j] - max).exp() } else { T::zero() })
        .collect();
    let total: T = ex.iter().copied().sum();
    ex.into_iter().map(|e| e / total).collect()
}

/// Pool `instances` (each a `[c, spatial]` map). `mask[j] == false` removes
/// instance `j`. At least one instance must be live.
pub(crate) fn attend<T: Scalar>(
    params: &AttentionParams<T>,
    instances: &[&[T]],
    mask: Option<&[bool]>,
) -> Result<(Vec<T>, AttendTrace<T>)> {
    let c = params.channels();
    let d = params.hidden();
    let live = |j: usize| mask.is_none_or(|m| m[j]);
    if !(0..instances.len()).any(live) {
        return Err(Error::Argument("attention over an empty or fully masked set".into()));
    }
    let len = instances[0].len();
    if instances.iter().any(|m| m.len() != len) || len % c != 0 {
        return Err(Error::Argument("attention instances differ in shape".into()));
    }
    let v = params.v.data();
    let w = params.w.data();
    let mut descriptors = Vec::with_capacity(instances.len());
    let mut hidden = Vec::with_capacity(instances.len());
    let mut scores = Vec::with_capacity(instances.len());
    for (j, inst) in instances.iter().enumerate() {
        let u = descriptor(inst, c);
        let mut t = vec![T::zero(); d];
        if live(j) {
            for (ch, &uc) in u.iter().enumerate() {
                for (ta, &va) in t.iter_mut().zip(&v[ch * d..(ch + 1) * d]) {
                    *ta += uc * va;
                }
            }
            t.iter_mut().for_each(|x| *x = x.tanh());
        }
        scores.push(t.iter().zip(w).map(|(&a, &b)| a * b).sum::<T>());
        descriptors.push(u);
        hidden.push(t);
    }
    let weights = masked_softmax(&scores, mask);
    let mut pooled = vec![T::zero(); len];
    for (j, inst) in instances.iter().enumerate() {
        if !live(j) {
            continue;
        }
        let a = weights[j];
        pooled.iter_mut().zip(inst.iter()).for_each(|(p, &x)| *p += a * x);
    }
    Ok((
        pooled,
        AttendTrace {
            descriptors,
            hidden,
            weights,
        },
    ))
}

/// Gradient of [`attend`]: returns one gradient map per instance (zero for
/// masked ones) and accumulates parameter gradients into `grad`.
pub(crate) fn attend_backward<T: Scalar>(
    params: &AttentionParams<T>,
    instances: &[&[T]],
    trace: &AttendTrace<T>,
    d_pooled: &[T],
    grad: &mut AttentionParams<T>,
) -> Vec<Vec<T>> {
    let c = params.channels();
    let d = params.hidden();
    let v = params.v.data();
    let w = params.w.data();
    let a = &trace.weights;
    let d_weight: Vec<T> = instances
        .iter()
        .map(|inst| inst.iter().zip(d_pooled).map(|(&x, &g)| x * g).sum())
        .collect();
    let mean: T = a.iter().zip(&d_weight).map(|(&x, &y)| x * y).sum();
    let spatial = d_pooled.len() / c;
    let inv_spatial = T::one() / T::from_usize(spatial).expect("size fits");
    let mut out = Vec::with_capacity(instances.len());
    for j in 0..instances.len() {
        let mut d_inst: Vec<T> = d_pooled.iter().map(|&g| a[j] * g).collect();
        if a[j] == T::zero() {
            out.push(d_inst);
            continue;
        }
        let d_score = a[j] * (d_weight[j] - mean);
        let t = &trace.hidden[j];
        let u = &trace.descriptors[j];
        for (gw, &ta) in grad.w.data_mut().iter_mut().zip(t) {
            *gw += d_score * ta;
        }
        let d_pre: Vec<T> = t
            .iter()
            .zip(w)
            .map(|(&ta, &wa)| d_score * wa * (T::one() - ta * ta))
            .collect();
        let gv = grad.v.data_mut();
        for ch in 0..c {
            let row = &mut gv[ch * d..(ch + 1) * d];
            for (g, &dp) in row.iter_mut().zip(&d_pre) {
                *g += u[ch] * dp;
            }
            let du: T = v[ch * d..(ch + 1) * d]
                .iter()
                .zip(&d_pre)
                .map(|(&va, &dp)| va * dp)
                .sum();
            let step = du * inv_spatial;
            d_inst[ch * spatial..(ch + 1) * spatial]
                .iter_mut()
                .for_each(|x| *x += step);
        }
        out.push(d_inst);
    }
    out
}

/// Frame-level attention pooling over `f` (`[N, c, S, H, W]`).
///
/// `mask[n][s] == false` marks padded frame slots, which receive weight
/// exactly zero. Returns the pooled maps `[N, c, H, W]` and frame weights
/// `[N, S]`.
pub fn attention_pool_frames<T: Scalar>(
    f: &FeatureVolume<T>,
    mask: Option<&[Vec<bool>]>,
    params: &AttentionParams<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if f.channels() != params.channels() {
        return Err(Error::Argument(format!(
            "feature channels {} but attention expects {}",
            f.channels(),
            params.channels()
        )));
    }
    let (n, c, s, h, w) = f.dims();
    let mut pooled = Vec::with_capacity(n * c * h * w);
    let mut weights = Vec::with_capacity(n * s);
    for b in 0..n {
        let instances: Vec<&[T]> = (0..s).map(|j| f.frame(b, j)).collect();
        let m = mask.map(|m| m[b].as_slice());
        let (p, trace) = attend(params, &instances, m)?;
        pooled.extend(p);
        weights.extend(trace.weights);
    }
    Ok((
        Tensor::from_vec(&[n, c, h, w], pooled)?,
        Tensor::from_vec(&[n, s], weights)?,
    ))
}

/// Bag-level attention aggregation of `bags` (each `[N, c, H, W]`). Returns
/// the global maps `[N, c, H, W]` and bag weights `[N, K]`.
pub fn attention_aggregate_bags<T: Scalar>(
    bags: &[Tensor<T>],
    params: &AttentionParams<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let Some(first) = bags.first() else {
        return Err(Error::Argument("no bags to aggregate".into()));
    };
    let shape = first.shape().to_vec();
    if shape.len() != 4 || bags.iter().any(|b| b.shape() != shape.as_slice()) {
        return Err(Error::Argument("bag feature maps differ in shape".into()));
    }
    if shape[1] != params.channels() {
        return Err(Error::Argument("bag channels do not match attention".into()));
    }
    let n = shape[0];
    let per = shape[1..].iter().product::<usize>();
    let mut out = Vec::with_capacity(n * per);
    let mut alphas = Vec::with_capacity(n * bags.len());
    for b in 0..n {
        let instances: Vec<&[T]> = bags.iter().map(|t| &t.data()[b * per..(b + 1) * per]).collect();
        let (p, trace) = attend(params, &instances, None)?;
        out.extend(p);
        alphas.extend(trace.weights);
    }
    Ok((Tensor::from_vec(&shape, out)?, Tensor::from_vec(&[n, bags.len()], alphas)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_volume(n: usize, c: usize, s: usize, seed: u64) -> FeatureVolume<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * c * s * 16 * 11).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        FeatureVolume::from_frame_major(n, c, s, 16, 11, data).unwrap()
    }

    #[test]
    fn singleton_weight_is_one() {
        let f = random_volume(2, 4, 1, 0);
        let p = AttentionParams::init(4, 3, &mut ChaCha8Rng::seed_from_u64(1));
        let (h, a) = attention_pool_frames(&f, None, &p).unwrap();
        assert_eq!(a.data(), &[1.0, 1.0]);
        assert_eq!(&h.data()[..4 * 176], f.frame(0, 0));
    }

    #[test]
    fn zero_projection_gives_uniform_mean() {
        let f = random_volume(1, 3, 4, 2);
        let p = AttentionParams::<f64>::zeros(3, 5);
        let (h, a) = attention_pool_frames(&f, None, &p).unwrap();
        assert!(a.data().iter().all(|&x| (x - 0.25).abs() < 1e-15));
        for i in 0..h.len() {
            let mean = (0..4).map(|j| f.frame(0, j)[i]).sum::<f64>() / 4.0;
            assert!((h.data()[i] - mean).abs() < 1e-12);
        }
    }

    /// Explicit loop re-computation of scores, softmax and weighted sum.
    #[test]
    fn matches_loop_oracle() {
        let (c, s, d) = (4, 4, 6);
        let f = random_volume(1, c, s, 3);
        let p = AttentionParams::init(c, d, &mut ChaCha8Rng::seed_from_u64(4));
        let (h, a) = attention_pool_frames(&f, None, &p).unwrap();
        let mut scores = vec![0.0; s];
        for (j, score) in scores.iter_mut().enumerate() {
            let mut u = vec![0.0; c];
            for (ch, uc) in u.iter_mut().enumerate() {
                for y in 0..16 {
                    for x in 0..11 {
                        *uc += f.get(0, ch, j, y, x);
                    }
                }
                *uc /= 176.0;
            }
            for k in 0..d {
                let mut pre = 0.0;
                for ch in 0..c {
                    pre += p.v.at(&[ch, k]) * u[ch];
                }
                *score += p.w.at(&[k]) * pre.tanh();
            }
        }
        let z: f64 = scores.iter().map(|e| e.exp()).sum();
        let want_a: Vec<f64> = scores.iter().map(|e| e.exp() / z).collect();
        assert!((a.data().iter().sum::<f64>() - 1.0).abs() < 1e-6);
        for (x, y) in a.data().iter().zip(&want_a) {
            assert!((x - y).abs() < 1e-12);
        }
        for ch in 0..c {
            for y in 0..16 {
                for x in 0..11 {
                    let want: f64 = (0..s).map(|j| want_a[j] * f.get(0, ch, j, y, x)).sum();
                    assert!((h.at(&[0, ch, y, x]) - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn masked_slots_get_zero_weight() {
        let f = random_volume(2, 3, 4, 5);
        let p = AttentionParams::init(3, 4, &mut ChaCha8Rng::seed_from_u64(6));
        let mask = vec![vec![true, true, false, false], vec![true, true, true, true]];
        let (h, a) = attention_pool_frames(&f, Some(&mask), &p).unwrap();
        assert_eq!(a.at(&[0, 2]), 0.0);
        assert_eq!(a.at(&[0, 3]), 0.0);
        assert!((a.at(&[0, 0]) + a.at(&[0, 1]) - 1.0).abs() < 1e-12);
        // Padded slots must not leak into the pooled map either.
        let trimmed = FeatureVolume::from_frame_major(
            1,
            3,
            2,
            16,
            11,
            [f.frame(0, 0), f.frame(0, 1)].concat(),
        )
        .unwrap();
        let (h2, _) = attention_pool_frames(&trimmed, None, &p).unwrap();
        assert!(h.data()[..h2.len()].iter().zip(h2.data()).all(|(x, y)| x == y));
        let all_masked = vec![vec![false; 4], vec![true; 4]];
        assert!(attention_pool_frames(&f, Some(&all_masked), &p).is_err());
    }

    #[test]
    fn one_bag_passes_through() {
        let f = random_volume(2, 3, 1, 7);
        let p = AttentionParams::init(3, 4, &mut ChaCha8Rng::seed_from_u64(8));
        let bag = Tensor::from_vec(&[2, 3, 16, 11], f.data().to_vec()).unwrap();
        let (hh, alpha) = attention_aggregate_bags(std::slice::from_ref(&bag), &p).unwrap();
        assert_eq!(alpha.data(), &[1.0, 1.0]);
        assert_eq!(hh, bag);
    }

    #[test]
    fn equal_bags_aggregate_to_themselves() {
        let f = random_volume(1, 3, 1, 9);
        let p = AttentionParams::init(3, 4, &mut ChaCha8Rng::seed_from_u64(10));
        let bag = Tensor::from_vec(&[1, 3, 16, 11], f.data().to_vec()).unwrap();
        let (hh, _) = attention_aggregate_bags(&[bag.clone(), bag.clone(), bag.clone()], &p).unwrap();
        assert!(hh.max_abs_diff(&bag) < 1e-12);
    }

    #[test]
    fn mismatched_bags_rejected() {
        let p = AttentionParams::<f64>::zeros(3, 4);
        let a = Tensor::zeros(&[1, 3, 16, 11]);
        let b = Tensor::zeros(&[1, 3, 8, 11]);
        assert!(matches!(attention_aggregate_bags(&[a, b], &p), Err(Error::Argument(_))));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let (c, s, d) = (3, 4, 5);
        let f = random_volume(1, c, s, 11);
        let p = AttentionParams::init(c, d, &mut ChaCha8Rng::seed_from_u64(12));
        let instances: Vec<&[f64]> = (0..s).map(|j| f.frame(0, j)).collect();
        let probe: Vec<f64> = (0..c * 176).map(|i| ((i * 37) % 11) as f64 / 11.0 - 0.5).collect();
        let loss = |p: &AttentionParams<f64>, inst: &[&[f64]]| -> f64 {
            let (out, _) = attend(p, inst, None).unwrap();
            out.iter().zip(&probe).map(|(a, b)| a * b).sum()
        };
        let (_, trace) = attend(&p, &instances, None).unwrap();
        let mut grad = AttentionParams::zeros(c, d);
        let d_inst = attend_backward(&p, &instances, &trace, &probe, &mut grad);
        let eps = 1e-6;
        for i in 0..p.v.len() {
            let mut a = p.clone();
            a.v.data_mut()[i] += eps;
            let mut b = p.clone();
            b.v.data_mut()[i] -= eps;
            let fd = (loss(&a, &instances) - loss(&b, &instances)) / (2.0 * eps);
            assert!((fd - grad.v.data()[i]).abs() < 1e-7, "v[{i}]");
        }
        for i in 0..p.w.len() {
            let mut a = p.clone();
            a.w.data_mut()[i] += eps;
            let mut b = p.clone();
            b.w.data_mut()[i] -= eps;
            let fd = (loss(&a, &instances) - loss(&b, &instances)) / (2.0 * eps);
            assert!((fd - grad.w.data()[i]).abs() < 1e-7, "w[{i}]");
        }
        for j in 0..s {
            for i in (0..c * 176).step_by(41) {
                let mut owned: Vec<Vec<f64>> = instances.iter().map(|x| x.to_vec()).collect();
                owned[j][i] += eps;
                let plus: Vec<&[f64]> = owned.iter().map(|x| x.as_slice()).collect();
                let lp = loss(&p, &plus);
                owned[j][i] -= 2.0 * eps;
                let minus: Vec<&[f64]> = owned.iter().map(|x| x.as_slice()).collect();
                let lm = loss(&p, &minus);
                assert!(((lp - lm) / (2.0 * eps) - d_inst[j][i]).abs() < 1e-7);
            }
        }
    }
}
