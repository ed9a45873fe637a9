//! The Gait-MIL network: shared per-frame residual backbone, frame-level
//! attention pooling inside each bag, bag-level attention aggregation, and
//! the part-based BNNeck head.

mod attention;
mod conv;
mod head;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::clustering::{BagPartition, DEFAULT_BAGS};
use crate::data::{FRAME_HEIGHT, FRAME_WIDTH};
use crate::error::{Error, Result};
use crate::sampling::{SampledClip, DEFAULT_CLIP_FRAMES};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use attention::{attention_aggregate_bags, attention_pool_frames, AttentionParams};
pub use conv::{Backbone, Conv2d, ResBlock};
pub use head::{
    bnneck, horizontal_pool, part_projection, BnStats, Mode, PartEmbeddingSet, BN_EPS, BN_MOMENTUM, CLASSES, PARTS,
};

use attention::{attend, attend_backward, AttendTrace};
use conv::BackboneTrace;
use head::{
    bnneck_backward, bnneck_traced, horizontal_pool_backward, horizontal_pool_traced, part_projection_backward,
    BnTrace, PoolTrace,
};

/// Frames per backbone call in eval mode.
const EVAL_CHUNK_FRAMES: usize = 16;

/// Activations indexed `[batch, channel, frame, y, x]`.
///
/// Storage is frame-major (`[batch][frame][channel][y][x]`) so that each
/// frame's map is contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVolume<T> {
    n: usize,
    c: usize,
    s: usize,
    h: usize,
    w: usize,
    data: Vec<T>,
}

impl<T: Scalar> FeatureVolume<T> {
    pub fn from_frame_major(n: usize, c: usize, s: usize, h: usize, w: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != n * c * s * h * w {
            return Err(Error::Argument(format!(
                "volume [{n}, {c}, {s}, {h}, {w}] needs {} values, got {}",
                n * c * s * h * w,
                data.len()
            )));
        }
        Ok(Self { n, c, s, h, w, data })
    }

    /// Stack equally long clips into an `[N, 1, S, H, W]` input volume.
    pub fn from_clips(clips: &[SampledClip]) -> Result<Self> {
        let Some(first) = clips.first() else {
            return Err(Error::Argument("empty batch".into()));
        };
        let s = first.len();
        let (h, w) = first
            .frames
            .first()
            .map(|f| (f.height(), f.width()))
            .ok_or_else(|| Error::Argument("clip without frames".into()))?;
        let mut data = Vec::with_capacity(clips.len() * s * h * w);
        for clip in clips {
            if clip.len() != s {
                return Err(Error::Argument(format!(
                    "clip of {} frames in a batch of {s}-frame clips",
                    clip.len()
                )));
            }
            for f in &clip.frames {
                if (f.height(), f.width()) != (h, w) {
                    return Err(Error::Argument("frame sizes differ within a batch".into()));
                }
                data.extend(f.pixels().iter().map(|&p| T::lit(p as f64)));
            }
        }
        Self::from_frame_major(clips.len(), 1, s, h, w, data)
    }

    /// `(N, c, S, H, W)`
    pub fn dims(&self) -> (usize, usize, usize, usize, usize) {
        (self.n, self.c, self.s, self.h, self.w)
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    /// The `[c, H, W]` map of frame `s` of sample `n`.
    pub fn frame(&self, n: usize, s: usize) -> &[T] {
        let len = self.c * self.h * self.w;
        let o = (n * self.s + s) * len;
        &self.data[o..o + len]
    }

    pub fn get(&self, n: usize, c: usize, s: usize, y: usize, x: usize) -> T {
        self.frame(n, s)[(c * self.h + y) * self.w + x]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Run every frame of `input` (`[N, 1, S, H, W]`) through the shared backbone.
pub fn backbone_forward<T: Scalar>(input: &FeatureVolume<T>, backbone: &Backbone<T>) -> Result<FeatureVolume<T>> {
    let (n, c, s, h, w) = input.dims();
    if c != backbone.stem.cin() {
        return Err(Error::Argument(format!("backbone expects {} input channels, got {c}", backbone.stem.cin())));
    }
    if !input.all_finite() {
        return Err(Error::Numeric("non-finite value in backbone input".into()));
    }
    let (oh, ow) = backbone.out_size(h, w);
    let (out, _) = backbone.forward_traced(input.data.clone(), h, w);
    FeatureVolume::from_frame_major(n, backbone.out_channels(), s, oh, ow, out)
}

fn default_bags() -> usize {
    DEFAULT_BAGS
}
fn default_clip_frames() -> usize {
    DEFAULT_CLIP_FRAMES
}
fn default_widths() -> Vec<usize> {
    vec![32, 64, 128]
}
fn default_dim() -> usize {
    128
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Requested bags per clip (K).
    #[serde(default = "default_bags")]
    pub bags: usize,
    /// Frames sampled per clip during training (S).
    #[serde(default = "default_clip_frames")]
    pub clip_frames: usize,
    /// Channels of the three residual stages.
    #[serde(default = "default_widths")]
    pub backbone_widths: Vec<usize>,
    /// Per-part embedding dimension (d).
    #[serde(default = "default_dim")]
    pub embed_dim: usize,
    /// Attention hidden width (d_att).
    #[serde(default = "default_dim")]
    pub attention_dim: usize,
    /// False collapses every clip into a single bag.
    #[serde(default = "default_true")]
    pub mil_enabled: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            bags: default_bags(),
            clip_frames: default_clip_frames(),
            backbone_widths: default_widths(),
            embed_dim: default_dim(),
            attention_dim: default_dim(),
            mil_enabled: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bags == 0 || self.clip_frames == 0 {
            return Err(Error::Config("bags and clip_frames must be at least 1".into()));
        }
        if self.backbone_widths.len() != 3 || self.backbone_widths.contains(&0) {
            return Err(Error::Config(format!(
                "backbone_widths must list three positive widths, got {:?}",
                self.backbone_widths
            )));
        }
        if self.embed_dim == 0 || self.attention_dim == 0 {
            return Err(Error::Config("embed_dim and attention_dim must be at least 1".into()));
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        *self.backbone_widths.last().expect("validated")
    }

    /// Bags used for partitioning: 1 when MIL is off.
    pub fn effective_bags(&self) -> usize {
        if self.mil_enabled {
            self.bags
        } else {
            1
        }
    }
}

/// All learnable tensors of the network.
#[derive(Debug, Clone, PartialEq)]
pub struct GaitMilParams<T> {
    pub backbone: Backbone<T>,
    pub frame_attention: AttentionParams<T>,
    pub bag_attention: AttentionParams<T>,
    /// `[parts, c, d]`
    pub part_fc: Tensor<T>,
    /// BNNeck scale, `[parts, d]`.
    pub bn_scale: Tensor<T>,
    /// `[parts, d, classes]`
    pub classifier: Tensor<T>,
}

fn conv_names(prefix: &str) -> [String; 2] {
    [format!("{prefix}.weight"), format!("{prefix}.bias")]
}

impl<T: Scalar> GaitMilParams<T> {
    pub fn zeros(config: &ModelConfig) -> Self {
        let c = config.channels();
        let d = config.embed_dim;
        Self {
            backbone: Backbone::zeros(&config.backbone_widths),
            frame_attention: AttentionParams::zeros(c, config.attention_dim),
            bag_attention: AttentionParams::zeros(c, config.attention_dim),
            part_fc: Tensor::zeros(&[PARTS, c, d]),
            bn_scale: Tensor::zeros(&[PARTS, d]),
            classifier: Tensor::zeros(&[PARTS, d, CLASSES]),
        }
    }

    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Self {
        let c = config.channels();
        let d = config.embed_dim;
        let backbone = Backbone::init(&config.backbone_widths, rng);
        let frame_attention = AttentionParams::init(c, config.attention_dim, rng);
        let bag_attention = AttentionParams::init(c, config.attention_dim, rng);
        let mut part_fc = Tensor::zeros(&[PARTS, c, d]);
        let s_fc = 1.0 / (c as f64).sqrt();
        for x in part_fc.data_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *x = T::lit(z * s_fc);
        }
        let mut classifier = Tensor::zeros(&[PARTS, d, CLASSES]);
        let s_cls = 0.1 / (d as f64).sqrt();
        for x in classifier.data_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *x = T::lit(z * s_cls);
        }
        Self {
            backbone,
            frame_attention,
            bag_attention,
            part_fc,
            bn_scale: Tensor::full(&[PARTS, d], T::one()),
            classifier,
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.for_each_mut(|_, t| t.fill(T::zero()));
        z
    }

    fn names(&self) -> Vec<String> {
        let mut names = Vec::new();
        names.extend(conv_names("backbone.stem"));
        for (i, b) in self.backbone.blocks.iter().enumerate() {
            names.extend(conv_names(&format!("backbone.blocks.{i}.conv1")));
            names.extend(conv_names(&format!("backbone.blocks.{i}.conv2")));
            if b.shortcut.is_some() {
                names.extend(conv_names(&format!("backbone.blocks.{i}.shortcut")));
            }
        }
        for p in ["frame_attention", "bag_attention"] {
            names.push(format!("{p}.v"));
            names.push(format!("{p}.w"));
        }
        names.push("part_fc.weight".into());
        names.push("bnneck.scale".into());
        names.push("classifier.weight".into());
        names
    }

    fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut out = vec![&self.backbone.stem.weight, &self.backbone.stem.bias];
        for b in &self.backbone.blocks {
            out.extend([&b.conv1.weight, &b.conv1.bias, &b.conv2.weight, &b.conv2.bias]);
            if let Some(sc) = &b.shortcut {
                out.extend([&sc.weight, &sc.bias]);
            }
        }
        out.extend([
            &self.frame_attention.v,
            &self.frame_attention.w,
            &self.bag_attention.v,
            &self.bag_attention.w,
            &self.part_fc,
            &self.bn_scale,
            &self.classifier,
        ]);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.backbone.stem.weight, &mut self.backbone.stem.bias];
        for b in &mut self.backbone.blocks {
            out.extend([&mut b.conv1.weight, &mut b.conv1.bias, &mut b.conv2.weight, &mut b.conv2.bias]);
            if let Some(sc) = &mut b.shortcut {
                out.extend([&mut sc.weight, &mut sc.bias]);
            }
        }
        out.extend([
            &mut self.frame_attention.v,
            &mut self.frame_attention.w,
            &mut self.bag_attention.v,
            &mut self.bag_attention.w,
            &mut self.part_fc,
            &mut self.bn_scale,
            &mut self.classifier,
        ]);
        out
    }

    /// Hierarchical name of every tensor, in a fixed order.
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        self.names().into_iter().zip(self.tensors()).collect()
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        self.names().into_iter().zip(self.tensors_mut()).collect()
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor<T>)) {
        for (name, t) in self.named_mut() {
            f(&name, t);
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.all_finite())
    }
}

/// Network output plus attention diagnostics.
#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    pub embeddings: PartEmbeddingSet<T>,
    /// Frame weights per sample and bag, aligned with [`BagPartition::bags`].
    pub frame_weights: Vec<Vec<Vec<T>>>,
    /// Bag weights per sample.
    pub bag_weights: Vec<Vec<T>>,
    /// Batch statistics of the BNNeck (train mode only).
    pub batch_stats: Option<BnStats<T>>,
}

struct SampleTrace<T> {
    bags: Vec<Vec<usize>>,
    frame_traces: Vec<AttendTrace<T>>,
    bag_maps: Vec<Vec<T>>,
    bag_trace: AttendTrace<T>,
}

/// Saved activations of a train-mode forward pass.
pub struct ForwardCache<T> {
    input_hw: (usize, usize),
    backbone: Option<BackboneTrace<T>>,
    features: FeatureVolume<T>,
    samples: Vec<SampleTrace<T>>,
    global_shape: Vec<usize>,
    pool: PoolTrace,
    z: Tensor<T>,
    e_shape: Vec<usize>,
    bn: BnTrace<T>,
}

/// Parameters, running statistics and architecture of one network.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: GaitMilParams<T>,
    pub bn_stats: BnStats<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let params = GaitMilParams::init(&config, rng);
        let bn_stats = BnStats::identity(PARTS, config.embed_dim);
        Ok(Self {
            config,
            params,
            bn_stats,
        })
    }

    /// Fold one batch's statistics into the running statistics.
    pub fn apply_bn_update(&mut self, batch: &BnStats<T>, batch_size: usize) {
        self.bn_stats.update(batch, batch_size);
    }

    /// Forward `input` (`[N, 1, S, H, W]`) with one partition per sample.
    pub fn forward(&self, input: &FeatureVolume<T>, partitions: &[BagPartition], mode: Mode) -> Result<ForwardOutput<T>> {
        self.run(input, partitions, mode).map(|(out, _)| out)
    }

    /// Train-mode forward that also returns what [`Model::backward`] needs.
    pub fn forward_cached(
        &self,
        input: &FeatureVolume<T>,
        partitions: &[BagPartition],
    ) -> Result<(ForwardOutput<T>, ForwardCache<T>)> {
        self.run(input, partitions, Mode::Train)
    }

    fn run(
        &self,
        input: &FeatureVolume<T>,
        partitions: &[BagPartition],
        mode: Mode,
    ) -> Result<(ForwardOutput<T>, ForwardCache<T>)> {
        let (n, ci, s, h, w) = input.dims();
        if ci != 1 {
            return Err(Error::Argument(format!("expected single-channel frames, got {ci} channels")));
        }
        if (h, w) != (FRAME_HEIGHT, FRAME_WIDTH) {
            return Err(Error::Schema(format!(
                "frames are {h}x{w}, the network expects {FRAME_HEIGHT}x{FRAME_WIDTH}"
            )));
        }
        if partitions.len() != n {
            return Err(Error::Argument(format!("{} partitions for {n} samples", partitions.len())));
        }
        for p in partitions {
            p.validate(s)?;
        }
        if !input.all_finite() {
            return Err(Error::Numeric("non-finite value in network input".into()));
        }
        let p = &self.params;
        let (fh, fw) = p.backbone.out_size(h, w);
        let c = p.backbone.out_channels();
        let (feat, trace) = match mode {
            Mode::Train => {
                let (f, t) = p.backbone.forward_traced(input.data.clone(), h, w);
                (f, Some(t))
            }
            // Activations are not kept, so bound their size by chunking.
            Mode::Eval => {
                let mut f = Vec::with_capacity(n * s * c * fh * fw);
                for chunk in input.data.chunks(EVAL_CHUNK_FRAMES * h * w) {
                    f.extend(p.backbone.forward_traced(chunk.to_vec(), h, w).0);
                }
                (f, None)
            }
        };
        let features = FeatureVolume::from_frame_major(n, c, s, fh, fw, feat)?;
        let per = c * fh * fw;

        let mut global = Vec::with_capacity(n * per);
        let mut samples = Vec::with_capacity(n);
        for (b, partition) in partitions.iter().enumerate() {
            let bags = partition.bags();
            let mut frame_traces = Vec::with_capacity(bags.len());
            let mut bag_maps = Vec::with_capacity(bags.len());
            for bag in &bags {
                let inst: Vec<&[T]> = bag.iter().map(|&j| features.frame(b, j)).collect();
                let (hk, t) = attend(&p.frame_attention, &inst, None)?;
                bag_maps.push(hk);
                frame_traces.push(t);
            }
            let refs: Vec<&[T]> = bag_maps.iter().map(Vec::as_slice).collect();
            let (hg, bag_trace) = attend(&p.bag_attention, &refs, None)?;
            global.extend(hg);
            samples.push(SampleTrace {
                bags,
                frame_traces,
                bag_maps,
                bag_trace,
            });
        }
        let global = Tensor::from_vec(&[n, c, fh, fw], global)?;
        let (z, pool) = horizontal_pool_traced(&global, PARTS)?;
        let e = part_projection(&z, &p.part_fc)?;
        let (embeddings, batch_stats, bn) = bnneck_traced(&e, &p.bn_scale, &p.classifier, &self.bn_stats, mode)?;
        let out = ForwardOutput {
            embeddings,
            frame_weights: samples
                .iter()
                .map(|t| t.frame_traces.iter().map(|f| f.weights.clone()).collect())
                .collect(),
            bag_weights: samples.iter().map(|t| t.bag_trace.weights.clone()).collect(),
            batch_stats,
        };
        let cache = ForwardCache {
            input_hw: (h, w),
            backbone: trace,
            features,
            samples,
            global_shape: global.shape().to_vec(),
            pool,
            z,
            e_shape: e.shape().to_vec(),
            bn,
        };
        Ok((out, cache))
    }

    /// Gradients of a loss whose derivatives with respect to the pre-BN
    /// embeddings and the logits are `d_metric` and `d_logits`.
    pub fn backward(&self, cache: &ForwardCache<T>, d_metric: &Tensor<T>, d_logits: &Tensor<T>) -> GaitMilParams<T> {
        let p = &self.params;
        let mut g = p.zeros_like();
        let mut de = bnneck_backward(
            &cache.bn,
            &cache.e_shape,
            &p.bn_scale,
            &p.classifier,
            d_logits,
            &mut g.bn_scale,
            &mut g.classifier,
        );
        de.data_mut().iter_mut().zip(d_metric.data()).for_each(|(a, &b)| *a += b);
        let dz = part_projection_backward(&cache.z, &p.part_fc, &de, &mut g.part_fc);
        let d_global = horizontal_pool_backward(&cache.global_shape, &cache.pool, &dz);

        let (_, c, s, fh, fw) = cache.features.dims();
        let per = c * fh * fw;
        let mut d_feat = vec![T::zero(); cache.features.data().len()];
        for (b, st) in cache.samples.iter().enumerate() {
            let refs: Vec<&[T]> = st.bag_maps.iter().map(Vec::as_slice).collect();
            let d_bags = attend_backward(
                &p.bag_attention,
                &refs,
                &st.bag_trace,
                &d_global.data()[b * per..(b + 1) * per],
                &mut g.bag_attention,
            );
            for ((bag, trace), d_bag) in st.bags.iter().zip(&st.frame_traces).zip(&d_bags) {
                let inst: Vec<&[T]> = bag.iter().map(|&j| cache.features.frame(b, j)).collect();
                let d_frames = attend_backward(&p.frame_attention, &inst, trace, d_bag, &mut g.frame_attention);
                for (&j, df) in bag.iter().zip(d_frames) {
                    let o = (b * s + j) * per;
                    d_feat[o..o + per].iter_mut().zip(df).for_each(|(a, v)| *a += v);
                }
            }
        }
        let (h, w) = cache.input_hw;
        let trace = cache.backbone.as_ref().expect("backward needs a train-mode forward");
        p.backbone.backward(trace, d_feat, h, w, &mut g.backbone);
        g
    }
}

/// Partitions placing every frame of every sample in one bag.
pub fn single_bag_partitions(samples: usize, frames: usize) -> Vec<BagPartition> {
    vec![BagPartition::single(frames); samples]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clustering::kmeans;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ModelConfig {
        ModelConfig {
            bags: 2,
            clip_frames: 4,
            backbone_widths: vec![2, 3, 4],
            embed_dim: 5,
            attention_dim: 3,
            mil_enabled: true,
        }
    }

    fn random_input(n: usize, s: usize, seed: u64) -> FeatureVolume<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * s * FRAME_HEIGHT * FRAME_WIDTH).map(|_| rng.random::<f64>()).collect();
        FeatureVolume::from_frame_major(n, 1, s, FRAME_HEIGHT, FRAME_WIDTH, data).unwrap()
    }

    fn partitions(input: &FeatureVolume<f64>, k: usize, seed: u64) -> Vec<BagPartition> {
        let (n, _, s, _, _) = input.dims();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|b| {
                let pts: Vec<&[f64]> = (0..s).map(|j| input.frame(b, j)).collect();
                let r = kmeans(&pts, k, &mut rng, 50).unwrap();
                BagPartition {
                    k_requested: k,
                    k_eff: r.k(),
                    assignment: r.assignment,
                    centroids: Vec::new(),
                    inertia: 0.0,
                }
            })
            .collect()
    }

    #[test]
    fn backbone_shape_trace() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bb = Backbone::<f32>::init(&[4, 6, 128], &mut rng);
        let input = FeatureVolume::from_frame_major(2, 1, 5, 64, 44, vec![0.5f32; 2 * 5 * 64 * 44]).unwrap();
        let out = backbone_forward(&input, &bb).unwrap();
        assert_eq!(out.dims(), (2, 128, 5, 16, 11));
    }

    #[test]
    fn zero_input_gives_identical_frames() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bb = Backbone::<f64>::init(&[2, 3, 4], &mut rng);
        let input = FeatureVolume::from_frame_major(1, 1, 3, 64, 44, vec![0.0; 3 * 64 * 44]).unwrap();
        let out = backbone_forward(&input, &bb).unwrap();
        assert_eq!(out.frame(0, 0), out.frame(0, 1));
        assert_eq!(out.frame(0, 0), out.frame(0, 2));
    }

    #[test]
    fn frame_permutation_commutes_with_backbone() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let bb = Backbone::<f64>::init(&[2, 3, 4], &mut rng);
        let input = random_input(1, 3, 3);
        let perm = [2, 0, 1];
        let mut shuffled = Vec::new();
        for &j in &perm {
            shuffled.extend_from_slice(input.frame(0, j));
        }
        let shuffled = FeatureVolume::from_frame_major(1, 1, 3, 64, 44, shuffled).unwrap();
        let a = backbone_forward(&input, &bb).unwrap();
        let b = backbone_forward(&shuffled, &bb).unwrap();
        for (i, &j) in perm.iter().enumerate() {
            assert_eq!(b.frame(0, i), a.frame(0, j));
        }
    }

    #[test]
    fn non_finite_input_is_numeric_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = Model::<f64>::new(tiny(), &mut rng).unwrap();
        let mut data = vec![0.0; 2 * 64 * 44];
        data[10] = f64::NAN;
        let input = FeatureVolume::from_frame_major(1, 1, 2, 64, 44, data).unwrap();
        let r = model.forward(&input, &single_bag_partitions(1, 2), Mode::Eval);
        assert!(matches!(r, Err(Error::Numeric(_))));
    }

    #[test]
    fn output_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = Model::<f64>::new(tiny(), &mut rng).unwrap();
        let input = random_input(4, 4, 6);
        let out = model.forward(&input, &partitions(&input, 2, 7), Mode::Train).unwrap();
        assert_eq!(out.embeddings.metric.shape(), &[4, 16, 5]);
        assert_eq!(out.embeddings.logits.shape(), &[4, 16, 3]);
        for (fw, bw) in out.frame_weights.iter().zip(&out.bag_weights) {
            assert!((bw.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for bag in fw {
                assert!((bag.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_bag_equals_k1_clustering() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let model = Model::<f64>::new(tiny(), &mut rng).unwrap();
        let input = random_input(3, 4, 9);
        let a = model.forward(&input, &single_bag_partitions(3, 4), Mode::Train).unwrap();
        let b = model.forward(&input, &partitions(&input, 1, 10), Mode::Train).unwrap();
        assert_eq!(a.embeddings, b.embeddings);
    }

    #[test]
    fn duplicate_samples_match_in_eval() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let model = Model::<f64>::new(tiny(), &mut rng).unwrap();
        let one = random_input(1, 4, 12);
        let mut data = one.data().to_vec();
        data.extend_from_slice(one.data());
        let two = FeatureVolume::from_frame_major(2, 1, 4, 64, 44, data).unwrap();
        let part = partitions(&one, 2, 13);
        let out = model.forward(&two, &[part[0].clone(), part[0].clone()], Mode::Eval).unwrap();
        let row = 16 * 5;
        let m = out.embeddings.metric.data();
        assert_eq!(&m[..row], &m[row..]);
        let again = model.forward(&two, &[part[0].clone(), part[0].clone()], Mode::Eval).unwrap();
        assert_eq!(out.embeddings, again.embeddings);
    }

    #[test]
    fn chunked_eval_backbone_matches_train() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let model = Model::<f64>::new(tiny(), &mut rng).unwrap();
        let input = random_input(1, EVAL_CHUNK_FRAMES + 5, 21);
        let parts = partitions(&input, 2, 22);
        let a = model.forward(&input, &parts, Mode::Train).unwrap();
        let b = model.forward(&input, &parts, Mode::Eval).unwrap();
        assert_eq!(a.frame_weights, b.frame_weights);
        assert_eq!(a.bag_weights, b.bag_weights);
        assert_eq!(a.embeddings.metric, b.embeddings.metric);
    }

    #[test]
    fn wrong_frame_size_is_schema_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let model = Model::<f64>::new(tiny(), &mut rng).unwrap();
        let input = FeatureVolume::from_frame_major(1, 1, 2, 32, 22, vec![0.0; 2 * 32 * 22]).unwrap();
        let r = model.forward(&input, &single_bag_partitions(1, 2), Mode::Eval);
        assert!(matches!(r, Err(Error::Schema(_))));
    }

    #[test]
    fn names_are_unique_and_cover_every_tensor() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let p = GaitMilParams::<f32>::init(&tiny(), &mut rng);
        let named = p.named();
        let mut names: Vec<&String> = named.iter().map(|(n, _)| n).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), named.len());
        assert_eq!(named.iter().map(|(_, t)| t.len()).sum::<usize>(), p.parameter_count());
        assert!(named.iter().any(|(n, _)| n == "frame_attention.v"));
    }

    #[test]
    fn model_backward_matches_finite_differences() {
        let config = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let mut model = Model::<f64>::new(config, &mut rng).unwrap();
        conv::tests::randomize_biases(&mut model.params.backbone, &mut rng);
        let input = random_input(3, 4, 17);
        let parts = partitions(&input, 2, 18);
        let mut prng = ChaCha8Rng::seed_from_u64(19);
        let pm: Vec<f64> = (0..3 * 16 * 5).map(|_| prng.random::<f64>() - 0.5).collect();
        let pl: Vec<f64> = (0..3 * 16 * 3).map(|_| prng.random::<f64>() - 0.5).collect();
        let objective = |m: &Model<f64>| -> f64 {
            let out = m.forward(&input, &parts, Mode::Train).unwrap();
            out.embeddings.metric.data().iter().zip(&pm).map(|(a, b)| a * b).sum::<f64>()
                + out.embeddings.logits.data().iter().zip(&pl).map(|(a, b)| a * b).sum::<f64>()
        };
        let (_, cache) = model.forward_cached(&input, &parts).unwrap();
        let dm = Tensor::from_vec(&[3, 16, 5], pm.clone()).unwrap();
        let dl = Tensor::from_vec(&[3, 16, 3], pl.clone()).unwrap();
        let grads = model.backward(&cache, &dm, &dl);
        let eps = 1e-6;
        let mut checked = 0;
        let mut bad = Vec::new();
        for (ti, (name, g)) in grads.named().into_iter().enumerate() {
            let step = (g.len() / 5).max(1);
            for i in (0..g.len()).step_by(step) {
                let mut plus = model.clone();
                plus.params.named_mut()[ti].1.data_mut()[i] += eps;
                let mut minus = model.clone();
                minus.params.named_mut()[ti].1.data_mut()[i] -= eps;
                let fd = (objective(&plus) - objective(&minus)) / (2.0 * eps);
                let a = g.data()[i];
                checked += 1;
                if (fd - a).abs() > 1e-5 * (1.0 + a.abs().max(fd.abs())) {
                    bad.push(format!("{name}[{i}]: {a} vs {fd}"));
                }
            }
        }
        // Tens of thousands of ReLU units: a few can sit within the probe step
        // of their corner.
        assert!(bad.len() * 100 <= checked, "{} of {checked}: {bad:?}", bad.len());
    }
}
