//! SGD training loop with seeded determinism, milestone learning-rate decay
//! and resumable checkpoints.

mod checkpoint;

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustering::{partition_clip, BagPartition};
use crate::data::{Label, SilhouetteSequence};
use crate::error::{Error, Result};
use crate::losses::{total_loss_with_grad, LossBreakdown, DEFAULT_MARGIN};
use crate::network::{FeatureVolume, GaitMilParams, Model, ModelConfig};
use crate::sampling::{make_batch_indexed, triplet_labels, BatchPlan, SampledClip, SubjectIndex, TripletLabel};
use crate::scalar::Scalar;

pub use checkpoint::{inspect_checkpoint, load_checkpoint, load_checkpoint_for, CheckpointInfo, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

fn default_steps() -> usize {
    500
}
fn default_lr() -> f64 {
    0.1
}
fn default_momentum() -> f64 {
    0.9
}
fn default_weight_decay() -> f64 {
    5e-4
}
fn default_lr_decay() -> f64 {
    0.1
}
fn default_margin() -> f64 {
    DEFAULT_MARGIN
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    /// Steps at which the learning rate is multiplied by `lr_decay`.
    #[serde(default)]
    pub lr_milestones: Vec<usize>,
    #[serde(default = "default_lr_decay")]
    pub lr_decay: f64,
    #[serde(default)]
    pub seed: u64,
    /// Triplet margin.
    #[serde(default = "default_margin")]
    pub margin: f64,
    #[serde(default)]
    pub triplet_label: TripletLabel,
    /// Write a checkpoint every this many steps; 0 writes only the final one.
    #[serde(default)]
    pub checkpoint_every: usize,
    #[serde(default)]
    pub batch: BatchPlan,
    #[serde(default)]
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.lr) && self.lr != 0.0 {
            return Err(Error::Config(format!("lr must be finite and non-negative, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("weight_decay must be finite and non-negative".into()));
        }
        if !positive(self.lr_decay) {
            return Err(Error::Config("lr_decay must be positive".into()));
        }
        if !positive(self.margin) {
            return Err(Error::Config(format!("margin must be positive, got {}", self.margin)));
        }
        self.batch.validate()?;
        self.model.validate()
    }

    /// Learning rate in effect at `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let passed = self.lr_milestones.iter().filter(|&&m| m <= step).count();
        self.lr * self.lr_decay.powi(passed as i32)
    }
}

/// Everything needed to continue training bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<T> {
    pub config: TrainConfig,
    pub model: Model<T>,
    /// Momentum buffers, shaped like the parameters.
    pub velocity: GaitMilParams<T>,
    /// Completed steps.
    pub step: usize,
    pub rng: ChaCha8Rng,
}

impl<T: Scalar> TrainState<T> {
    /// Fresh state; the model is initialized from `config.seed`.
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = Model::new(config.model.clone(), &mut rng)?;
        let velocity = model.params.zeros_like();
        Ok(Self {
            config,
            model,
            velocity,
            step: 0,
            rng,
        })
    }
}

/// Outcome of one optimization step.
#[derive(Debug, Clone, Serialize)]
pub struct StepReport {
    pub step: usize,
    pub lr: f64,
    pub triplet: f64,
    pub ce: f64,
    pub total: f64,
    pub n_valid: Vec<usize>,
    /// Fraction of batch clips whose part-averaged logits pick the right class.
    pub batch_accuracy: f64,
    pub mean_bags: f64,
    pub mil_enabled: bool,
}

/// Cluster every clip into bags. Each clip gets its own generator seeded
/// from `rng`, so the result does not depend on thread scheduling.
pub fn partition_batch<R: Rng + ?Sized>(batch: &[SampledClip], config: &ModelConfig, rng: &mut R) -> Result<Vec<BagPartition>> {
    if !config.mil_enabled {
        return Ok(batch.iter().map(|c| BagPartition::single(c.len())).collect());
    }
    let seeds: Vec<u64> = batch.iter().map(|_| rng.random()).collect();
    batch
        .par_iter()
        .zip(seeds)
        .map(|(clip, seed)| partition_clip(clip, config.bags, &mut ChaCha8Rng::seed_from_u64(seed)))
        .collect()
}

fn to_f64<T: Scalar>(v: T) -> f64 {
    v.to_f64().unwrap_or(f64::NAN)
}

/// One SGD step on `batch`: fresh partitions, forward, loss, backward,
/// BNNeck statistics update, and the momentum update
/// `g += wd * p; v = momentum * v + g; p -= lr * v`.
pub fn train_step<T: Scalar>(state: &mut TrainState<T>, batch: &[SampledClip]) -> Result<StepReport> {
    let cfg = &state.config;
    let partitions = partition_batch(batch, &cfg.model, &mut state.rng)?;
    let input = FeatureVolume::<T>::from_clips(batch)?;
    let (out, cache) = state.model.forward_cached(&input, &partitions)?;
    let tl = triplet_labels(batch, cfg.triplet_label);
    let cl: Vec<usize> = batch.iter().map(|c| c.label.index()).collect();
    let (loss, grad): (LossBreakdown<T>, _) = total_loss_with_grad(
        &out.embeddings.metric,
        &out.embeddings.logits,
        &tl,
        &cl,
        T::lit(cfg.margin),
    )?;
    if !loss.total.is_finite() {
        let ids: Vec<&str> = batch.iter().map(|c| c.subject_id.as_str()).collect();
        return Err(Error::Numeric(format!(
            "non-finite loss at step {} (triplet {}, ce {}); batch subjects {ids:?}",
            state.step + 1,
            loss.triplet,
            loss.ce
        )));
    }
    let grads = state.model.backward(&cache, &grad.metric, &grad.logits);
    if let Some(stats) = &out.batch_stats {
        state.model.apply_bn_update(stats, batch.len());
    }

    let lr = cfg.lr_at(state.step);
    let (lr_t, mom, wd) = (T::lit(lr), T::lit(cfg.momentum), T::lit(cfg.weight_decay));
    let params = state.model.params.named_mut();
    let velocity = state.velocity.named_mut();
    for (((_, p), (_, v)), (_, g)) in params.into_iter().zip(velocity).zip(grads.named()) {
        for ((pi, vi), &gi) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            let gi = gi + wd * *pi;
            *vi = mom * *vi + gi;
            *pi -= lr_t * *vi;
        }
    }
    if !state.model.params.all_finite() {
        return Err(Error::Numeric(format!("parameters became non-finite at step {}", state.step + 1)));
    }
    state.step += 1;

    let preds = out.embeddings.predictions();
    let correct = preds.iter().zip(&cl).filter(|(p, y)| p == y).count();
    Ok(StepReport {
        step: state.step,
        lr,
        triplet: to_f64(loss.triplet),
        ce: to_f64(loss.ce),
        total: to_f64(loss.total),
        n_valid: loss.n_valid_per_part,
        batch_accuracy: correct as f64 / batch.len() as f64,
        mean_bags: partitions.iter().map(|p| p.k_eff as f64).sum::<f64>() / partitions.len() as f64,
        mil_enabled: cfg.model.mil_enabled,
    })
}

/// Side outputs of [`fit`].
#[derive(Default)]
pub struct FitOptions<'a> {
    /// Receives one JSON object per step.
    pub log: Option<&'a mut dyn Write>,
    /// Directory for periodic checkpoints (`step_NNNNNN.ckpt`).
    pub checkpoint_dir: Option<PathBuf>,
}

/// File name of the periodic checkpoint written after `step`.
pub fn checkpoint_name(step: usize) -> String {
    format!("step_{step:06}.ckpt")
}

fn check_dataset(config: &TrainConfig, index: &SubjectIndex) -> Result<()> {
    if config.batch.class_stratified {
        if let Some(l) = Label::ALL.iter().find(|&&l| !index.has_class(l)) {
            return Err(Error::Config(format!("stratified batching requested but the dataset has no {l} subjects")));
        }
    }
    if index.len() < config.batch.subjects_per_batch {
        return Err(Error::Config(format!(
            "batch needs {} subjects but the dataset has {}",
            config.batch.subjects_per_batch,
            index.len()
        )));
    }
    Ok(())
}

/// Train from initialization for `config.steps` steps.
pub fn fit<T: Scalar>(config: TrainConfig, dataset: &[SilhouetteSequence], options: FitOptions) -> Result<TrainState<T>> {
    let state = TrainState::new(config)?;
    resume(state, dataset, options)
}

/// Continue training `state` until `state.config.steps` steps are done.
pub fn resume<T: Scalar>(
    mut state: TrainState<T>,
    dataset: &[SilhouetteSequence],
    mut options: FitOptions,
) -> Result<TrainState<T>> {
    let index = SubjectIndex::new(dataset)?;
    check_dataset(&state.config, &index)?;
    while state.step < state.config.steps {
        let batch = make_batch_indexed(
            dataset,
            &index,
            &state.config.batch,
            state.config.model.clip_frames,
            &mut state.rng,
        )?;
        let report = train_step(&mut state, &batch)?;
        if let Some(log) = options.log.as_mut() {
            let line = serde_json::to_string(&report).expect("report serializes");
            writeln!(log, "{line}").map_err(|e| Error::io("training log", e))?;
        }
        let every = state.config.checkpoint_every;
        if let Some(dir) = &options.checkpoint_dir {
            if every > 0 && state.step % every == 0 {
                save_checkpoint(&state, &dir.join(checkpoint_name(state.step)))?;
            }
        }
    }
    Ok(state)
}

/// Write `state` to `dir` under the name of its step.
pub fn save_periodic<T: Scalar>(state: &TrainState<T>, dir: &Path) -> Result<PathBuf> {
    let path = dir.join(checkpoint_name(state.step));
    save_checkpoint(state, &path)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, normalize_all, SynthSpec};

    fn small_config() -> TrainConfig {
        TrainConfig {
            steps: 3,
            seed: 5,
            batch: BatchPlan {
                subjects_per_batch: 3,
                clips_per_subject: 2,
                class_stratified: true,
            },
            model: ModelConfig {
                bags: 2,
                clip_frames: 4,
                backbone_widths: vec![2, 3, 4],
                embed_dim: 4,
                attention_dim: 4,
                mil_enabled: true,
            },
            ..TrainConfig::default()
        }
    }

    fn dataset() -> Vec<SilhouetteSequence> {
        let spec = SynthSpec {
            n_subjects_per_class: 2,
            frames_per_sequence: 12,
            ..SynthSpec::default()
        };
        normalize_all(&generate_synthetic(&spec).unwrap().0).unwrap()
    }

    #[test]
    fn defaults() {
        let c = TrainConfig::default();
        assert_eq!(c.margin, 0.2);
        assert_eq!(c.model.clip_frames, 30);
        assert_eq!(c.model.bags, 3);
        assert_eq!(c.lr, 0.1);
        assert_eq!(c.momentum, 0.9);
        assert_eq!(c.weight_decay, 5e-4);
    }

    #[test]
    fn unknown_key_is_rejected() {
        let err = serde_json::from_str::<TrainConfig>(r#"{"stpes": 3}"#).unwrap_err();
        assert!(err.to_string().contains("stpes"));
    }

    #[test]
    fn lr_schedule() {
        let c = TrainConfig {
            lr_milestones: vec![10, 20],
            ..TrainConfig::default()
        };
        assert_eq!(c.lr_at(0), 0.1);
        assert_eq!(c.lr_at(9), 0.1);
        assert!((c.lr_at(10) - 0.01).abs() < 1e-15);
        assert!((c.lr_at(25) - 0.001).abs() < 1e-15);
    }

    #[test]
    fn zero_lr_keeps_parameters() {
        let data = dataset();
        let mut state = TrainState::<f32>::new(TrainConfig {
            lr: 0.0,
            ..small_config()
        })
        .unwrap();
        let before = state.model.params.clone();
        let index = SubjectIndex::new(&data).unwrap();
        let batch = make_batch_indexed(&data, &index, &state.config.batch, 4, &mut state.rng).unwrap();
        let report = train_step(&mut state, &batch).unwrap();
        assert_eq!(state.model.params, before);
        assert!(report.total.is_finite() && report.total > 0.0);
    }

    #[test]
    fn fit_is_deterministic() {
        let data = dataset();
        let mut log_a = Vec::new();
        let mut log_b = Vec::new();
        let a = fit::<f32>(small_config(), &data, FitOptions { log: Some(&mut log_a), ..Default::default() }).unwrap();
        let b = fit::<f32>(small_config(), &data, FitOptions { log: Some(&mut log_b), ..Default::default() }).unwrap();
        assert_eq!(a, b);
        assert_eq!(log_a, log_b);
        assert_eq!(String::from_utf8(log_a).unwrap().lines().count(), 3);
    }

    #[test]
    fn zero_steps_is_initialization() {
        let data = dataset();
        let config = TrainConfig {
            steps: 0,
            ..small_config()
        };
        let trained = fit::<f32>(config.clone(), &data, FitOptions::default()).unwrap();
        assert_eq!(trained, TrainState::new(config).unwrap());
    }

    #[test]
    fn missing_class_fails_before_training() {
        let data: Vec<_> = dataset().into_iter().filter(|s| s.label != Label::Neutral).collect();
        let err = fit::<f32>(small_config(), &data, FitOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn mil_off_uses_one_bag() {
        let data = dataset();
        let mut config = small_config();
        config.model.mil_enabled = false;
        let mut log = Vec::new();
        fit::<f32>(config, &data, FitOptions { log: Some(&mut log), ..Default::default() }).unwrap();
        let first: serde_json::Value = serde_json::from_str(String::from_utf8(log).unwrap().lines().next().unwrap()).unwrap();
        assert_eq!(first["mean_bags"], 1.0);
        assert_eq!(first["mil_enabled"], false);
        assert_eq!(first["n_valid"].as_array().unwrap().len(), 16);
    }
}
