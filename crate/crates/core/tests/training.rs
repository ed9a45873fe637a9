use gaitmil::data::{generate_synthetic, normalize_all, SilhouetteSequence, SynthSpec};
use gaitmil::evaluation::{evaluate_sequences, LabelSets};
use gaitmil::network::ModelConfig;
use gaitmil::sampling::{make_batch, BatchPlan};
use gaitmil::training::{fit, load_checkpoint, resume, save_checkpoint, train_step, FitOptions, TrainConfig, TrainState};
use gaitmil::Error;

fn dataset(subjects: usize, seed: u64) -> Vec<SilhouetteSequence> {
    let spec = SynthSpec {
        n_subjects_per_class: subjects,
        frames_per_sequence: 16,
        seed,
        ..SynthSpec::default()
    };
    normalize_all(&generate_synthetic(&spec).unwrap().0).unwrap()
}

fn small_model() -> ModelConfig {
    ModelConfig {
        bags: 2,
        clip_frames: 4,
        backbone_widths: vec![2, 4, 8],
        embed_dim: 4,
        attention_dim: 4,
        mil_enabled: true,
    }
}

fn config(steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        lr: 0.05,
        lr_milestones: vec![150],
        seed: 9,
        batch: BatchPlan {
            subjects_per_batch: 3,
            clips_per_subject: 2,
            class_stratified: true,
        },
        model: small_model(),
        ..TrainConfig::default()
    }
}

#[test]
fn resuming_at_step_100_matches_an_uninterrupted_200_step_run() {
    let data = dataset(2, 4);
    let straight = fit::<f32>(config(200), &data, FitOptions::default()).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let half = fit::<f32>(config(100), &data, FitOptions::default()).unwrap();
    let path = dir.path().join("half.ckpt");
    save_checkpoint(&half, &path).unwrap();
    let mut loaded = load_checkpoint::<f32>(&path).unwrap();
    assert_eq!(loaded, half);
    loaded.config.steps = 200;
    let resumed = resume(loaded, &data, FitOptions::default()).unwrap();

    assert_eq!(resumed.step, 200);
    assert_eq!(resumed.model, straight.model);
    assert_eq!(resumed.velocity, straight.velocity);
    assert_eq!(resumed.rng, straight.rng);
}

#[test]
fn loaded_state_continues_identically_for_one_step() {
    let data = dataset(2, 5);
    let mut original = fit::<f64>(config(7), &data, FitOptions::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.ckpt");
    save_checkpoint(&original, &path).unwrap();
    let mut loaded = load_checkpoint::<f64>(&path).unwrap();

    let plan = original.config.batch;
    let s = original.config.model.clip_frames;
    let batch_a = make_batch(&data, &plan, s, &mut original.rng).unwrap();
    let batch_b = make_batch(&data, &plan, s, &mut loaded.rng).unwrap();
    assert_eq!(batch_a, batch_b);
    let ra = train_step(&mut original, &batch_a).unwrap();
    let rb = train_step(&mut loaded, &batch_b).unwrap();
    assert_eq!(ra.total.to_bits(), rb.total.to_bits());
    for ((_, a), (_, b)) in original.model.params.named().into_iter().zip(loaded.model.params.named()) {
        let bits = |t: &gaitmil::Tensor<f64>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b));
    }
    assert_eq!(original, loaded);
}

#[test]
fn save_load_save_is_byte_identical() {
    let data = dataset(1, 6);
    let state = fit::<f32>(config(3), &data, FitOptions::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.ckpt");
    let b = dir.path().join("b.ckpt");
    save_checkpoint(&state, &a).unwrap();
    save_checkpoint(&load_checkpoint::<f32>(&a).unwrap(), &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn periodic_checkpoints_are_written() {
    let data = dataset(1, 7);
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        checkpoint_every: 2,
        ..config(5)
    };
    fit::<f32>(
        cfg,
        &data,
        FitOptions {
            log: None,
            checkpoint_dir: Some(dir.path().to_path_buf()),
        },
    )
    .unwrap();
    let mut names: Vec<String> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    assert_eq!(names, ["step_000002.ckpt", "step_000004.ckpt"]);
    assert_eq!(load_checkpoint::<f32>(&dir.path().join("step_000004.ckpt")).unwrap().step, 4);
}

#[test]
fn evaluation_leaves_running_statistics_alone() {
    let data = dataset(1, 8);
    let state = fit::<f32>(config(4), &data, FitOptions::default()).unwrap();
    let before = state.model.bn_stats.clone();
    let pairs: Vec<(&str, &SilhouetteSequence)> = data.iter().map(|s| (s.subject_id.as_str(), s)).collect();
    evaluate_sequences(&pairs, &state.model, &LabelSets::default()).unwrap();
    assert_eq!(state.model.bn_stats, before);
    let fresh = TrainState::<f32>::new(config(0)).unwrap();
    assert_ne!(state.model.bn_stats, fresh.model.bn_stats);
}

#[test]
fn loss_stays_finite_for_500_steps_with_default_optimizer() {
    let data = dataset(10, 10);
    let cfg = TrainConfig {
        steps: 500,
        seed: 1,
        batch: BatchPlan {
            subjects_per_batch: 3,
            clips_per_subject: 2,
            class_stratified: true,
        },
        model: small_model(),
        ..TrainConfig::default()
    };
    let mut log = Vec::new();
    let state = fit::<f32>(
        cfg,
        &data,
        FitOptions {
            log: Some(&mut log),
            checkpoint_dir: None,
        },
    )
    .unwrap();
    assert_eq!(state.step, 500);
    let rows: Vec<serde_json::Value> = std::str::from_utf8(&log)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(rows.len(), 500);
    assert!(rows.iter().all(|r| r["total"].as_f64().is_some_and(f64::is_finite)));
}

#[test]
#[ignore = "full-size default model; hours on one CPU core"]
fn loss_stays_finite_for_500_steps_with_default_config() {
    let data = dataset(10, 10);
    let state = fit::<f32>(TrainConfig::default(), &data, FitOptions::default()).unwrap();
    assert_eq!(state.step, 500);
}

#[test]
fn missing_class_fails_before_training() {
    let data: Vec<SilhouetteSequence> = dataset(2, 11)
        .into_iter()
        .filter(|s| s.label != gaitmil::data::Label::Neutral)
        .collect();
    let err = fit::<f32>(config(1), &data, FitOptions::default()).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
}
