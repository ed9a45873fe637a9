use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use gaitmil::data::{generate_synthetic, load_dataset, write_dataset, DatasetManifest, Label, SilhouetteSequence, SynthSpec, MANIFEST_FILE};
use gaitmil::evaluation::{evaluate_sequences, evaluate_split, MetricsReport, SequencePrediction};
use gaitmil::network::Model;
use gaitmil::sampling::{build_imbalance_split, ClassRatio};
use gaitmil::training::{fit, inspect_checkpoint, load_checkpoint, save_checkpoint, FitOptions, TrainConfig, TrainState};
use gaitmil::Scalar;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::config::{read_config, EvalConfig};
use crate::{AblateArgs, CliError, DataArgs, Dtype, EvalArgs, SynthArgs, TrainArgs};

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::data(format!("{}: {e}", path.display()))
}

fn write_json<V: Serialize>(path: &Path, value: &V) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}

impl DataArgs {
    fn manifest_path(&self) -> PathBuf {
        self.manifest.clone().unwrap_or_else(|| self.data.join(MANIFEST_FILE))
    }

    fn load(&self) -> Result<(DatasetManifest, Vec<SilhouetteSequence>), CliError> {
        let path = self.manifest_path();
        let manifest = DatasetManifest::read(&path)?;
        let sequences = load_dataset(&self.data, &path)?;
        Ok((manifest, sequences))
    }
}

fn counts_json(manifest: &DatasetManifest) -> serde_json::Value {
    Label::ALL
        .iter()
        .map(|&l| (l.as_str().to_string(), json!(manifest.count(l))))
        .collect::<serde_json::Map<_, _>>()
        .into()
}

pub fn synth(args: SynthArgs) -> Result<(), CliError> {
    let mut spec: SynthSpec = match &args.config {
        Some(p) => read_config(p)?,
        None => SynthSpec::default(),
    };
    if let Some(v) = args.subjects {
        spec.n_subjects_per_class = v;
    }
    if let Some(v) = args.frames {
        spec.frames_per_sequence = v;
    }
    if let Some(v) = args.noise {
        spec.noise_rate = v;
    }
    if let Some(v) = args.seed {
        spec.seed = v;
    }
    spec.validate()?;
    if let Ok(mut entries) = fs::read_dir(&args.out) {
        if entries.next().is_some() && !args.force {
            return Err(CliError::usage(format!(
                "{} exists and is not empty; pass --force to write into it",
                args.out.display()
            )));
        }
    }
    let (sequences, manifest) = generate_synthetic(&spec)?;
    write_dataset(&args.out, &sequences, &manifest)?;
    println!("{}", json!({ "out": args.out, "class_counts": counts_json(&manifest) }));
    Ok(())
}

fn resolve_train_config(config: &Option<PathBuf>, steps: Option<usize>, seed: Option<u64>) -> Result<TrainConfig, CliError> {
    let mut cfg: TrainConfig = match config {
        Some(p) => read_config(p)?,
        None => TrainConfig::default(),
    };
    if let Some(v) = steps {
        cfg.steps = v;
    }
    if let Some(v) = seed {
        cfg.seed = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Train, writing the step log and the final checkpoint.
fn run_training<T: Scalar>(
    cfg: TrainConfig,
    data: &[SilhouetteSequence],
    out: &Path,
    log_path: &Path,
) -> Result<(TrainState<T>, Option<serde_json::Value>), CliError> {
    if let Some(dir) = log_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let file = File::create(log_path).map_err(|e| io_err(log_path, e))?;
    let mut log = BufWriter::new(file);
    let checkpoint_dir = out.parent().map(Path::to_path_buf);
    let state = fit::<T>(
        cfg,
        data,
        FitOptions {
            log: Some(&mut log),
            checkpoint_dir,
        },
    )?;
    log.flush().map_err(|e| io_err(log_path, e))?;
    drop(log);
    save_checkpoint(&state, out)?;
    let last = fs::read_to_string(log_path)
        .map_err(|e| io_err(log_path, e))?
        .lines()
        .last()
        .and_then(|l| serde_json::from_str::<serde_json::Value>(l).ok());
    Ok((state, last))
}

fn default_log(out: &Path) -> PathBuf {
    out.with_extension("log.jsonl")
}

pub fn train(args: TrainArgs) -> Result<(), CliError> {
    let mut cfg = resolve_train_config(&args.config, args.steps, args.seed)?;
    if args.no_mil {
        cfg.model.mil_enabled = false;
    }
    let (_, data) = args.data.load()?;
    let log = args.log.clone().unwrap_or_else(|| default_log(&args.out));
    let last = match args.dtype {
        Dtype::F32 => run_training::<f32>(cfg, &data, &args.out, &log)?.1,
        Dtype::F64 => run_training::<f64>(cfg, &data, &args.out, &log)?.1,
    };
    println!("{}", json!({ "checkpoint": args.out, "log": log, "last_step": last }));
    Ok(())
}

fn sha256_hex(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Metrics and predictions of one evaluation pass.
struct Evaluated {
    split: serde_json::Value,
    metrics: MetricsReport,
    predictions: Vec<SequencePrediction>,
}

fn evaluate_pool<T: Scalar>(
    model: &Model<T>,
    manifest: &DatasetManifest,
    sequences: &[SilhouetteSequence],
    ratio: Option<ClassRatio>,
    cfg: &EvalConfig,
) -> Result<Evaluated, CliError> {
    let pool = [Label::Positive, Label::Neutral, Label::Negative].map(|l| manifest.count(l));
    match ratio {
        Some(ratio) => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let split = build_imbalance_split(manifest, ratio, cfg.total, &mut rng)?;
            let report = evaluate_split(&split, manifest, sequences, model, &cfg.label_sets)?;
            Ok(Evaluated {
                split: json!({
                    "description": format!(
                        "{ratio} split of pool {}/{}/{}: {}/{}/{} sequences",
                        pool[0], pool[1], pool[2], split.counts[0], split.counts[1], split.counts[2]
                    ),
                    "ratio": ratio.to_string(),
                    "total": cfg.total,
                    "seed": cfg.seed,
                    "pool_counts": pool,
                    "counts": split.counts,
                }),
                metrics: report.metrics,
                predictions: report.predictions,
            })
        }
        None => {
            let pairs: Vec<(&str, &SilhouetteSequence)> = manifest
                .entries
                .iter()
                .zip(sequences)
                .map(|(e, s)| (e.path.as_str(), s))
                .collect();
            let (metrics, predictions) = evaluate_sequences(&pairs, model, &cfg.label_sets)?;
            Ok(Evaluated {
                split: json!({
                    "description": format!("full pool {}/{}/{}", pool[0], pool[1], pool[2]),
                    "ratio": null,
                    "total": null,
                    "seed": null,
                    "pool_counts": pool,
                    "counts": pool,
                }),
                metrics,
                predictions,
            })
        }
    }
}

fn write_csv(path: &Path, rows: &[SequencePrediction]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    let wrap = |e: csv::Error| CliError::data(format!("{}: {e}", path.display()));
    w.write_record(["path", "subject", "label", "predicted", "score_positive", "score_neutral", "score_negative"])
        .map_err(wrap)?;
    for r in rows {
        let mut record = vec![r.path.clone(), r.subject.clone(), r.label.to_string(), r.predicted.to_string()];
        record.extend(r.scores.iter().map(|s| s.to_string()));
        w.write_record(&record).map_err(wrap)?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

fn percent(f: gaitmil::evaluation::Fraction) -> String {
    match f {
        Some(r) => format!("{:.1}", 100.0 * *r.numer() as f64 / *r.denom() as f64),
        None => "n/a".into(),
    }
}

fn eval_as<T: Scalar>(args: &EvalArgs, cfg: &EvalConfig, ratio: Option<ClassRatio>) -> Result<(), CliError> {
    let state = load_checkpoint::<T>(&args.checkpoint)?;
    let (manifest, sequences) = args.data.load()?;
    let result = evaluate_pool(&state.model, &manifest, &sequences, ratio, cfg)?;
    let report = json!({
        "checkpoint": {
            "path": args.checkpoint,
            "sha256": sha256_hex(&args.checkpoint)?,
            "dtype": T::DTYPE,
            "step": state.step,
        },
        "config": state.config,
        "evaluation": cfg,
        "data": { "root": args.data.data, "manifest": args.data.manifest_path() },
        "split": result.split,
        "metrics": result.metrics,
        "predictions": result.predictions,
    });
    if let Some(path) = &args.csv {
        write_csv(path, &result.predictions)?;
    }
    match &args.out {
        Some(path) => {
            write_json(path, &report)?;
            println!(
                "{}",
                json!({
                    "report": path,
                    "split": report["split"]["description"],
                    "accuracy": percent(result.metrics.accuracy),
                    "sensitivity": percent(result.metrics.sensitivity),
                    "specificity": percent(result.metrics.specificity),
                })
            );
        }
        None => println!("{}", serde_json::to_string_pretty(&report).expect("report serializes")),
    }
    Ok(())
}

pub fn eval(args: EvalArgs) -> Result<(), CliError> {
    let mut cfg: EvalConfig = match &args.config {
        Some(p) => read_config(p)?,
        None => EvalConfig::default(),
    };
    if args.ratio.is_some() {
        cfg.ratio = args.ratio.clone();
    }
    if args.total.is_some() {
        cfg.total = args.total;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let ratio = cfg
        .ratio
        .as_deref()
        .map(|r| r.parse::<ClassRatio>())
        .transpose()
        .map_err(|e| CliError::usage(e.to_string()))?;
    cfg.label_sets.validate().map_err(|e| CliError::config(e.to_string()))?;
    match inspect_checkpoint(&args.checkpoint)?.dtype.as_str() {
        "f64" => eval_as::<f64>(&args, &cfg, ratio),
        _ => eval_as::<f32>(&args, &cfg, ratio),
    }
}

#[derive(Serialize)]
struct AblationRow {
    variant: &'static str,
    mil_enabled: bool,
    checkpoint: Option<PathBuf>,
    last_step: Option<serde_json::Value>,
    metrics: MetricsReport,
}

fn ablate_as<T: Scalar>(
    args: &AblateArgs,
    cfg: TrainConfig,
    train_data: &[SilhouetteSequence],
    eval_pool: &(DatasetManifest, Vec<SilhouetteSequence>),
) -> Result<Vec<AblationRow>, CliError> {
    let tmp;
    let dir = match &args.out_dir {
        Some(d) => d.clone(),
        None => {
            tmp = std::env::temp_dir().join(format!("gaitmil-ablate-{}", std::process::id()));
            tmp.clone()
        }
    };
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    let mut rows = Vec::new();
    for (variant, mil) in [("mil", true), ("no-mil", false)] {
        let mut arm = cfg.clone();
        arm.model.mil_enabled = mil;
        let arm_dir = dir.join(variant);
        let out = arm_dir.join("model.ckpt");
        let (state, last) = run_training::<T>(arm, train_data, &out, &default_log(&out))?;
        let result = evaluate_pool(&state.model, &eval_pool.0, &eval_pool.1, None, &EvalConfig::default())?;
        rows.push(AblationRow {
            variant,
            mil_enabled: mil,
            checkpoint: args.out_dir.as_ref().map(|_| out),
            last_step: last,
            metrics: result.metrics,
        });
    }
    if args.out_dir.is_none() {
        fs::remove_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    }
    Ok(rows)
}

pub fn ablate(args: AblateArgs) -> Result<(), CliError> {
    let cfg = resolve_train_config(&args.config, args.steps, args.seed)?;
    let (_, train_data) = args.data.load()?;
    let eval_pool = match &args.eval_data {
        Some(root) => DataArgs {
            data: root.clone(),
            manifest: None,
        }
        .load()?,
        None => args.data.load()?,
    };
    let rows = match args.dtype {
        Dtype::F32 => ablate_as::<f32>(&args, cfg.clone(), &train_data, &eval_pool)?,
        Dtype::F64 => ablate_as::<f64>(&args, cfg.clone(), &train_data, &eval_pool)?,
    };
    println!("{:<8} {:>9} {:>12} {:>12}", "variant", "accuracy", "sensitivity", "specificity");
    for r in &rows {
        println!(
            "{:<8} {:>9} {:>12} {:>12}",
            r.variant,
            percent(r.metrics.accuracy),
            percent(r.metrics.sensitivity),
            percent(r.metrics.specificity)
        );
    }
    if let Some(dir) = &args.out_dir {
        write_json(&dir.join("ablation.json"), &json!({ "config": cfg, "rows": rows }))?;
    }
    Ok(())
}
