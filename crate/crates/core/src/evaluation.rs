//! Sequence-level inference and screening metrics.

use num_rational::Ratio;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::ser::SerializeStruct;
use serde::{Deserialize, Serialize, Serializer};

use crate::clustering::{partition_clip, BagPartition};
use crate::data::{DatasetManifest, Label, SilhouetteSequence};
use crate::error::{Error, Result};
use crate::network::{FeatureVolume, Mode, Model, CLASSES};
use crate::sampling::{ClassRatio, ImbalanceSplit, SampledClip};
use crate::scalar::Scalar;

/// Seed of the one-off clustering used at inference time.
pub const EVAL_PARTITION_SEED: u64 = 0;

/// Which ground-truth classes count as disease-present and disease-absent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelSets {
    pub positive: Vec<Label>,
    pub negative: Vec<Label>,
}

impl Default for LabelSets {
    fn default() -> Self {
        Self {
            positive: vec![Label::Positive, Label::Neutral],
            negative: vec![Label::Negative],
        }
    }
}

impl LabelSets {
    pub fn validate(&self) -> Result<()> {
        if self.positive.is_empty() || self.negative.is_empty() {
            return Err(Error::Argument("label sets must be nonempty".into()));
        }
        if self.positive.iter().any(|l| self.negative.contains(l)) {
            return Err(Error::Argument("positive and negative label sets overlap".into()));
        }
        Ok(())
    }
}

/// An exact fraction; `None` when its denominator would be zero.
pub type Fraction = Option<Ratio<u64>>;

fn ratio(num: u64, den: u64) -> Fraction {
    (den > 0).then(|| Ratio::new(num, den))
}

struct FractionView(Fraction);

impl Serialize for FractionView {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match &self.0 {
            None => s.serialize_none(),
            Some(r) => {
                let mut st = s.serialize_struct("Fraction", 3)?;
                st.serialize_field("numerator", r.numer())?;
                st.serialize_field("denominator", r.denom())?;
                st.serialize_field("value", &(*r.numer() as f64 / *r.denom() as f64))?;
                st.end()
            }
        }
    }
}

/// Confusion matrix (rows true, columns predicted, order positive, neutral,
/// negative) and the derived screening metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub confusion: [[u64; CLASSES]; CLASSES],
    pub accuracy: Fraction,
    pub sensitivity: Fraction,
    pub specificity: Fraction,
    pub label_sets: LabelSets,
}

impl MetricsReport {
    pub fn total(&self) -> u64 {
        self.confusion.iter().flatten().sum()
    }

    /// Ground-truth count per class.
    pub fn support(&self) -> [u64; CLASSES] {
        self.confusion.map(|row| row.iter().sum())
    }

    pub fn recall(&self, label: Label) -> Fraction {
        let i = label.index();
        ratio(self.confusion[i][i], self.support()[i])
    }

    /// Names of metrics left undefined by an empty ground-truth group.
    pub fn undefined(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        if self.sensitivity.is_none() {
            out.push("sensitivity");
        }
        if self.specificity.is_none() {
            out.push("specificity");
        }
        out
    }
}

impl Serialize for MetricsReport {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let recall: std::collections::BTreeMap<&str, FractionView> = Label::ALL
            .iter()
            .map(|&l| (l.as_str(), FractionView(self.recall(l))))
            .collect();
        let mut st = s.serialize_struct("MetricsReport", 8)?;
        st.serialize_field("confusion", &self.confusion)?;
        st.serialize_field("total", &self.total())?;
        st.serialize_field("accuracy", &FractionView(self.accuracy))?;
        st.serialize_field("sensitivity", &FractionView(self.sensitivity))?;
        st.serialize_field("specificity", &FractionView(self.specificity))?;
        st.serialize_field("recall", &recall)?;
        st.serialize_field("undefined", &self.undefined())?;
        st.serialize_field("label_sets", &self.label_sets)?;
        st.end()
    }
}

/// Build the confusion matrix and metrics from true and predicted labels.
pub fn compute_metrics(preds: &[Label], labels: &[Label], sets: &LabelSets) -> Result<MetricsReport> {
    sets.validate()?;
    if preds.is_empty() || preds.len() != labels.len() {
        return Err(Error::Argument(format!(
            "need matching nonempty predictions and labels, got {} and {}",
            preds.len(),
            labels.len()
        )));
    }
    let mut confusion = [[0u64; CLASSES]; CLASSES];
    for (&p, &y) in preds.iter().zip(labels) {
        confusion[y.index()][p.index()] += 1;
    }
    let group = |set: &[Label]| {
        let mut hit = 0;
        let mut all = 0;
        for &y in set {
            for &p in set {
                hit += confusion[y.index()][p.index()];
            }
            all += confusion[y.index()].iter().sum::<u64>();
        }
        ratio(hit, all)
    };
    let trace: u64 = (0..CLASSES).map(|i| confusion[i][i]).sum();
    Ok(MetricsReport {
        accuracy: ratio(trace, preds.len() as u64),
        sensitivity: group(&sets.positive),
        specificity: group(&sets.negative),
        confusion,
        label_sets: sets.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Prediction {
    pub class: Label,
    /// Softmax of the part-averaged logits, in label order.
    pub scores: [f64; CLASSES],
    pub partition: BagPartition,
}

/// Classify a whole sequence: all frames, one clustering with
/// [`EVAL_PARTITION_SEED`], eval-mode network.
pub fn predict<T: Scalar>(seq: &SilhouetteSequence, model: &Model<T>) -> Result<Prediction> {
    let clip = SampledClip::whole_sequence(seq);
    let partition = if model.config.mil_enabled {
        partition_clip(&clip, model.config.bags, &mut ChaCha8Rng::seed_from_u64(EVAL_PARTITION_SEED))?
    } else {
        BagPartition::single(clip.len())
    };
    let input = FeatureVolume::<T>::from_clips(std::slice::from_ref(&clip))?;
    let out = model.forward(&input, std::slice::from_ref(&partition), Mode::Eval)?;
    let logits = out.embeddings.mean_logits()[0].map(|v| v.to_f64().unwrap_or(f64::NAN));
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp = logits.map(|v| (v - max).exp());
    let z: f64 = exp.iter().sum();
    let class = out.embeddings.predictions()[0];
    Ok(Prediction {
        class: Label::from_index(class).expect("class index"),
        scores: exp.map(|e| e / z),
        partition,
    })
}

/// One row of the per-sequence prediction table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SequencePrediction {
    pub path: String,
    pub subject: String,
    pub label: Label,
    pub predicted: Label,
    pub scores: [f64; CLASSES],
}

/// Predict every sequence and compute metrics.
pub fn evaluate_sequences<T: Scalar>(
    sequences: &[(&str, &SilhouetteSequence)],
    model: &Model<T>,
    sets: &LabelSets,
) -> Result<(MetricsReport, Vec<SequencePrediction>)> {
    let rows: Vec<SequencePrediction> = sequences
        .par_iter()
        .map(|(path, seq)| {
            predict(seq, model).map(|p| SequencePrediction {
                path: path.to_string(),
                subject: seq.subject_id.clone(),
                label: seq.label,
                predicted: p.class,
                scores: p.scores,
            })
        })
        .collect::<Result<_>>()?;
    let preds: Vec<Label> = rows.iter().map(|r| r.predicted).collect();
    let labels: Vec<Label> = rows.iter().map(|r| r.label).collect();
    Ok((compute_metrics(&preds, &labels, sets)?, rows))
}

#[derive(Debug, Clone, Serialize)]
pub struct SplitReport {
    pub ratio: ClassRatio,
    /// `(positive, neutral, negative)` sequences evaluated.
    pub counts: [usize; 3],
    pub metrics: MetricsReport,
    pub predictions: Vec<SequencePrediction>,
}

/// Evaluate the sequences of `split`. `manifest` and `sequences` are the
/// loaded pool, index-aligned.
pub fn evaluate_split<T: Scalar>(
    split: &ImbalanceSplit,
    manifest: &DatasetManifest,
    sequences: &[SilhouetteSequence],
    model: &Model<T>,
    sets: &LabelSets,
) -> Result<SplitReport> {
    if split.counts.contains(&0) {
        return Err(Error::Config(format!("split counts {:?} leave a class empty", split.counts)));
    }
    if manifest.entries.len() != sequences.len() {
        return Err(Error::Argument("manifest and loaded sequences differ in length".into()));
    }
    let selected: Vec<(&str, &SilhouetteSequence)> = split
        .sequences
        .iter()
        .map(|e| {
            manifest
                .entries
                .iter()
                .position(|m| m.path == e.path)
                .map(|i| (e.path.as_str(), &sequences[i]))
                .ok_or_else(|| Error::Config(format!("split entry {} is not in the pool", e.path)))
        })
        .collect::<Result<_>>()?;
    let (metrics, predictions) = evaluate_sequences(&selected, model, sets)?;
    let support = metrics.support();
    Ok(SplitReport {
        ratio: split.ratio,
        counts: [support[0] as usize, support[1] as usize, support[2] as usize],
        metrics,
        predictions,
    })
}
