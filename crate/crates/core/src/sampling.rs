//! Frame subsampling, triplet-ready batch composition, and class-ratio splits.

use std::fmt;
use std::str::FromStr;

use num_rational::Ratio;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetManifest, Frame, Label, ManifestEntry, SilhouetteSequence};
use crate::error::{Error, Result};

/// Frames drawn per clip unless configured otherwise.
pub const DEFAULT_CLIP_FRAMES: usize = 30;

#[derive(Debug, Clone, PartialEq)]
pub struct SampledClip {
    pub subject_id: String,
    pub label: Label,
    pub frames: Vec<Frame>,
    /// Index into the source sequence of each frame, in sampled order.
    pub source_indices: Vec<usize>,
}

impl SampledClip {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Every frame of a sequence, in temporal order. Used at test time.
    pub fn whole_sequence(seq: &SilhouetteSequence) -> Self {
        Self {
            subject_id: seq.subject_id.clone(),
            label: seq.label,
            frames: seq.frames.clone(),
            source_indices: (0..seq.len()).collect(),
        }
    }
}

/// Draw `s` frames uniformly: without replacement when the sequence is long
/// enough, with replacement otherwise. The sampled order is kept.
pub fn sample_frames<R: Rng + ?Sized>(
    seq: &SilhouetteSequence,
    s: usize,
    rng: &mut R,
) -> Result<SampledClip> {
    if s == 0 {
        return Err(Error::Argument("clip length must be at least 1".into()));
    }
    let t = seq.len();
    if t == 0 {
        return Err(Error::Argument("cannot sample from an empty sequence".into()));
    }
    let source_indices: Vec<usize> = if t >= s {
        let mut idx: Vec<usize> = (0..t).collect();
        let (chosen, _) = idx.partial_shuffle(rng, s);
        chosen.to_vec()
    } else {
        (0..s).map(|_| rng.random_range(0..t)).collect()
    };
    Ok(SampledClip {
        subject_id: seq.subject_id.clone(),
        label: seq.label,
        frames: source_indices.iter().map(|&i| seq.frames[i].clone()).collect(),
        source_indices,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BatchPlan {
    pub subjects_per_batch: usize,
    pub clips_per_subject: usize,
    pub class_stratified: bool,
}

impl Default for BatchPlan {
    fn default() -> Self {
        Self {
            subjects_per_batch: 8,
            clips_per_subject: 4,
            class_stratified: true,
        }
    }
}

impl BatchPlan {
    pub fn batch_size(&self) -> usize {
        self.subjects_per_batch * self.clips_per_subject
    }

    pub fn validate(&self) -> Result<()> {
        if self.subjects_per_batch < 2 || self.clips_per_subject < 2 {
            return Err(Error::Config(format!(
                "batch plan needs at least 2 subjects and 2 clips per subject, got {}x{}",
                self.subjects_per_batch, self.clips_per_subject
            )));
        }
        Ok(())
    }
}

/// Which identity defines anchor/positive pairs for the triplet loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TripletLabel {
    /// Same subject, different frame samplings.
    #[default]
    Subject,
    /// Same class.
    Class,
}

/// Subjects of a dataset, in order of first appearance.
#[derive(Debug, Clone)]
pub struct SubjectIndex {
    subjects: Vec<(String, Label, Vec<usize>)>,
}

impl SubjectIndex {
    pub fn new(dataset: &[SilhouetteSequence]) -> Result<Self> {
        let mut subjects: Vec<(String, Label, Vec<usize>)> = Vec::new();
        for (i, seq) in dataset.iter().enumerate() {
            match subjects.iter_mut().find(|(id, _, _)| *id == seq.subject_id) {
                Some((id, label, seqs)) => {
                    if *label != seq.label {
                        return Err(Error::Config(format!(
                            "subject {id} has sequences labeled {label} and {}",
                            seq.label
                        )));
                    }
                    seqs.push(i);
                }
                None => subjects.push((seq.subject_id.clone(), seq.label, vec![i])),
            }
        }
        Ok(Self { subjects })
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    fn of_class(&self, label: Label) -> Vec<usize> {
        (0..self.subjects.len())
            .filter(|&i| self.subjects[i].1 == label)
            .collect()
    }

    pub fn has_class(&self, label: Label) -> bool {
        self.subjects.iter().any(|s| s.1 == label)
    }
}

/// Compose a batch of `P * M` clips: `P` distinct subjects, `M` independent
/// clips each. Clips of one subject are contiguous.
pub fn make_batch<R: Rng + ?Sized>(
    dataset: &[SilhouetteSequence],
    plan: &BatchPlan,
    s: usize,
    rng: &mut R,
) -> Result<Vec<SampledClip>> {
    let index = SubjectIndex::new(dataset)?;
    make_batch_indexed(dataset, &index, plan, s, rng)
}

/// [`make_batch`] with a precomputed subject index.
pub fn make_batch_indexed<R: Rng + ?Sized>(
    dataset: &[SilhouetteSequence],
    index: &SubjectIndex,
    plan: &BatchPlan,
    s: usize,
    rng: &mut R,
) -> Result<Vec<SampledClip>> {
    plan.validate()?;
    let p = plan.subjects_per_batch;
    if index.len() < p {
        return Err(Error::Config(format!(
            "batch needs {p} subjects but the dataset has {}",
            index.len()
        )));
    }
    let chosen: Vec<usize> = if plan.class_stratified {
        let mut pools: Vec<Vec<usize>> = Label::ALL.iter().map(|&l| index.of_class(l)).collect();
        if pools.iter().filter(|p| !p.is_empty()).count() < 2 {
            return Err(Error::Config(
                "stratified batches need subjects from at least two classes".into(),
            ));
        }
        for pool in pools.iter_mut() {
            pool.shuffle(rng);
        }
        let mut chosen = Vec::with_capacity(p);
        let mut class = 0;
        while chosen.len() < p {
            // Round-robin, skipping exhausted classes.
            if let Some(subject) = pools[class % 3].pop() {
                chosen.push(subject);
            }
            class += 1;
        }
        chosen
    } else {
        let mut all: Vec<usize> = (0..index.len()).collect();
        let (picked, _) = all.partial_shuffle(rng, p);
        picked.to_vec()
    };

    let mut batch = Vec::with_capacity(plan.batch_size());
    for subject in chosen {
        let seqs = &index.subjects[subject].2;
        for _ in 0..plan.clips_per_subject {
            let seq = &dataset[seqs[rng.random_range(0..seqs.len())]];
            batch.push(sample_frames(seq, s, rng)?);
        }
    }
    Ok(batch)
}

/// Integer labels for the triplet loss: subject ordinal within the batch or
/// class index.
pub fn triplet_labels(batch: &[SampledClip], mode: TripletLabel) -> Vec<usize> {
    match mode {
        TripletLabel::Class => batch.iter().map(|c| c.label.index()).collect(),
        TripletLabel::Subject => {
            let mut seen: Vec<&str> = Vec::new();
            batch
                .iter()
                .map(|c| match seen.iter().position(|s| *s == c.subject_id) {
                    Some(i) => i,
                    None => {
                        seen.push(&c.subject_id);
                        seen.len() - 1
                    }
                })
                .collect()
        }
    }
}

/// Positive : neutral : negative proportions, written `P:N:G`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassRatio {
    pub positive: u32,
    pub neutral: u32,
    pub negative: u32,
}

impl ClassRatio {
    pub fn new(positive: u32, neutral: u32, negative: u32) -> Result<Self> {
        if positive == 0 || neutral == 0 || negative == 0 {
            return Err(Error::Argument(format!(
                "ratio terms must be positive, got {positive}:{neutral}:{negative}"
            )));
        }
        Ok(Self {
            positive,
            neutral,
            negative,
        })
    }

    fn terms(&self) -> [u32; 3] {
        [self.positive, self.neutral, self.negative]
    }
}

impl fmt::Display for ClassRatio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.positive, self.neutral, self.negative)
    }
}

impl FromStr for ClassRatio {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let bad = || Error::Argument(format!("malformed ratio {s:?}, expected P:N:G"));
        if parts.len() != 3 {
            return Err(bad());
        }
        let mut v = [0u32; 3];
        for (slot, p) in v.iter_mut().zip(&parts) {
            *slot = p.trim().parse().map_err(|_| bad())?;
        }
        ClassRatio::new(v[0], v[1], v[2])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImbalanceSplit {
    pub ratio: ClassRatio,
    /// Realized `(positive, neutral, negative)` counts.
    pub counts: [usize; 3],
    pub sequences: Vec<ManifestEntry>,
}

/// Class counts for a ratio split.
///
/// The unit size is the largest `u` with `ratio * u` within availability and
/// `sum(ratio) * u <= total`. Positive and neutral counts round down; the
/// negative count rounds up, which stays within both bounds. `total` defaults
/// to the pool size.
pub fn split_counts(available: [usize; 3], ratio: ClassRatio, total: Option<usize>) -> [usize; 3] {
    let terms = ratio.terms();
    let sum: u32 = terms.iter().sum();
    let budget = total.unwrap_or(available.iter().sum());
    let mut unit = Ratio::new(budget as u64, sum as u64);
    for (avail, term) in available.iter().zip(terms) {
        unit = unit.min(Ratio::new(*avail as u64, term as u64));
    }
    let scaled = |term: u32| unit * Ratio::from_integer(term as u64);
    [
        scaled(terms[0]).floor().to_integer() as usize,
        scaled(terms[1]).floor().to_integer() as usize,
        scaled(terms[2]).ceil().to_integer() as usize,
    ]
}

/// Subsample a manifest to the given class ratio without replacement.
/// Selected entries keep their manifest order.
pub fn build_imbalance_split<R: Rng + ?Sized>(
    manifest: &DatasetManifest,
    ratio: ClassRatio,
    total: Option<usize>,
    rng: &mut R,
) -> Result<ImbalanceSplit> {
    let pools: Vec<Vec<usize>> = Label::ALL
        .iter()
        .map(|&l| {
            (0..manifest.entries.len())
                .filter(|&i| manifest.entries[i].label == l)
                .collect()
        })
        .collect();
    if let Some(l) = Label::ALL.iter().find(|l| pools[l.index()].is_empty()) {
        return Err(Error::Config(format!("pool has no {l} sequences")));
    }
    let available = [pools[0].len(), pools[1].len(), pools[2].len()];
    let counts = split_counts(available, ratio, total);
    let mut keep = vec![false; manifest.entries.len()];
    for (mut pool, &n) in pools.into_iter().zip(&counts) {
        let (picked, _) = pool.partial_shuffle(rng, n);
        for &i in picked.iter() {
            keep[i] = true;
        }
    }
    let sequences = manifest
        .entries
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(e, _)| e.clone())
        .collect();
    Ok(ImbalanceSplit {
        ratio,
        counts,
        sequences,
    })
}
