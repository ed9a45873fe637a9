//! Silhouette datasets: in-memory types, the on-disk layout, and frame
//! normalization.
//!
//! On disk a dataset is a root directory holding `manifest.json` and one
//! directory per sequence (`<subject>/<sequence>/NNNN.png`, lexicographically
//! ordered 8-bit grayscale frames).

mod synth;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use synth::{generate_synthetic, PerClass, SynthSpec};

/// Height of every frame the network consumes.
pub const FRAME_HEIGHT: usize = 64;
/// Width of every frame the network consumes.
pub const FRAME_WIDTH: usize = 44;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Positive,
    Neutral,
    Negative,
}

impl Label {
    pub const ALL: [Label; 3] = [Label::Positive, Label::Neutral, Label::Negative];

    /// Class index used by the classifier head.
    pub fn index(self) -> usize {
        match self {
            Label::Positive => 0,
            Label::Neutral => 1,
            Label::Negative => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Label> {
        Label::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Positive => "positive",
            Label::Neutral => "neutral",
            Label::Negative => "negative",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "positive" => Ok(Label::Positive),
            "neutral" => Ok(Label::Neutral),
            "negative" => Ok(Label::Negative),
            other => Err(Error::Schema(format!("unknown label {other:?}"))),
        }
    }
}

/// A grayscale image with values in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl Frame {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::Argument(format!(
                "frame {height}x{width} needs {} pixels, got {}",
                height * width,
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Argument(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            pixels: vec![0.0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    /// Sum of pixel values.
    pub fn mass(&self) -> f64 {
        self.pixels.iter().map(|&v| v as f64).sum()
    }
}

/// Resize to the network resolution with bilinear interpolation
/// (half-pixel centers, edge clamping, no thresholding).
pub fn normalize_frame(image: &Frame) -> Result<Frame> {
    if image.height == 0 || image.width == 0 {
        return Err(Error::Argument("cannot resize a zero-area frame".into()));
    }
    if image.height == FRAME_HEIGHT && image.width == FRAME_WIDTH {
        return Ok(image.clone());
    }
    Ok(resize_bilinear(image, FRAME_HEIGHT, FRAME_WIDTH))
}

fn resize_bilinear(image: &Frame, out_h: usize, out_w: usize) -> Frame {
    let taps = |out: usize, inp: usize| -> Vec<(usize, usize, f32)> {
        let scale = inp as f32 / out as f32;
        (0..out)
            .map(|o| {
                let src = ((o as f32 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f32);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(inp - 1);
                (lo, hi, src - lo as f32)
            })
            .collect()
    };
    let rows = taps(out_h, image.height);
    let cols = taps(out_w, image.width);
    let mut pixels = Vec::with_capacity(out_h * out_w);
    for &(y0, y1, wy) in &rows {
        for &(x0, x1, wx) in &cols {
            let top = image.get(y0, x0) * (1.0 - wx) + image.get(y0, x1) * wx;
            let bottom = image.get(y1, x0) * (1.0 - wx) + image.get(y1, x1) * wx;
            let v = top * (1.0 - wy) + bottom * wy;
            pixels.push(v.clamp(0.0, 1.0));
        }
    }
    Frame {
        height: out_h,
        width: out_w,
        pixels,
    }
}

/// One subject's walk.
#[derive(Debug, Clone, PartialEq)]
pub struct SilhouetteSequence {
    pub subject_id: String,
    pub label: Label,
    pub frames: Vec<Frame>,
    /// Informational only.
    pub source_fps: f32,
}

impl SilhouetteSequence {
    pub fn new(subject_id: impl Into<String>, label: Label, frames: Vec<Frame>) -> Result<Self> {
        let Some(first) = frames.first() else {
            return Err(Error::Schema("sequence has no frames".into()));
        };
        let (h, w) = (first.height, first.width);
        if frames.iter().any(|f| f.height != h || f.width != w) {
            return Err(Error::Schema("frames of one sequence differ in size".into()));
        }
        Ok(Self {
            subject_id: subject_id.into(),
            label,
            frames,
            source_fps: 15.0,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Copy with every frame resized to the network resolution.
    pub fn normalized(&self) -> Result<Self> {
        Ok(Self {
            frames: self.frames.iter().map(normalize_frame).collect::<Result<_>>()?,
            subject_id: self.subject_id.clone(),
            label: self.label,
            source_fps: self.source_fps,
        })
    }
}

/// Resize every sequence to the network resolution, in parallel.
pub fn normalize_all(sequences: &[SilhouetteSequence]) -> Result<Vec<SilhouetteSequence>> {
    sequences.par_iter().map(SilhouetteSequence::normalized).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    /// Sequence directory relative to the dataset root.
    pub path: String,
    pub subject: String,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub class_counts: BTreeMap<Label, usize>,
}

impl DatasetManifest {
    pub fn from_entries(entries: Vec<ManifestEntry>) -> Self {
        let class_counts = tally(entries.iter().map(|e| e.label));
        Self {
            entries,
            class_counts,
        }
    }

    pub fn count(&self, label: Label) -> usize {
        self.class_counts.get(&label).copied().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        let recount = tally(self.entries.iter().map(|e| e.label));
        if recount != self.class_counts {
            return Err(Error::Schema(format!(
                "class_counts {:?} disagree with entries {:?}",
                self.class_counts, recount
            )));
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)
            .map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Per-label counts with every class present (zero when absent).
pub fn tally(labels: impl IntoIterator<Item = Label>) -> BTreeMap<Label, usize> {
    let mut counts: BTreeMap<Label, usize> = Label::ALL.iter().map(|&l| (l, 0)).collect();
    for l in labels {
        *counts.entry(l).or_default() += 1;
    }
    counts
}

/// Load every sequence listed in `manifest`, normalizing frames to 64x44.
/// Output order follows the manifest.
pub fn load_dataset(root: &Path, manifest: &Path) -> Result<Vec<SilhouetteSequence>> {
    let manifest = DatasetManifest::read(manifest)?;
    manifest
        .entries
        .par_iter()
        .map(|entry| load_sequence(&root.join(&entry.path), entry))
        .collect()
}

fn load_sequence(dir: &Path, entry: &ManifestEntry) -> Result<SilhouetteSequence> {
    if !dir.is_dir() {
        return Err(Error::dataset(dir, "sequence directory not found"));
    }
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Schema(format!(
            "{}: sequence contains no frames",
            dir.display()
        )));
    }
    let frames = files
        .iter()
        .map(|p| read_png(p).and_then(|f| normalize_frame(&f)))
        .collect::<Result<Vec<_>>>()?;
    SilhouetteSequence::new(entry.subject.clone(), entry.label, frames)
}

fn read_png(path: &Path) -> Result<Frame> {
    let img = image::open(path)
        .map_err(|e| Error::dataset(path, format!("cannot decode frame: {e}")))?
        .into_luma8();
    let (w, h) = img.dimensions();
    let pixels = img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
    Frame::new(h as usize, w as usize, pixels)
}

fn write_png(path: &Path, frame: &Frame) -> Result<()> {
    let bytes: Vec<u8> = frame
        .pixels
        .iter()
        .map(|&v| (v * 255.0).round() as u8)
        .collect();
    let img = image::GrayImage::from_raw(frame.width as u32, frame.height as u32, bytes)
        .expect("buffer matches dimensions");
    img.save(path)
        .map_err(|e| Error::dataset(path, format!("cannot encode frame: {e}")))
}

/// Write `sequences` under `root` following `manifest` (same order and
/// length), then write the manifest itself. Frames are quantized to 8 bits.
pub fn write_dataset(
    root: &Path,
    sequences: &[SilhouetteSequence],
    manifest: &DatasetManifest,
) -> Result<()> {
    if sequences.len() != manifest.entries.len() {
        return Err(Error::Argument(format!(
            "{} sequences but {} manifest entries",
            sequences.len(),
            manifest.entries.len()
        )));
    }
    manifest.validate()?;
    sequences
        .par_iter()
        .zip(&manifest.entries)
        .try_for_each(|(seq, entry)| {
            let dir = root.join(&entry.path);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let digits = seq.frames.len().to_string().len().max(4);
            for (i, frame) in seq.frames.iter().enumerate() {
                write_png(&dir.join(format!("{i:0digits$}.png")), frame)?;
            }
            Ok(())
        })?;
    manifest.write(&root.join(MANIFEST_FILE))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zeros_stay_zero() {
        let out = normalize_frame(&Frame::zeros(128, 88)).unwrap();
        assert_eq!((out.height(), out.width()), (FRAME_HEIGHT, FRAME_WIDTH));
        assert!(out.pixels().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn target_size_is_identity() {
        let f = Frame::new(64, 44, vec![1.0; 64 * 44]).unwrap();
        assert_eq!(normalize_frame(&f).unwrap(), f);
    }

    #[test]
    fn zero_area_rejected() {
        let f = Frame::zeros(0, 10);
        assert!(matches!(normalize_frame(&f), Err(Error::Argument(_))));
    }

    /// Area-averaging reference resampler, independent of the bilinear path.
    fn box_downsample_mass_fraction(f: &Frame, out_h: usize, out_w: usize) -> f64 {
        let sy = f.height() as f64 / out_h as f64;
        let sx = f.width() as f64 / out_w as f64;
        let mut total = 0.0;
        for oy in 0..out_h {
            for ox in 0..out_w {
                let mut acc = 0.0;
                let mut n = 0.0;
                for y in (oy as f64 * sy) as usize..((oy + 1) as f64 * sy).ceil() as usize {
                    for x in (ox as f64 * sx) as usize..((ox + 1) as f64 * sx).ceil() as usize {
                        acc += f.get(y, x) as f64;
                        n += 1.0;
                    }
                }
                total += acc / n;
            }
        }
        total / (out_h * out_w) as f64
    }

    #[test]
    fn centered_rectangle_keeps_mass_fraction() {
        let (h, w) = (128, 88);
        let mut px = vec![0.0f32; h * w];
        for y in 33..95 {
            for x in 23..65 {
                px[y * w + x] = 1.0;
            }
        }
        let input = Frame::new(h, w, px).unwrap();
        let want = box_downsample_mass_fraction(&input, 64, 44);
        let out = normalize_frame(&input).unwrap();
        let got = out.mass() / (64.0 * 44.0);
        assert!(
            (got - want).abs() <= 0.02 * want,
            "mass fraction {got} vs reference {want}"
        );
    }

    #[test]
    fn manifest_counts_are_validated() {
        let mut m = DatasetManifest::from_entries(vec![ManifestEntry {
            path: "a/0".into(),
            subject: "a".into(),
            label: Label::Neutral,
        }]);
        assert!(m.validate().is_ok());
        m.class_counts.insert(Label::Neutral, 2);
        assert!(matches!(m.validate(), Err(Error::Schema(_))));
    }

    #[test]
    fn unknown_label_is_schema_error() {
        assert!(matches!("mild".parse::<Label>(), Err(Error::Schema(_))));
    }

    proptest! {
        #[test]
        fn normalized_frames_are_64_by_44(h in 32usize..=256, w in 32usize..=256, seed in any::<u64>()) {
            let mut state = seed;
            let px: Vec<f32> = (0..h * w)
                .map(|_| {
                    state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    ((state >> 40) & 1) as f32
                })
                .collect();
            let out = normalize_frame(&Frame::new(h, w, px).unwrap()).unwrap();
            prop_assert_eq!((out.height(), out.width()), (FRAME_HEIGHT, FRAME_WIDTH));
            prop_assert!(out.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
