//! Procedural walking-silhouette generator.
//!
//! Each subject is a torso ellipse with a head, plus two leg bars swinging
//! with a 20-frame period. The class signal is a constant lateral lean of the
//! upper body; its direction is drawn per subject.

use std::f32::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{DatasetManifest, Frame, Label, ManifestEntry, SilhouetteSequence};
use crate::error::{Error, Result};

pub const GAIT_PERIOD: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerClass<T> {
    pub positive: T,
    pub neutral: T,
    pub negative: T,
}

impl<T: Copy> PerClass<T> {
    pub fn get(&self, label: Label) -> T {
        match label {
            Label::Positive => self.positive,
            Label::Neutral => self.neutral,
            Label::Negative => self.negative,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub n_subjects_per_class: usize,
    pub frames_per_sequence: usize,
    /// Pre-normalization `(height, width)`.
    pub image_size: (usize, usize),
    /// Lateral lean of the head top relative to the hips, in pixels.
    pub asymmetry_amplitude: PerClass<f32>,
    /// Per-pixel flip probability.
    pub noise_rate: f32,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_subjects_per_class: 10,
            frames_per_sequence: 300,
            image_size: (128, 88),
            asymmetry_amplitude: PerClass {
                positive: 10.0,
                neutral: 5.0,
                negative: 0.0,
            },
            noise_rate: 0.05,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let amp = &self.asymmetry_amplitude;
        if amp.negative != 0.0 {
            return Err(Error::Argument("negative-class amplitude must be 0".into()));
        }
        if !(amp.neutral >= 0.0 && amp.neutral < amp.positive) {
            return Err(Error::Argument(format!(
                "amplitudes must satisfy 0 <= neutral < positive, got {} and {}",
                amp.neutral, amp.positive
            )));
        }
        if !(0.0..0.5).contains(&self.noise_rate) {
            return Err(Error::Argument(format!(
                "noise_rate {} outside [0, 0.5)",
                self.noise_rate
            )));
        }
        if self.n_subjects_per_class == 0 || self.frames_per_sequence == 0 {
            return Err(Error::Argument("subject and frame counts must be positive".into()));
        }
        let (h, w) = self.image_size;
        if h < 16 || w < 16 {
            return Err(Error::Argument(format!("image size {h}x{w} too small")));
        }
        Ok(())
    }
}

/// Per-subject body parameters.
struct Body {
    height: usize,
    width: usize,
    axis: f32,
    hip_y: f32,
    torso_cy: f32,
    torso_rx: f32,
    torso_ry: f32,
    head_cy: f32,
    head_r: f32,
    hip_half_gap: f32,
    leg_len: f32,
    leg_half_width: f32,
    swing: f32,
    phase: usize,
    /// Signed lean in pixels at the top of the head.
    lean: f32,
}

impl Body {
    fn draw(spec: &SynthSpec, label: Label, rng: &mut ChaCha8Rng) -> Body {
        let (height, width) = spec.image_size;
        let h = height as f32;
        let scale = rng.random_range(0.92f32..1.08);
        let swing = rng.random_range(0.30f32..0.45);
        let phase = rng.random_range(0..GAIT_PERIOD);
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let leg_len = 0.36 * h * scale;
        let hip_y = 0.95 * h - leg_len;
        Body {
            height,
            width,
            // Pixel grid is mirror-symmetric about the image midline.
            axis: width as f32 / 2.0,
            hip_y,
            torso_cy: hip_y - 0.17 * h * scale,
            torso_rx: 0.10 * h * scale,
            torso_ry: 0.18 * h * scale,
            head_cy: hip_y - 0.42 * h * scale,
            head_r: 0.065 * h * scale,
            hip_half_gap: 0.045 * h * scale,
            leg_len,
            leg_half_width: 0.03 * h * scale,
            swing,
            phase,
            lean: sign * spec.asymmetry_amplitude.get(label),
        }
    }

    /// Horizontal displacement of the upper body at row coordinate `y`.
    fn lean_at(&self, y: f32) -> f32 {
        let top = self.head_cy - self.head_r;
        self.lean * ((self.hip_y - y) / (self.hip_y - top)).clamp(0.0, 1.0)
    }

    /// Torso and head; constant over the walk.
    fn upper_mask(&self) -> Vec<bool> {
        let head_dx = self.lean_at(self.head_cy);
        let mut mask = vec![false; self.height * self.width];
        for y in 0..self.height {
            let py = y as f32 + 0.5;
            let shift = self.lean_at(py);
            for x in 0..self.width {
                let dx = x as f32 + 0.5 - self.axis;
                let tx = (dx - shift) / self.torso_rx;
                let ty = (py - self.torso_cy) / self.torso_ry;
                let hx = dx - head_dx;
                let hy = py - self.head_cy;
                mask[y * self.width + x] =
                    tx * tx + ty * ty <= 1.0 || hx * hx + hy * hy <= self.head_r * self.head_r;
            }
        }
        mask
    }

    fn leg_angle(&self, t: usize) -> f32 {
        let cycle = ((t + self.phase) % GAIT_PERIOD) as f32 / GAIT_PERIOD as f32;
        self.swing * (2.0 * PI * cycle).sin()
    }

    /// Distance test against a leg hanging from `(hip_dx, hip_y)` with
    /// direction `(dir_x, dir_y)`. Written so that mirroring `rel_x` and
    /// `dir_x` together yields bit-identical results.
    fn on_leg(&self, rel_x: f32, rel_y: f32, dir_x: f32, dir_y: f32) -> bool {
        let along = (rel_x * dir_x + rel_y * dir_y).clamp(0.0, self.leg_len);
        let ox = rel_x - along * dir_x;
        let oy = rel_y - along * dir_y;
        ox * ox + oy * oy <= self.leg_half_width * self.leg_half_width
    }

    fn render(&self, t: usize, upper: &[bool]) -> Vec<f32> {
        let angle = self.leg_angle(t);
        let (s, c) = angle.sin_cos();
        let mut px = vec![0.0f32; self.height * self.width];
        for y in 0..self.height {
            let rel_y = y as f32 + 0.5 - self.hip_y;
            for x in 0..self.width {
                let i = y * self.width + x;
                if upper[i] {
                    px[i] = 1.0;
                    continue;
                }
                if rel_y < -self.leg_half_width {
                    continue;
                }
                let dx = x as f32 + 0.5 - self.axis;
                let left = self.on_leg(dx + self.hip_half_gap, rel_y, s, c);
                let right = self.on_leg(dx - self.hip_half_gap, rel_y, -s, c);
                if left || right {
                    px[i] = 1.0;
                }
            }
        }
        px
    }
}

fn class_prefix(label: Label) -> &'static str {
    match label {
        Label::Positive => "pos",
        Label::Neutral => "neu",
        Label::Negative => "neg",
    }
}

/// Generate a labeled synthetic dataset. Identical specs give bit-identical
/// output; subjects use independent generator streams.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<(Vec<SilhouetteSequence>, DatasetManifest)> {
    spec.validate()?;
    let n = spec.n_subjects_per_class;
    let jobs: Vec<(Label, usize)> = Label::ALL
        .iter()
        .flat_map(|&l| (0..n).map(move |i| (l, i)))
        .collect();
    let sequences = jobs
        .par_iter()
        .enumerate()
        .map(|(stream, &(label, i))| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(stream as u64);
            let body = Body::draw(spec, label, &mut rng);
            let upper = body.upper_mask();
            let frames = (0..spec.frames_per_sequence)
                .map(|t| {
                    let mut px = body.render(t, &upper);
                    if spec.noise_rate > 0.0 {
                        for v in px.iter_mut() {
                            if rng.random::<f32>() < spec.noise_rate {
                                *v = 1.0 - *v;
                            }
                        }
                    }
                    Frame::new(body.height, body.width, px)
                })
                .collect::<Result<Vec<_>>>()?;
            SilhouetteSequence::new(format!("{}_{i:03}", class_prefix(label)), label, frames)
        })
        .collect::<Result<Vec<_>>>()?;
    let entries = sequences
        .iter()
        .map(|s| ManifestEntry {
            path: format!("{}/seq_00", s.subject_id),
            subject: s.subject_id.clone(),
            label: s.label,
        })
        .collect();
    Ok((sequences, DatasetManifest::from_entries(entries)))
}
