//! Self-supervised pretext objectives and their shared machinery: token
//! masking, two-view augmentation, the EMA teacher with centering, and the
//! pretraining loop.

pub mod augment;
pub mod heads;
pub mod losses;
pub mod objective;
pub mod train;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::nn::{grid_volume, Grid};
use crate::params::{ParamError, ParameterSet};
use crate::rng::Rng;

pub use augment::{apply_rotation, make_view_pair, Augmentation, ViewPair};
pub use train::{pretrain, LossReport, PretrainConfig, PretrainOutcome};

#[derive(Debug, thiserror::Error)]
pub enum PretextError {
    #[error("mask ratio {ratio} on {n} tokens masks nothing")]
    DegenerateMask { ratio: f64, n: usize },
    #[error("mask ratio must lie in (0, 1), got {0}")]
    MaskRatio(f64),
    #[error("empty mask")]
    EmptyMask,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("temperature must be positive, got {0}")]
    Temperature(f64),
    #[error("contrastive batch needs at least one pair")]
    NoPairs,
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("momentum must lie in {range}, got {value}")]
    Momentum { value: f64, range: &'static str },
    #[error("empty batch")]
    EmptyBatch,
    #[error("unknown method {0:?}")]
    UnknownMethod(String),
    #[error("non-finite loss at step {step} (batch {batch:?}): {parts}")]
    NonFinite { step: usize, batch: Vec<String>, parts: String },
    #[error(transparent)]
    Encoder(#[from] crate::encoder::EncoderError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Simmim,
    Inpaint,
    Recon,
    Contrastive,
    Rotation,
    Dino,
    Ibot,
    Smit,
    SwinunetrMulti,
}

impl Method {
    pub const ALL: [Method; 9] = [
        Method::Simmim,
        Method::Inpaint,
        Method::Recon,
        Method::Contrastive,
        Method::Rotation,
        Method::Dino,
        Method::Ibot,
        Method::Smit,
        Method::SwinunetrMulti,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Simmim => "simmim",
            Method::Inpaint => "inpaint",
            Method::Recon => "recon",
            Method::Contrastive => "contrastive",
            Method::Rotation => "rotation",
            Method::Dino => "dino",
            Method::Ibot => "ibot",
            Method::Smit => "smit",
            Method::SwinunetrMulti => "swinunetr_multi",
        }
    }

    /// Uses an EMA teacher.
    pub fn distills(self) -> bool {
        matches!(self, Method::Dino | Method::Ibot | Method::Smit)
    }

    /// Feeds the encoder token-masked input.
    pub fn token_masked(self) -> bool {
        matches!(self, Method::Simmim | Method::Ibot | Method::Smit)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = PretextError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| PretextError::UnknownMethod(s.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MethodConfig {
    pub method: Method,
    pub mask_ratio: f64,
    /// InfoNCE temperature.
    pub temperature: f64,
    pub lambda_g: f64,
    pub lambda_p: f64,
    pub lambda_mpd: f64,
    pub lambda_itd: f64,
    pub rotation_classes: usize,
    pub w_rot: f64,
    pub w_inpaint: f64,
    pub w_contrast: f64,
}

impl Default for MethodConfig {
    fn default() -> Self {
        Self {
            method: Method::Simmim,
            mask_ratio: 0.75,
            temperature: 0.1,
            lambda_g: 1.0,
            lambda_p: 1.0,
            lambda_mpd: 0.1,
            lambda_itd: 0.1,
            rotation_classes: 4,
            w_rot: 1.0,
            w_inpaint: 1.0,
            w_contrast: 1.0,
        }
    }
}

impl MethodConfig {
    pub fn for_method(method: Method) -> Self {
        Self { method, ..Self::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub tau_s: f64,
    pub tau_t_start: f64,
    pub tau_t_end: f64,
    pub warmup_epochs: f64,
    pub center_momentum: f64,
    pub ema_momentum: f64,
    pub head_output_dim: usize,
    pub bottleneck_dim: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            tau_s: 0.1,
            tau_t_start: 0.04,
            tau_t_end: 0.07,
            warmup_epochs: 30.0,
            center_momentum: 0.9,
            ema_momentum: 0.99,
            head_output_dim: 256,
            bottleneck_dim: 64,
        }
    }
}

impl DistillConfig {
    /// Teacher temperature at a (possibly fractional) epoch.
    pub fn tau_t(&self, epoch: f64) -> f64 {
        if epoch < self.warmup_epochs {
            self.tau_t_start + (self.tau_t_end - self.tau_t_start) * epoch / self.warmup_epochs
        } else {
            self.tau_t_end
        }
    }
}

/// Masked stage-0 tokens of one grid (row-major z, y, x).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub masked_indices: Vec<usize>,
    pub ratio: f64,
    pub grid_shape: Grid,
}

impl MaskSpec {
    pub fn len(&self) -> usize {
        self.masked_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masked_indices.is_empty()
    }

    pub fn flags(&self) -> Vec<bool> {
        let mut f = vec![false; grid_volume(self.grid_shape)];
        for &i in &self.masked_indices {
            f[i] = true;
        }
        f
    }

    /// Per-voxel flags for a volume cut into patches of `patch`.
    pub fn voxel_flags(&self, patch: Grid) -> Vec<bool> {
        let g = self.grid_shape;
        let shape = [g[0] * patch[0], g[1] * patch[1], g[2] * patch[2]];
        let tokens = self.flags();
        let mut out = Vec::with_capacity(grid_volume(shape));
        for z in 0..shape[0] {
            for y in 0..shape[1] {
                for x in 0..shape[2] {
                    out.push(tokens[((z / patch[0]) * g[1] + y / patch[1]) * g[2] + x / patch[2]]);
                }
            }
        }
        out
    }
}

/// Uniformly samples exactly `floor(ratio · n)` distinct tokens.
pub fn sample_mask(grid_shape: Grid, ratio: f64, rng: &mut Rng) -> Result<MaskSpec, PretextError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(PretextError::MaskRatio(ratio));
    }
    let n = grid_volume(grid_shape);
    let k = (ratio * n as f64).floor() as usize;
    if k == 0 {
        return Err(PretextError::DegenerateMask { ratio, n });
    }
    let mut masked_indices = sample(rng, n, k).into_vec();
    masked_indices.sort_unstable();
    Ok(MaskSpec { masked_indices, ratio, grid_shape })
}

/// `teacher ← m·teacher + (1−m)·student` on every array of the teacher.
pub fn ema_update(teacher: &mut ParameterSet, student: &ParameterSet, m: f64) -> Result<(), PretextError> {
    if !(0.0..=1.0).contains(&m) {
        return Err(PretextError::Momentum { value: m, range: "[0, 1]" });
    }
    student.check_shapes(&teacher.shapes())?;
    for (name, t) in teacher.iter_mut() {
        let s = student.get(name).expect("checked above");
        for (ti, si) in t.data_mut().iter_mut().zip(s.data()) {
            *ti = if m == 0.0 { *si } else { *ti + (1.0 - m) * (si - *ti) };
        }
    }
    Ok(())
}

/// `center ← momentum·center + (1−momentum)·mean_rows(logits)`; `logits` is `n × K` row-major.
pub fn update_center(center: &[f64], logits: &[f64], k: usize, momentum: f64) -> Result<Vec<f64>, PretextError> {
    if !(0.0..1.0).contains(&momentum) {
        return Err(PretextError::Momentum { value: momentum, range: "[0, 1)" });
    }
    if center.len() != k || logits.len() % k != 0 {
        return Err(PretextError::Shape(format!("center {} vs logits width {k}", center.len())));
    }
    let n = logits.len() / k;
    if n == 0 {
        return Err(PretextError::EmptyBatch);
    }
    let mut mean = vec![0.0; k];
    for row in logits.chunks(k) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    Ok(center.iter().zip(&mean).map(|(c, s)| momentum * c + (1.0 - momentum) * s / n as f64).collect())
}

/// Student and EMA teacher of a distillation run.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherStudentState {
    pub student: ParameterSet,
    pub teacher: ParameterSet,
    pub centers: BTreeMap<String, Vec<f64>>,
    pub epoch: f64,
}

#[cfg(test)]
mod tests;
