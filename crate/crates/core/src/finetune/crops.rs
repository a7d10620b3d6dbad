use rand::Rng as _;

use super::{FinetuneError, Result};
use crate::nn::{grid_volume, Grid};
use crate::phantom::{flat_index, LabelMap, Volume};
use crate::rng::Rng;

/// Attempts at finding a crop free of foreground before accepting any crop.
const BACKGROUND_TRIES: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct Crop {
    pub volume: Vec<f64>,
    pub labels: Vec<u8>,
    pub origin: Grid,
    pub contains_foreground: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CropBatch {
    pub crops: Vec<Crop>,
    pub crop_shape: Grid,
    /// Foreground crops were requested but the label map is empty.
    pub fallback: bool,
}

/// Copies the `crop`-shaped block starting at `origin`.
pub fn extract<T: Copy>(data: &[T], shape: Grid, origin: Grid, crop: Grid) -> Vec<T> {
    let mut out = Vec::with_capacity(grid_volume(crop));
    for z in 0..crop[0] {
        for y in 0..crop[1] {
            let start = flat_index(shape, origin[0] + z, origin[1] + y, origin[2]);
            out.extend_from_slice(&data[start..start + crop[2]]);
        }
    }
    out
}

/// Which of `n` crops are foreground-centered: crop `i` is when
/// `⌊(i+1)·ratio⌋ > ⌊i·ratio⌋`, which alternates at ratio 0.5.
pub fn foreground_schedule(n: usize, ratio: f64) -> Vec<bool> {
    (0..n).map(|i| ((i + 1) as f64 * ratio).floor() > (i as f64 * ratio).floor()).collect()
}

fn random_origin(shape: Grid, crop: Grid, rng: &mut Rng) -> Grid {
    [0, 1, 2].map(|a| rng.random_range(0..=shape[a] - crop[a]))
}

fn centered_origin(shape: Grid, crop: Grid, center: Grid) -> Grid {
    [0, 1, 2].map(|a| center[a].saturating_sub(crop[a] / 2).min(shape[a] - crop[a]))
}

/// `n` crops, foreground-centered ones interleaved with background ones at
/// `foreground_ratio`. Foreground centers are uniform over labeled voxels.
pub fn sample_crops(v: &Volume, labels: &LabelMap, crop: Grid, n: usize, foreground_ratio: f64, rng: &mut Rng) -> Result<CropBatch> {
    let shape = v.shape();
    if labels.shape() != shape {
        return Err(FinetuneError::Shape(format!("labels {:?} vs volume {shape:?}", labels.shape())));
    }
    if (0..3).any(|a| crop[a] > shape[a] || crop[a] == 0) {
        return Err(FinetuneError::Crop { crop, volume: shape });
    }
    let foreground: Vec<usize> = labels.labels().iter().enumerate().filter(|(_, &l)| l != 0).map(|(i, _)| i).collect();
    let mut schedule = foreground_schedule(n, foreground_ratio);
    let fallback = foreground.is_empty() && schedule.iter().any(|&f| f);
    if fallback {
        log::warn!("{}: no labeled voxels, sampling background crops only", v.id());
        schedule.iter_mut().for_each(|f| *f = false);
    }
    let has_fg = |origin: Grid| extract(labels.labels(), shape, origin, crop).iter().any(|&l| l != 0);
    let crops = schedule
        .into_iter()
        .map(|fg| {
            let origin = if fg {
                let i = foreground[rng.random_range(0..foreground.len())];
                let (hw, w) = (shape[1] * shape[2], shape[2]);
                centered_origin(shape, crop, [i / hw, i % hw / w, i % w])
            } else {
                let mut origin = random_origin(shape, crop, rng);
                for _ in 1..BACKGROUND_TRIES {
                    if !has_fg(origin) {
                        break;
                    }
                    origin = random_origin(shape, crop, rng);
                }
                origin
            };
            Crop {
                volume: extract(v.voxels(), shape, origin, crop),
                labels: extract(labels.labels(), shape, origin, crop),
                origin,
                contains_foreground: has_fg(origin),
            }
        })
        .collect();
    Ok(CropBatch { crops, crop_shape: crop, fallback })
}
