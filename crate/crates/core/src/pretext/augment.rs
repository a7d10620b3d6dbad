//! Views of pretraining volumes: random crops, flips, intensity jitter and
//! axial 90° rotations.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::nn::{grid_volume, Grid};
use crate::phantom::Volume;
use crate::rng::Rng;

/// Replayable record of how one view was produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Augmentation {
    pub offset: Grid,
    pub crop: Grid,
    pub flips: [bool; 3],
    pub scale: f64,
    pub shift: f64,
}

impl Augmentation {
    pub fn sample(shape: Grid, crop: Grid, rng: &mut Rng) -> Self {
        let offset = [0, 1, 2].map(|a| rng.random_range(0..=shape[a] - crop[a]));
        let flips = [rng.random_bool(0.5), rng.random_bool(0.5), rng.random_bool(0.5)];
        let scale = rng.random_range(0.9..1.1);
        let shift = rng.random_range(-0.1..0.1);
        Self { offset, crop, flips, scale, shift }
    }

    pub fn apply(&self, data: &[f64], shape: Grid) -> Vec<f64> {
        let c = self.crop;
        let mut out = Vec::with_capacity(grid_volume(c));
        for z in 0..c[0] {
            for y in 0..c[1] {
                for x in 0..c[2] {
                    let pick = |i: usize, a: usize| self.offset[a] + if self.flips[a] { c[a] - 1 - i } else { i };
                    let (sz, sy, sx) = (pick(z, 0), pick(y, 1), pick(x, 2));
                    out.push(data[(sz * shape[1] + sy) * shape[2] + sx] * self.scale + self.shift);
                }
            }
        }
        out
    }
}

/// Two augmented views of one source volume.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewPair {
    pub source: String,
    pub shape: Grid,
    pub view1: Vec<f64>,
    pub view2: Vec<f64>,
    pub provenance: [Augmentation; 2],
}

pub fn make_view_pair(source: &str, data: &[f64], shape: Grid, crop: Grid, rng: &mut Rng) -> ViewPair {
    let a = Augmentation::sample(shape, crop, rng);
    let b = Augmentation::sample(shape, crop, rng);
    ViewPair { source: source.to_string(), shape: crop, view1: a.apply(data, shape), view2: b.apply(data, shape), provenance: [a, b] }
}

/// One quarter turn in the axial (y, x) plane.
fn rot90(data: &[f64], shape: Grid) -> (Vec<f64>, Grid) {
    let [d, h, w] = shape;
    let mut out = Vec::with_capacity(data.len());
    for z in 0..d {
        for i in 0..w {
            for j in 0..h {
                out.push(data[(z * h + j) * w + (w - 1 - i)]);
            }
        }
    }
    (out, [d, w, h])
}

/// Rotates raw voxels by `k` quarter turns about the z axis.
pub fn rotate_axial(data: &[f64], shape: Grid, k: usize) -> (Vec<f64>, Grid) {
    let mut cur = (data.to_vec(), shape);
    for _ in 0..k % 4 {
        cur = rot90(&cur.0, cur.1);
    }
    cur
}

/// Lossless rotation of a volume by `class_id` quarter turns in the axial plane.
pub fn apply_rotation(v: &Volume, class_id: usize) -> Volume {
    let (data, shape) = rotate_axial(v.voxels(), v.shape(), class_id);
    let sp = v.spacing();
    let spacing = if class_id % 2 == 1 { [sp[0], sp[2], sp[1]] } else { sp };
    Volume::new(v.id(), v.modality(), shape, spacing, data).expect("rotation keeps extents")
}

/// Zeroes voxels under masked patches.
pub fn mask_voxels(data: &[f64], flags: &[bool]) -> Vec<f64> {
    data.iter().zip(flags).map(|(v, &m)| if m { 0.0 } else { *v }).collect()
}
