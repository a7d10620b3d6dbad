//! Synthetic volumetric "patients" in two modalities.
//!
//! Every phantom is a body ellipsoid holding four ellipsoidal organs (one
//! large, two medium, one small) and, for roughly half of the seeds, a tumor
//! blob inside the large organ. Geometry depends only on the seed, so the
//! modality-A and modality-B renderings of a seed share their label map voxel
//! for voxel.

pub mod io;
pub mod manifest;

use std::fmt;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::rng::substream;

pub use manifest::{build_manifest, plan_manifest, DatasetConfig, DatasetManifest, ManifestEntry, Split, SplitRequest};

pub const MIN_VOLUME_EXTENT: usize = 8;
pub const MIN_PHANTOM_EXTENT: usize = 16;
pub const DEFAULT_SPACING: [f64; 3] = [1.5, 1.5, 2.0];

pub const CLASS_NAMES: [&str; 6] = [
    "background",
    "large_organ",
    "medium_organ_a",
    "medium_organ_b",
    "small_organ",
    "tumor",
];
pub const TUMOR_CLASS: u8 = 5;
pub const LARGE_ORGAN_CLASS: u8 = 1;

#[derive(Debug, thiserror::Error)]
pub enum PhantomError {
    #[error("volume shape {shape:?}: every axis must be at least {min} voxels")]
    ShapeTooSmall { shape: [usize; 3], min: usize },
    #[error("voxel count {got} does not match shape {shape:?}")]
    VoxelCount { shape: [usize; 3], got: usize },
    #[error("label value {value} out of range for {classes} classes")]
    LabelOutOfRange { value: u8, classes: usize },
    #[error("invalid intensity window: low {low} must be below high {high}")]
    InvalidWindow { low: f64, high: f64 },
    #[error("invalid percentiles ({low}, {high}): need 0 <= low < high <= 100")]
    InvalidPercentiles { low: f64, high: f64 },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("{path}: {msg}")]
    Format { path: String, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    A,
    B,
}

impl Modality {
    pub fn code(self) -> u8 {
        match self {
            Modality::A => 0,
            Modality::B => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Modality::A),
            1 => Some(Modality::B),
            _ => None,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Modality::A => f.write_str("A"),
            Modality::B => f.write_str("B"),
        }
    }
}

/// Row-major (z, y, x) linear index.
#[inline]
pub fn flat_index(shape: [usize; 3], z: usize, y: usize, x: usize) -> usize {
    (z * shape[1] + y) * shape[2] + x
}

fn check_extent(shape: [usize; 3], min: usize) -> Result<(), PhantomError> {
    if shape.iter().any(|&s| s < min) {
        return Err(PhantomError::ShapeTooSmall { shape, min });
    }
    Ok(())
}

/// Scalar 3-D intensity field.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    voxels: Vec<f64>,
    shape: [usize; 3],
    spacing: [f64; 3],
    modality: Modality,
    id: String,
}

impl Volume {
    pub fn new(
        id: impl Into<String>,
        modality: Modality,
        shape: [usize; 3],
        spacing: [f64; 3],
        voxels: Vec<f64>,
    ) -> Result<Self, PhantomError> {
        check_extent(shape, MIN_VOLUME_EXTENT)?;
        if voxels.len() != shape.iter().product::<usize>() {
            return Err(PhantomError::VoxelCount { shape, got: voxels.len() });
        }
        Ok(Self { voxels, shape, spacing, modality, id: id.into() })
    }

    pub fn voxels(&self) -> &[f64] {
        &self.voxels
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> f64 {
        self.voxels[flat_index(self.shape, z, y, x)]
    }

    /// Same metadata, new voxel payload of identical shape.
    pub fn with_voxels(&self, voxels: Vec<f64>) -> Self {
        assert_eq!(voxels.len(), self.voxels.len(), "with_voxels: size mismatch");
        Self { voxels, ..self.clone() }
    }

    /// Same modality and spacing, different shape (crops, rotations).
    pub fn reshaped_from(&self, shape: [usize; 3], voxels: Vec<f64>) -> Result<Self, PhantomError> {
        Self::new(self.id.clone(), self.modality, shape, self.spacing, voxels)
    }
}

/// Integer class map paired with a [`Volume`].
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMap {
    labels: Vec<u8>,
    shape: [usize; 3],
    class_names: Vec<String>,
}

impl LabelMap {
    pub fn new(shape: [usize; 3], labels: Vec<u8>, class_names: Vec<String>) -> Result<Self, PhantomError> {
        if labels.len() != shape.iter().product::<usize>() {
            return Err(PhantomError::VoxelCount { shape, got: labels.len() });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= class_names.len()) {
            return Err(PhantomError::LabelOutOfRange { value: bad, classes: class_names.len() });
        }
        Ok(Self { labels, shape, class_names })
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> u8 {
        self.labels[flat_index(self.shape, z, y, x)]
    }

    pub fn count(&self, class: u8) -> usize {
        self.labels.iter().filter(|&&l| l == class).count()
    }

    pub fn has_foreground(&self) -> bool {
        self.labels.iter().any(|&l| l != 0)
    }

    /// Remaps every label through `table`, renaming classes.
    pub fn remap(&self, table: &[u8], class_names: Vec<String>) -> Result<Self, PhantomError> {
        let labels = self.labels.iter().map(|&l| table[l as usize]).collect();
        Self::new(self.shape, labels, class_names)
    }
}

/// Tissue classes used for intensity assignment (labels only cover organs and tumor).
#[derive(Clone, Copy)]
enum Tissue {
    Air,
    Body,
    Class(u8),
}

/// HU-like class means for modality A.
fn mean_a(t: Tissue) -> f64 {
    match t {
        Tissue::Air => -1000.0,
        Tissue::Body => 0.0,
        Tissue::Class(1) => 100.0,
        Tissue::Class(2) => 200.0,
        Tissue::Class(3) => -100.0,
        Tissue::Class(4) => 300.0,
        Tissue::Class(_) => 40.0,
    }
}

const MEAN_A_RANGE: (f64, f64) = (-1000.0, 300.0);
const TISSUE_A_RANGE: (f64, f64) = (-100.0, 300.0);
const GAMMA_B: f64 = 0.6;

/// Modality B: air stays dark, tissue means pass through a gamma remap.
fn mean_b(t: Tissue) -> f64 {
    match t {
        Tissue::Air => 0.0,
        other => {
            let u = (mean_a(other) - TISSUE_A_RANGE.0) / (TISSUE_A_RANGE.1 - TISSUE_A_RANGE.0);
            200.0 + 800.0 * u.clamp(0.0, 1.0).powf(GAMMA_B)
        }
    }
}

const MEAN_B_RANGE: (f64, f64) = (0.0, 1000.0);
const NOISE_FRACTION: f64 = 0.05;
const BIAS_AMPLITUDE: f64 = 0.2;

/// Oriented ellipsoid in normalized [0,1]^3 coordinates (z, y, x).
#[derive(Clone, Debug)]
struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
    /// Rows are the ellipsoid axes expressed in volume coordinates.
    axes: [[f64; 3]; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        let d = [p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]];
        let mut s = 0.0;
        for (axis, r) in self.axes.iter().zip(self.radii) {
            let q = axis[0] * d[0] + axis[1] * d[1] + axis[2] * d[2];
            s += (q / r) * (q / r);
        }
        s <= 1.0
    }
}

fn rotation(angles: [f64; 3]) -> [[f64; 3]; 3] {
    let (sa, ca) = angles[0].sin_cos();
    let (sb, cb) = angles[1].sin_cos();
    let (sc, cc) = angles[2].sin_cos();
    let rz = [[1.0, 0.0, 0.0], [0.0, ca, -sa], [0.0, sa, ca]];
    let ry = [[cb, 0.0, sb], [0.0, 1.0, 0.0], [-sb, 0.0, cb]];
    let rx = [[cc, -sc, 0.0], [sc, cc, 0.0], [0.0, 0.0, 1.0]];
    let mul = |a: [[f64; 3]; 3], b: [[f64; 3]; 3]| {
        let mut out = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
            }
        }
        out
    };
    mul(mul(rz, ry), rx)
}

/// Canonical (center, radii) per organ class 1..=4.
const ORGANS: [([f64; 3], [f64; 3]); 4] = [
    ([0.50, 0.45, 0.35], [0.26, 0.22, 0.20]),
    ([0.50, 0.38, 0.74], [0.16, 0.13, 0.12]),
    ([0.40, 0.72, 0.62], [0.14, 0.12, 0.15]),
    ([0.62, 0.74, 0.30], [0.11, 0.10, 0.10]),
];
const CENTER_JITTER: f64 = 0.10;
const RADIUS_JITTER: f64 = 0.20;
const MAX_TILT: f64 = 0.35;
const TUMOR_PROBABILITY: f64 = 0.5;

/// Seed-only phantom geometry, shared by both modality renderings.
#[derive(Clone, Debug)]
pub struct PhantomGeometry {
    body: Ellipsoid,
    organs: Vec<Ellipsoid>,
    tumor: Option<([f64; 3], f64)>,
}

impl PhantomGeometry {
    pub fn sample(seed: u64) -> Self {
        let mut rng = substream(seed, "geometry");
        let jittered = |center: [f64; 3], radii: [f64; 3], rng: &mut crate::rng::Rng| {
            let c = center.map(|c| c + rng.random_range(-CENTER_JITTER..=CENTER_JITTER));
            let r = radii.map(|r| r * rng.random_range(1.0 - RADIUS_JITTER..=1.0 + RADIUS_JITTER));
            let angles = [(); 3].map(|_| rng.random_range(-MAX_TILT..=MAX_TILT));
            Ellipsoid { center: c, radii: r, axes: rotation(angles) }
        };
        let body = Ellipsoid {
            center: [0.5, 0.5, 0.5],
            radii: [0.47, 0.46, 0.47].map(|r| r * rng.random_range(0.95..=1.0)),
            axes: rotation([0.0; 3]),
        };
        let organs: Vec<Ellipsoid> = ORGANS.iter().map(|(c, r)| jittered(*c, *r, &mut rng)).collect();
        let has_tumor = rng.random_bool(TUMOR_PROBABILITY);
        let tumor = has_tumor.then(|| {
            let host = &organs[0];
            // uniform point in the inner half of the host ellipsoid, in its own frame
            let local = loop {
                let p = [(); 3].map(|_| rng.random_range(-1.0..=1.0));
                if p.iter().map(|v| v * v).sum::<f64>() <= 1.0 {
                    break p;
                }
            };
            let mut center = host.center;
            for (axis, (l, r)) in host.axes.iter().zip(local.iter().zip(host.radii)) {
                for d in 0..3 {
                    center[d] += axis[d] * l * r * 0.5;
                }
            }
            (center, rng.random_range(0.05..=0.09))
        });
        Self { body, organs, tumor }
    }

    pub fn has_tumor(&self) -> bool {
        self.tumor.is_some()
    }

    /// Returns (label map, body mask).
    fn rasterize(&self, shape: [usize; 3]) -> (Vec<u8>, Vec<bool>) {
        let n = shape.iter().product();
        let mut labels = vec![0u8; n];
        let mut body = vec![false; n];
        let coord = |i: usize, axis: usize| (i as f64 + 0.5) / shape[axis] as f64;
        for z in 0..shape[0] {
            for y in 0..shape[1] {
                for x in 0..shape[2] {
                    let p = [coord(z, 0), coord(y, 1), coord(x, 2)];
                    let idx = flat_index(shape, z, y, x);
                    body[idx] = self.body.contains(p);
                    for (k, organ) in self.organs.iter().enumerate() {
                        if organ.contains(p) {
                            labels[idx] = k as u8 + 1;
                        }
                    }
                    if let Some((c, r)) = self.tumor {
                        let d2: f64 = (0..3).map(|a| (p[a] - c[a]) * (p[a] - c[a])).sum();
                        if d2 <= r * r && labels[idx] == LARGE_ORGAN_CLASS {
                            labels[idx] = TUMOR_CLASS;
                        }
                    }
                }
            }
        }
        if let Some((c, _)) = self.tumor {
            // the blob always owns at least the voxel holding its center
            let v = [0, 1, 2].map(|a| ((c[a] * shape[a] as f64) as usize).min(shape[a] - 1));
            let idx = flat_index(shape, v[0], v[1], v[2]);
            labels[idx] = TUMOR_CLASS;
            body[idx] = true;
        }
        for (l, b) in labels.iter().zip(body.iter_mut()) {
            if *l != 0 {
                *b = true;
            }
        }
        (labels, body)
    }
}

/// Smooth multiplicative field `1 + sum_k a_k cos(2π f_k·u + φ_k)`, |field - 1| ≤ 0.2.
fn bias_field(seed: u64, shape: [usize; 3]) -> Vec<f64> {
    let mut rng = substream(seed, "bias");
    let comps: Vec<([f64; 3], f64, f64)> = (0..3)
        .map(|_| {
            let mut freq = [(); 3].map(|_| rng.random_range(0..=1) as f64);
            if freq.iter().all(|f| *f == 0.0) {
                freq[rng.random_range(0..3)] = 1.0;
            }
            let amp = rng.random_range(-1.0..=1.0) * BIAS_AMPLITUDE / 3.0;
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            (freq, amp, phase)
        })
        .collect();
    let mut out = Vec::with_capacity(shape.iter().product());
    for z in 0..shape[0] {
        for y in 0..shape[1] {
            for x in 0..shape[2] {
                let u = [
                    z as f64 / shape[0] as f64,
                    y as f64 / shape[1] as f64,
                    x as f64 / shape[2] as f64,
                ];
                let mut v = 1.0;
                for (f, a, ph) in &comps {
                    let arg = std::f64::consts::TAU * (f[0] * u[0] + f[1] * u[1] + f[2] * u[2]) + ph;
                    v += a * arg.cos();
                }
                out.push(v);
            }
        }
    }
    out
}

pub fn phantom_id(modality: Modality, index: u64) -> String {
    format!("{modality}{index:05}")
}

/// Deterministic phantom for `(seed, modality, shape)`.
pub fn generate_phantom(seed: u64, modality: Modality, shape: [usize; 3]) -> Result<(Volume, LabelMap), PhantomError> {
    check_extent(shape, MIN_PHANTOM_EXTENT)?;
    let geometry = PhantomGeometry::sample(seed);
    let (labels, body) = geometry.rasterize(shape);
    let tissue = |i: usize| {
        if labels[i] != 0 {
            Tissue::Class(labels[i])
        } else if body[i] {
            Tissue::Body
        } else {
            Tissue::Air
        }
    };
    let (range, noise_stream) = match modality {
        Modality::A => (MEAN_A_RANGE, "noise-A"),
        Modality::B => (MEAN_B_RANGE, "noise-B"),
    };
    let sigma = NOISE_FRACTION * (range.1 - range.0);
    let noise = Normal::new(0.0, sigma).expect("positive sigma");
    let mut rng = substream(seed, noise_stream);
    let voxels: Vec<f64> = match modality {
        Modality::A => (0..labels.len()).map(|i| mean_a(tissue(i)) + noise.sample(&mut rng)).collect(),
        Modality::B => {
            let bias = bias_field(seed, shape);
            (0..labels.len())
                .map(|i| mean_b(tissue(i)) * bias[i] + noise.sample(&mut rng))
                .collect()
        }
    };
    let id = format!("seed{seed}-{modality}");
    let volume = Volume::new(id, modality, shape, DEFAULT_SPACING, voxels)?;
    let names = CLASS_NAMES.iter().map(|s| s.to_string()).collect();
    let label_map = LabelMap::new(shape, labels, names)?;
    Ok((volume, label_map))
}

/// Clamp to `[low, high]`, then map affinely onto `[0, 1]`.
pub fn normalize_intensity(v: &Volume, window: (f64, f64)) -> Result<Volume, PhantomError> {
    let (low, high) = window;
    if !(low < high) {
        return Err(PhantomError::InvalidWindow { low, high });
    }
    let width = high - low;
    Ok(v.with_voxels(v.voxels.iter().map(|x| (x.clamp(low, high) - low) / width).collect()))
}

/// Linear-interpolated percentile of unsorted data (`p` in percent).
pub fn percentile(values: &[f64], p: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    percentile_sorted(&sorted, p)
}

fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    let pos = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

#[derive(Clone, Debug, PartialEq)]
pub enum NormalizationWarning {
    /// Percentile endpoints coincided; every voxel was set to 0.5.
    DegenerateWindow { id: String, value: f64 },
}

/// Window endpoints taken from the volume's own percentiles.
pub fn normalize_percentile(
    v: &Volume,
    p_low: f64,
    p_high: f64,
) -> Result<(Volume, Option<NormalizationWarning>), PhantomError> {
    if !(0.0..=100.0).contains(&p_low) || !(0.0..=100.0).contains(&p_high) || p_low >= p_high {
        return Err(PhantomError::InvalidPercentiles { low: p_low, high: p_high });
    }
    let mut sorted = v.voxels.clone();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let low = percentile_sorted(&sorted, p_low);
    let high = percentile_sorted(&sorted, p_high);
    if low >= high {
        log::warn!("{}: constant intensities, percentile window collapsed at {low}", v.id);
        let warning = NormalizationWarning::DegenerateWindow { id: v.id.clone(), value: low };
        return Ok((v.with_voxels(vec![0.5; v.len()]), Some(warning)));
    }
    Ok((normalize_intensity(v, (low, high))?, None))
}

/// Per-modality normalization used throughout the pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum IntensityPolicy {
    Window { low: f64, high: f64 },
    Percentile { low: f64, high: f64 },
}

impl IntensityPolicy {
    /// Pretraining window for modality A; 5/95 percentile clipping for modality B.
    pub fn default_for(modality: Modality) -> Self {
        match modality {
            Modality::A => IntensityPolicy::Window { low: -500.0, high: 500.0 },
            Modality::B => IntensityPolicy::Percentile { low: 5.0, high: 95.0 },
        }
    }

    pub fn apply(&self, v: &Volume) -> Result<Volume, PhantomError> {
        match *self {
            IntensityPolicy::Window { low, high } => normalize_intensity(v, (low, high)),
            IntensityPolicy::Percentile { low, high } => Ok(normalize_percentile(v, low, high)?.0),
        }
    }
}
