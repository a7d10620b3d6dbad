//! Dataset manifests: which phantom goes to which split.
//!
//! Each request draws a contiguous range of geometry indices. A phantom's
//! generation seed is derived from the manifest seed and that index, so the A
//! and B renderings of one index share geometry. Pretraining indices must never
//! reappear in a fine-tuning split of either modality.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{generate_phantom, io, phantom_id, LabelMap, Modality, PhantomError, Volume};
use crate::rng::derive_seed;

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Pretrain,
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Pretrain => "pretrain",
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRequest {
    pub split: Split,
    pub modality: Modality,
    pub count: u64,
    /// First geometry index of the contiguous range.
    pub first_index: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub seed: u64,
    pub shape: [usize; 3],
    /// Geometry indices available: `0..pool_size`.
    pub pool_size: u64,
    pub requests: Vec<SplitRequest>,
}

impl DatasetConfig {
    /// Lays requests out back to back: pretraining first, then fine-tuning splits
    /// per modality (both modalities reuse the same fine-tuning indices).
    pub fn sequential(seed: u64, shape: [usize; 3], pretrain: &[(Modality, u64)], finetune: &[(Modality, u64, u64, u64)]) -> Self {
        let mut requests = Vec::new();
        let mut next = 0;
        for &(modality, count) in pretrain {
            requests.push(SplitRequest { split: Split::Pretrain, modality, count, first_index: next });
            next += count;
        }
        let base = next;
        let mut pool = base;
        for &(modality, train, val, test) in finetune {
            let mut off = base;
            for (split, count) in [(Split::Train, train), (Split::Val, val), (Split::Test, test)] {
                requests.push(SplitRequest { split, modality, count, first_index: off });
                off += count;
            }
            pool = pool.max(off);
        }
        Self { seed, shape, pool_size: pool, requests }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub volume: String,
    pub label: Option<String>,
    pub modality: Modality,
    pub split: Split,
    pub index: u64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub seed: u64,
    pub shape: [usize; 3],
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn entries_for(&self, split: Split, modality: Modality) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split && e.modality == modality)
    }

    pub fn find(&self, id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    /// Checks path uniqueness and pretraining/fine-tuning disjointness.
    pub fn validate(&self) -> Result<(), PhantomError> {
        let mut paths = BTreeSet::new();
        let mut ids = BTreeSet::new();
        for e in &self.entries {
            if !ids.insert(e.id.as_str()) {
                return Err(PhantomError::Manifest(format!("duplicate id {}", e.id)));
            }
            for p in std::iter::once(&e.volume).chain(e.label.as_ref()) {
                if !paths.insert(p.as_str()) {
                    return Err(PhantomError::Manifest(format!("duplicate path {p}")));
                }
            }
        }
        let pretrain: BTreeSet<u64> = self.entries.iter().filter(|e| e.split == Split::Pretrain).map(|e| e.index).collect();
        if let Some(e) = self.entries.iter().find(|e| e.split != Split::Pretrain && pretrain.contains(&e.index)) {
            return Err(PhantomError::Manifest(format!(
                "{} ({}) shares geometry index {} with a pretraining entry",
                e.id, e.split, e.index
            )));
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, PhantomError> {
        let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
        let m: Self = serde_json::from_str(&text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, dir: &Path) -> Result<(), PhantomError> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load_volume(&self, dir: &Path, entry: &ManifestEntry) -> Result<Volume, PhantomError> {
        io::read_volume(&dir.join(&entry.volume))
    }

    pub fn load_labels(&self, dir: &Path, entry: &ManifestEntry) -> Result<Option<LabelMap>, PhantomError> {
        entry.label.as_ref().map(|p| io::read_labels(&dir.join(p))).transpose()
    }
}

/// Resolves requests into entries without touching the filesystem.
pub fn plan_manifest(cfg: &DatasetConfig) -> Result<DatasetManifest, PhantomError> {
    let mut ranges: BTreeMap<(Split, Modality), Vec<(u64, u64)>> = BTreeMap::new();
    let mut entries = Vec::new();
    for r in &cfg.requests {
        let end = r.first_index.checked_add(r.count).ok_or_else(|| PhantomError::Manifest("index overflow".into()))?;
        if end > cfg.pool_size {
            return Err(PhantomError::Manifest(format!(
                "{} {} request for {} phantoms from index {} exceeds the pool of {}",
                r.modality, r.split, r.count, r.first_index, cfg.pool_size
            )));
        }
        ranges.entry((r.split, r.modality)).or_default().push((r.first_index, end));
        for index in r.first_index..end {
            let id = phantom_id(r.modality, index);
            let label = (r.split != Split::Pretrain).then(|| format!("labels/{id}.lbl"));
            entries.push(ManifestEntry {
                volume: format!("volumes/{id}.vol"),
                label,
                modality: r.modality,
                split: r.split,
                index,
                seed: derive_seed(cfg.seed, &format!("phantom-{index}")),
                id,
            });
        }
    }
    let overlaps = |a: &(u64, u64), b: &(u64, u64)| a.0 < b.1 && b.0 < a.1;
    let all: Vec<(&(Split, Modality), &(u64, u64))> = ranges.iter().flat_map(|(k, v)| v.iter().map(move |r| (k, r))).collect();
    for (i, (ka, ra)) in all.iter().enumerate() {
        for (kb, rb) in &all[i + 1..] {
            if !overlaps(ra, rb) {
                continue;
            }
            let crosses_pretrain = (ka.0 == Split::Pretrain) != (kb.0 == Split::Pretrain);
            let same_modality_clash = ka.1 == kb.1;
            if crosses_pretrain || same_modality_clash {
                return Err(PhantomError::Manifest(format!(
                    "{} {} indices {:?} overlap {} {} indices {:?}",
                    ka.1, ka.0, ra, kb.1, kb.0, rb
                )));
            }
        }
    }
    let manifest = DatasetManifest { schema_version: MANIFEST_SCHEMA_VERSION, seed: cfg.seed, shape: cfg.shape, entries };
    manifest.validate()?;
    Ok(manifest)
}

/// Plans the manifest, renders every phantom into `dir`, and writes `manifest.json`.
pub fn build_manifest(cfg: &DatasetConfig, dir: &Path) -> Result<DatasetManifest, PhantomError> {
    let manifest = plan_manifest(cfg)?;
    for e in &manifest.entries {
        let (volume, labels) = generate_phantom(e.seed, e.modality, cfg.shape)?;
        let volume = Volume::new(e.id.clone(), volume.modality(), volume.shape(), volume.spacing(), volume.voxels().to_vec())?;
        io::write_volume(&dir.join(&e.volume), &volume)?;
        if let Some(lp) = &e.label {
            io::write_labels(&dir.join(lp), &labels, &e.id)?;
        }
    }
    manifest.save(dir)?;
    Ok(manifest)
}
