//! Named parameter arrays and the checkpoint archive.
//!
//! A checkpoint is a single file: magic `SSLBCKPT`, a `u32` format version, a
//! `u32`-length-prefixed JSON manifest, then the arrays. Each array is stored as
//! a length-prefixed UTF-8 path, a `u32` rank, `u32` dims and little-endian
//! `f64` payload. Learnable parameters and non-learnable buffers (batch-norm
//! running statistics) are stored in two consecutive array sections.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use sslbench_autograd::{Gradients, Graph, Tensor, Var};

use crate::rng::RngState;

#[derive(Debug, thiserror::Error)]
pub enum ParamError {
    #[error("missing parameter {0}")]
    Missing(String),
    #[error("parameter {path}: expected shape {expected:?}, found {found:?}")]
    ShapeMismatch { path: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("unexpected parameter {0}")]
    Unexpected(String),
    #[error("checkpoint {path}: {msg}")]
    Format { path: String, msg: String },
    #[error("config hash mismatch: checkpoint has {checkpoint}, model expects {expected}")]
    ConfigHash { checkpoint: String, expected: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Map from layer path to array.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterSet {
    arrays: BTreeMap<String, Tensor>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.arrays.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.arrays.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.arrays.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.arrays.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.arrays.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.arrays.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.arrays.keys()
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    /// Number of scalars across all arrays.
    pub fn total_count(&self) -> usize {
        self.arrays.values().map(Tensor::numel).sum()
    }

    /// Ordered (path, shape) list.
    pub fn shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.arrays.iter().map(|(k, v)| (k.clone(), v.shape().to_vec())).collect()
    }

    /// Arrays whose path starts with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> ParameterSet {
        let arrays = self.arrays.iter().filter(|(k, _)| k.starts_with(prefix)).map(|(k, v)| (k.clone(), v.clone())).collect();
        Self { arrays }
    }

    /// Inserts every array of `other`, replacing same-named entries.
    pub fn extend(&mut self, other: ParameterSet) {
        self.arrays.extend(other.arrays);
    }

    /// Verifies `self` has exactly the paths and shapes listed in `expected`.
    /// Reports the first mismatching path in sorted order.
    pub fn check_shapes(&self, expected: &[(String, Vec<usize>)]) -> Result<(), ParamError> {
        let mut sorted: Vec<&(String, Vec<usize>)> = expected.iter().collect();
        sorted.sort_by(|a, b| a.0.cmp(&b.0));
        for (name, shape) in sorted {
            match self.arrays.get(name) {
                None => return Err(ParamError::Missing(name.clone())),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(ParamError::ShapeMismatch {
                        path: name.clone(),
                        expected: shape.clone(),
                        found: t.shape().to_vec(),
                    })
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Same paths and shapes as `other`.
    pub fn shape_compatible(&self, other: &ParameterSet) -> Result<(), ParamError> {
        other.check_shapes(&self.shapes())?;
        if let Some(extra) = other.arrays.keys().find(|k| !self.arrays.contains_key(*k)) {
            return Err(ParamError::Unexpected(extra.clone()));
        }
        Ok(())
    }
}

/// Graph handles for a bound [`ParameterSet`].
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Adds every array as a leaf: trainable leaves receive gradients, others are constants.
    pub fn new(g: &mut Graph, params: &ParameterSet, trainable: bool) -> Self {
        let vars = params
            .iter()
            .map(|(k, t)| {
                let v = if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
                (k.clone(), v)
            })
            .collect();
        Self { vars }
    }

    pub fn get(&self, name: &str) -> Var {
        *self.vars.get(name).unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    pub fn try_get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Gradient arrays keyed like the bound parameters (zeros where nothing flowed).
    pub fn gradients(&self, g: &Graph, grads: &Gradients) -> ParameterSet {
        let mut out = ParameterSet::new();
        for (name, v) in &self.vars {
            let shape = g.shape(*v).to_vec();
            let numel = g.value(*v).numel();
            out.insert(name.clone(), Tensor::from_vec(&shape, grads.get_or_zeros(*v, numel)));
        }
        out
    }
}

/// Short stable digest of any serializable config.
pub fn config_hash<T: Serialize>(cfg: &T) -> String {
    let json = serde_json::to_string(cfg).expect("config serializes");
    let digest = Sha256::digest(json.as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    /// What the archive holds, e.g. `pretrain:simmim` or `segmentor`.
    pub kind: String,
    pub config_hash: String,
    pub encoder_config: serde_json::Value,
    pub step: u64,
    pub rng_state: Option<RngState>,
    #[serde(default)]
    pub extra: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub params: ParameterSet,
    pub buffers: ParameterSet,
}

const CKPT_MAGIC: &[u8; 8] = b"SSLBCKPT";
pub const CKPT_VERSION: u32 = 1;

fn write_arrays(buf: &mut Vec<u8>, set: &ParameterSet) {
    buf.extend_from_slice(&(set.len() as u32).to_le_bytes());
    for (name, t) in set.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for d in t.shape() {
            buf.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for x in t.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Cursor<'a> {
    fn err(&self, msg: &str) -> ParamError {
        ParamError::Format { path: self.path.clone(), msg: format!("{msg} at byte {}", self.pos) }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], ParamError> {
        if self.pos + n > self.bytes.len() {
            return Err(self.err("truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ParamError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn arrays(&mut self) -> Result<ParameterSet, ParamError> {
        let count = self.u32()?;
        let mut set = ParameterSet::new();
        for _ in 0..count {
            let n = self.u32()? as usize;
            let name = String::from_utf8(self.take(n)?.to_vec()).map_err(|_| self.err("bad utf-8 path"))?;
            let rank = self.u32()? as usize;
            let shape = (0..rank).map(|_| self.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let numel: usize = shape.iter().product();
            let data = self.take(numel * 8)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            set.insert(name, Tensor::from_vec(&shape, data));
        }
        Ok(set)
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let json = serde_json::to_vec(&self.manifest).expect("manifest serializes");
        let mut buf = Vec::with_capacity(16 + json.len() + 8 * self.params.total_count());
        buf.extend_from_slice(CKPT_MAGIC);
        buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
        buf.extend_from_slice(&json);
        write_arrays(&mut buf, &self.params);
        write_arrays(&mut buf, &self.buffers);
        buf
    }

    pub fn from_bytes(bytes: &[u8], path: &str) -> Result<Self, ParamError> {
        let mut c = Cursor { bytes, pos: 0, path: path.to_string() };
        if c.take(8)? != CKPT_MAGIC {
            return Err(c.err("bad magic"));
        }
        let version = c.u32()?;
        if version != CKPT_VERSION {
            return Err(c.err(&format!("unsupported version {version}")));
        }
        let n = c.u32()? as usize;
        let manifest: CheckpointManifest = serde_json::from_slice(c.take(n)?)?;
        let params = c.arrays()?;
        let buffers = c.arrays()?;
        Ok(Self { manifest, params, buffers })
    }

    pub fn save(&self, path: &Path) -> Result<(), ParamError> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ParamError> {
        Self::from_bytes(&fs::read(path)?, &path.display().to_string())
    }

    /// Writes the JSON manifest next to the archive for human inspection.
    pub fn save_manifest_json(&self, path: &Path) -> Result<(), ParamError> {
        fs::write(path, serde_json::to_string_pretty(&self.manifest)? + "\n")?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParameterSet {
        let mut p = ParameterSet::new();
        p.insert("a.weight", Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, -6.5]));
        p.insert("a.bias", Tensor::from_vec(&[3], vec![0.1, 0.2, 0.3]));
        p
    }

    #[test]
    fn total_count_sums_elements() {
        assert_eq!(sample().total_count(), 9);
    }

    #[test]
    fn shape_check_reports_first_mismatch() {
        let p = sample();
        let mut expected = p.shapes();
        expected[1].1 = vec![3, 2];
        match p.check_shapes(&expected) {
            Err(ParamError::ShapeMismatch { path, .. }) => assert_eq!(path, "a.weight"),
            other => panic!("{other:?}"),
        }
        expected.push(("b".into(), vec![1]));
        expected[1].1 = vec![2, 3];
        assert!(matches!(p.check_shapes(&expected), Err(ParamError::Missing(n)) if n == "b"));
    }

    #[test]
    fn checkpoint_roundtrip_preserves_bits() {
        let mut buffers = ParameterSet::new();
        buffers.insert("bn.running_mean", Tensor::from_vec(&[2], vec![f64::MIN_POSITIVE, -0.0]));
        let ckpt = Checkpoint {
            manifest: CheckpointManifest {
                format_version: CKPT_VERSION,
                kind: "test".into(),
                config_hash: "abc".into(),
                encoder_config: serde_json::json!({"embed_dim": 4}),
                step: 12,
                rng_state: Some(RngState::capture(&crate::rng::substream(1, "x"))),
                extra: serde_json::Value::Null,
            },
            params: sample(),
            buffers,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.to_bytes(), ckpt.to_bytes());
        assert_eq!(back, ckpt);
        assert!(Checkpoint::from_bytes(&ckpt.to_bytes()[..20], "x").is_err());
    }

    #[test]
    fn config_hash_is_stable_and_sensitive() {
        let a = config_hash(&serde_json::json!({"x": 1}));
        assert_eq!(a, config_hash(&serde_json::json!({"x": 1})));
        assert_ne!(a, config_hash(&serde_json::json!({"x": 2})));
        assert_eq!(a.len(), 16);
    }
}
