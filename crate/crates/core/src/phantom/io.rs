//! Flat binary storage for volumes and label maps.
//!
//! Layout (all integers and floats little-endian):
//!
//! | offset | size | field                                        |
//! |-------:|-----:|----------------------------------------------|
//! | 0      | 12   | magic `SSLBENCH.VOX`                         |
//! | 12     | 4    | format version (`u32`, currently 1)          |
//! | 16     | 1    | dtype: 0 = `f64` intensities, 1 = `u8` labels|
//! | 17     | 1    | modality: 0 = A, 1 = B, 255 = unspecified    |
//! | 18     | 2    | reserved, zero                               |
//! | 20     | 12   | shape (z, y, x) as 3 × `u32`                 |
//! | 32     | 24   | spacing in mm as 3 × `f64`                   |
//! | 56     | 4    | id length `n` (`u32`), then `n` UTF-8 bytes  |
//!
//! Label files continue with a class count (`u32`) and that many
//! length-prefixed UTF-8 class names. The voxel payload follows, row-major
//! with x fastest.

use std::fs;
use std::path::Path;

use super::{LabelMap, Modality, PhantomError, Volume, DEFAULT_SPACING};

pub const MAGIC: &[u8; 12] = b"SSLBENCH.VOX";
pub const VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;
const DTYPE_U8: u8 = 1;
const NO_MODALITY: u8 = 255;

struct Header {
    dtype: u8,
    modality: u8,
    shape: [usize; 3],
    spacing: [f64; 3],
    id: String,
}

fn write_header(buf: &mut Vec<u8>, h: &Header) {
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.push(h.dtype);
    buf.push(h.modality);
    buf.extend_from_slice(&[0, 0]);
    for s in h.shape {
        buf.extend_from_slice(&(s as u32).to_le_bytes());
    }
    for s in h.spacing {
        buf.extend_from_slice(&s.to_le_bytes());
    }
    write_str(buf, &h.id);
}

fn write_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: impl Into<String>) -> PhantomError {
        PhantomError::Format { path: self.path.display().to_string(), msg: msg.into() }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], PhantomError> {
        if self.pos + n > self.bytes.len() {
            return Err(self.err(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, PhantomError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, PhantomError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String, PhantomError> {
        let n = self.u32()? as usize;
        let raw = self.take(n)?.to_vec();
        String::from_utf8(raw).map_err(|_| self.err("string is not UTF-8"))
    }

    fn header(&mut self) -> Result<Header, PhantomError> {
        if self.take(12)? != MAGIC {
            return Err(self.err("bad magic"));
        }
        let version = self.u32()?;
        if version != VERSION {
            return Err(self.err(format!("unsupported version {version}")));
        }
        let dtype = self.take(1)?[0];
        let modality = self.take(1)?[0];
        self.take(2)?;
        let shape = [self.u32()? as usize, self.u32()? as usize, self.u32()? as usize];
        let spacing = [self.f64()?, self.f64()?, self.f64()?];
        let id = self.string()?;
        Ok(Header { dtype, modality, shape, spacing, id })
    }
}

pub fn encode_volume(v: &Volume) -> Vec<u8> {
    let mut buf = Vec::with_capacity(64 + v.len() * 8);
    write_header(
        &mut buf,
        &Header {
            dtype: DTYPE_F64,
            modality: v.modality().code(),
            shape: v.shape(),
            spacing: v.spacing(),
            id: v.id().to_string(),
        },
    );
    for x in v.voxels() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    buf
}

pub fn decode_volume(bytes: &[u8], path: &Path) -> Result<Volume, PhantomError> {
    let mut r = Reader { bytes, pos: 0, path };
    let h = r.header()?;
    if h.dtype != DTYPE_F64 {
        return Err(r.err("not an intensity volume"));
    }
    let modality = Modality::from_code(h.modality).ok_or_else(|| r.err("missing modality"))?;
    let n: usize = h.shape.iter().product();
    let payload = r.take(n * 8)?;
    let voxels = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Volume::new(h.id, modality, h.shape, h.spacing, voxels)
}

pub fn encode_labels(l: &LabelMap, id: &str) -> Vec<u8> {
    let mut buf = Vec::with_capacity(128 + l.labels().len());
    write_header(
        &mut buf,
        &Header { dtype: DTYPE_U8, modality: NO_MODALITY, shape: l.shape(), spacing: DEFAULT_SPACING, id: id.to_string() },
    );
    buf.extend_from_slice(&(l.class_names().len() as u32).to_le_bytes());
    for name in l.class_names() {
        write_str(&mut buf, name);
    }
    buf.extend_from_slice(l.labels());
    buf
}

pub fn decode_labels(bytes: &[u8], path: &Path) -> Result<LabelMap, PhantomError> {
    let mut r = Reader { bytes, pos: 0, path };
    let h = r.header()?;
    if h.dtype != DTYPE_U8 {
        return Err(r.err("not a label map"));
    }
    let classes = r.u32()? as usize;
    let names = (0..classes).map(|_| r.string()).collect::<Result<Vec<_>, _>>()?;
    let n: usize = h.shape.iter().product();
    let labels = r.take(n)?.to_vec();
    LabelMap::new(h.shape, labels, names)
}

pub fn write_volume(path: &Path, v: &Volume) -> Result<(), PhantomError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, encode_volume(v))?;
    Ok(())
}

pub fn read_volume(path: &Path) -> Result<Volume, PhantomError> {
    decode_volume(&fs::read(path)?, path)
}

pub fn write_labels(path: &Path, l: &LabelMap, id: &str) -> Result<(), PhantomError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, encode_labels(l, id))?;
    Ok(())
}

pub fn read_labels(path: &Path) -> Result<LabelMap, PhantomError> {
    decode_labels(&fs::read(path)?, path)
}
