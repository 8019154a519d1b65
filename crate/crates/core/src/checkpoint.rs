//! Versioned binary checkpoints.
//!
//! All integers are little-endian `u32`, strings are UTF-8 prefixed by their
//! byte length.
//!
//! ```text
//! magic        8 bytes   "AR2CKPT\n"
//! version      u32       currently 1
//! architecture u32 x 5   input channels, height, width, classes, layers L
//!              u32 x L   conv output widths
//!              u32 x L   conv strides
//! provenance   u32       entry count P, then P x (key string, value string),
//!                        sorted by key
//! parameters   u32       blob count N, then per blob:
//!                          name string, rank u32, rank x u32 dims,
//!                          prod(dims) x f32 values
//! trailer      32 bytes  SHA-256 of every preceding byte
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{Architecture, CamNet, ModelError, WidthConfig};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"AR2CKPT\n";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (this build reads {FORMAT_VERSION})")]
    UnsupportedVersion { found: u32 },
    #[error("checkpoint truncated: needed {needed} bytes at offset {offset}, file has {len}")]
    Truncated {
        offset: usize,
        needed: usize,
        len: usize,
    },
    #[error("checkpoint checksum mismatch (file is corrupted)")]
    ChecksumMismatch,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint describes an invalid model: {0}")]
    Model(#[from] ModelError),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = CheckpointError> = std::result::Result<T, E>;

/// Free-form training record stored alongside the parameters.
pub type Provenance = BTreeMap<String, String>;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: CamNet<f32>,
    pub provenance: Provenance,
}

impl Checkpoint {
    pub fn new(model: CamNet<f32>) -> Self {
        Self {
            model,
            provenance: Provenance::new(),
        }
    }

    pub fn with(mut self, key: &str, value: impl ToString) -> Self {
        self.provenance.insert(key.to_string(), value.to_string());
        self
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, FORMAT_VERSION);
        let arch = self.model.arch();
        for v in [
            arch.input_channels,
            arch.input_height,
            arch.input_width,
            arch.classes,
            arch.width.widths.len(),
        ] {
            put_u32(&mut out, v as u32);
        }
        for &w in arch.width.widths.iter().chain(&arch.width.strides) {
            put_u32(&mut out, w as u32);
        }
        put_u32(&mut out, self.provenance.len() as u32);
        for (k, v) in &self.provenance {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        let params: Vec<_> = self.model.named_params().collect();
        put_u32(&mut out, params.len() as u32);
        for (name, t) in params {
            put_str(&mut out, name);
            put_u32(&mut out, t.shape().len() as u32);
            for &d in t.shape() {
                put_u32(&mut out, d as u32);
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len()).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::UnsupportedVersion { found: version });
        }
        let [channels, height, width, classes, layers] = [r.u32()?, r.u32()?, r.u32()?, r.u32()?, r.u32()?];
        if layers > 1024 {
            return Err(CheckpointError::Malformed(format!("{layers} layers")));
        }
        let widths = (0..layers).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
        let strides = (0..layers).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
        let arch = Architecture::new(
            [channels as usize, height as usize, width as usize],
            classes as usize,
            WidthConfig { widths, strides },
        )?;
        let mut provenance = Provenance::new();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            let v = r.string()?;
            provenance.insert(k, v);
        }
        let count = r.u32()?;
        let mut params = Vec::new();
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()?;
            if rank > 8 {
                return Err(CheckpointError::Malformed(format!("{name} has rank {rank}")));
            }
            let dims = (0..rank).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
            let numel = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| CheckpointError::Malformed(format!("{name} is too large")))?;
            let raw = r.take(numel.checked_mul(4).ok_or_else(|| CheckpointError::Malformed("size".into()))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let tensor = Tensor::new(dims, data).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
            params.push((name, tensor));
        }
        let body_len = r.pos;
        let digest = r.take(DIGEST_LEN)?;
        if r.pos != bytes.len() {
            return Err(CheckpointError::Malformed(format!(
                "{} trailing bytes after the checksum",
                bytes.len() - r.pos
            )));
        }
        if Sha256::digest(&bytes[..body_len]).as_slice() != digest {
            return Err(CheckpointError::ChecksumMismatch);
        }
        let model = CamNet::from_params(arch, params)?;
        Ok(Self { model, provenance })
    }

    /// Writes via a temporary sibling file and a rename, so readers never
    /// observe a half-written checkpoint.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".partial");
        std::fs::write(&tmp, self.to_bytes())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// SHA-256 of the serialized bytes, which covers provenance as well as
    /// parameters.
    pub fn file_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}

pub fn save_checkpoint(model: &CamNet<f32>, path: impl AsRef<Path>) -> Result<()> {
    Checkpoint::new(model.clone()).save(path)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<CamNet<f32>> {
    Ok(Checkpoint::load(path)?.model)
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(CheckpointError::Truncated {
                offset: self.pos,
                needed: n,
                len: self.bytes.len(),
            }),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn usize(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.usize()?;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| CheckpointError::Malformed("string is not UTF-8".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_camnet;

    fn sample() -> Checkpoint {
        let model = build_camnet([3, 16, 16], 4, WidthConfig::tiny(), 9).unwrap();
        Checkpoint::new(model).with("seed", 9).with("stage", "vanilla")
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        for ((_, a), (_, b)) in ck.model.named_params().zip(back.model.named_params()) {
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn every_truncation_is_reported_as_such() {
        let bytes = sample().to_bytes();
        for cut in (MAGIC.len()..bytes.len()).step_by(97).chain([bytes.len() - 1]) {
            assert!(
                matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(CheckpointError::Truncated { .. })),
                "cut at {cut}"
            );
        }
    }

    #[test]
    fn distinct_failure_modes() {
        let bytes = sample().to_bytes();
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&magic), Err(CheckpointError::BadMagic)));
        assert!(matches!(Checkpoint::from_bytes(b"AR2"), Err(CheckpointError::BadMagic)));
        let mut version = bytes.clone();
        version[8] = 2;
        assert!(matches!(
            Checkpoint::from_bytes(&version),
            Err(CheckpointError::UnsupportedVersion { found: 2 })
        ));
        let mut flipped = bytes.clone();
        let n = flipped.len();
        flipped[n - 40] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(CheckpointError::ChecksumMismatch)));
        let mut extra = bytes;
        extra.push(0);
        assert!(matches!(Checkpoint::from_bytes(&extra), Err(CheckpointError::Malformed(_))));
    }
}
