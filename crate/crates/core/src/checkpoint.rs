//! Binary model files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "EFFCNET1"            8-byte magic
//! version               u32
//! header length         u64
//! header                UTF-8 TOML: [network] and [meta] tables
//! per tensor:           u16 name length, name, u64 element count, f32 values
//! checksum              u64 CRC-64/XZ of every preceding byte
//! ```
//!
//! Tensors appear in model order: trainable parameters, then the running
//! mean and variance of each batch-norm layer.

use std::path::Path;

use crc::{Crc, CRC_64_XZ};
use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::model::{Model, NetworkConfig};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"EFFCNET1";
pub const VERSION: u32 = 1;

const CRC: Crc<u64> = Crc::<u64>::new(&CRC_64_XZ);

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CheckpointMeta {
    pub dataset: String,
    pub epoch: usize,
    pub top1: f64,
    pub top5: f64,
    pub seed: u64,
    pub seconds: f64,
    /// Test images per class used for the recorded metrics; 0 means the full split.
    pub test_per_class: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    network: NetworkConfig,
    meta: CheckpointMeta,
}

pub struct Loaded {
    pub model: Model<f32>,
    pub meta: CheckpointMeta,
    /// False when the stored checksum disagrees with the file contents.
    pub checksum_ok: bool,
}

fn tensors(model: &Model<f32>) -> Vec<(String, &Tensor<f32>)> {
    let mut out: Vec<(String, &Tensor<f32>)> = model.params().iter().map(|p| (p.name.clone(), &p.value)).collect();
    for (name, s) in model.running_stats() {
        out.push((format!("{name}.running_mean"), &s.mean));
        out.push((format!("{name}.running_var"), &s.var));
    }
    out
}

pub fn encode(model: &Model<f32>, meta: &CheckpointMeta) -> Vec<u8> {
    let header = toml::to_string(&Header { network: model.config().clone(), meta: meta.clone() }).expect("header serializes");
    let mut out = Vec::with_capacity(32 + header.len() + 4 * model.param_count() * 11 / 10);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for (name, t) in tensors(model) {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.numel() as u64).to_le_bytes());
        for v in t.values().iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let sum = CRC.checksum(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            bail!(Format, "file truncated while reading {} at byte {}", what, self.pos);
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Loaded> {
    if bytes.len() < 8 + 4 + 8 + 8 {
        bail!(Format, "file too short for a checkpoint ({} bytes)", bytes.len());
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 8);
    let mut r = Reader { bytes: body, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        bail!(Format, "bad magic, not a checkpoint file");
    }
    let version = r.u32("version")?;
    if version != VERSION {
        bail!(Format, "unsupported checkpoint version {}", version);
    }
    let header_len = r.u64("header length")?;
    let header_len = usize::try_from(header_len).map_err(|_| Error::Format("header length overflows".into()))?;
    let header = std::str::from_utf8(r.take(header_len, "header")?).map_err(|_| Error::Format("header is not UTF-8".into()))?;
    let header: Header = toml::from_str(header).map_err(|e| Error::Format(format!("bad header: {e}")))?;
    header.network.validate().map_err(|e| Error::Format(format!("bad network in header: {e}")))?;

    let mut model = Model::<f32>::new(header.network, 0).map_err(|e| Error::Format(e.to_string()))?;
    let mut slots: Vec<(String, Vec<usize>)> = tensors(&model).into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
    let mut values = Vec::with_capacity(slots.len());
    for (expected, shape) in slots.drain(..) {
        let len = r.u16("tensor name length")? as usize;
        let name = r.take(len, "tensor name")?;
        if name != expected.as_bytes() {
            bail!(Format, "expected tensor '{}', found '{}'", expected, String::from_utf8_lossy(name));
        }
        let count = r.u64("element count")? as usize;
        let numel: usize = shape.iter().product();
        if count != numel {
            bail!(Format, "tensor '{}' has {} elements, expected {}", expected, count, numel);
        }
        let raw = r.take(count.checked_mul(4).ok_or_else(|| Error::Format("element count overflows".into()))?, "tensor data")?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        values.push(Tensor::from_vec(&shape, data)?);
    }
    if r.pos != body.len() {
        bail!(Format, "{} unexpected bytes after the last tensor", body.len() - r.pos);
    }

    let mut values = values.into_iter();
    for p in model.params_mut() {
        p.value = values.next().expect("one tensor per slot");
    }
    for (_, s) in model.running_stats_mut() {
        s.mean = values.next().expect("one tensor per slot");
        s.var = values.next().expect("one tensor per slot");
    }

    let stored = u64::from_le_bytes(trailer.try_into().unwrap());
    let checksum_ok = stored == CRC.checksum(body);
    if !checksum_ok {
        log::warn!("checkpoint checksum mismatch: the file is corrupted");
    }
    Ok(Loaded { model, meta: header.meta, checksum_ok })
}

pub fn save_checkpoint(model: &Model<f32>, meta: &CheckpointMeta, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode(model, meta))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Loaded> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Mode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> Model<f32> {
        let mut m =
            Model::new(NetworkConfig { stages: vec![2], base_growth: 4, input_size: 8, ..NetworkConfig::effcnet_cifar(10) }, 1).unwrap();
        let x = Tensor::from_vec(&[2, 3, 8, 8], (0..384).map(|i| (i as f32 * 0.37).sin()).collect()).unwrap();
        m.forward(&x, Mode::Train, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        m
    }

    fn meta() -> CheckpointMeta {
        CheckpointMeta { dataset: "cifar10".into(), epoch: 3, top1: 0.4125, top5: 0.875, seed: 7, seconds: 1.5, test_per_class: 20 }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = small();
        let bytes = encode(&m, &meta());
        let loaded = decode(&bytes).unwrap();
        assert!(loaded.checksum_ok);
        assert_eq!(loaded.meta, meta());
        for (a, b) in m.params().iter().zip(loaded.model.params()) {
            assert_eq!(a.name, b.name);
            assert!(a.value.bit_eq(&b.value));
        }
        for ((_, a), (_, b)) in m.running_stats().iter().zip(loaded.model.running_stats()) {
            assert!(a.mean.bit_eq(&b.mean) && a.var.bit_eq(&b.var));
        }
        assert_eq!(encode(&loaded.model, &loaded.meta), bytes);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&small(), &meta(), &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        save_checkpoint(&loaded.model, &loaded.meta, dir.path().join("again.ckpt")).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(dir.path().join("again.ckpt")).unwrap());
    }

    #[test]
    fn format_errors() {
        let bytes = encode(&small(), &meta());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(matches!(decode(&bad), Err(Error::Format(_))));
        assert!(matches!(decode(&bytes[..bytes.len() - 20]), Err(Error::Format(_))));
        assert!(matches!(decode(&bytes[..10]), Err(Error::Format(_))));
        let mut extra = bytes.clone();
        extra.insert(bytes.len() - 8, 0);
        assert!(matches!(decode(&extra), Err(Error::Format(_))));
    }

    #[test]
    fn name_mismatch_is_rejected() {
        let bytes = encode(&small(), &meta());
        let at = bytes.windows(4).position(|w| w == b"stem").unwrap();
        let mut bad = bytes.clone();
        bad[at] = b'S';
        assert!(matches!(decode(&bad), Err(Error::Format(_))));
    }

    #[test]
    fn corruption_is_detected() {
        let m = small();
        let bytes = encode(&m, &meta());
        let mut bad = bytes.clone();
        let at = bytes.len() - 8 - 40;
        bad[at] ^= 0x40;
        let loaded = decode(&bad).unwrap();
        assert!(!loaded.checksum_ok);
        let changed = m
            .running_stats()
            .iter()
            .zip(loaded.model.running_stats())
            .any(|((_, a), (_, b))| !a.var.bit_eq(&b.var) || !a.mean.bit_eq(&b.mean))
            || m.params().iter().zip(loaded.model.params()).any(|(a, b)| !a.value.bit_eq(&b.value));
        assert!(changed);
    }

    #[test]
    fn reference_model_size() {
        let m = Model::<f32>::new(NetworkConfig::effcnet_cifar(10), 0).unwrap();
        let bytes = encode(&m, &CheckpointMeta::default());
        assert!(bytes.len() >= 4 * m.param_count());
        assert!(bytes.len() <= 2_100_000, "{}", bytes.len());
    }
}
