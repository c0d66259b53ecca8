//! Weight container: magic, format version, a length-prefixed JSON header and
//! the raw little-endian `f64` payload of every named array in header order.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::nn::Conv2d;
use super::toy::{layer_specs, ToyDetector};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"OOBTOYD\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    architecture_hash: String,
    class_names: Vec<String>,
    input_size: [usize; 2],
    candidate_floor: f64,
    arrays: Vec<ArrayEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
}

/// Hex SHA-256 of the layer table for a detector with `class_count` classes.
pub fn architecture_hash(class_count: usize) -> String {
    let mut hasher = Sha256::new();
    hasher.update(b"toy-detector/silu/anchor-free/v1\n");
    for (name, cin, cout, k, s, p) in layer_specs(class_count) {
        hasher.update(format!("{name}:{cin}->{cout}:k{k}s{s}p{p}\n").as_bytes());
    }
    hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

impl ToyDetector {
    pub fn save(&self, path: &Path) -> Result<()> {
        let specs = layer_specs(self.class_names().len());
        let mut arrays = Vec::new();
        let mut payload = Vec::new();
        for ((name, ..), layer) in specs.iter().zip(&self.layers) {
            arrays.push(ArrayEntry {
                name: format!("{name}.weight"),
                shape: layer.weight.shape().to_vec(),
            });
            arrays.push(ArrayEntry {
                name: format!("{name}.bias"),
                shape: layer.bias.shape().to_vec(),
            });
            for v in layer.weight.iter().chain(layer.bias.iter()) {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let (h, w) = super::DetectorContract::input_size(self);
        let header = Header {
            architecture_hash: architecture_hash(self.class_names().len()),
            class_names: self.class_names().to_vec(),
            input_size: [h, w],
            candidate_floor: self.candidate_floor,
            arrays,
        };
        let header = serde_json::to_vec(&header)?;
        let mut bytes = Vec::with_capacity(20 + header.len() + payload.len());
        bytes.extend_from_slice(CHECKPOINT_MAGIC);
        bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&header);
        bytes.extend_from_slice(&payload);
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |msg: &str| Error::Checkpoint(format!("{}: {msg}", path.display()));
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("not a detector checkpoint"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported format version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let header_end = 20usize.checked_add(header_len).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[20..header_end])?;
        let expected = architecture_hash(header.class_names.len());
        if header.architecture_hash != expected {
            return Err(bad(&format!(
                "architecture hash {} does not match this build ({expected})",
                header.architecture_hash
            )));
        }
        let specs = layer_specs(header.class_names.len());
        if header.arrays.len() != 2 * specs.len() {
            return Err(bad("array table does not match the architecture"));
        }
        let mut cursor = header_end;
        let mut take = |entry: &ArrayEntry, want_name: String, want_shape: &[usize]| -> Result<Vec<f64>> {
            if entry.name != want_name || entry.shape != want_shape {
                return Err(bad(&format!("unexpected array {} {:?}", entry.name, entry.shape)));
            }
            let n: usize = want_shape.iter().product();
            let end = cursor + 8 * n;
            if end > bytes.len() {
                return Err(bad("truncated payload"));
            }
            let values = bytes[cursor..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            cursor = end;
            Ok(values)
        };
        let mut layers = Vec::with_capacity(specs.len());
        for (i, &(name, cin, cout, k, s, p)) in specs.iter().enumerate() {
            let fan_in = cin * k * k;
            let w = take(&header.arrays[2 * i], format!("{name}.weight"), &[cout, fan_in])?;
            let b = take(&header.arrays[2 * i + 1], format!("{name}.bias"), &[cout])?;
            layers.push(Conv2d {
                weight: Array2::from_shape_vec((cout, fan_in), w).expect("shape checked"),
                bias: Array1::from_vec(b),
                in_ch: cin,
                out_ch: cout,
                kernel: k,
                stride: s,
                pad: p,
            });
        }
        if cursor != bytes.len() {
            return Err(bad("trailing bytes after payload"));
        }
        let [h, w] = header.input_size;
        ToyDetector::new(header.class_names.clone(), (h, w), 0)?;
        let mut det = ToyDetector::from_parts(layers, header.class_names, (h, w));
        det.candidate_floor = header.candidate_floor;
        Ok(det)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("c{i}")).collect()
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("det.bin");
        let det = ToyDetector::new(names(4), (64, 48), 3).unwrap();
        det.save(&path).unwrap();
        assert_eq!(ToyDetector::load(&path).unwrap(), det);
    }

    #[test]
    fn refuses_mismatched_architecture() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("det.bin");
        ToyDetector::new(names(2), (32, 32), 3).unwrap().save(&path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        let text = String::from_utf8_lossy(&bytes).into_owned();
        let pos = text.find(&architecture_hash(2)).unwrap();
        bytes[pos] = if bytes[pos] == b'0' { b'1' } else { b'0' };
        fs::write(&path, &bytes).unwrap();
        match ToyDetector::load(&path) {
            Err(Error::Checkpoint(msg)) => assert!(msg.contains("architecture hash")),
            other => panic!("expected checkpoint error, got {other:?}"),
        }
    }

    #[test]
    fn refuses_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.bin");
        fs::write(&path, b"definitely not weights").unwrap();
        assert!(matches!(ToyDetector::load(&path), Err(Error::Checkpoint(_))));
        assert_ne!(architecture_hash(2), architecture_hash(3));
    }
}
