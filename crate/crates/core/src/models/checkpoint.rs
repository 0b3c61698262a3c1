//! Bit-exact checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "BTOL1" | u32 version | u32 meta_len | meta JSON | u32 tensor_count
//! per tensor: u16 name_len | name | u8 ndim | ndim × u32 dims | f32 data
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ArchSpec, ModelError, Network};
use crate::netcore::{Module, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"BTOL1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Metadata {
    arch: ArchSpec,
    seed: u64,
    steps: u64,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], ModelError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            ModelError::Format(format!("truncated file while reading {what} at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8, ModelError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16, ModelError> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32, ModelError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

impl Network {
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let meta = Metadata { arch: self.arch.clone(), seed: self.seed, steps: self.steps };
        let meta = serde_json::to_vec(&meta).expect("metadata serializes");
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, p) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(p.value.shape().len() as u8);
            for &d in p.value.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            out.extend_from_slice(&p.value.to_le_bytes());
        }
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Network, ModelError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(5, "magic")? != CHECKPOINT_MAGIC {
            return Err(ModelError::Format("bad magic, not a BTOL1 checkpoint".into()));
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(ModelError::Format(format!(
                "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let meta_len = r.u32("metadata length")? as usize;
        let meta: Metadata = serde_json::from_slice(r.take(meta_len, "metadata")?)
            .map_err(|e| ModelError::Format(format!("metadata: {e}")))?;
        let mut net = Network::build(meta.arch, meta.seed)?;
        net.steps = meta.steps;

        let count = r.u32("tensor count")? as usize;
        if count != net.params.len() {
            return Err(ModelError::Format(format!(
                "checkpoint holds {count} tensors, architecture needs {}",
                net.params.len()
            )));
        }
        for _ in 0..count {
            let name_len = usize::from(r.u16("tensor name length")?);
            let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
                .map_err(|_| ModelError::Format("tensor name is not UTF-8".into()))?
                .to_string();
            let ndim = usize::from(r.u8("ndim")?);
            let dims = (0..ndim).map(|_| r.u32("dims").map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let n: usize = dims.iter().product();
            let data = r.take(n * 4, "tensor data")?;
            let param = net
                .params_mut()
                .get_mut(&name)
                .ok_or_else(|| ModelError::Format(format!("unexpected tensor `{name}`")))?;
            if param.value.shape() != dims.as_slice() {
                return Err(ModelError::Format(format!(
                    "tensor `{name}` has shape {dims:?}, architecture expects {:?}",
                    param.value.shape()
                )));
            }
            param.value = Tensor::from_le_bytes(dims, data)?;
        }
        if r.pos != bytes.len() {
            return Err(ModelError::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(net)
    }
}

pub fn save_checkpoint(net: &Network, path: impl AsRef<Path>) -> Result<(), ModelError> {
    std::fs::write(path, net.to_checkpoint_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Network, ModelError> {
    Network::from_checkpoint_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_adapter, build_segnet, AdapterSpec, SegArch, SegNetSpec};

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        for arch in [SegArch::TinyA, SegArch::TinyB] {
            let mut net = build_segnet(SegNetSpec { arch, ..Default::default() }, 17).unwrap();
            net.steps = 123;
            let p1 = dir.path().join("a.ckpt");
            let p2 = dir.path().join("b.ckpt");
            save_checkpoint(&net, &p1).unwrap();
            let loaded = load_checkpoint(&p1).unwrap();
            assert!(loaded.params().bits_eq(net.params()));
            assert_eq!(loaded.steps, 123);
            save_checkpoint(&loaded, &p2).unwrap();
            assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        }
    }

    #[test]
    fn header_layout() {
        let net = build_adapter(AdapterSpec::default(), 0).unwrap();
        let bytes = net.to_checkpoint_bytes();
        assert_eq!(&bytes[..5], b"BTOL1");
        assert_eq!(u32::from_le_bytes(bytes[5..9].try_into().unwrap()), 1);
        let meta_len = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
        let meta: serde_json::Value = serde_json::from_slice(&bytes[13..13 + meta_len]).unwrap();
        assert_eq!(meta["arch"]["kind"], "adapter");
        assert_eq!(meta["arch"]["k"], 3);
        let count = u32::from_le_bytes(bytes[13 + meta_len..17 + meta_len].try_into().unwrap());
        assert_eq!(count, 6);
    }

    #[test]
    fn corrupted_magic_is_a_format_error() {
        let net = build_adapter(AdapterSpec::default(), 0).unwrap();
        let mut bytes = net.to_checkpoint_bytes();
        bytes[0] = b'X';
        assert!(matches!(Network::from_checkpoint_bytes(&bytes), Err(ModelError::Format(m)) if m.contains("magic")));
    }

    #[test]
    fn version_mismatch_and_truncation_are_errors() {
        let net = build_adapter(AdapterSpec::default(), 0).unwrap();
        let bytes = net.to_checkpoint_bytes();
        let mut v2 = bytes.clone();
        v2[5] = 2;
        assert!(matches!(Network::from_checkpoint_bytes(&v2), Err(ModelError::Format(m)) if m.contains("version")));
        for cut in [3, 12, 40, bytes.len() - 1] {
            assert!(matches!(
                Network::from_checkpoint_bytes(&bytes[..cut]),
                Err(ModelError::Format(m)) if m.contains("truncated")
            ));
        }
    }

    #[test]
    fn shape_mismatch_with_spec_is_an_error() {
        let net = build_adapter(AdapterSpec { hidden_channels: 4, ..Default::default() }, 0).unwrap();
        let bytes = net.to_checkpoint_bytes();
        // Rewrite the metadata to claim a wider adapter than the stored tensors.
        let meta_len = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
        let meta = std::str::from_utf8(&bytes[13..13 + meta_len]).unwrap().replace("\"hidden_channels\":4", "\"hidden_channels\":5");
        let mut forged = bytes[..9].to_vec();
        forged.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        forged.extend_from_slice(meta.as_bytes());
        forged.extend_from_slice(&bytes[13 + meta_len..]);
        assert!(matches!(Network::from_checkpoint_bytes(&forged), Err(ModelError::Format(m)) if m.contains("shape")));
    }

    #[test]
    fn adapter_saved_at_init_is_still_identity() {
        let net = build_adapter(AdapterSpec::default(), 5).unwrap();
        let loaded = Network::from_checkpoint_bytes(&net.to_checkpoint_bytes()).unwrap();
        let x = Tensor::from_fn(&[1, 1, 8, 8], |i| i as f32 / 64.0);
        assert!(loaded.predict(&x).unwrap().bits_eq(&x));
    }
}
