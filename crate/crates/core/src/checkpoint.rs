//! Binary checkpoint container.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic "GFUSECKP" | u32 version
//! u64 len | NetworkConfig as TOML (len bytes)
//! u64 epoch | u64 step
//! u32 tensor count, then per tensor: u32 name len | name | u64 rows | u64 cols | f64 data
//! u8 has_optimizer, then if 1: u64 t | m tensors | v tensors (same order and shapes)
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::layers::ParamTensors;
use crate::net::{NetworkConfig, NetworkParams};
use crate::optim::OptimizerState;
use crate::tensor::Matrix;

const MAGIC: &[u8; 8] = b"GFUSECKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: NetworkConfig,
    pub params: NetworkParams,
    pub optimizer: Option<OptimizerState>,
    /// Completed epochs.
    pub epoch: u64,
    /// Completed optimizer steps.
    pub step: u64,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.params.check_shapes(&self.config)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let cfg = toml::to_string(&self.config).map_err(|e| Error::Checkpoint(format!("config serialization: {e}")))?;
        out.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
        out.extend_from_slice(cfg.as_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());

        let tensors = self.params.named_tensors();
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, t) in &tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            write_matrix(&mut out, t);
        }
        match &self.optimizer {
            None => out.push(0),
            Some(st) => {
                if st.m.len() != tensors.len() || st.v.len() != tensors.len() {
                    return Err(Error::Checkpoint("optimizer state does not mirror the parameters".into()));
                }
                out.push(1);
                out.extend_from_slice(&st.t.to_le_bytes());
                for t in st.m.iter().chain(&st.v) {
                    write_matrix(&mut out, t);
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let cfg_len = r.u64()? as usize;
        let cfg_text = std::str::from_utf8(r.take(cfg_len)?)
            .map_err(|_| Error::Checkpoint("config block is not UTF-8".into()))?;
        let config: NetworkConfig =
            toml::from_str(cfg_text).map_err(|e| Error::Checkpoint(format!("config block: {e}")))?;
        config.validate()?;
        let epoch = r.u64()?;
        let step = r.u64()?;

        let mut params = NetworkParams::zeros(&config);
        let count = r.u32()? as usize;
        {
            let mut slots = params.named_tensors_mut();
            if count != slots.len() {
                return Err(Error::Shape(format!(
                    "checkpoint holds {count} tensors, configuration expects {}",
                    slots.len()
                )));
            }
            for (expected, slot) in slots.iter_mut() {
                let len = r.u32()? as usize;
                let name = std::str::from_utf8(r.take(len)?)
                    .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
                if name != expected {
                    return Err(Error::Checkpoint(format!("expected tensor {expected}, found {name}")));
                }
                **slot = r.matrix_shaped(slot.shape(), name)?;
            }
        }
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let t = r.u64()?;
                let shapes: Vec<_> = params.named_tensors().iter().map(|(n, m)| (n.clone(), m.shape())).collect();
                let read_all = |r: &mut Reader| -> Result<Vec<Matrix>> {
                    shapes.iter().map(|(n, s)| r.matrix_shaped(*s, n)).collect()
                };
                let m = read_all(&mut r)?;
                let v = read_all(&mut r)?;
                Some(OptimizerState { m, v, t })
            }
            other => return Err(Error::Checkpoint(format!("bad optimizer flag {other}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            config,
            params,
            optimizer,
            epoch,
            step,
        })
    }

    /// Writes to a sibling temporary file and renames it over `path`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let mut tmp_name = path.file_name().map(|s| s.to_os_string()).unwrap_or_default();
        tmp_name.push(".tmp");
        let tmp = path.with_file_name(tmp_name);
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        drop(f);
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Loads and checks that the stored architecture equals `expected`.
    pub fn load_expecting(path: impl AsRef<Path>, expected: &NetworkConfig) -> Result<Self> {
        let ck = Self::load(path)?;
        if ck.config.feature_dim != expected.feature_dim || ck.config.patch_size != expected.patch_size {
            return Err(Error::Shape(format!(
                "checkpoint has D={} patch={}, expected D={} patch={}",
                ck.config.feature_dim, ck.config.patch_size, expected.feature_dim, expected.patch_size
            )));
        }
        if &ck.config != expected {
            return Err(Error::Checkpoint("checkpoint architecture differs from the requested one".into()));
        }
        Ok(ck)
    }
}

fn write_matrix(out: &mut Vec<u8>, m: &Matrix) {
    out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
    for v in m.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Checkpoint(format!("truncated at byte {}", self.pos))),
        }
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn matrix_shaped(&mut self, shape: (usize, usize), name: &str) -> Result<Matrix> {
        let rows = self.u64()? as usize;
        let cols = self.u64()? as usize;
        if (rows, cols) != shape {
            return Err(Error::Shape(format!(
                "tensor {name} stored as {rows}x{cols}, expected {}x{}",
                shape.0, shape.1
            )));
        }
        let raw = self.take(rows * cols * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Matrix::from_vec(rows, cols, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> NetworkConfig {
        NetworkConfig {
            feature_dim: 2,
            ffn_ratio: 1,
            ..NetworkConfig::default()
        }
    }

    fn sample() -> Checkpoint {
        let cfg = small_cfg();
        let params = NetworkParams::init(&cfg, 3).unwrap();
        let mut opt = OptimizerState::new(&params);
        opt.t = 7;
        opt.m[0].fill(0.25);
        opt.v[1].fill(-1.5);
        Checkpoint {
            config: cfg,
            params,
            optimizer: Some(opt),
            epoch: 2,
            step: 9,
        }
    }

    #[test]
    fn round_trip_is_lossless_and_idempotent() {
        let ck = sample();
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);

        let mut plain = ck.clone();
        plain.optimizer = None;
        let back = Checkpoint::from_bytes(&plain.to_bytes().unwrap()).unwrap();
        assert_eq!(back, plain);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = sample().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checkpoint(_))));

        let mut ver = bytes.clone();
        ver[8..12].copy_from_slice(&2u32.to_le_bytes());
        let err = Checkpoint::from_bytes(&ver).unwrap_err().to_string();
        assert!(err.contains("version 2"), "{err}");

        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(Checkpoint::from_bytes(&longer).is_err());
    }

    #[test]
    fn different_feature_dim_is_a_shape_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        sample().save(&path).unwrap();
        assert!(!dir.path().join("ck.bin.tmp").exists());
        let other = NetworkConfig {
            feature_dim: 4,
            ..small_cfg()
        };
        assert!(matches!(Checkpoint::load_expecting(&path, &other), Err(Error::Shape(_))));
        assert!(Checkpoint::load_expecting(&path, &small_cfg()).is_ok());
    }

    #[test]
    fn params_must_match_config() {
        let mut ck = sample();
        ck.config.feature_dim = 3;
        assert!(matches!(ck.to_bytes(), Err(Error::Shape(_))));
    }
}
