//! Binary checkpoint: magic, version, a JSON header with the model config
//! and training position, then named little-endian tensors in name order.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::{GtrModel, ModelConfig};
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"GTRCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: ModelConfig,
    pub seed: u64,
    /// Completed epochs.
    pub epoch: usize,
    pub step: u64,
    #[serde(default)]
    pub best_metric: Option<f64>,
    /// Anything the trainer wants to carry (learning rates, run config).
    #[serde(default)]
    pub extra: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub dims: Vec<usize>,
    pub dtype: DType,
    /// Raw values widened to f64 for storage-independent comparison.
    pub values: Vec<f64>,
}

impl StoredTensor {
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        Ok(Self {
            dims: t.dims().to_vec(),
            dtype: t.dtype(),
            values: t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?,
        })
    }

    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_vec(self.values.clone(), self.dims.as_slice(), device)?.to_dtype(self.dtype)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: BTreeMap<String, StoredTensor>,
}

fn dtype_code(d: DType) -> Result<u8> {
    match d {
        DType::F32 => Ok(0),
        DType::F64 => Ok(1),
        other => Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    }
}

fn read_exact<const N: usize>(r: &mut impl Read) -> std::io::Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

impl Checkpoint {
    /// Snapshot of the model parameters plus extra named tensors (optimizer state).
    pub fn capture(model: &GtrModel, meta: CheckpointMeta, extra: &BTreeMap<String, Tensor>) -> Result<Self> {
        let mut tensors = BTreeMap::new();
        for (name, var) in model.params().iter() {
            tensors.insert(name.clone(), StoredTensor::from_tensor(var.as_tensor())?);
        }
        for (name, t) in extra {
            if tensors.contains_key(name) {
                return Err(Error::Checkpoint(format!("duplicate tensor name {name}")));
            }
            tensors.insert(name.clone(), StoredTensor::from_tensor(t)?);
        }
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let io = |e| Error::io(path, e);
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let header = serde_json::to_vec(&self.meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
        buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
        buf.extend_from_slice(&header);
        buf.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, t) in &self.tensors {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.push(dtype_code(t.dtype)?);
            buf.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
            for &d in &t.dims {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match t.dtype {
                DType::F32 => t.values.iter().for_each(|&v| buf.extend_from_slice(&(v as f32).to_le_bytes())),
                _ => t.values.iter().for_each(|&v| buf.extend_from_slice(&v.to_le_bytes())),
            }
        }
        // Write to a sibling file first so an interrupted save never leaves a torn checkpoint.
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp).map_err(io)?;
        f.write_all(&buf).map_err(io)?;
        f.sync_all().map_err(io)?;
        std::fs::rename(&tmp, path).map_err(io)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let truncated = |_| Error::Checkpoint("file is truncated".into());
        let mut r = bytes;
        let magic: [u8; 8] = read_exact(&mut r).map_err(truncated)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(read_exact(&mut r).map_err(truncated)?);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version} is not supported (expected {CHECKPOINT_VERSION})"
            )));
        }
        let header_len = u64::from_le_bytes(read_exact(&mut r).map_err(truncated)?) as usize;
        if header_len > r.len() {
            return Err(Error::Checkpoint("file is truncated".into()));
        }
        let meta: CheckpointMeta =
            serde_json::from_slice(&r[..header_len]).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        r = &r[header_len..];
        let count = u64::from_le_bytes(read_exact(&mut r).map_err(truncated)?);
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = u32::from_le_bytes(read_exact(&mut r).map_err(truncated)?) as usize;
            if name_len > r.len() {
                return Err(Error::Checkpoint("file is truncated".into()));
            }
            let name = String::from_utf8(r[..name_len].to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            r = &r[name_len..];
            let [code] = read_exact::<1>(&mut r).map_err(truncated)?;
            let (dtype, width) = match code {
                0 => (DType::F32, 4),
                1 => (DType::F64, 8),
                c => return Err(Error::Checkpoint(format!("unknown dtype code {c} for {name}"))),
            };
            let ndim = u32::from_le_bytes(read_exact(&mut r).map_err(truncated)?) as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(u64::from_le_bytes(read_exact(&mut r).map_err(truncated)?) as usize);
            }
            let n: usize = dims.iter().product();
            if n.checked_mul(width).is_none_or(|len| len > r.len()) {
                return Err(Error::Checkpoint("file is truncated".into()));
            }
            let values = r[..n * width]
                .chunks_exact(width)
                .map(|c| match width {
                    4 => f32::from_le_bytes(c.try_into().unwrap()) as f64,
                    _ => f64::from_le_bytes(c.try_into().unwrap()),
                })
                .collect();
            r = &r[n * width..];
            tensors.insert(name, StoredTensor { dims, dtype, values });
        }
        if !r.is_empty() {
            return Err(Error::Checkpoint("trailing bytes after the last tensor".into()));
        }
        Ok(Self { meta, tensors })
    }

    /// Builds a model from the stored config and loads its weights.
    pub fn build_model(&self, dtype: DType) -> Result<GtrModel> {
        let model = GtrModel::new(self.meta.config.clone(), self.meta.seed, dtype)?;
        self.restore_into(&model)?;
        Ok(model)
    }

    /// Copies weights into an existing model after checking the configs agree.
    pub fn restore_into(&self, model: &GtrModel) -> Result<()> {
        let diff = self.meta.config.diff(model.config());
        if !diff.is_empty() {
            return Err(Error::Checkpoint(format!(
                "model configuration mismatch: {}",
                diff.join(", ")
            )));
        }
        for (name, _) in model.params().iter() {
            let stored = self
                .tensors
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            model.params().assign(name, &stored.to_tensor(model.device())?)?;
        }
        Ok(())
    }

    /// Extra tensors whose names start with `prefix`, with the prefix stripped.
    pub fn extra_with_prefix(&self, prefix: &str, device: &Device) -> Result<BTreeMap<String, Tensor>> {
        self.tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(prefix).map(|rest| (rest.to_string(), v)))
            .map(|(k, v)| Ok((k, v.to_tensor(device)?)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::tiny_config;

    fn meta(config: ModelConfig) -> CheckpointMeta {
        CheckpointMeta {
            config,
            seed: 7,
            epoch: 3,
            step: 42,
            best_metric: Some(0.5),
            extra: serde_json::json!({"lr": 1e-4}),
        }
    }

    #[test]
    fn round_trip_restores_bit_identical_weights() {
        let cfg = tiny_config();
        let a = GtrModel::new(cfg.clone(), 7, DType::F32).unwrap();
        let mut extra = BTreeMap::new();
        extra.insert("optim/m/x".to_string(), Tensor::new(&[1.5f32, -2.0], &Device::Cpu).unwrap());
        let ck = Checkpoint::capture(&a, meta(cfg.clone()), &extra).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);

        let b = GtrModel::new(cfg, 99, DType::F32).unwrap();
        back.restore_into(&b).unwrap();
        for ((n1, v1), (n2, v2)) in a.params().iter().zip(b.params().iter()) {
            assert_eq!(n1, n2);
            let x = v1.as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap();
            let y = v2.as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap();
            assert_eq!(x, y);
        }
        let m = back.extra_with_prefix("optim/m/", &Device::Cpu).unwrap();
        assert_eq!(m["x"].to_vec1::<f32>().unwrap(), vec![1.5, -2.0]);
    }

    #[test]
    fn config_mismatch_names_the_field() {
        let cfg = tiny_config();
        let a = GtrModel::new(cfg.clone(), 7, DType::F32).unwrap();
        let ck = Checkpoint::capture(&a, meta(cfg.clone()), &BTreeMap::new()).unwrap();
        let other = GtrModel::new(ModelConfig { num_queries: 5, ..cfg }, 7, DType::F32).unwrap();
        let err = ck.restore_into(&other).unwrap_err().to_string();
        assert!(err.contains("num_queries"), "{err}");
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let cfg = tiny_config();
        let a = GtrModel::new(cfg.clone(), 7, DType::F32).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        Checkpoint::capture(&a, meta(cfg), &BTreeMap::new()).unwrap().save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(Checkpoint::from_bytes(b"hello world, not a checkpoint").is_err());
        let mut wrong_version = bytes.clone();
        wrong_version[8] = 9;
        let err = Checkpoint::from_bytes(&wrong_version).unwrap_err().to_string();
        assert!(err.contains("version 9"), "{err}");
    }
}
