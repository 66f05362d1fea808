//! Versioned binary checkpoint container.
//!
//! Layout: magic `VSPL`, u32 format version, u64 JSON-header length, the
//! JSON header (config, normalizer, progress counters, tensor directory),
//! then all tensor payloads as little-endian f32, in directory order.

use std::io::{Read, Write};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, VsplitError};
use crate::nn::Adam;
use crate::objective::Normalizer;
use crate::vse::{VseConfig, VseModel};

const MAGIC: &[u8; 4] = b"VSPL";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
    /// Offset into the payload, in f32 elements.
    offset: u64,
    len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    schema_version: u32,
    step: u64,
    epoch: u64,
    best_val_loss: Option<f64>,
    epochs_since_improve: u64,
    config: VseConfig,
    normalizer: Normalizer,
    adam_t: Option<u64>,
    tensors: Vec<TensorMeta>,
}

/// An in-memory checkpoint: everything needed to resume training or run
/// inference.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: VseConfig,
    pub normalizer: Normalizer,
    pub step: u64,
    pub epoch: u64,
    pub best_val_loss: Option<f64>,
    pub epochs_since_improve: u64,
    pub adam_t: Option<u64>,
    /// (name, shape, row-major data) for model parameters and, when training
    /// state is included, Adam moments under `adam.m.*` / `adam.v.*`.
    pub tensors: Vec<(String, Vec<usize>, Vec<f32>)>,
}

impl Checkpoint {
    /// Snapshot a model (and optionally its optimizer) into a checkpoint.
    pub fn from_model(
        model: &VseModel,
        normalizer: &Normalizer,
        step: u64,
        epoch: u64,
        best_val_loss: Option<f64>,
        epochs_since_improve: u64,
        adam: Option<&Adam>,
    ) -> Result<Self> {
        let mut tensors = Vec::new();
        let to_f32 = |t: &Tensor| -> Result<(Vec<usize>, Vec<f32>)> {
            let shape = t.dims().to_vec();
            let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
            Ok((shape, data))
        };
        for (name, var) in model.params() {
            let (shape, data) = to_f32(var.as_tensor())?;
            tensors.push((name, shape, data));
        }
        let mut adam_t = None;
        if let Some(opt) = adam {
            adam_t = Some(opt.t);
            for (name, m, v) in opt.state_tensors() {
                let (shape, data) = to_f32(&m)?;
                tensors.push((format!("adam.m.{name}"), shape, data));
                let (shape, data) = to_f32(&v)?;
                tensors.push((format!("adam.v.{name}"), shape, data));
            }
        }
        Ok(Self {
            config: model.config.clone(),
            normalizer: *normalizer,
            step,
            epoch,
            best_val_loss,
            epochs_since_improve,
            adam_t,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut metas = Vec::with_capacity(self.tensors.len());
        let mut offset = 0u64;
        for (name, shape, data) in &self.tensors {
            let expect: usize = shape.iter().product();
            if expect != data.len() {
                return Err(VsplitError::Invalid(format!(
                    "checkpoint tensor {name}: shape {shape:?} does not match {} values",
                    data.len()
                )));
            }
            metas.push(TensorMeta {
                name: name.clone(),
                shape: shape.clone(),
                offset,
                len: data.len() as u64,
            });
            offset += data.len() as u64;
        }
        let header = Header {
            schema_version: CHECKPOINT_VERSION,
            step: self.step,
            epoch: self.epoch,
            best_val_loss: self.best_val_loss,
            epochs_since_improve: self.epochs_since_improve,
            config: self.config.clone(),
            normalizer: self.normalizer,
            adam_t: self.adam_t,
            tensors: metas,
        };
        let header_json = serde_json::to_vec(&header)?;
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(MAGIC)?;
        f.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        f.write_all(&(header_json.len() as u64).to_le_bytes())?;
        f.write_all(&header_json)?;
        for (_, _, data) in &self.tensors {
            let mut bytes = Vec::with_capacity(data.len() * 4);
            for v in data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            f.write_all(&bytes)?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        f.read_exact(&mut magic)
            .map_err(|_| VsplitError::Config(format!("{}: not a checkpoint file", path.display())))?;
        if &magic != MAGIC {
            return Err(VsplitError::Config(format!(
                "{}: bad checkpoint magic",
                path.display()
            )));
        }
        let mut u32b = [0u8; 4];
        f.read_exact(&mut u32b)?;
        let version = u32::from_le_bytes(u32b);
        if version != CHECKPOINT_VERSION {
            return Err(VsplitError::Config(format!(
                "{}: unsupported checkpoint version {version}",
                path.display()
            )));
        }
        let mut u64b = [0u8; 8];
        f.read_exact(&mut u64b)?;
        let header_len = u64::from_le_bytes(u64b) as usize;
        let mut header_bytes = vec![0u8; header_len];
        f.read_exact(&mut header_bytes)?;
        let header: Header = serde_json::from_slice(&header_bytes)
            .map_err(|e| VsplitError::Config(format!("{}: bad checkpoint header: {e}", path.display())))?;
        header.config.validate()?;
        let mut payload = Vec::new();
        f.read_to_end(&mut payload)?;
        let total: u64 = header.tensors.iter().map(|t| t.len).sum();
        if payload.len() != total as usize * 4 {
            return Err(VsplitError::Config(format!(
                "{}: payload is {} bytes, directory expects {}",
                path.display(),
                payload.len(),
                total * 4
            )));
        }
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for meta in &header.tensors {
            let expect: usize = meta.shape.iter().product();
            if expect != meta.len as usize {
                return Err(VsplitError::Config(format!(
                    "{}: tensor {} shape/len mismatch",
                    path.display(),
                    meta.name
                )));
            }
            let start = meta.offset as usize * 4;
            let end = start + meta.len as usize * 4;
            if end > payload.len() {
                return Err(VsplitError::Config(format!(
                    "{}: tensor {} outside payload",
                    path.display(),
                    meta.name
                )));
            }
            let data: Vec<f32> = payload[start..end]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            tensors.push((meta.name.clone(), meta.shape.clone(), data));
        }
        Ok(Self {
            config: header.config,
            normalizer: header.normalizer,
            step: header.step,
            epoch: header.epoch,
            best_val_loss: header.best_val_loss,
            epochs_since_improve: header.epochs_since_improve,
            adam_t: header.adam_t,
            tensors,
        })
    }

    fn find(&self, name: &str) -> Option<&(String, Vec<usize>, Vec<f32>)> {
        self.tensors.iter().find(|(n, _, _)| n == name)
    }

    /// Rebuild the model from stored parameters.
    pub fn build_model(&self, dtype: DType, dev: &Device) -> Result<VseModel> {
        let model = VseModel::new(&self.config, dtype, dev, 0)?;
        for (name, var) in model.params() {
            let (_, shape, data) = self.find(&name).ok_or_else(|| {
                VsplitError::Config(format!("checkpoint is missing parameter {name}"))
            })?;
            if var.dims() != &shape[..] {
                return Err(VsplitError::Config(format!(
                    "checkpoint parameter {name}: shape {shape:?} vs model {:?}",
                    var.dims()
                )));
            }
            let t = Tensor::from_vec(data.clone(), shape.clone(), dev)?.to_dtype(dtype)?;
            var.set(&t)?;
        }
        Ok(model)
    }

    /// Adam moment tensors, if training state was saved.
    pub fn adam_state(
        &self,
        model: &VseModel,
        dev: &Device,
    ) -> Result<Option<(u64, Vec<(String, Tensor, Tensor)>)>> {
        let Some(t) = self.adam_t else {
            return Ok(None);
        };
        let dtype = model.param_dtype();
        let mut entries = Vec::new();
        // Only parameters that had received gradients carry moments; the
        // optimizer zero-initializes the rest lazily, same as the original.
        for (name, _) in model.params() {
            let m = self.find(&format!("adam.m.{name}"));
            let v = self.find(&format!("adam.v.{name}"));
            let (ms, md, vs, vd) = match (m, v) {
                (Some((_, ms, md)), Some((_, vs, vd))) => (ms, md, vs, vd),
                (None, None) => continue,
                _ => {
                    return Err(VsplitError::Config(format!(
                        "checkpoint has partial optimizer state for {name}"
                    )))
                }
            };
            let mt = Tensor::from_vec(md.clone(), ms.clone(), dev)?.to_dtype(dtype)?;
            let vt = Tensor::from_vec(vd.clone(), vs.clone(), dev)?.to_dtype(dtype)?;
            entries.push((name, mt, vt));
        }
        Ok(Some((t, entries)))
    }
}

/// Hex SHA-256 of a file, for prediction provenance records.
pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(format!("{:x}", hasher.finalize()))
}
