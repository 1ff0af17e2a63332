//! Checkpoint container, bit-exact:
//! magic `PITCKPT1`, u32-LE length-prefixed UTF-8 JSON header, then named
//! tensors as `[u32 name-len][name][u8 rank][u64 dims…][f32 LE payload]`.

use super::{MaeConfig, ModelConfig, ModelError};
use crate::numerics::Tensor;
use crate::scalar::Real;
use serde::{Deserialize, Serialize};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"PITCKPT1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mae: Option<MaeConfig>,
    pub epoch: u64,
    pub seed: u64,
    /// Free-form provenance (experiment name, lr, ...).
    pub label: String,
}

pub struct Checkpoint<F: Real> {
    pub header: CheckpointHeader,
    pub tensors: Vec<(String, Tensor<F>)>,
}

impl<F: Real> Checkpoint<F> {
    pub fn tensor(&self, name: &str) -> Option<&Tensor<F>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        w.write_all(MAGIC)?;
        let header = serde_json::to_vec(&self.header)
            .map_err(|e| ModelError::Checkpoint(format!("header encode: {e}")))?;
        w.write_all(&(header.len() as u32).to_le_bytes())?;
        w.write_all(&header)?;
        for (name, tensor) in &self.tensors {
            let name_bytes = name.as_bytes();
            w.write_all(&(name_bytes.len() as u32).to_le_bytes())?;
            w.write_all(name_bytes)?;
            w.write_all(&[tensor.rank() as u8])?;
            for &d in tensor.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &v in tensor.data() {
                w.write_all(&v.as_f32().to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint<F>, ModelError> {
        let mut r = BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| ModelError::Checkpoint("file shorter than magic".into()))?;
        if &magic != MAGIC {
            return Err(ModelError::Checkpoint(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&magic),
                String::from_utf8_lossy(MAGIC)
            )));
        }
        let mut len4 = [0u8; 4];
        r.read_exact(&mut len4)
            .map_err(|_| ModelError::Checkpoint("truncated header length".into()))?;
        let hlen = u32::from_le_bytes(len4) as usize;
        let mut hbytes = vec![0u8; hlen];
        r.read_exact(&mut hbytes)
            .map_err(|_| ModelError::Checkpoint("truncated header".into()))?;
        let header: CheckpointHeader = serde_json::from_slice(&hbytes)
            .map_err(|e| ModelError::Checkpoint(format!("header decode: {e}")))?;
        let mut tensors = Vec::new();
        loop {
            match r.read_exact(&mut len4) {
                Ok(()) => {}
                Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
                Err(e) => return Err(e.into()),
            }
            let nlen = u32::from_le_bytes(len4) as usize;
            let mut nbytes = vec![0u8; nlen];
            r.read_exact(&mut nbytes)
                .map_err(|_| ModelError::Checkpoint("truncated tensor name".into()))?;
            let name = String::from_utf8(nbytes)
                .map_err(|_| ModelError::Checkpoint("tensor name is not UTF-8".into()))?;
            let mut rank1 = [0u8; 1];
            r.read_exact(&mut rank1)
                .map_err(|_| ModelError::Checkpoint(format!("truncated rank for {name}")))?;
            let mut shape = Vec::with_capacity(rank1[0] as usize);
            let mut d8 = [0u8; 8];
            for _ in 0..rank1[0] {
                r.read_exact(&mut d8)
                    .map_err(|_| ModelError::Checkpoint(format!("truncated dims for {name}")))?;
                shape.push(u64::from_le_bytes(d8) as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            let mut f4 = [0u8; 4];
            for _ in 0..numel {
                r.read_exact(&mut f4)
                    .map_err(|_| ModelError::Checkpoint(format!("truncated payload for {name}")))?;
                data.push(F::of_f64(f32::from_le_bytes(f4) as f64));
            }
            tensors.push((name, Tensor::from_vec(shape, data)?));
        }
        Ok(Checkpoint { header, tensors })
    }
}

impl<F: Real> super::PixelTransformer<F> {
    /// Checkpoint of the model parameters plus any extra (optimizer/EMA)
    /// tensors the caller wants stored alongside.
    pub fn to_checkpoint(
        &self,
        epoch: u64,
        seed: u64,
        label: &str,
        mae: Option<MaeConfig>,
        extra: Vec<(String, Tensor<F>)>,
    ) -> Checkpoint<F> {
        let mut tensors: Vec<(String, Tensor<F>)> = self
            .params
            .iter()
            .map(|(_, p)| (p.name.clone(), p.tensor.clone()))
            .collect();
        tensors.extend(extra);
        Checkpoint {
            header: CheckpointHeader {
                config: self.cfg.clone(),
                mae,
                epoch,
                seed,
                label: label.to_string(),
            },
            tensors,
        }
    }

    /// Rebuild a model from a checkpoint; every model parameter must be
    /// present with the exact shape the config implies.
    pub fn from_checkpoint(ckpt: &Checkpoint<F>) -> Result<Self, ModelError> {
        let mut model = Self::new(ckpt.header.config.clone(), ckpt.header.seed)?;
        load_params(&mut model.params, ckpt)?;
        Ok(model)
    }
}

pub(crate) fn load_params<F: Real>(
    params: &mut crate::numerics::ParamStore<F>,
    ckpt: &Checkpoint<F>,
) -> Result<(), ModelError> {
    for (_, p) in params.iter_mut() {
        let stored = ckpt
            .tensor(&p.name)
            .ok_or_else(|| ModelError::Checkpoint(format!("missing tensor {:?}", p.name)))?;
        if stored.shape() != p.tensor.shape() {
            return Err(ModelError::Checkpoint(format!(
                "shape mismatch for {:?}: checkpoint {:?}, model {:?}",
                p.name,
                stored.shape(),
                p.tensor.shape()
            )));
        }
        p.tensor.data_mut().copy_from_slice(stored.data());
    }
    Ok(())
}

impl<F: Real> super::MaeAutoencoder<F> {
    pub fn to_checkpoint(
        &self,
        epoch: u64,
        seed: u64,
        label: &str,
        extra: Vec<(String, Tensor<F>)>,
    ) -> Checkpoint<F> {
        self.model.to_checkpoint(epoch, seed, label, Some(self.mae), extra)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint<F>) -> Result<Self, ModelError> {
        let mae = ckpt
            .header
            .mae
            .ok_or_else(|| ModelError::Checkpoint("checkpoint has no MAE config".into()))?;
        let mut auto = Self::new(ckpt.header.config.clone(), mae, ckpt.header.seed)?;
        load_params(&mut auto.model.params, ckpt)?;
        Ok(auto)
    }
}

/// Loads only the encoder weights out of an MAE pre-training checkpoint
/// into a fresh supervised model (head and non-matching tensors are left
/// at their fresh initialization).
pub fn load_encoder_from_mae<F: Real>(
    model: &mut super::PixelTransformer<F>,
    ckpt: &Checkpoint<F>,
) -> Result<usize, ModelError> {
    if ckpt.header.config.hidden_dim != model.cfg.hidden_dim
        || ckpt.header.config.layers != model.cfg.layers
        || ckpt.header.config.tokenizer.token_dim() != model.cfg.tokenizer.token_dim()
    {
        return Err(ModelError::Checkpoint(format!(
            "encoder mismatch: checkpoint d={} N={}, model d={} N={}",
            ckpt.header.config.hidden_dim,
            ckpt.header.config.layers,
            model.cfg.hidden_dim,
            model.cfg.layers
        )));
    }
    let mut loaded = 0;
    for (_, p) in model.params.iter_mut() {
        if p.name.starts_with("head.") {
            continue; // fine-tuning reinitializes the task head
        }
        if let Some(stored) = ckpt.tensor(&p.name) {
            if stored.shape() != p.tensor.shape() {
                return Err(ModelError::Checkpoint(format!(
                    "shape mismatch for {:?}: checkpoint {:?}, model {:?}",
                    p.name,
                    stored.shape(),
                    p.tensor.shape()
                )));
            }
            p.tensor.data_mut().copy_from_slice(stored.data());
            loaded += 1;
        }
    }
    Ok(loaded)
}
