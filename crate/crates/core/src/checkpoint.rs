//! Single-file model container: an 8-byte magic, the manifest length as a
//! little-endian `u64`, a JSON manifest, then every tensor as little-endian
//! `f32` values.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::analysis::RoutingTable;
use crate::data::NormStats;
use crate::error::{GmlpError, Result};
use crate::layers::PoolKind;
use crate::model::{ArchSpec, Model};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"GMLPCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
    /// Number of `f32` values.
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub arch: String,
    pub d: usize,
    pub classes: usize,
    pub pool_kind: PoolKind,
    pub seed: u64,
    pub bn_momentum: f64,
    pub bn_epsilon: f64,
    pub temperature: f64,
    pub tensors: Vec<TensorEntry>,
    pub routing_table: Option<RoutingTable>,
    /// `{feature: {mu, sigma}}` applied to raw inputs before the model.
    pub normalization: Option<serde_json::Value>,
    pub training: serde_json::Value,
}

/// A model plus what is needed to feed it raw data.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub normalization: Option<NormStats>,
    pub training: serde_json::Value,
}

impl Checkpoint {
    pub fn new(model: Model) -> Self {
        Self {
            model,
            normalization: None,
            training: serde_json::Value::Object(Default::default()),
        }
    }

    pub fn routing_table(&self) -> Option<RoutingTable> {
        let slots = self.model.routing_table()?.to_vec();
        let confidence = match self.model.routing() {
            Some(r) => crate::analysis::discretize_routing(&r).row_confidence,
            None => vec![1.0; slots.len()],
        };
        Some(RoutingTable {
            slot_to_feature: slots,
            row_confidence: confidence,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let model = &self.model;
        let mut tensors = Vec::new();
        let mut blob: Vec<u8> = Vec::new();
        let mut push = |name: String, t: &Tensor| {
            tensors.push(TensorEntry {
                name,
                shape: t.shape().to_vec(),
                offset: blob.len(),
                len: t.len(),
            });
            for &v in t.data() {
                blob.extend_from_slice(&(v as f32).to_le_bytes());
            }
        };
        for p in model.params() {
            push(p.name.clone(), &p.tensor);
        }
        let (mut momentum, mut epsilon) = (
            crate::layers::BatchNormState::DEFAULT_MOMENTUM,
            crate::layers::BatchNormState::DEFAULT_EPSILON,
        );
        for (i, bn) in model.batch_norms().iter().enumerate() {
            let n = bn.features();
            push(format!("bn{i}.running_mean"), &Tensor::new(vec![n], bn.running_mean.clone())?);
            push(format!("bn{i}.running_var"), &Tensor::new(vec![n], bn.running_var.clone())?);
            momentum = bn.momentum;
            epsilon = bn.epsilon;
        }
        let arch = model.arch();
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            arch: arch.to_string(),
            d: arch.d,
            classes: arch.classes,
            pool_kind: arch.pool_kind,
            seed: arch.seed,
            bn_momentum: momentum,
            bn_epsilon: epsilon,
            temperature: model.temperature(),
            tensors,
            routing_table: self.routing_table(),
            normalization: self.normalization.as_ref().map(NormStats::to_json),
            training: self.training.clone(),
        };
        let json = serde_json::to_vec_pretty(&manifest)?;
        let mut out = Vec::with_capacity(16 + json.len() + blob.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&blob);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| GmlpError::Checkpoint(msg.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let json_end = 16usize.checked_add(len).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated manifest"))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[16..json_end])?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(GmlpError::Checkpoint(format!(
                "unsupported format version {}",
                manifest.format_version
            )));
        }
        let blob = &bytes[json_end..];
        let read = |entry: &TensorEntry| -> Result<Tensor> {
            let end = entry
                .len
                .checked_mul(4)
                .and_then(|n| n.checked_add(entry.offset))
                .filter(|&e| e <= blob.len())
                .ok_or_else(|| GmlpError::Checkpoint(format!("tensor {} lies outside the blob", entry.name)))?;
            let values = blob[entry.offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            Tensor::new(entry.shape.clone(), values)
        };

        let arch = ArchSpec::parse(&manifest.arch, manifest.d)?
            .with_seed(manifest.seed)
            .with_pool_kind(manifest.pool_kind);
        let mut model = Model::build_with_bn(&arch, manifest.bn_momentum, manifest.bn_epsilon)?;
        let find = |name: &str| {
            manifest
                .tensors
                .iter()
                .find(|t| t.name == name)
                .ok_or_else(|| GmlpError::Checkpoint(format!("missing tensor {name}")))
        };
        for p in model.params_mut() {
            let t = read(find(&p.name)?)?;
            if t.shape() != p.tensor.shape() {
                return Err(GmlpError::Checkpoint(format!(
                    "tensor {} has shape {:?}, model expects {:?}",
                    p.name,
                    t.shape(),
                    p.tensor.shape()
                )));
            }
            p.tensor = t;
        }
        for (i, bn) in model.batch_norms_mut().iter_mut().enumerate() {
            let mean = read(find(&format!("bn{i}.running_mean"))?)?;
            let var = read(find(&format!("bn{i}.running_var"))?)?;
            if mean.len() != bn.features() || var.len() != bn.features() {
                return Err(GmlpError::Checkpoint(format!("batch norm {i} buffers have the wrong size")));
            }
            bn.running_mean = mean.into_data();
            bn.running_var = var.into_data();
        }
        model.set_temperature(manifest.temperature)?;
        model.set_routing_table(manifest.routing_table.map(|t| t.slot_to_feature))?;
        let normalization = manifest.normalization.as_ref().map(NormStats::from_json).transpose()?;
        Ok(Self {
            model,
            normalization,
            training: manifest.training,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| GmlpError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| GmlpError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model() -> Model {
        let arch = ArchSpec::parse("GSel-4-2, GFC, ReLU, BNorm, GPool-linear, GFC, Concat, FC-3", 7)
            .unwrap()
            .with_seed(5);
        let mut model = Model::build(&arch).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for bn in model.batch_norms_mut() {
            bn.running_mean.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
            bn.running_var.iter_mut().for_each(|v| *v = rng.gen_range(0.5..2.0));
        }
        model.set_temperature(0.3).unwrap();
        model
    }

    #[test]
    fn round_trip_preserves_outputs() {
        let mut ckpt = Checkpoint::new(model());
        ckpt.model.set_routing_table(Some(vec![0, 1, 2, 3, 4, 5, 6, 0])).unwrap();
        ckpt.training = serde_json::json!({"epochs": 3});
        let back = Checkpoint::from_bytes(&ckpt.to_bytes().unwrap()).unwrap();
        assert_eq!(back.model.temperature(), 0.3);
        assert_eq!(back.model.routing_table(), ckpt.model.routing_table());
        assert_eq!(back.training, ckpt.training);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::new(vec![4, 7], (0..28).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        for hard in [false, true] {
            let a = ckpt.model.predict(&x, hard).unwrap();
            let b = back.model.predict(&x, hard).unwrap();
            for (u, v) in a.data().iter().zip(b.data()) {
                assert!((u - v).abs() <= 1e-5 * u.abs().max(1.0), "{u} vs {v}");
            }
        }
    }

    #[test]
    fn manifest_offsets_cover_blob() {
        let bytes = Checkpoint::new(model()).to_bytes().unwrap();
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let manifest: Manifest = serde_json::from_slice(&bytes[16..16 + len]).unwrap();
        let blob = bytes.len() - 16 - len;
        let mut expected = 0;
        for t in &manifest.tensors {
            assert_eq!(t.offset, expected);
            expected += 4 * t.len;
        }
        assert_eq!(expected, blob);
    }

    #[test]
    fn serialization_is_deterministic() {
        assert_eq!(Checkpoint::new(model()).to_bytes().unwrap(), Checkpoint::new(model()).to_bytes().unwrap());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = Checkpoint::new(model()).to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(b"nonsense").is_err());
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 4]).is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(Checkpoint::from_bytes(&wrong).is_err());
    }
}
