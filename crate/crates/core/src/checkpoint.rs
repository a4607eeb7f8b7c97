//! Binary model checkpoints.
//!
//! ```text
//! "MINDCKPT" | version u32 | meta_len u64 | meta JSON | params f64[..]
//! ```
//!
//! Integers and floats are little-endian. Parameters follow the model's
//! canonical order: encoder A layers, g_A, encoder B layers, g_B, fusion
//! (a unimodal checkpoint holds one encoder and its head). Each dense layer
//! stores its weight `[in, out]` then its bias; each recurrent layer stores
//! `w_in`, `w_rec`, bias.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{EncoderSpec, FusionModel, Modality, NnError, Parameterized, TaskKind, UnimodalModel};

pub const CKPT_MAGIC: &[u8; 8] = b"MINDCKPT";
pub const CKPT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint truncated: {0}")]
    Truncated(String),
    #[error("checkpoint holds a {found} model, expected {expected}")]
    WrongKind { found: &'static str, expected: &'static str },
    #[error("parameter layout mismatch: {0}")]
    Layout(String),
    #[error("model: {0}")]
    Model(#[from] NnError),
    #[error("metadata: {0}")]
    Metadata(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelLayout {
    Fusion { spec_a: EncoderSpec, spec_b: EncoderSpec },
    Unimodal { modality: Modality, spec: EncoderSpec },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub model: ModelLayout,
    pub task: TaskKind,
    pub seed: u64,
    /// Epoch the parameters were taken from (0 for an untrained model).
    pub epoch: usize,
    /// Validation macro AUROC at that epoch, if measured.
    pub val_auroc: Option<f64>,
    /// Shapes of the parameter arrays, in file order.
    pub param_shapes: Vec<Vec<usize>>,
    pub num_params: usize,
}

fn encode(model: &impl Parameterized, meta: &CheckpointMeta) -> Vec<u8> {
    let json = serde_json::to_vec(meta).expect("metadata serializes");
    let mut out = Vec::with_capacity(24 + json.len() + meta.num_params * 8);
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for p in model.params() {
        for v in p.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn meta_for(model: &impl Parameterized, layout: ModelLayout, task: TaskKind, seed: u64, epoch: usize, val_auroc: Option<f64>) -> CheckpointMeta {
    CheckpointMeta {
        model: layout,
        task,
        seed,
        epoch,
        val_auroc,
        param_shapes: model.params().iter().map(|p| p.shape().to_vec()).collect(),
        num_params: model.num_params(),
    }
}

pub fn encode_fusion(model: &FusionModel, seed: u64, epoch: usize, val_auroc: Option<f64>) -> Vec<u8> {
    let layout = ModelLayout::Fusion {
        spec_a: model.spec(Modality::A).clone(),
        spec_b: model.spec(Modality::B).clone(),
    };
    encode(model, &meta_for(model, layout, model.task, seed, epoch, val_auroc))
}

pub fn encode_unimodal(model: &UnimodalModel, seed: u64, epoch: usize, val_auroc: Option<f64>) -> Vec<u8> {
    let layout = ModelLayout::Unimodal {
        modality: model.modality,
        spec: model.encoder.spec.clone(),
    };
    encode(model, &meta_for(model, layout, model.task, seed, epoch, val_auroc))
}

fn split_header(bytes: &[u8]) -> Result<(CheckpointMeta, &[u8]), CheckpointError> {
    if bytes.len() < 8 || &bytes[..8] != CKPT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let fixed = bytes
        .get(8..20)
        .ok_or_else(|| CheckpointError::Truncated("header".into()))?;
    let version = u32::from_le_bytes(fixed[..4].try_into().expect("4 bytes"));
    if version != CKPT_VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: CKPT_VERSION,
        });
    }
    let len = u64::from_le_bytes(fixed[4..].try_into().expect("8 bytes")) as usize;
    let json = bytes
        .get(20..20 + len)
        .ok_or_else(|| CheckpointError::Truncated("metadata".into()))?;
    Ok((serde_json::from_slice(json)?, &bytes[20 + len..]))
}

/// Reads only the metadata block.
pub fn read_meta(bytes: &[u8]) -> Result<CheckpointMeta, CheckpointError> {
    split_header(bytes).map(|(m, _)| m)
}

fn fill(model: &mut impl Parameterized, meta: &CheckpointMeta, body: &[u8]) -> Result<(), CheckpointError> {
    let shapes: Vec<Vec<usize>> = model.params().iter().map(|p| p.shape().to_vec()).collect();
    if shapes != meta.param_shapes {
        return Err(CheckpointError::Layout(format!(
            "specs imply shapes {shapes:?}, file lists {:?}",
            meta.param_shapes
        )));
    }
    let expected = model.num_params() * 8;
    if body.len() != expected {
        return Err(CheckpointError::Truncated(format!(
            "parameters: expected {expected} bytes, found {}",
            body.len()
        )));
    }
    let mut values = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    for p in model.params_mut() {
        p.data_mut().iter_mut().for_each(|v| *v = values.next().expect("length checked"));
    }
    Ok(())
}

pub fn decode_fusion(bytes: &[u8]) -> Result<(FusionModel, CheckpointMeta), CheckpointError> {
    let (meta, body) = split_header(bytes)?;
    let ModelLayout::Fusion { spec_a, spec_b } = &meta.model else {
        return Err(CheckpointError::WrongKind {
            found: "unimodal",
            expected: "fusion",
        });
    };
    let mut model = FusionModel::init(spec_a, spec_b, meta.task, meta.seed)?;
    fill(&mut model, &meta, body)?;
    Ok((model, meta))
}

pub fn decode_unimodal(bytes: &[u8]) -> Result<(UnimodalModel, CheckpointMeta), CheckpointError> {
    let (meta, body) = split_header(bytes)?;
    let ModelLayout::Unimodal { modality, spec } = &meta.model else {
        return Err(CheckpointError::WrongKind {
            found: "fusion",
            expected: "unimodal",
        });
    };
    let mut model = UnimodalModel::init(*modality, spec, meta.task, meta.seed)?;
    fill(&mut model, &meta, body)?;
    Ok((model, meta))
}

pub fn save_fusion(path: &Path, model: &FusionModel, seed: u64, epoch: usize, val_auroc: Option<f64>) -> Result<(), CheckpointError> {
    Ok(fs::write(path, encode_fusion(model, seed, epoch, val_auroc))?)
}

pub fn load_fusion(path: &Path) -> Result<(FusionModel, CheckpointMeta), CheckpointError> {
    decode_fusion(&fs::read(path)?)
}

pub fn save_unimodal(path: &Path, model: &UnimodalModel, seed: u64, epoch: usize, val_auroc: Option<f64>) -> Result<(), CheckpointError> {
    Ok(fs::write(path, encode_unimodal(model, seed, epoch, val_auroc))?)
}

pub fn load_unimodal(path: &Path) -> Result<(UnimodalModel, CheckpointMeta), CheckpointError> {
    decode_unimodal(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    const TASK: TaskKind = TaskKind::Multilabel { labels: 3 };

    #[test]
    fn fusion_round_trip_is_exact() {
        let m = FusionModel::init(&EncoderSpec::mlp(6, &[5, 4], 0.0), &EncoderSpec::recurrent(3, 4, 2, 0.1), TASK, 11).unwrap();
        let bytes = encode_fusion(&m, 11, 7, Some(0.8));
        let (back, meta) = decode_fusion(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(meta.epoch, 7);
        assert_eq!(meta.num_params, m.num_params());
        assert_eq!(encode_fusion(&back, 11, 7, Some(0.8)), bytes);
    }

    #[test]
    fn unimodal_round_trip_and_kind_check() {
        let m = UnimodalModel::init(Modality::B, &EncoderSpec::recurrent(3, 4, 1, 0.0), TASK, 2).unwrap();
        let bytes = encode_unimodal(&m, 2, 0, None);
        assert_eq!(decode_unimodal(&bytes).unwrap().0, m);
        assert!(matches!(decode_fusion(&bytes), Err(CheckpointError::WrongKind { .. })));
    }

    #[test]
    fn corrupt_headers_and_truncation() {
        let m = UnimodalModel::init(Modality::A, &EncoderSpec::mlp(4, &[3], 0.0), TASK, 2).unwrap();
        let bytes = encode_unimodal(&m, 2, 0, None);
        assert!(matches!(decode_unimodal(&bytes[..bytes.len() - 8]), Err(CheckpointError::Truncated(_))));
        assert!(matches!(decode_unimodal(b"MINDDATA...."), Err(CheckpointError::BadMagic)));
        let mut v = bytes.clone();
        v[8] = 9;
        assert!(matches!(decode_unimodal(&v), Err(CheckpointError::Version { found: 9, .. })));
    }
}
