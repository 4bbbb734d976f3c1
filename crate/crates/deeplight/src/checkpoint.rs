//! Versioned binary checkpoint container.
//!
//! Layout: 4 magic bytes, u32 format version, u32 meta length, JSON meta
//! block, little-endian float32 parameter payload in canonical order, and a
//! trailing SHA-256 checksum over everything before it.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::volume::LabelVocabulary;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DLCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Training provenance stored alongside the weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainMeta {
    pub epochs_completed: u64,
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointMeta {
    model: ModelConfig,
    vocabulary: LabelVocabulary,
    train: TrainMeta,
    param_shapes: Vec<(String, Vec<usize>)>,
}

/// A loaded checkpoint: parameters plus training metadata.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: ModelParams<f32>,
    pub train_meta: TrainMeta,
}

impl Checkpoint {
    pub fn new(params: ModelParams<f32>, train_meta: TrainMeta) -> Self {
        Checkpoint { params, train_meta }
    }

    pub fn num_classes(&self) -> usize {
        self.params.num_classes()
    }

    /// Transfer-learning head swap: copies every non-head parameter exactly
    /// and re-initializes the softmax head for the new vocabulary.
    pub fn swap_head(
        &self,
        new_vocabulary: LabelVocabulary,
        seed: u64,
    ) -> Result<ModelParams<f32>> {
        let mut params = self.params.clone();
        params.reinit_head(new_vocabulary, seed)?;
        Ok(params)
    }
}

/// Serializes a checkpoint to bytes.
pub fn checkpoint_to_bytes(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let meta = CheckpointMeta {
        model: ckpt.params.config.clone(),
        vocabulary: ckpt.params.vocabulary.clone(),
        train: ckpt.train_meta.clone(),
        param_shapes: ckpt
            .params
            .parameters()
            .iter()
            .map(|(name, t)| (name.clone(), t.shape().to_vec()))
            .collect(),
    };
    let meta_json = serde_json::to_vec(&meta)?;

    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    let mut u32buf = [0u8; 4];
    LittleEndian::write_u32(&mut u32buf, CHECKPOINT_VERSION);
    buf.extend_from_slice(&u32buf);
    LittleEndian::write_u32(&mut u32buf, meta_json.len() as u32);
    buf.extend_from_slice(&u32buf);
    buf.extend_from_slice(&meta_json);
    for (_, tensor) in ckpt.params.parameters() {
        for &v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    Ok(buf)
}

/// Parses checkpoint bytes, validating magic, version, checksum and the
/// parameter shapes against the architecture.
pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 12 + 32 {
        return Err(Error::Checkpoint("file too short".to_string()));
    }
    if &bytes[0..4] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {:?}",
            &bytes[0..4.min(bytes.len())]
        )));
    }
    let version = LittleEndian::read_u32(&bytes[4..8]);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {version} unsupported (expected {CHECKPOINT_VERSION})"
        )));
    }

    let (body, stored_digest) = bytes.split_at(bytes.len() - 32);
    let digest = Sha256::digest(body);
    if digest.as_slice() != stored_digest {
        return Err(Error::Integrity(
            "checkpoint checksum mismatch (corrupted payload)".to_string(),
        ));
    }

    let meta_len = LittleEndian::read_u32(&bytes[8..12]) as usize;
    if 12 + meta_len > body.len() {
        return Err(Error::Checkpoint("meta block exceeds file".to_string()));
    }
    let mut meta: CheckpointMeta = serde_json::from_slice(&bytes[12..12 + meta_len])?;
    meta.vocabulary.rebuild_index();

    // Rebuild a parameter skeleton and validate the stored shapes against
    // the architecture before accepting the payload.
    let mut params = ModelParams::<f32>::init(meta.model.clone(), meta.vocabulary.clone(), 0)?;
    let expected: Vec<(String, Vec<usize>)> = params
        .parameters()
        .iter()
        .map(|(name, t)| (name.clone(), t.shape().to_vec()))
        .collect();
    if expected != meta.param_shapes {
        return Err(Error::Checkpoint(
            "parameter manifest does not match the architecture".to_string(),
        ));
    }

    let mut offset = 12 + meta_len;
    for (name, tensor) in params.parameters_mut() {
        let need = tensor.numel() * 4;
        if offset + need > body.len() {
            return Err(Error::Checkpoint(format!(
                "payload truncated while reading '{name}'"
            )));
        }
        LittleEndian::read_f32_into(&body[offset..offset + need], tensor.data_mut());
        offset += need;
    }
    if offset != body.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing payload bytes",
            body.len() - offset
        )));
    }

    Ok(Checkpoint {
        params,
        train_meta: meta.train,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let bytes = checkpoint_to_bytes(ckpt)?;
    let mut f = std::fs::File::create(path.as_ref())?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path.as_ref())?.read_to_end(&mut bytes)?;
    checkpoint_from_bytes(&bytes)
}
