//! Checkpoint file format: magic, JSON header, raw little-endian f64 blob.
//!
//! The header embeds the full run config and the parameter schema, so a
//! loaded checkpoint always rebuilds the exact network it was saved from;
//! any disagreement is a hard error, never a silent reinterpretation.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, NORM_MEAN, NORM_STD};
use crate::error::{Error, Result};
use crate::network::Model;
use crate::params::{ParamDef, ParameterSet};

const MAGIC: &[u8; 8] = b"CMFDCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A trained model snapshot with its provenance.
#[derive(Debug, Clone)]
pub struct CheckpointRecord {
    pub config: RunConfig,
    /// 1-based epoch the snapshot was taken at.
    pub epoch: usize,
    /// Validation mean-F1 that selected this snapshot.
    pub selection_score: f64,
    pub params: ParameterSet,
}

#[derive(Serialize, Deserialize)]
struct SchemaEntry {
    name: String,
    shape: Vec<usize>,
    learnable: bool,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    config: RunConfig,
    epoch: usize,
    selection_score: f64,
    norm_mean: f64,
    norm_std: f64,
    schema: Vec<SchemaEntry>,
}

pub fn save_checkpoint(path: &Path, record: &CheckpointRecord) -> Result<()> {
    let header = Header {
        version: CHECKPOINT_VERSION,
        config: record.config.clone(),
        epoch: record.epoch,
        selection_score: record.selection_score,
        norm_mean: NORM_MEAN,
        norm_std: NORM_STD,
        schema: record
            .params
            .defs()
            .iter()
            .map(|d| SchemaEntry {
                name: d.name.clone(),
                shape: d.shape.clone(),
                learnable: d.learnable,
            })
            .collect(),
    };
    let header_json =
        serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;

    let scalars: usize = record.params.values().iter().map(|v| v.len()).sum();
    let mut out = Vec::with_capacity(MAGIC.len() + 8 + header_json.len() + 8 * scalars);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    for tensor in record.params.values() {
        for &v in tensor.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<CheckpointRecord> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let fail = |reason: &str| Error::Checkpoint(format!("{}: {reason}", path.display()));

    if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(fail("not a checkpoint file (bad magic)"));
    }
    let header_len =
        u64::from_le_bytes(bytes[MAGIC.len()..MAGIC.len() + 8].try_into().unwrap()) as usize;
    let header_start = MAGIC.len() + 8;
    let blob_start = header_start + header_len;
    if bytes.len() < blob_start {
        return Err(fail("truncated header"));
    }
    let header: Header = serde_json::from_slice(&bytes[header_start..blob_start])
        .map_err(|e| fail(&format!("corrupt header: {e}")))?;
    if header.version != CHECKPOINT_VERSION {
        return Err(fail(&format!(
            "version {} unsupported (expected {CHECKPOINT_VERSION})",
            header.version
        )));
    }
    if header.norm_mean != NORM_MEAN || header.norm_std != NORM_STD {
        return Err(fail(&format!(
            "normalization constants ({}, {}) do not match this build ({NORM_MEAN}, {NORM_STD})",
            header.norm_mean, header.norm_std
        )));
    }

    // rebuild the schema from the embedded config and insist they agree
    let (_, mut params) = Model::new(header.config.net.clone())?;
    let stored_defs: Vec<ParamDef> = header
        .schema
        .iter()
        .map(|e| ParamDef {
            name: e.name.clone(),
            shape: e.shape.clone(),
            learnable: e.learnable,
        })
        .collect();
    params.check_schema(&stored_defs)?;

    let scalars: usize = params.values().iter().map(|v| v.len()).sum();
    if bytes.len() != blob_start + 8 * scalars {
        return Err(fail(&format!(
            "blob holds {} bytes, schema needs {}",
            bytes.len() - blob_start,
            8 * scalars
        )));
    }
    let mut offset = blob_start;
    for tensor in params.values_mut() {
        for v in tensor.iter_mut() {
            *v = f64::from_le_bytes(bytes[offset..offset + 8].try_into().unwrap());
            offset += 8;
        }
    }
    Ok(CheckpointRecord {
        config: header.config,
        epoch: header.epoch,
        selection_score: header.selection_score,
        params,
    })
}
