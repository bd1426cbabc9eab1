use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SgError};
use crate::model::{ModelConfig, ParamSet};
use crate::numerics::TensorData;
use crate::synthdata::{NormStats, SceneConfig};
use crate::trainer::{AdamState, TrainConfig};

pub const CKPT_MAGIC: &[u8; 8] = b"SGMIMCKP";
pub const CKPT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the blob.
    pub offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: u32,
    pub step: u64,
    pub encoder_only: bool,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub scene: SceneConfig,
    pub norm_stats: NormStats,
    pub adam_t: u64,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub tensors: BTreeMap<String, TensorData<f32>>,
}

impl Checkpoint {
    /// Model parameters only (tensors not under the optimizer namespace).
    pub fn params(&self) -> ParamSet {
        self.tensors
            .iter()
            .filter(|(k, _)| !k.starts_with("opt."))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn adam_state(&self) -> Option<AdamState> {
        if self.manifest.adam_t == 0 {
            return None;
        }
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (k, t) in &self.tensors {
            if let Some(name) = k.strip_prefix("opt.m.") {
                m.insert(name.to_string(), t.data().to_vec());
            } else if let Some(name) = k.strip_prefix("opt.v.") {
                v.insert(name.to_string(), t.data().to_vec());
            }
        }
        Some(AdamState {
            m,
            v,
            t: self.manifest.adam_t,
        })
    }
}

/// Write manifest JSON + a concatenated little-endian f32 blob. Byte-exact
/// given identical inputs.
pub fn save_checkpoint(
    tensors: &BTreeMap<String, TensorData<f32>>,
    mut manifest: CheckpointManifest,
    path: &Path,
) -> Result<()> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, t) in tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            dtype: "f32".into(),
            offset,
        });
        offset += (t.numel() * 4) as u64;
    }
    manifest.tensors = entries;
    let manifest_bytes = serde_json::to_vec(&manifest)?;
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(CKPT_MAGIC)?;
    f.write_all(&(manifest_bytes.len() as u32).to_le_bytes())?;
    f.write_all(&manifest_bytes)?;
    for t in tensors.values() {
        for v in t.data() {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    f.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut f = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(SgError::Integrity("bad checkpoint magic".into()));
    }
    let mut len4 = [0u8; 4];
    f.read_exact(&mut len4)?;
    let mlen = u32::from_le_bytes(len4) as usize;
    let mut mbytes = vec![0u8; mlen];
    f.read_exact(&mut mbytes)?;
    let manifest: CheckpointManifest = serde_json::from_slice(&mbytes)
        .map_err(|e| SgError::Integrity(format!("manifest parse failed: {e}")))?;
    if manifest.version != CKPT_VERSION {
        return Err(SgError::Integrity(format!(
            "unsupported checkpoint version {}",
            manifest.version
        )));
    }
    let mut blob = Vec::new();
    f.read_to_end(&mut blob)?;

    // Offsets must be in-order and non-overlapping, and cover the blob exactly.
    let mut expected_offset = 0u64;
    for e in &manifest.tensors {
        if e.dtype != "f32" {
            return Err(SgError::Integrity(format!("unsupported dtype {}", e.dtype)));
        }
        if e.offset != expected_offset {
            return Err(SgError::Integrity(format!(
                "tensor {} offset {} expected {}",
                e.name, e.offset, expected_offset
            )));
        }
        let numel: usize = e.shape.iter().product();
        expected_offset += (numel * 4) as u64;
    }
    if expected_offset != blob.len() as u64 {
        return Err(SgError::Integrity(format!(
            "blob length {} does not match manifest ({} expected)",
            blob.len(),
            expected_offset
        )));
    }

    let mut tensors = BTreeMap::new();
    for e in &manifest.tensors {
        let numel: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let data: Vec<f32> = blob[start..start + numel * 4]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        if tensors
            .insert(e.name.clone(), TensorData::new(e.shape.clone(), data)?)
            .is_some()
        {
            return Err(SgError::Integrity(format!("duplicate tensor {}", e.name)));
        }
    }
    Ok(Checkpoint { manifest, tensors })
}

/// Prefixes that belong to the exportable encoder: transformer blocks, image
/// patch projection, and the positional table.
pub fn is_encoder_tensor(name: &str) -> bool {
    name.starts_with("enc.") || name.starts_with("embed.img_proj") || name == "embed.pos"
}

/// Strip a full checkpoint down to the encoder weights used by downstream
/// probes.
pub fn export_encoder(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let tensors: BTreeMap<String, TensorData<f32>> = ckpt
        .tensors
        .iter()
        .filter(|(k, _)| is_encoder_tensor(k))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    if !tensors.contains_key("enc.final_ln.g") || !tensors.contains_key("embed.img_proj.w") {
        return Err(SgError::Integrity(
            "checkpoint is missing encoder tensors".into(),
        ));
    }
    let manifest = CheckpointManifest {
        encoder_only: true,
        adam_t: 0,
        tensors: Vec::new(),
        ..ckpt.manifest.clone()
    };
    save_checkpoint(&tensors, manifest, path)
}
