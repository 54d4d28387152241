//! Checkpoint directories:
//!
//! ```text
//! manifest.json          kind, architecture, tensor table with sha256
//! tensors/<name>.mat     one matrix per parameter (binary matrix format)
//! source_sample.mat      optional cached source feature rows
//! ```
//!
//! Every file is written atomically; hashes are verified on load.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graphio::io::atomic_write;
use crate::lora::{AdaptedModel, Architecture};
use crate::mpnn::{BackboneParams, GnnConfig, PretrainMode};
use crate::numerics::{Matrix, ParamSet};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TENSOR_DIR: &str = "tensors";
pub const SOURCE_SAMPLE_FILE: &str = "source_sample.mat";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckpointKind {
    /// Pretrained backbone plus a source-feature sample.
    Backbone,
    /// Backbone, adapters, projector and head after fine-tuning.
    Adapted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub file: String,
    pub rows: usize,
    pub cols: usize,
    pub frozen: bool,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub file: String,
    pub rows: usize,
    pub cols: usize,
    /// Rows in the source graph the sample was drawn from.
    pub source_rows: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub kind: CheckpointKind,
    pub gnn: GnnConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub architecture: Option<Architecture>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pretrain_mode: Option<PretrainMode>,
    pub tensors: Vec<TensorEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_sample: Option<SampleEntry>,
    /// sha256 over the frozen tensors, see [`frozen_digest`].
    pub frozen_digest: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub params: ParamSet,
    pub source_sample: Option<Matrix>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

/// Hash of every frozen tensor's name and binary encoding, in name order.
pub fn frozen_digest(params: &ParamSet) -> String {
    let mut h = Sha256::new();
    for (name, p) in params.iter().filter(|(_, p)| p.frozen) {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        h.update(p.value.to_bytes());
    }
    format!("{:x}", h.finalize())
}

fn tensor_file(name: &str) -> String {
    format!("{TENSOR_DIR}/{name}.mat")
}

impl Checkpoint {
    pub fn from_backbone(
        backbone: &BackboneParams,
        mode: PretrainMode,
        sample: Matrix,
        source_rows: usize,
    ) -> Self {
        let mut params = ParamSet::new();
        backbone.insert_into(&mut params, true);
        Self::assemble(
            CheckpointKind::Backbone,
            backbone.config(),
            None,
            Some(mode),
            params,
            Some((sample, source_rows)),
        )
    }

    pub fn from_model(model: &AdaptedModel) -> Result<Self> {
        let gnn = model.backbone()?.config();
        Ok(Self::assemble(
            CheckpointKind::Adapted,
            gnn,
            Some(model.arch),
            None,
            model.params.clone(),
            None,
        ))
    }

    fn assemble(
        kind: CheckpointKind,
        gnn: GnnConfig,
        architecture: Option<Architecture>,
        pretrain_mode: Option<PretrainMode>,
        params: ParamSet,
        sample: Option<(Matrix, usize)>,
    ) -> Self {
        let tensors = params
            .iter()
            .map(|(name, p)| TensorEntry {
                name: name.clone(),
                file: tensor_file(name),
                rows: p.value.rows(),
                cols: p.value.cols(),
                frozen: p.frozen,
                sha256: sha256_hex(&p.value.to_bytes()),
            })
            .collect();
        let source_sample = sample.as_ref().map(|(m, source_rows)| SampleEntry {
            file: SOURCE_SAMPLE_FILE.into(),
            rows: m.rows(),
            cols: m.cols(),
            source_rows: *source_rows,
            sha256: sha256_hex(&m.to_bytes()),
        });
        let manifest = Manifest {
            version: FORMAT_VERSION,
            kind,
            gnn,
            architecture,
            pretrain_mode,
            tensors,
            source_sample,
            frozen_digest: frozen_digest(&params),
        };
        Self {
            manifest,
            params,
            source_sample: sample.map(|(m, _)| m),
        }
    }

    pub fn backbone(&self) -> Result<BackboneParams> {
        BackboneParams::from_params(&self.params, self.manifest.gnn.hidden_dims.len(), true)
    }

    pub fn into_model(self) -> Result<AdaptedModel> {
        let arch = self.manifest.architecture.ok_or_else(|| {
            Error::Config("checkpoint holds a pretrained backbone, not a fine-tuned model".into())
        })?;
        Ok(AdaptedModel {
            arch,
            params: self.params,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let tensor_dir = dir.join(TENSOR_DIR);
        fs::create_dir_all(&tensor_dir).map_err(|e| Error::io(&tensor_dir, e))?;
        for entry in &self.manifest.tensors {
            let value = &self.params.value(&entry.name);
            atomic_write(&dir.join(&entry.file), &value.to_bytes())?;
        }
        if let (Some(entry), Some(m)) = (&self.manifest.source_sample, &self.source_sample) {
            atomic_write(&dir.join(&entry.file), &m.to_bytes())?;
        }
        // Manifest last: a directory with a manifest is complete.
        let text = serde_json::to_vec_pretty(&self.manifest)?;
        atomic_write(&dir.join(MANIFEST_FILE), &text)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST_FILE);
        let raw = fs::read(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: Manifest = serde_json::from_slice(&raw)
            .map_err(|e| Error::format(&manifest_path, e.to_string()))?;
        if manifest.version != FORMAT_VERSION {
            return Err(Error::format(
                &manifest_path,
                format!("unsupported checkpoint version {}", manifest.version),
            ));
        }
        let mut params = ParamSet::new();
        for entry in &manifest.tensors {
            let m = read_checked(dir, &entry.file, &entry.sha256, entry.rows, entry.cols)?;
            params.insert(entry.name.clone(), m, entry.frozen);
        }
        let source_sample = match &manifest.source_sample {
            Some(e) => Some(read_checked(dir, &e.file, &e.sha256, e.rows, e.cols)?),
            None => None,
        };
        if frozen_digest(&params) != manifest.frozen_digest {
            return Err(Error::format(&manifest_path, "frozen tensor digest mismatch"));
        }
        Ok(Self {
            manifest,
            params,
            source_sample,
        })
    }
}

fn read_checked(dir: &Path, file: &str, sha: &str, rows: usize, cols: usize) -> Result<Matrix> {
    let path = dir.join(file);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if sha256_hex(&bytes) != sha {
        return Err(Error::format(&path, "sha256 mismatch"));
    }
    let m = Matrix::from_bytes(&bytes).map_err(|e| Error::format(&path, e.to_string()))?;
    if m.shape() != (rows, cols) {
        return Err(Error::format(
            &path,
            format!("shape {:?} differs from manifest ({rows}, {cols})", m.shape()),
        ));
    }
    Ok(m)
}

/// Writes a single matrix in the binary format.
pub fn save_matrix(path: &Path, m: &Matrix) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    atomic_write(path, &m.to_bytes())
}

pub fn load_matrix(path: &Path) -> Result<Matrix> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Matrix::from_bytes(&bytes).map_err(|e| Error::format(path, e.to_string()))
}
