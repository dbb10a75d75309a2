//! Versioned on-disk artifacts: the model checkpoint and its calibration
//! sidecar. Both are JSON and written atomically.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::conformal::CalibrationResult;
use crate::data::FeatureSchema;
use crate::error::{Error, Result};
use crate::model::{ArchitectureConfig, DelayModel, ParamGroup};
use crate::numerics::{OptimizerState, RngState, Tensor2D};

pub const CHECKPOINT_FORMAT: &str = "shipdelay-checkpoint/v1";
pub const CALIBRATION_FORMAT: &str = "shipdelay-calibration/v1";

/// Writes `bytes` to a sibling temporary file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = read_artifact(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn read_artifact(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
        _ => Error::io(path, e),
    })
}

fn parse<T: serde::de::DeserializeOwned>(path: &Path, bytes: &[u8]) -> Result<T> {
    serde_json::from_slice(bytes).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor2D,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub schema_hash: String,
    pub schema: FeatureSchema,
    pub architecture: ArchitectureConfig,
    pub cardinalities: Vec<usize>,
    pub n_numerical: usize,
    pub params: Vec<NamedTensor>,
    pub optimizer: Option<OptimizerState>,
    pub rng: Option<RngState>,
    /// Fully resolved run configuration that produced this checkpoint.
    pub config: serde_json::Value,
}

impl Checkpoint {
    pub fn from_model(
        model: &DelayModel,
        schema: &FeatureSchema,
        optimizer: Option<OptimizerState>,
        rng: Option<RngState>,
        config: serde_json::Value,
    ) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            schema_hash: schema.hash(),
            schema: schema.clone(),
            architecture: model.arch.clone(),
            cardinalities: model.cardinalities.clone(),
            n_numerical: model.n_num,
            params: model
                .params()
                .into_iter()
                .map(|(group, p)| NamedTensor {
                    name: p.name.clone(),
                    group,
                    value: p.value.clone(),
                })
                .collect(),
            optimizer,
            rng,
            config,
        }
    }

    /// Rebuilds the network and checks every stored tensor against it.
    pub fn to_model(&self) -> Result<DelayModel> {
        let bad = |message: String| Error::Format {
            path: PathBuf::new(),
            message,
        };
        if self.schema.hash() != self.schema_hash {
            return Err(bad("schema hash does not match the embedded schema".into()));
        }
        if self.schema.cardinalities() != self.cardinalities || self.schema.n_numerical() != self.n_numerical {
            return Err(bad("schema dimensions disagree with the stored model".into()));
        }
        let mut model = DelayModel::new(&self.architecture, &self.cardinalities, self.n_numerical, 0)?;
        let mut slots = model.params_mut();
        if slots.len() != self.params.len() {
            return Err(bad(format!(
                "checkpoint holds {} tensors, architecture needs {}",
                self.params.len(),
                slots.len()
            )));
        }
        for ((_, slot), stored) in slots.iter_mut().zip(&self.params) {
            if slot.name != stored.name || slot.value.shape() != stored.value.shape() {
                return Err(bad(format!(
                    "tensor `{}` {:?} does not fit slot `{}` {:?}",
                    stored.name,
                    stored.value.shape(),
                    slot.name,
                    slot.value.shape()
                )));
            }
            slot.value = stored.value.clone();
        }
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_artifact(path)?;
        let ck: Checkpoint = parse(path, &bytes)?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Format {
                path: path.to_path_buf(),
                message: format!("unsupported checkpoint format `{}`", ck.format),
            });
        }
        Ok(ck)
    }
}

/// Calibration stored next to a checkpoint and bound to it by hash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationArtifact {
    pub format: String,
    pub checkpoint_sha256: String,
    pub result: CalibrationResult,
    pub config: serde_json::Value,
}

/// `<checkpoint>.calib.json`.
pub fn calibration_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".calib.json");
    PathBuf::from(s)
}

pub fn save_calibration(checkpoint: &Path, result: &CalibrationResult, config: serde_json::Value) -> Result<PathBuf> {
    let art = CalibrationArtifact {
        format: CALIBRATION_FORMAT.to_string(),
        checkpoint_sha256: sha256_file(checkpoint)?,
        result: *result,
        config,
    };
    let path = calibration_path(checkpoint);
    write_atomic(&path, &serde_json::to_vec_pretty(&art)?)?;
    Ok(path)
}

/// Loads the sidecar if present. A sidecar written for a different
/// checkpoint is rejected.
pub fn load_calibration(checkpoint: &Path) -> Result<Option<CalibrationResult>> {
    let path = calibration_path(checkpoint);
    if !path.exists() {
        return Ok(None);
    }
    let bytes = read_artifact(&path)?;
    let art: CalibrationArtifact = parse(&path, &bytes)?;
    if art.format != CALIBRATION_FORMAT {
        return Err(Error::Format {
            path,
            message: format!("unsupported calibration format `{}`", art.format),
        });
    }
    if art.checkpoint_sha256 != sha256_file(checkpoint)? {
        return Err(Error::Format {
            path,
            message: "calibration was produced for a different checkpoint".into(),
        });
    }
    Ok(Some(art.result))
}
