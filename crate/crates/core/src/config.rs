//! The sectioned TOML run configuration shared by every subcommand.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{ColumnMap, SplitRatios};
use crate::error::{Error, Result};
use crate::model::ArchitectureConfig;
use crate::synthgen::GeneratorConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Labeled shipment CSV read by train, calibrate and evaluate, and
    /// written by gen-data.
    pub path: PathBuf,
    pub columns: ColumnMap,
    pub split: SplitRatios,
    /// Split by a seeded random permutation instead of by planned arrival.
    pub shuffle_time: bool,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            path: PathBuf::from("shipments.csv"),
            columns: ColumnMap::default(),
            split: SplitRatios::default(),
            shuffle_time: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConformalSection {
    pub alpha: f64,
    /// Leave a head uncorrected instead of failing when its calibration
    /// subset is empty.
    pub allow_empty_subset: bool,
}

impl Default for ConformalSection {
    fn default() -> Self {
        Self {
            alpha: 0.2,
            allow_empty_subset: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub checkpoint: PathBuf,
    pub history: PathBuf,
    pub report_csv: PathBuf,
    pub report_json: PathBuf,
    pub predictions: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            checkpoint: PathBuf::from("artifacts/model.json"),
            history: PathBuf::from("artifacts/history.csv"),
            report_csv: PathBuf::from("artifacts/report.csv"),
            report_json: PathBuf::from("artifacts/report.json"),
            predictions: PathBuf::from("artifacts/predictions.csv"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    pub generator: GeneratorConfig,
    pub architecture: ArchitectureConfig,
    pub training: TrainConfig,
    pub conformal: ConformalSection,
    pub output: OutputSection,
}

const D_HIDDEN_CHOICES: [usize; 5] = [128, 192, 256, 320, 384];
const BATCH_CHOICES: [usize; 4] = [256, 512, 1024, 2048];
const CLIP_CHOICES: [f64; 3] = [0.0, 1.0, 5.0];

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let field = e
                .span()
                .map(|s| format!("line {}", text[..s.start].matches('\n').count() + 1))
                .unwrap_or_else(|| "config".into());
            Error::config(field, e.message().to_string())
        })
    }

    /// Parses a config file. Relative paths inside it resolve against the
    /// file's directory; see [`RunConfig::resolve`].
    pub fn load(path: &Path) -> Result<(Self, PathBuf)> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
            _ => Error::io(path, e),
        })?;
        let cfg = Self::from_toml_str(&text)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((cfg, base))
    }

    /// Hard constraints that no flag can waive.
    pub fn validate(&self) -> Result<()> {
        self.data.split.validate()?;
        if self.data.columns.categorical.is_empty() && self.data.columns.numerical.is_empty() {
            return Err(Error::config("data.columns", "at least one feature column is required"));
        }
        self.generator.validate()?;
        self.architecture.validate()?;
        self.training.validate()?;
        crate::conformal::validate_alpha(self.conformal.alpha)
    }

    /// Values outside the tuned hyperparameter ranges, as `(field, message)`.
    pub fn range_violations(&self) -> Vec<(String, String)> {
        let a = &self.architecture;
        let t = &self.training;
        let mut v = Vec::new();
        let mut check = |ok: bool, field: &str, msg: String| {
            if !ok {
                v.push((field.to_string(), msg));
            }
        };
        check(
            (2..=12).contains(&a.n_blocks),
            "architecture.n_blocks",
            format!("{} outside [2, 12]", a.n_blocks),
        );
        check(
            D_HIDDEN_CHOICES.contains(&a.d_hidden),
            "architecture.d_hidden",
            format!("{} not in {:?}", a.d_hidden, D_HIDDEN_CHOICES),
        );
        check(
            (0.0..=0.5).contains(&a.dropout),
            "architecture.dropout",
            format!("{} outside [0, 0.5]", a.dropout),
        );
        check(
            (1e-6..=3e-3).contains(&t.weight_decay),
            "training.weight_decay",
            format!("{} outside [1e-6, 3e-3]", t.weight_decay),
        );
        check(
            CLIP_CHOICES.contains(&t.clip_norm),
            "training.clip_norm",
            format!("{} not in {{0 (none), 1, 5}}", t.clip_norm),
        );
        check(
            BATCH_CHOICES.contains(&t.batch_size),
            "training.batch_size",
            format!("{} not in {:?}", t.batch_size, BATCH_CHOICES),
        );
        check(
            (1e-4..=1e-2).contains(&t.base_lr),
            "training.base_lr",
            format!("{} outside [1e-4, 1e-2]", t.base_lr),
        );
        v
    }

    /// [`validate`](Self::validate) plus the range check, which is downgraded
    /// to warnings when `allow_out_of_range` is set.
    pub fn check(&self, allow_out_of_range: bool) -> Result<()> {
        self.validate()?;
        let violations = self.range_violations();
        match violations.first() {
            None => Ok(()),
            Some(_) if allow_out_of_range => {
                for (f, m) in &violations {
                    log::warn!("{f}: {m} (allowed by --allow-out-of-range)");
                }
                Ok(())
            }
            Some((f, m)) => Err(Error::config(
                f.clone(),
                format!("{m}; pass --allow-out-of-range to override"),
            )),
        }
    }

    /// Applies a seed override to every seeded section.
    pub fn override_seed(&mut self, seed: u64) {
        self.training.seed = seed;
        self.generator.seed = seed;
    }

    /// Makes a config-relative path absolute (or base-relative).
    pub fn resolve(base: &Path, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        }
    }

    /// Fully resolved configuration, defaults included, for provenance.
    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// The echo as a single comment line for CSV artifacts.
    pub fn preamble(&self) -> Vec<String> {
        vec![format!("config {}", serde_json::to_string(&self.echo()).expect("json"))]
    }
}
