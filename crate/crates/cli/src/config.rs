//! The run config: one JSON file drives every subcommand.

use std::path::{Path, PathBuf};

use cxr_core::dataset::Split;
use cxr_core::optim::TrainConfig;
use cxr_core::snapshot::{SnapshotPolicy, TriggerMetric};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub preprocess: Preprocess,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "SnapshotPolicy::backward_default")]
    pub snapshot: SnapshotPolicy,
    pub families: Vec<Family>,
    #[serde(default)]
    pub cv: CvConfig,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    /// Digest of the config as written, before paths are resolved.
    #[serde(skip)]
    written_digest: Option<String>,
}

fn default_threshold() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Preprocess {
    /// Cached images are `size × size`.
    pub size: usize,
    pub jpeg_quality: u8,
    /// Splits whose images are re-encoded as JPEG before resizing.
    pub normalize_splits: Vec<Split>,
}

impl Default for Preprocess {
    fn default() -> Self {
        Self { size: cxr_core::imageio::INPUT_SIDE, jpeg_quality: 90, normalize_splits: Vec::new() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyKind {
    SmallCnn,
    FeatureHead,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Family {
    pub kind: FamilyKind,
    /// FVEC file, relative to the config file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_file: Option<PathBuf>,
    /// Overrides the top-level policy for this family.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snapshot: Option<SnapshotPolicy>,
    /// Records per class held out of training for validation accuracy.
    #[serde(default)]
    pub holdout: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CvConfig {
    pub k: usize,
}

impl Default for CvConfig {
    fn default() -> Self {
        Self { k: 10 }
    }
}

impl RunConfig {
    /// Parse and validate. Errors carry the offending field path.
    pub fn from_json(text: &str, base: &Path) -> Result<Self, CliError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let mut cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            CliError::Config(format!("{path}: {}", e.into_inner()))
        })?;
        cfg.written_digest = Some(cfg.digest());
        for f in &mut cfg.families {
            if let Some(p) = &f.feature_file {
                if p.is_relative() {
                    f.feature_file = Some(base.join(p));
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_json(&text, base)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |field: &str, msg: String| Err(CliError::Config(format!("{field}: {msg}")));
        if self.preprocess.size < 8 {
            return bad("preprocess.size", format!("{} is below 8", self.preprocess.size));
        }
        if !(1..=100).contains(&self.preprocess.jpeg_quality) {
            return bad("preprocess.jpeg_quality", format!("{} not in 1..=100", self.preprocess.jpeg_quality));
        }
        if self.train.seed != 0 {
            return bad("train.seed", "set the top-level seed instead".into());
        }
        if let Err(e) = self.train.validate() {
            return bad("train", e.to_string());
        }
        if let Err(e) = self.snapshot.validate() {
            return bad("snapshot", e.to_string());
        }
        if self.families.is_empty() {
            return bad("families", "at least one family is required".into());
        }
        for (i, f) in self.families.iter().enumerate() {
            let at = |field: &str| format!("families[{i}].{field}");
            if let Some(p) = f.snapshot {
                if let Err(e) = p.validate() {
                    return bad(&at("snapshot"), e.to_string());
                }
            }
            match (f.kind, &f.feature_file) {
                (FamilyKind::FeatureHead, None) => {
                    return bad(&at("feature_file"), "required for feature_head".into());
                }
                (FamilyKind::FeatureHead, Some(p)) if !p.is_file() => {
                    return bad(&at("feature_file"), format!("{} does not exist", p.display()));
                }
                (FamilyKind::SmallCnn, Some(_)) => {
                    return bad(&at("feature_file"), "not used by small_cnn".into());
                }
                _ => {}
            }
            if self.policy(i).trigger_metric == TriggerMetric::ValAccuracy && f.holdout == 0 {
                return bad(&at("holdout"), "a val_accuracy trigger needs a holdout".into());
            }
        }
        if self.cv.k < 2 {
            return bad("cv.k", format!("{} is below 2", self.cv.k));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad("threshold", format!("{} outside (0, 1)", self.threshold));
        }
        Ok(())
    }

    /// Effective snapshot policy of family `i`.
    pub fn policy(&self, i: usize) -> SnapshotPolicy {
        self.families[i].snapshot.unwrap_or(self.snapshot)
    }

    /// Short SHA-256 of the canonical config JSON, with feature paths as
    /// written in the file.
    pub fn digest(&self) -> String {
        if let Some(d) = &self.written_digest {
            return d.clone();
        }
        let v = serde_json::to_value(self).expect("config serializes");
        cxr_core::hex_digest(cxr_core::canonical_json(&v).as_bytes(), 16)
    }

    /// Directory-safe family name, e.g. `0_small_cnn`.
    pub fn family_name(&self, i: usize) -> String {
        let kind = match self.families[i].kind {
            FamilyKind::SmallCnn => "small_cnn",
            FamilyKind::FeatureHead => "feature_head",
        };
        format!("{i}_{kind}")
    }
}
