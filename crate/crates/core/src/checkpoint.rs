//! Versioned JSON checkpoints holding both networks, their optimizer
//! states, the threshold table, the training config and the knowledge base
//! they were trained on.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::Classifier;
use crate::kb::KnowledgeBase;
use crate::policy::Policy;
use crate::thresholds::ThresholdTable;
use crate::trainer::TrainConfig;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("checkpoint format version {found} is not supported (expected {FORMAT_VERSION})")]
    Version { found: u32 },
    #[error("checkpoint was trained on knowledge base {expected}, got {found}")]
    KbHashMismatch { expected: String, found: String },
    #[error("inconsistent checkpoint: {0}")]
    Inconsistent(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub kb_hash: String,
    pub windows_completed: usize,
    pub policy: Policy,
    pub classifier: Classifier,
    pub thresholds: ThresholdTable,
    pub config: TrainConfig,
    pub kb: KnowledgeBase,
}

#[derive(Deserialize)]
struct VersionProbe {
    format_version: u32,
}

impl Checkpoint {
    pub fn new(
        kb: &KnowledgeBase,
        policy: Policy,
        classifier: Classifier,
        thresholds: ThresholdTable,
        config: TrainConfig,
        windows_completed: usize,
    ) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            kb_hash: kb.content_hash(),
            windows_completed,
            policy,
            classifier,
            thresholds,
            config,
            kb: kb.clone(),
        }
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json_str(text: &str) -> Result<Self, CheckpointError> {
        let probe: VersionProbe = serde_json::from_str(text)?;
        if probe.format_version != FORMAT_VERSION {
            return Err(CheckpointError::Version {
                found: probe.format_version,
            });
        }
        let ckpt: Checkpoint = serde_json::from_str(text)?;
        ckpt.check_consistency()?;
        Ok(ckpt)
    }

    fn check_consistency(&self) -> Result<(), CheckpointError> {
        let fail = |m: &str| Err(CheckpointError::Inconsistent(m.to_string()));
        if self.kb.content_hash() != self.kb_hash {
            return fail("embedded knowledge base does not match its hash");
        }
        if !self.policy.model.is_consistent() || !self.classifier.model.is_consistent() {
            return fail("network shapes or parameters are invalid");
        }
        if self.policy.model.input_dim() != self.kb.state_dim() || self.policy.model.output_dim() != self.kb.n_findings() {
            return fail("policy does not fit the knowledge base");
        }
        if self.classifier.model.input_dim() != self.kb.state_dim()
            || self.classifier.model.output_dim() != self.kb.n_diseases()
        {
            return fail("classifier does not fit the knowledge base");
        }
        if self.thresholds.values.len() != self.kb.n_diseases() {
            return fail("threshold table length does not match the disease count");
        }
        Ok(())
    }

    /// Writes atomically: a temporary sibling file is renamed into place.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_json_string())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        Self::from_json_str(&fs::read_to_string(path)?)
    }

    /// Compares the recorded knowledge-base hash with `kb`. A mismatch is
    /// an error unless `allow_mismatch` is set, in which case it is logged
    /// and returned as a warning string.
    pub fn check_kb(&self, kb: &KnowledgeBase, allow_mismatch: bool) -> Result<Option<String>, CheckpointError> {
        let found = kb.content_hash();
        if found == self.kb_hash {
            return Ok(None);
        }
        if !allow_mismatch {
            return Err(CheckpointError::KbHashMismatch {
                expected: self.kb_hash.clone(),
                found,
            });
        }
        let warning = format!(
            "checkpoint knowledge base hash {} differs from {found}; continuing",
            self.kb_hash
        );
        log::warn!("{warning}");
        Ok(Some(warning))
    }
}
