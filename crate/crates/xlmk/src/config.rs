//! Run configuration: one JSON file covering encoder, training, objectives,
//! data handling and probe defaults. Unknown keys are rejected, every field
//! is validated before any compute starts, and the canonical hash of the
//! resolved config is stamped into checkpoints and the run directory.

use std::path::Path;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::EncoderConfig;
use crate::error::{Result, XlmkError};
use crate::kb::KnowledgeBase;
use crate::objectives::ObjectiveConfig;
use crate::rng::substream;
use crate::text::{MepMaskMode, Vocab};
use crate::trainer::{TrainConfig, TrainSetup};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Vocabulary frequency cutoff.
    pub min_count: usize,
    pub mep_mask_mode: MepMaskMode,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            min_count: 1,
            mep_mask_mode: MepMaskMode::Collapse,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    /// Candidate pool size for ranking probes (None = full pool).
    pub pool_size: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed; when set it derives the encoder and trainer seeds.
    pub seed: Option<u64>,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub objectives: ObjectiveConfig,
    pub data: DataConfig,
    pub probe: ProbeConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            XlmkError::ConfigInvalid(format!("cannot read {}: {e}", path.display()))
        })?;
        let config: RunConfig = serde_json::from_str(&text).map_err(|e| {
            XlmkError::ConfigInvalid(format!("{}: {e}", path.display()))
        })?;
        config.validate()?;
        Ok(config)
    }

    /// Field-level checks that do not need the KB (sizes derived from data
    /// are validated at resolve time).
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.data.min_count == 0 {
            return Err(XlmkError::ConfigInvalid("min_count must be >= 1".into()));
        }
        if let Some(n) = self.probe.pool_size {
            if n < 2 {
                return Err(XlmkError::ConfigInvalid(
                    "probe.pool_size must be >= 2".into(),
                ));
            }
        }
        Ok(())
    }

    /// Apply the master seed and fill the data-derived encoder fields.
    pub fn resolve(&self, kb: &KnowledgeBase, vocab: &Vocab) -> Result<TrainSetup> {
        let mut encoder = self.encoder.clone();
        let mut train = self.train.clone();
        if let Some(master) = self.seed {
            encoder.seed = substream(master, "init").next_u64();
            train.seed = substream(master, "data").next_u64();
        }
        if encoder.vocab_size == 0 {
            encoder.vocab_size = vocab.len();
        }
        if encoder.n_relations == 0 {
            encoder.n_relations = kb.num_relations().max(1);
        }
        if encoder.vocab_size != vocab.len() {
            return Err(XlmkError::ConfigInvalid(format!(
                "config vocab_size {} does not match the built vocabulary ({})",
                encoder.vocab_size,
                vocab.len()
            )));
        }
        encoder.validate()?;
        let setup = TrainSetup {
            encoder,
            train,
            objectives: self.objectives.clone(),
            mep_mask_mode: self.data.mep_mask_mode,
        };
        Ok(setup)
    }

    /// SHA-256 of the canonical JSON serialization.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(canonical.as_bytes());
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// The lock-file contents: resolved view plus the hash.
    pub fn lock_json(&self, setup: &TrainSetup) -> String {
        serde_json::to_string_pretty(&serde_json::json!({
            "hash": self.hash(),
            "config": self,
            "resolved": setup,
        }))
        .expect("lock serializes")
    }
}
