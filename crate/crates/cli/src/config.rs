//! Run configuration: one JSON document covering every stage, with
//! command-line flags applied on top.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tdsv_core::audio::MfccConfig;
use tdsv_core::data::CorpusConfig;
use tdsv_core::scoring::{DcfConfig, FusionCnnConfig, FusionTrainConfig, TargetRule};
use tdsv_core::speaker::{SpeakerModelConfig, SpeakerTrainConfig};
use tdsv_core::text::{TextExtractorConfig, TrainConfig};
use tdsv_core::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub corpus_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub output_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            corpus_dir: "corpus".into(),
            checkpoint_dir: "checkpoints".into(),
            output_dir: "out".into(),
        }
    }
}

/// Trial sampling for scoring and fusion training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrialConfig {
    /// Trials per family; `None` keeps every pair.
    pub per_family: Option<usize>,
    pub target_rule: TargetRule,
}

impl Default for TrialConfig {
    fn default() -> Self {
        TrialConfig {
            per_family: None,
            target_rule: TargetRule::Accept,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub corpus: CorpusConfig,
    /// Fraction of each (speaker, label) cell kept for training.
    pub split_ratio: f64,
    pub features: MfccConfig,
    pub text: TextExtractorConfig,
    pub text_train: TrainConfig,
    pub speaker: SpeakerModelConfig,
    pub speaker_train: SpeakerTrainConfig,
    pub fusion: FusionCnnConfig,
    pub fusion_train: FusionTrainConfig,
    pub trials: TrialConfig,
    pub dcf: DcfConfig,
    /// Worker threads for trial scoring.
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            paths: Paths::default(),
            corpus: CorpusConfig::default(),
            split_ratio: 0.8,
            features: MfccConfig::default(),
            text: TextExtractorConfig::default(),
            text_train: TrainConfig::default(),
            speaker: SpeakerModelConfig::default(),
            speaker_train: SpeakerTrainConfig::default(),
            fusion: FusionCnnConfig::default(),
            fusion_train: FusionTrainConfig::default(),
            trials: TrialConfig::default(),
            dcf: DcfConfig::default(),
            threads: 1,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Architecture sizes of the published model.
    pub fn paper_shapes(mut self) -> Self {
        self.text = TextExtractorConfig::paper();
        self.speaker = SpeakerModelConfig::paper();
        self
    }

    /// Propagates the top-level seed into every seeded stage.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.corpus.seed = seed;
        self.text_train.seed = seed;
        self.speaker_train.seed = seed;
        self.fusion_train.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return Err(Error::Domain(format!("split_ratio must lie in (0, 1), got {}", self.split_ratio)));
        }
        self.text.validate()?;
        self.speaker.validate()?;
        self.dcf.validate()?;
        Ok(())
    }

    pub fn snapshot(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}
