//! JSON experiment configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::TaskMix;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::Schedule;
use crate::vision::VisionConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StageSelect {
    Pretrain,
    Finetune,
    #[default]
    Both,
}

impl StageSelect {
    pub fn runs_pretrain(self) -> bool {
        matches!(self, StageSelect::Pretrain | StageSelect::Both)
    }

    pub fn runs_finetune(self) -> bool {
        matches!(self, StageSelect::Finetune | StageSelect::Both)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub stage: StageSelect,
    pub pretrain: Schedule,
    pub finetune: Schedule,
    /// Also train the decoder adapters during pretraining.
    pub arcana_star: bool,
    pub task_mix: TaskMix,
    pub eval_samples: usize,
    pub eval_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: StageSelect::Both,
            pretrain: Schedule {
                steps: 300,
                seed: 1,
                ..Schedule::default()
            },
            finetune: Schedule {
                seed: 2,
                ..Schedule::default()
            },
            arcana_star: false,
            task_mix: TaskMix::default(),
            eval_samples: 500,
            eval_seed: 7,
        }
    }
}

/// Sweep grids for the ablation commands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub betas: Vec<f64>,
    pub queries: Vec<usize>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            betas: vec![1.0, 0.75, 0.5, 0.25, 0.0],
            queries: vec![4, 8, 16],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttnExportConfig {
    /// Seed of the held-out sample whose attention is exported.
    pub sample_seed: u64,
    /// `majority` or a color index for the count question.
    pub question: PromptQuestion,
}

impl Default for AttnExportConfig {
    fn default() -> Self {
        Self {
            sample_seed: 0,
            question: PromptQuestion::Majority,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptQuestion {
    Majority,
    Count(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub directory: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            directory: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Seeds every weight initialisation.
    pub seed: u64,
    pub model: ModelConfig,
    pub vision: VisionConfig,
    pub train: TrainConfig,
    pub ablation: AblationConfig,
    pub attn_export: AttnExportConfig,
    pub output: OutputConfig,
}

impl ExperimentConfig {
    /// A model small enough for exhaustive gradient checks.
    pub fn tiny() -> Self {
        let mut c = Self::default();
        c.vision.grid = 3;
        c.vision.colors = 3;
        c.vision.width = 8;
        c.vision.blocks = 2;
        c.vision.heads = 2;
        c.vision.ffn_mult = 2;
        c.vision.n_queries = 3;
        c.vision.ladder_layers = 2;
        c.vision.adapter_hidden = 8;
        c.model.decoder.layers = 2;
        c.model.decoder.heads = 2;
        c.model.decoder.width = 16;
        c.model.decoder.ffn = 16;
        c.model.decoder.vocab = crate::data::vocab::MIN_VOCAB;
        c.model.decoder.max_len = 24;
        c.model.lora.rank = 8;
        c.output.directory = PathBuf::from("runs/tiny");
        c
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let field = e.path().to_string();
            Error::config(if field == "." { "<root>".into() } else { field }, e.inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Checks every section before any compute.
    pub fn validate(&self) -> Result<()> {
        self.vision.validate()?;
        self.model.decoder.validate()?;
        self.model.lora.ranks().map_err(|e| match e {
            Error::Config { field, message } => Error::config(format!("model.{field}"), message),
            other => other,
        })?;
        self.train.pretrain.validate("train.pretrain")?;
        self.train.finetune.validate("train.finetune")?;
        let m = self.train.task_mix;
        if !(m.majority >= 0.0 && m.count >= 0.0 && m.majority + m.count > 0.0) {
            return Err(Error::config("train.task_mix", "weights must be non-negative with a positive sum"));
        }
        for (i, b) in self.ablation.betas.iter().enumerate() {
            if !(0.0..=1.0).contains(b) {
                return Err(Error::config(format!("ablation.betas[{i}]"), "must lie in [0, 1]"));
            }
        }
        if let PromptQuestion::Count(k) = self.attn_export.question {
            if k >= self.vision.colors {
                return Err(Error::config("attn_export.question", format!("color {k} out of range")));
            }
        }
        // building validates the cross-section constraints (vocab, context)
        crate::model::Model::build(&self.model, &self.vision, self.seed).map(|_| ())
    }
}
