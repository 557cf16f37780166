//! The run configuration file consumed by `train` and `eval`: task
//! selection, model hyperparameters, dataset and output paths, and the
//! full training configuration.

use anyhow::{bail, Context, Result};
use retlesion::nn::backbone::BackboneConfig;
use retlesion::nn::lesion_net::{LesionNetConfig, VARIANTS};
use retlesion::nn::multitask::{AttentionMode, DownsampleKind, GradingKind};
use retlesion::train::runner::TrainConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Segment,
    Grade,
}

/// Grading model selector as written in config files.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradeModel {
    Plain,
    LesionConcat,
    CwMaxPool,
    Conv,
}

impl GradeModel {
    pub fn kind(self) -> GradingKind {
        match self {
            GradeModel::Plain => GradingKind::Plain,
            GradeModel::LesionConcat => GradingKind::LesionConcat,
            GradeModel::CwMaxPool => GradingKind::MultiTask(AttentionMode::CwMaxPool),
            GradeModel::Conv => GradingKind::MultiTask(AttentionMode::Conv),
        }
    }
}

fn default_variant() -> u32 {
    16
}
fn default_model() -> GradeModel {
    GradeModel::Conv
}
fn default_channels() -> [usize; 5] {
    BackboneConfig::default().stage_channels
}
fn default_hidden() -> usize {
    64
}
fn default_downsample() -> DownsampleKind {
    DownsampleKind::MaxPool
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunConfig {
    pub task: Task,
    /// Segmentation variant X (expansive path stops at stride X).
    #[serde(default = "default_variant")]
    pub variant: u32,
    /// Grading model; ignored for segmentation runs.
    #[serde(default = "default_model")]
    pub model: GradeModel,
    #[serde(default = "default_channels")]
    pub backbone_channels: [usize; 5],
    #[serde(default = "default_hidden")]
    pub attention_hidden: usize,
    #[serde(default = "default_downsample")]
    pub downsample: DownsampleKind,
    /// Frozen side-branch checkpoint; required for grading models other
    /// than `plain`.
    #[serde(default)]
    pub lesion_checkpoint: Option<PathBuf>,
    pub dataset_dir: PathBuf,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let config: RunConfig = serde_json::from_str(&text)
            .with_context(|| format!("invalid config {}", path.display()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if !VARIANTS.contains(&self.variant) {
            bail!("variant {} not in {{2,4,8,16,32}}", self.variant);
        }
        self.train.validate()?;
        if !self.dataset_dir.exists() {
            bail!("dataset directory {} does not exist", self.dataset_dir.display());
        }
        if self.task == Task::Grade && self.model != GradeModel::Plain {
            match &self.lesion_checkpoint {
                None => bail!("grading model {:?} needs lesion_checkpoint", self.model),
                Some(p) if !p.exists() => {
                    bail!("lesion checkpoint {} does not exist", p.display())
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            stage_channels: self.backbone_channels,
        }
    }

    pub fn lesion_net_config(&self) -> LesionNetConfig {
        LesionNetConfig {
            variant: self.variant,
            backbone: self.backbone(),
            m: 8,
        }
    }
}
