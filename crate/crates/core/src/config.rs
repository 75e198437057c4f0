//! Experiment configuration, read from JSON. Every field has a default except `seed`.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::fusion::{FusionConfig, FusionMechanism};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// Multi-modal semantic segmentation.
    #[default]
    Smm,
    /// Triple-modal salient object detection.
    Vdt,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Smm => "smm",
            Task::Vdt => "vdt",
        }
    }
}

/// Number of modalities the generators produce.
pub const MODALITY_POOL: usize = 3;
/// Channels per modality image.
pub const INPUT_CHANNELS: usize = 3;

mod defaults {
    pub fn modalities() -> Vec<usize> {
        vec![0, 1, 2]
    }
    pub fn part_types() -> usize {
        8
    }
    pub fn routing_iters() -> usize {
        3
    }
    pub fn lambda_schedule() -> Vec<f64> {
        vec![1.0, 2.0, 3.0]
    }
    pub fn channels() -> usize {
        64
    }
    pub fn classes() -> usize {
        4
    }
    pub fn yes() -> bool {
        true
    }
    pub fn decoder_stack() -> usize {
        2
    }
    pub fn keep_fraction() -> f64 {
        0.7
    }
    pub fn min_kept() -> usize {
        16
    }
    pub fn beta2() -> f64 {
        0.3
    }
    pub fn alpha_s() -> f64 {
        0.5
    }
    pub fn learning_rate() -> f64 {
        0.01
    }
    pub fn epochs() -> usize {
        100
    }
    pub fn batch() -> usize {
        4
    }
    pub fn scenes() -> usize {
        64
    }
    pub fn output_dir() -> std::path::PathBuf {
        "runs".into()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    #[serde(default)]
    pub task: Task,
    /// Which generated modalities to use, in order; the first is the primary one.
    #[serde(default = "defaults::modalities")]
    pub modalities: Vec<usize>,
    /// Primary capsule types per modality.
    #[serde(default = "defaults::part_types")]
    pub part_types: usize,
    /// Whole capsule types; defaults to the class count (segmentation) or 2 (saliency).
    #[serde(default)]
    pub whole_types: Option<usize>,
    #[serde(default = "defaults::routing_iters")]
    pub routing_iters: usize,
    #[serde(default = "defaults::lambda_schedule")]
    pub lambda_schedule: Vec<f64>,
    #[serde(default = "defaults::channels")]
    pub channels: usize,
    #[serde(default = "defaults::classes")]
    pub classes: usize,
    #[serde(default = "defaults::yes")]
    pub share_params: bool,
    #[serde(default)]
    pub fusion: FusionMechanism,
    /// Number of stacked saliency sub-decoders (1 or 2).
    #[serde(default = "defaults::decoder_stack")]
    pub decoder_stack: usize,
    #[serde(default = "defaults::keep_fraction")]
    pub keep_fraction: f64,
    #[serde(default = "defaults::min_kept")]
    pub min_kept: usize,
    #[serde(default = "defaults::beta2")]
    pub beta2: f64,
    #[serde(default = "defaults::alpha_s")]
    pub alpha_s: f64,
    #[serde(default = "defaults::learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
    /// Scenes per optimiser step.
    #[serde(default = "defaults::batch")]
    pub batch: usize,
    /// Scenes in the generated training set.
    #[serde(default = "defaults::scenes")]
    pub scenes: usize,
    /// Square image side; defaults to 16 (segmentation) or 32 (saliency).
    #[serde(default)]
    pub size: Option<usize>,
    #[serde(default = "defaults::output_dir")]
    pub output_dir: PathBuf,
}

impl PipelineConfig {
    /// Defaults for `task` with the given seed.
    pub fn new(task: Task, seed: u64) -> Self {
        let mut cfg: Self = serde_json::from_value(serde_json::json!({ "seed": seed })).expect("defaults deserialize");
        cfg.task = task;
        cfg
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| config_err!("{e}"))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn whole_types(&self) -> usize {
        self.whole_types.unwrap_or(match self.task {
            Task::Smm => self.classes,
            Task::Vdt => 2,
        })
    }

    pub fn size(&self) -> usize {
        self.size.unwrap_or(match self.task {
            Task::Smm => 16,
            Task::Vdt => 32,
        })
    }

    pub fn fusion_config(&self) -> FusionConfig {
        FusionConfig {
            part_types: self.part_types,
            whole_types: self.whole_types(),
            routing_iters: self.routing_iters,
            lambda_schedule: self.lambda_schedule.clone(),
            share_params: self.share_params,
            mechanism: self.fusion,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.modalities.len();
        if !(2..=MODALITY_POOL).contains(&m) {
            return Err(config_err!("modality count must be 2 or 3, got {m}"));
        }
        for (k, &idx) in self.modalities.iter().enumerate() {
            if idx >= MODALITY_POOL {
                return Err(config_err!("modality index {idx} out of range (0..{MODALITY_POOL})"));
            }
            if self.modalities[..k].contains(&idx) {
                return Err(config_err!("modality {idx} listed twice"));
            }
        }
        let counts = [
            ("part_types", self.part_types),
            ("whole_types", self.whole_types()),
            ("routing_iters", self.routing_iters),
            ("channels", self.channels),
            ("classes", self.classes),
            ("epochs", self.epochs),
            ("batch", self.batch),
            ("scenes", self.scenes),
            ("size", self.size()),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(config_err!("{name} must be at least 1"));
            }
        }
        if self.task == Task::Smm && self.classes < 2 {
            return Err(config_err!("segmentation needs at least 2 classes"));
        }
        let min_size = match self.task {
            Task::Smm => 4,
            Task::Vdt => 8,
        };
        if self.size() < min_size {
            return Err(config_err!("size must be at least {min_size} for {}", self.task.name()));
        }
        if !(1..=2).contains(&self.decoder_stack) {
            return Err(config_err!("decoder_stack must be 1 or 2"));
        }
        if !(self.keep_fraction > 0.0 && self.keep_fraction <= 1.0) {
            return Err(config_err!("keep_fraction must lie in (0, 1]"));
        }
        if !(self.beta2 > 0.0) {
            return Err(config_err!("beta2 must be positive"));
        }
        if !(0.0..=1.0).contains(&self.alpha_s) {
            return Err(config_err!("alpha_s must lie in [0, 1]"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(config_err!("learning_rate must be finite and non-negative"));
        }
        self.fusion_config().validate()
    }
}
