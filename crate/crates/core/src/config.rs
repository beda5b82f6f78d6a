//! Run configuration: TOML with `dataset`, `protocol`, `train`, `memory`,
//! `model` and `run` sections. Every field has a default; unknown keys are
//! rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::memory::MemoryBudget;
use crate::mixaug::AugMode;
use crate::optim::SgdConfig;
use crate::protocol::Protocol;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Synth,
    Idx,
    Cifar100,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    /// Directory holding the dataset files (`idx`, `cifar100`).
    pub path: Option<PathBuf>,
    /// Seed of the synthetic generator.
    pub seed: u64,
    pub num_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub image_side: usize,
    /// CIFAR-100: fine (100-way) rather than coarse labels.
    pub fine_labels: bool,
    /// Synthetic pixel-noise standard deviation.
    pub noise: f64,
    /// Synthetic blob-centre jitter, as a fraction of the image side.
    pub jitter: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Synth,
            path: None,
            seed: 0,
            num_classes: 10,
            train_per_class: 200,
            test_per_class: 50,
            image_side: 16,
            fine_labels: true,
            noise: 0.1,
            jitter: 0.07,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolConfig {
    pub kind: Protocol,
    pub steps: usize,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            kind: Protocol::B0,
            steps: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs_expand: usize,
    pub epochs_compress: usize,
    pub base_lr: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub tau: f64,
    pub alpha: f64,
    pub compress_aug: AugMode,
    pub ce_weight_in_compression: f64,
    /// Zero padding for random crops; 0 disables cropping.
    pub crop_pad: usize,
    pub flip: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs_expand: 200,
            epochs_compress: 200,
            base_lr: 0.1,
            batch_size: 128,
            momentum: 0.9,
            weight_decay: 5e-4,
            tau: 2.0,
            alpha: 0.2,
            compress_aug: AugMode::RCutmix,
            ce_weight_in_compression: 0.0,
            crop_pad: 2,
            flip: false,
        }
    }
}

impl TrainConfig {
    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetKind {
    Total,
    PerClass,
}

/// Unset fields take the protocol's rule: 2000 in total for B0, 20 per
/// class for B50.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MemoryConfig {
    pub budget: Option<BudgetKind>,
    pub size: Option<usize>,
}

impl MemoryConfig {
    pub fn resolve(&self, protocol_rule: MemoryBudget) -> MemoryBudget {
        let (kind, size) = match protocol_rule {
            MemoryBudget::Total(k) => (BudgetKind::Total, k),
            MemoryBudget::PerClass(m) => (BudgetKind::PerClass, m),
        };
        let size = self.size.unwrap_or(size);
        match self.budget.unwrap_or(kind) {
            BudgetKind::Total => MemoryBudget::Total(size),
            BudgetKind::PerClass => MemoryBudget::PerClass(size),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub width: usize,
    pub blocks_per_stage: usize,
    pub stages: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let b = BackboneConfig::default();
        Self {
            width: b.width,
            blocks_per_stage: b.blocks_per_stage,
            stages: b.stages,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Write wall-clock epoch times into metrics.csv. Off by default so the
    /// file is byte-identical across identical runs; times always go to
    /// timing.csv.
    pub record_epoch_time: bool,
    pub save_checkpoints: bool,
    pub eval_batch_size: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            record_epoch_time: false,
            save_checkpoints: true,
            eval_batch_size: 256,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub dataset: DatasetConfig,
    pub protocol: ProtocolConfig,
    pub train: TrainConfig,
    pub memory: MemoryConfig,
    pub model: ModelConfig,
    pub run: RunConfig,
}

/// 1-based line of `key` inside `[section]`, if present.
fn locate(text: &str, section: &str, key: &str) -> Option<usize> {
    let mut current = String::new();
    for (i, line) in text.lines().enumerate() {
        let t = line.trim();
        if let Some(name) = t.strip_prefix('[').and_then(|r| r.strip_suffix(']')) {
            current = name.trim().to_string();
        } else if current == section && t.split('=').next().map(str::trim) == Some(key) {
            return Some(i + 1);
        }
    }
    None
}

impl Config {
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(format!("{}: {}", origin.display(), e.to_string().trim_end())))?;
        if let Err((section, key, why)) = cfg.check() {
            let at = locate(text, section, key).map(|l| format!(" (line {l})")).unwrap_or_default();
            return Err(Error::Config(format!("{}: {section}.{key}{at}: {why}", origin.display())));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.check().map_err(|(s, k, why)| Error::Config(format!("{s}.{k}: {why}")))
    }

    fn check(&self) -> std::result::Result<(), (&'static str, &'static str, String)> {
        let positive = |ok: bool, s: &'static str, k: &'static str| {
            if ok {
                Ok(())
            } else {
                Err((s, k, "must be positive".to_string()))
            }
        };
        let d = &self.dataset;
        if d.kind != DatasetKind::Synth && d.path.is_none() {
            return Err(("dataset", "path", format!("required for dataset.kind = {:?}", d.kind)));
        }
        positive(d.num_classes >= 2, "dataset", "num_classes").map_err(|(s, k, _)| (s, k, "need at least 2 classes".into()))?;
        positive(d.train_per_class >= 2, "dataset", "train_per_class")
            .map_err(|(s, k, _)| (s, k, "need at least 2 samples per class".into()))?;
        positive(d.test_per_class >= 1, "dataset", "test_per_class")?;
        positive(d.image_side >= 4, "dataset", "image_side").map_err(|(s, k, _)| (s, k, "must be at least 4".into()))?;
        positive(d.noise > 0.0 && d.noise.is_finite(), "dataset", "noise")?;
        positive(d.jitter > 0.0 && d.jitter.is_finite(), "dataset", "jitter")?;
        positive(self.protocol.steps >= 1, "protocol", "steps")?;
        let t = &self.train;
        positive(t.epochs_expand >= 1, "train", "epochs_expand")?;
        positive(t.epochs_compress >= 1, "train", "epochs_compress")?;
        positive(t.base_lr > 0.0 && t.base_lr.is_finite(), "train", "base_lr")?;
        if t.batch_size < 2 {
            return Err(("train", "batch_size", "must be at least 2 (batch norm)".into()));
        }
        if !(0.0..1.0).contains(&t.momentum) {
            return Err(("train", "momentum", "must lie in [0, 1)".into()));
        }
        if !(t.weight_decay >= 0.0 && t.weight_decay.is_finite()) {
            return Err(("train", "weight_decay", "must be non-negative".into()));
        }
        positive(t.tau > 0.0 && t.tau.is_finite(), "train", "tau")?;
        positive(t.alpha > 0.0 && t.alpha.is_finite(), "train", "alpha")?;
        if !(t.ce_weight_in_compression >= 0.0 && t.ce_weight_in_compression.is_finite()) {
            return Err(("train", "ce_weight_in_compression", "must be non-negative".into()));
        }
        positive(self.memory.size != Some(0), "memory", "size")?;
        let m = &self.model;
        positive(m.width >= 1, "model", "width")?;
        positive(m.blocks_per_stage >= 1, "model", "blocks_per_stage")?;
        positive(m.stages >= 1, "model", "stages")?;
        positive(self.run.eval_batch_size >= 1, "run", "eval_batch_size")?;
        Ok(())
    }

    pub fn backbone(&self, in_channels: usize, image_side: usize) -> BackboneConfig {
        BackboneConfig {
            in_channels,
            image_side,
            width: self.model.width,
            blocks_per_stage: self.model.blocks_per_stage,
            stages: self.model.stages,
        }
    }
}
