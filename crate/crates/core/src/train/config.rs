//! Experiment configuration: one JSON document with the sections
//! `model_teacher`, `model_student`, `data`, `train`, `loss`, `bank`,
//! `eval` and `seeds`. Unknown keys are rejected everywhere.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::DataSpec;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::memory_bank::{DistributionMode, UpdateStrategy, DEFAULT_CAPACITY, DEFAULT_MOMENTUM};
use crate::nn::ModelSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub model_teacher: ModelSpec,
    pub model_student: ModelSpec,
    pub data: DataSpec,
    pub train: TrainConfig,
    pub loss: LossWeights,
    pub bank: BankConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    pub seeds: Seeds,
}

/// Optimizer and schedule settings shared by teacher and student training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Student (distillation) epochs.
    pub epochs: usize,
    pub teacher_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    #[serde(default)]
    pub lr_decay: LrDecay,
}

/// Step decay: the learning rate is multiplied by `factor` once the epoch
/// reaches each `milestones[i]·epochs` (rounded down).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrDecay {
    pub milestones: Vec<f64>,
    pub factor: f64,
}

impl Default for LrDecay {
    fn default() -> Self {
        Self {
            milestones: vec![0.5, 0.75],
            factor: 0.1,
        }
    }
}

impl LrDecay {
    /// Multiplier applied to the base rate during zero-based `epoch`.
    pub fn multiplier(&self, epoch: usize, total_epochs: usize) -> f64 {
        let passed = self
            .milestones
            .iter()
            .filter(|&&m| epoch >= (m * total_epochs as f64).floor() as usize)
            .count();
        self.factor.powi(passed as i32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BankConfig {
    pub capacity: usize,
    pub strategy: UpdateStrategy,
    pub mode: DistributionMode,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Transfer dataset for the linear probe; no probe when absent.
    #[serde(default)]
    pub probe: Option<ProbeSettings>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSettings {
    pub data: DataSpec,
    #[serde(default = "default_probe_steps")]
    pub steps: usize,
    #[serde(default = "default_probe_lr")]
    pub learning_rate: f64,
}

fn default_probe_steps() -> usize {
    200
}

fn default_probe_lr() -> f64 {
    0.1
}

/// The three seeds every random draw derives from. Dataset generators carry
/// their own seed inside the data section.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    /// Teacher, student, auxiliary-head and probe initialization.
    pub init: u64,
    pub shuffle: u64,
    pub bank: u64,
}

impl Seeds {
    pub fn all(seed: u64) -> Self {
        Self {
            init: seed,
            shuffle: seed,
            bank: seed,
        }
    }
}

fn config_err(path: &str, msg: impl Into<String>) -> Error {
    Error::Config {
        path: path.to_string(),
        msg: msg.into(),
    }
}

impl Config {
    /// Desk-scale default: 10 noisy 2-D blobs, a wide two-hidden-layer
    /// teacher and a narrow one-hidden-layer student.
    pub fn desk() -> Self {
        Self {
            model_teacher: ModelSpec::new(&[2, 256, 256], 10, 16),
            model_student: ModelSpec::new(&[2, 32], 10, 16),
            data: DataSpec::Blobs {
                num_classes: 10,
                per_class: 200,
                dim: 2,
                cluster_std: 0.2,
                label_noise: 0.05,
                seed: 0,
            },
            train: TrainConfig {
                epochs: 60,
                teacher_epochs: 60,
                batch_size: 64,
                learning_rate: 0.05,
                momentum: 0.9,
                weight_decay: 5e-4,
                lr_decay: LrDecay::default(),
            },
            loss: LossWeights::with_kd(),
            bank: BankConfig {
                capacity: 512,
                strategy: UpdateStrategy::Fifo,
                mode: DistributionMode::EnqueueFirst,
            },
            eval: EvalConfig::default(),
            seeds: Seeds::all(0),
        }
    }

    /// Desk model and data with the published training length, bank size
    /// and embedding width.
    pub fn paper_faithful() -> Self {
        let mut c = Self::desk();
        c.model_teacher.proj_dim = 128;
        c.model_student.proj_dim = 128;
        c.train.epochs = 240;
        c.train.teacher_epochs = 240;
        c.bank.capacity = DEFAULT_CAPACITY;
        c
    }

    /// Same as [`Config::desk`] with a momentum-updated bank.
    pub fn with_momentum_bank(mut self) -> Self {
        self.bank.strategy = UpdateStrategy::Momentum {
            alpha: DEFAULT_MOMENTUM,
        };
        self
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let config: Config = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            config_err(&path, e.into_inner().to_string())
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let spec_err = |section: &str, e: Error| config_err(section, e.to_string());
        self.model_teacher.validate().map_err(|e| spec_err("model_teacher", e))?;
        self.model_student.validate().map_err(|e| spec_err("model_student", e))?;
        for (section, spec) in [("model_teacher", &self.model_teacher), ("model_student", &self.model_student)] {
            if spec.proj_dim != self.model_teacher.proj_dim {
                return Err(config_err(
                    &format!("{section}.proj_dim"),
                    "teacher and student embedding widths must match",
                ));
            }
        }
        if self.model_student.input_dim() != self.model_teacher.input_dim() {
            return Err(config_err("model_student.layer_sizes", "input width differs from the teacher's"));
        }
        if self.model_student.num_classes != self.model_teacher.num_classes {
            return Err(config_err("model_student.num_classes", "class count differs from the teacher's"));
        }

        let t = &self.train;
        for (name, v) in [("epochs", t.epochs), ("teacher_epochs", t.teacher_epochs), ("batch_size", t.batch_size)] {
            if v == 0 {
                return Err(config_err(&format!("train.{name}"), "must be >= 1"));
            }
        }
        if !(t.learning_rate > 0.0 && t.learning_rate.is_finite()) {
            return Err(config_err("train.learning_rate", "must be positive"));
        }
        if !(0.0..1.0).contains(&t.momentum) {
            return Err(config_err("train.momentum", "must lie in [0, 1)"));
        }
        if !(t.weight_decay >= 0.0 && t.weight_decay.is_finite()) {
            return Err(config_err("train.weight_decay", "must be >= 0"));
        }
        if !(t.lr_decay.factor > 0.0 && t.lr_decay.factor.is_finite()) {
            return Err(config_err("train.lr_decay.factor", "multiplier must be positive"));
        }
        if let Some(i) = t.lr_decay.milestones.iter().position(|m| !(0.0..=1.0).contains(m)) {
            return Err(config_err(&format!("train.lr_decay.milestones[{i}]"), "must lie in [0, 1]"));
        }

        self.loss.validate().map_err(|e| spec_err("loss", e))?;
        if self.bank.capacity == 0 {
            return Err(config_err("bank.capacity", "must be >= 1"));
        }
        self.bank.strategy.validate().map_err(|e| spec_err("bank.strategy", e))?;
        if let Some(p) = &self.eval.probe {
            if p.steps == 0 {
                return Err(config_err("eval.probe.steps", "must be >= 1"));
            }
            if !(p.learning_rate > 0.0 && p.learning_rate.is_finite()) {
                return Err(config_err("eval.probe.learning_rate", "must be positive"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for c in [Config::desk(), Config::paper_faithful(), Config::desk().with_momentum_bank()] {
            c.validate().unwrap();
            assert_eq!(Config::from_json_str(&c.to_json()).unwrap(), c);
        }
        let p = Config::paper_faithful();
        assert_eq!((p.bank.capacity, p.train.epochs, p.model_student.proj_dim), (16384, 240, 128));
    }

    #[test]
    fn unknown_key_names_its_path() {
        let mut v: serde_json::Value = serde_json::from_str(&Config::desk().to_json()).unwrap();
        v["train"]["warmup"] = serde_json::json!(3);
        match Config::from_json_str(&v.to_string()).unwrap_err() {
            Error::Config { path, msg } => {
                assert_eq!(path, "train.warmup");
                assert!(msg.contains("warmup"), "{msg}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn semantic_errors_name_the_field() {
        let mut c = Config::desk();
        c.train.learning_rate = 0.0;
        let err = Config::from_json_str(&c.to_json()).unwrap_err();
        assert!(matches!(err, Error::Config { ref path, .. } if path == "train.learning_rate"));

        let mut c = Config::desk();
        c.model_student.proj_dim = 8;
        assert!(c.validate().is_err());
    }

    #[test]
    fn step_decay_schedule() {
        let d = LrDecay::default();
        let m: Vec<f64> = [0, 29, 30, 44, 45, 59].iter().map(|&e| d.multiplier(e, 60)).collect();
        assert_eq!(m[0], 1.0);
        assert_eq!(m[1], 1.0);
        assert!((m[2] - 0.1).abs() < 1e-15);
        assert!((m[3] - 0.1).abs() < 1e-15);
        assert!((m[4] - 0.01).abs() < 1e-15);
        assert!((m[5] - 0.01).abs() < 1e-15);
    }
}
