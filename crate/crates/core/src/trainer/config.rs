//! Training configuration, read from and written to TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::AugmentPolicy;
use crate::encoder::{EncoderSpec, DEFAULT_MOMENTUM};
use crate::error::{Error, Result};
use crate::eval::KnnConfig;
use crate::memory_bank::hard_negative_count;
use crate::objective::LossConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    /// Gaussian clusters generated from the `classes`/`per_class`/`dim`/`spread`/`seed` keys.
    Synthetic,
    /// A CSV written by `gen-data` at `path`.
    Csv,
    /// Directory of CIFAR-10 binary batches at `path`.
    Cifar10,
    /// Directory holding CIFAR-100 `train.bin` / `test.bin` at `path`.
    Cifar100,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    pub classes: usize,
    pub per_class: usize,
    pub dim: usize,
    pub spread: f64,
    pub seed: u64,
    /// Held-out fraction for vector data; CIFAR ships its own test split.
    pub test_fraction: f64,
    pub split_seed: u64,
    /// Noise for vector two-view augmentation; half the spread when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise_sigma: Option<f64>,
    pub dropout_prob: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            path: None,
            classes: 10,
            per_class: 100,
            dim: 64,
            spread: 0.1,
            seed: 3,
            test_fraction: 0.1,
            split_seed: 0,
            noise_sigma: None,
            dropout_prob: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub sgd_momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub queue_capacity: usize,
    /// EMA coefficient of the key encoder.
    pub momentum_coefficient: f64,
    pub seed: u64,
    /// KNN evaluation every this many epochs; 0 disables.
    pub eval_interval: usize,
    /// Checkpoint every this many steps; 0 keeps only the initial and final ones.
    pub checkpoint_interval: usize,
    pub output_dir: PathBuf,
    pub loss: LossConfig,
    pub encoder: EncoderSpec,
    pub knn: KnnConfig,
    pub data: DataConfig,
    pub augment: AugmentPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            sgd_momentum: 0.9,
            weight_decay: 5e-4,
            epochs: 20,
            batch_size: 64,
            queue_capacity: 512,
            momentum_coefficient: DEFAULT_MOMENTUM,
            seed: 0,
            eval_interval: 5,
            checkpoint_interval: 0,
            output_dir: PathBuf::from("runs/default"),
            loss: LossConfig::default(),
            encoder: EncoderSpec::default(),
            knn: KnnConfig::default(),
            data: DataConfig::default(),
            augment: AugmentPolicy::default(),
        }
    }
}

impl TrainConfig {
    /// Large-scale settings: CIFAR-10, batch 256, queue 4096, 200 epochs.
    pub fn large_scale(cifar_dir: PathBuf) -> Self {
        Self {
            epochs: 200,
            batch_size: 256,
            queue_capacity: crate::memory_bank::DEFAULT_CAPACITY,
            eval_interval: 10,
            checkpoint_interval: 1950,
            output_dir: PathBuf::from("runs/large_scale"),
            encoder: EncoderSpec::new(vec![3072, 512, 128, 64], Default::default()),
            data: DataConfig { source: DataSource::Cifar10, path: Some(cifar_dir), ..DataConfig::default() },
            ..Self::default()
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::ConfigInvalid(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is always representable in TOML")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::ConfigInvalid(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.sgd_momentum) {
            return bad(format!("sgd_momentum must lie in [0, 1), got {}", self.sgd_momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if !(0.0..=1.0).contains(&self.momentum_coefficient) {
            return bad(format!("momentum_coefficient must lie in [0, 1], got {}", self.momentum_coefficient));
        }
        if self.batch_size == 0 || self.queue_capacity == 0 {
            return bad("batch_size and queue_capacity must be positive".into());
        }
        if self.batch_size > self.queue_capacity || !self.queue_capacity.is_multiple_of(self.batch_size) {
            return bad(format!(
                "queue_capacity {} must be a multiple of batch_size {}",
                self.queue_capacity, self.batch_size
            ));
        }
        self.loss.validate()?;
        self.knn.validate()?;
        self.augment.validate()?;
        self.encoder.validate().map_err(|e| Error::ConfigInvalid(e.to_string()))?;
        if hard_negative_count(self.loss.hard_fraction, self.queue_capacity) == 0 {
            return bad("hard_fraction selects no negatives".into());
        }
        let d = &self.data;
        if !(0.0..1.0).contains(&d.test_fraction) {
            return bad(format!("data.test_fraction must lie in [0, 1), got {}", d.test_fraction));
        }
        if matches!(d.source, DataSource::Csv | DataSource::Cifar10 | DataSource::Cifar100) && d.path.is_none() {
            return bad(format!("data.path is required for source {:?}", d.source));
        }
        if !(0.0..=1.0).contains(&d.dropout_prob) {
            return bad(format!("data.dropout_prob must lie in [0, 1], got {}", d.dropout_prob));
        }
        Ok(())
    }

    /// Fields that fix tensor shapes; a resumed run must agree on all of them.
    pub fn check_resumable_from(&self, saved: &TrainConfig) -> Result<()> {
        let same = self.encoder == saved.encoder
            && self.batch_size == saved.batch_size
            && self.queue_capacity == saved.queue_capacity
            && self.seed == saved.seed
            && self.data == saved.data;
        if same {
            Ok(())
        } else {
            Err(Error::ConfigInvalid(
                "config disagrees with the checkpoint on encoder, batch_size, queue_capacity, seed or data".into(),
            ))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = TrainConfig::default();
        c.validate().unwrap();
        let text = c.to_toml_string();
        assert_eq!(TrainConfig::from_toml_str(&text).unwrap(), c);
        let p = TrainConfig::large_scale("cifar".into());
        p.validate().unwrap();
        assert_eq!(TrainConfig::from_toml_str(&p.to_toml_string()).unwrap(), p);
    }

    #[test]
    fn documented_defaults() {
        let c = TrainConfig::default();
        assert_eq!((c.learning_rate, c.sgd_momentum, c.weight_decay), (0.01, 0.9, 5e-4));
        assert_eq!(c.momentum_coefficient, 0.99);
        assert_eq!((c.knn.neighbors, c.knn.temperature), (200, 0.1));
        assert_eq!(c.loss.hard_fraction, 0.2);
        assert!((0.01..=0.1).contains(&c.loss.view_weight));
        let a = &c.augment;
        assert_eq!((a.brightness, a.contrast, a.saturation, a.hue), (0.4, 0.4, 0.4, 0.1));
        assert_eq!((a.grayscale_prob, a.blur_prob, a.flip_prob), (0.2, 0.5, 0.5));
        let big = TrainConfig::large_scale("cifar".into());
        assert_eq!((big.batch_size, big.epochs, big.queue_capacity), (256, 200, 4096));
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = TrainConfig::from_toml_str("learning_rat = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("learning_rat"), "{err}");
        let err = TrainConfig::from_toml_str("[loss]\ntau = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("tau"), "{err}");
    }

    #[test]
    fn invalid_values() {
        for text in [
            "batch_size = 48\nqueue_capacity = 512\n",
            "learning_rate = 0.0\n",
            "momentum_coefficient = 1.5\n",
            "[loss]\ntemperature = -1.0\n",
            "[data]\nsource = \"csv\"\n",
        ] {
            assert!(matches!(TrainConfig::from_toml_str(text), Err(Error::ConfigInvalid(_))), "{text}");
        }
    }
}
