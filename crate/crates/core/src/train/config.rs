//! Flat `key=value` run configuration.

use sha2::{Digest, Sha256};

use super::adam::AdamConfig;
use crate::data::SplitSpec;
use crate::error::{Error, Result};
use crate::network::config::{ModelConfig, MODEL_KEYS};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let a = AdamConfig::default();
        Self {
            lr: a.lr,
            epochs: 100,
            batch_size: 64,
            seed: 0,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

/// Everything that determines a training run except the dataset itself.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub split: SplitSpec,
    pub trials: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            split: SplitSpec::Fraction(0.1),
            trials: 1,
        }
    }
}

const TRAIN_KEYS: &[&str] = &[
    "lr", "epochs", "batch", "beta1", "beta2", "eps", "split", "trials",
];

/// Keys written into run manifests; accepted and ignored when a manifest
/// is fed back as a config.
const MANIFEST_KEYS: &[&str] = &["dataset", "dataset_crc32", "config_hash", "seeds", "out"];

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

impl RunConfig {
    pub fn get(&self, key: &str) -> Option<String> {
        if let Some(v) = self.model.get(key) {
            return Some(v);
        }
        let t = &self.train;
        Some(match key {
            "lr" => t.lr.to_string(),
            "epochs" => t.epochs.to_string(),
            "batch" => t.batch_size.to_string(),
            "seed" => t.seed.to_string(),
            "beta1" => t.beta1.to_string(),
            "beta2" => t.beta2.to_string(),
            "eps" => t.eps.to_string(),
            "split" => self.split.to_string(),
            "trials" => self.trials.to_string(),
            _ => return None,
        })
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if self.model.set(key, value)? {
            return Ok(());
        }
        let t = &mut self.train;
        match key {
            "lr" => t.lr = parse(key, value)?,
            "epochs" => t.epochs = parse(key, value)?,
            "batch" => t.batch_size = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "beta1" => t.beta1 = parse(key, value)?,
            "beta2" => t.beta2 = parse(key, value)?,
            "eps" => t.eps = parse(key, value)?,
            "split" => self.split = value.parse()?,
            "trials" => self.trials = parse(key, value)?,
            k if MANIFEST_KEYS.contains(&k) => {}
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got {line:?}", n + 1))
            })?;
            self.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    /// Every key except the seed, in canonical order.
    fn canonical(&self) -> String {
        MODEL_KEYS
            .iter()
            .chain(TRAIN_KEYS)
            .filter(|&&k| k != "trials")
            .map(|k| format!("{k}={}\n", self.get(k).unwrap()))
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = self.canonical();
        s.push_str(&format!(
            "seed={}\ntrials={}\n",
            self.train.seed, self.trials
        ));
        s
    }

    /// SHA-256 of the canonical config without the seed or trial count.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.trials.max(1) as u64)
            .map(|i| self.train.seed + i)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let t = &self.train;
        if t.batch_size == 0 || t.epochs == 0 {
            return Err(Error::Config("batch and epochs must be positive".into()));
        }
        if !(t.lr > 0.0)
            || !(0.0..1.0).contains(&t.beta1)
            || !(0.0..1.0).contains(&t.beta2)
            || !(t.eps > 0.0)
        {
            return Err(Error::Config("Adam constants out of range".into()));
        }
        Ok(())
    }
}
