use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::igsm::{Grouping, GROUPS};
use crate::kernels;

/// Which operators an IGSSB block runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum OperatorMode {
    #[default]
    Cascade,
    SpatialOnly,
    SpectralOnly,
}

impl OperatorMode {
    pub fn as_str(self) -> &'static str {
        match self {
            OperatorMode::Cascade => "cascade",
            OperatorMode::SpatialOnly => "spatial",
            OperatorMode::SpectralOnly => "spectral",
        }
    }

    pub fn has_spatial(self) -> bool {
        self != OperatorMode::SpectralOnly
    }

    pub fn has_spectral(self) -> bool {
        self != OperatorMode::SpatialOnly
    }
}

impl fmt::Display for OperatorMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OperatorMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cascade" => Ok(OperatorMode::Cascade),
            "spatial" | "spatial_only" => Ok(OperatorMode::SpatialOnly),
            "spectral" | "spectral_only" => Ok(OperatorMode::SpectralOnly),
            _ => Err(Error::Config(format!(
                "unknown operator mode {s:?} (expected cascade, spatial or spectral)"
            ))),
        }
    }
}

/// Architecture hyperparameters. Together with the seed these fully
/// determine the parameter set.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub patch_size: usize,
    pub pca_dim: usize,
    pub embed_dim: usize,
    pub num_stages: usize,
    pub blocks_per_stage: usize,
    /// Pooling window and stride used from stage 2 on.
    pub downsample: (usize, usize),
    pub ssm_state: usize,
    pub expand: usize,
    pub ffn_ratio: usize,
    pub num_classes: usize,
    pub grouping: Grouping,
    pub operators: OperatorMode,
    /// Feature maps of the 3×3×3 embedding convolution.
    pub conv_features: usize,
    pub classifier_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            patch_size: 13,
            pca_dim: 30,
            embed_dim: 32,
            num_stages: 3,
            blocks_per_stage: 1,
            downsample: (2, 1),
            ssm_state: 16,
            expand: 1,
            ffn_ratio: 2,
            num_classes: 16,
            grouping: Grouping::Interval,
            operators: OperatorMode::Cascade,
            conv_features: 8,
            classifier_hidden: 64,
        }
    }
}

pub(crate) const MODEL_KEYS: &[&str] = &[
    "patch",
    "pca",
    "embed_dim",
    "stages",
    "blocks_per_stage",
    "downsample",
    "state",
    "expand",
    "ffn_ratio",
    "classes",
    "grouping",
    "operators",
    "conv_features",
    "classifier_hidden",
];

fn parse_count(key: &str, value: &str) -> Result<usize> {
    value.trim().parse().map_err(|_| {
        Error::Config(format!(
            "{key}: expected a non-negative integer, got {value:?}"
        ))
    })
}

impl ModelConfig {
    /// Channel width inside operators.
    pub fn inner_dim(&self) -> usize {
        self.embed_dim * self.expand
    }

    /// Spatial side of every stage, after validating the geometry.
    pub fn validate(&self) -> Result<Vec<usize>> {
        let nonzero = [
            ("patch", self.patch_size),
            ("pca", self.pca_dim),
            ("embed_dim", self.embed_dim),
            ("stages", self.num_stages),
            ("blocks_per_stage", self.blocks_per_stage),
            ("state", self.ssm_state),
            ("expand", self.expand),
            ("ffn_ratio", self.ffn_ratio),
            ("classes", self.num_classes),
            ("conv_features", self.conv_features),
            ("classifier_hidden", self.classifier_hidden),
        ];
        for (k, v) in nonzero {
            if v == 0 {
                return Err(Error::Config(format!("{k} must be positive")));
            }
        }
        if self.patch_size.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "patch size {} must be odd so the patch has a center pixel",
                self.patch_size
            )));
        }
        if !self.embed_dim.is_multiple_of(GROUPS) || !self.inner_dim().is_multiple_of(GROUPS) {
            return Err(Error::Config(format!(
                "embed_dim {} (inner width {}) must be divisible by {GROUPS}",
                self.embed_dim,
                self.inner_dim()
            )));
        }
        let (m, s) = self.downsample;
        let mut sides = vec![self.patch_size];
        let mut p = self.patch_size;
        for stage in 2..=self.num_stages {
            p = kernels::pooled_side(p, m, s).ok_or_else(|| {
                Error::Config(format!(
                    "stage {stage}: downsample window {m} stride {s} does not tile a {p}x{p} grid \
                     ((p - m) must be a non-negative multiple of s)"
                ))
            })?;
            if p < 2 {
                return Err(Error::Config(format!(
                    "stage {stage}: spatial size {p} fell below 2 (window {m}, stride {s})"
                )));
            }
            sides.push(p);
        }
        Ok(sides)
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "patch" => self.patch_size.to_string(),
            "pca" => self.pca_dim.to_string(),
            "embed_dim" => self.embed_dim.to_string(),
            "stages" => self.num_stages.to_string(),
            "blocks_per_stage" => self.blocks_per_stage.to_string(),
            "downsample" => format!("{},{}", self.downsample.0, self.downsample.1),
            "state" => self.ssm_state.to_string(),
            "expand" => self.expand.to_string(),
            "ffn_ratio" => self.ffn_ratio.to_string(),
            "classes" => self.num_classes.to_string(),
            "grouping" => self.grouping.to_string(),
            "operators" => self.operators.to_string(),
            "conv_features" => self.conv_features.to_string(),
            "classifier_hidden" => self.classifier_hidden.to_string(),
            _ => return None,
        })
    }

    /// Sets one key. Returns `Ok(false)` when the key is not a model key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let v = value.trim();
        match key {
            "patch" => self.patch_size = parse_count(key, v)?,
            "pca" => self.pca_dim = parse_count(key, v)?,
            "embed_dim" => self.embed_dim = parse_count(key, v)?,
            "stages" => self.num_stages = parse_count(key, v)?,
            "blocks_per_stage" => self.blocks_per_stage = parse_count(key, v)?,
            "downsample" => {
                let (m, s) = v.split_once(',').ok_or_else(|| {
                    Error::Config(format!("downsample: expected \"m,s\", got {v:?}"))
                })?;
                self.downsample = (parse_count(key, m)?, parse_count(key, s)?);
            }
            "state" => self.ssm_state = parse_count(key, v)?,
            "expand" => self.expand = parse_count(key, v)?,
            "ffn_ratio" => self.ffn_ratio = parse_count(key, v)?,
            "classes" => self.num_classes = parse_count(key, v)?,
            "grouping" => self.grouping = v.parse()?,
            "operators" => self.operators = v.parse()?,
            "conv_features" => self.conv_features = parse_count(key, v)?,
            "classifier_hidden" => self.classifier_hidden = parse_count(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Canonical `key=value` lines.
    pub fn to_text(&self) -> String {
        MODEL_KEYS
            .iter()
            .map(|k| format!("{k}={}\n", self.get(k).unwrap()))
            .collect()
    }

    /// Parses text produced by [`ModelConfig::to_text`]; unknown keys are errors.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
            if !c.set(k.trim(), v)? {
                return Err(Error::Config(format!(
                    "line {}: unknown key {:?}",
                    n + 1,
                    k.trim()
                )));
            }
        }
        Ok(c)
    }
}
