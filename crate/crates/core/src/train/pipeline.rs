use serde::Serialize;

use super::config::RunConfig;
use super::metrics::Metrics;
use super::trainer::{evaluate, train, EpochLog};
use crate::data::{extract_patches, pca_reduce, stratified_split, HsiCube, PatchSet, Split};
use crate::error::{Error, Result};
use crate::network::Model;

/// PCA to `pca` bands, then band normalization and patch indexing.
pub fn prepare(cube: &HsiCube, cfg: &RunConfig) -> Result<PatchSet> {
    if cube.num_classes() != cfg.model.num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes but config says {}",
            cube.num_classes(),
            cfg.model.num_classes
        )));
    }
    let (reduced, _) = pca_reduce(cube, cfg.model.pca_dim)?;
    extract_patches(&reduced, cfg.model.patch_size)
}

pub fn split_for(patches: &PatchSet, cfg: &RunConfig, seed: u64) -> Result<Split> {
    stratified_split(&patches.labels, patches.num_classes(), &cfg.split, seed)
}

/// The per-seed metrics file.
#[derive(Clone, Debug, Serialize)]
pub struct TrialResult {
    pub seed: u64,
    pub config_hash: String,
    pub oa: f64,
    pub aa: f64,
    pub kappa: f64,
    pub per_class: Vec<f64>,
    pub confusion: Vec<Vec<u64>>,
}

impl TrialResult {
    pub fn new(seed: u64, config_hash: String, m: Metrics) -> Self {
        Self {
            seed,
            config_hash,
            oa: m.oa,
            aa: m.aa,
            kappa: m.kappa,
            per_class: m.per_class,
            confusion: m.confusion,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }
}

pub struct Trial {
    pub model: Model<f32>,
    pub split: Split,
    pub log: Vec<EpochLog>,
    pub result: TrialResult,
}

/// Initializes, trains and evaluates one seed. The seed drives the split,
/// the weights and the batch order.
pub fn run_trial(
    patches: &PatchSet,
    cfg: &RunConfig,
    seed: u64,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<Trial> {
    let split = split_for(patches, cfg, seed)?;
    let mut model = Model::new(&cfg.model, seed)?;
    let mut tc = cfg.train.clone();
    tc.seed = seed;
    let log = train(&mut model, patches, &split.train, &tc, on_epoch)?;
    let metrics = evaluate(&model, patches, &split.test, tc.batch_size)?;
    let result = TrialResult::new(seed, cfg.hash(), metrics);
    Ok(Trial {
        model,
        split,
        log,
        result,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> MeanStd {
    let n = xs.len().max(1) as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    MeanStd {
        mean,
        std: var.sqrt(),
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Summary {
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub oa: MeanStd,
    pub aa: MeanStd,
    pub kappa: MeanStd,
    pub per_class: Vec<MeanStd>,
}

impl Summary {
    pub fn from_trials(results: &[TrialResult]) -> Result<Self> {
        let first = results
            .first()
            .ok_or_else(|| Error::Contract("no trials to summarize".into()))?;
        let col =
            |f: &dyn Fn(&TrialResult) -> f64| mean_std(&results.iter().map(f).collect::<Vec<_>>());
        let per_class = (0..first.per_class.len())
            .map(|c| col(&|r: &TrialResult| r.per_class[c]))
            .collect();
        Ok(Self {
            config_hash: first.config_hash.clone(),
            seeds: results.iter().map(|r| r.seed).collect(),
            oa: col(&|r| r.oa),
            aa: col(&|r| r.aa),
            kappa: col(&|r| r.kappa),
            per_class,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serialize")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_std_population() {
        let m = mean_std(&[1.0, 3.0]);
        assert_eq!((m.mean, m.std), (2.0, 1.0));
    }
}
