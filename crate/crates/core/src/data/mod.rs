//! Scenes, preprocessing, patches and train/test splits.

pub mod bytes;
pub mod hsif;
pub mod patches;
pub mod pca;
pub mod split;
pub mod synth;

pub use patches::{extract_patches, PatchSet};
pub use pca::{normalize_bands, pca_reduce, Pca};
pub use split::{stratified_split, Split, SplitSpec};

use crate::error::{Error, Result};

/// A full scene: reflectance `[H, W, V]` stored pixel-interleaved, an
/// `[H, W]` label map (0 = unlabeled, 1..=C = class) and class names.
#[derive(Clone, Debug, PartialEq)]
pub struct HsiCube {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub values: Vec<f32>,
    pub labels: Vec<u16>,
    pub class_names: Vec<String>,
}

impl HsiCube {
    pub fn new(
        height: usize,
        width: usize,
        bands: usize,
        values: Vec<f32>,
        labels: Vec<u16>,
        class_names: Vec<String>,
    ) -> Result<Self> {
        if values.len() != height * width * bands || labels.len() != height * width {
            return Err(Error::shape(
                "scene",
                &[height, width, bands],
                &[values.len(), labels.len()],
            ));
        }
        let c = class_names.len();
        let mut counts = vec![0usize; c + 1];
        for (i, &l) in labels.iter().enumerate() {
            if l as usize > c {
                return Err(Error::Contract(format!(
                    "label {l} at pixel ({}, {}) exceeds class count {c}",
                    i / width,
                    i % width
                )));
            }
            counts[l as usize] += 1;
        }
        if let Some(k) = (1..=c).find(|&k| counts[k] == 0) {
            return Err(Error::Contract(format!(
                "class {k} ({:?}) has no labeled pixels",
                class_names[k - 1]
            )));
        }
        Ok(Self {
            height,
            width,
            bands,
            values,
            labels,
            class_names,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn pixel(&self, r: usize, c: usize) -> &[f32] {
        let o = (r * self.width + c) * self.bands;
        &self.values[o..o + self.bands]
    }

    pub fn value(&self, r: usize, c: usize, band: usize) -> f32 {
        self.values[(r * self.width + c) * self.bands + band]
    }

    pub fn label(&self, r: usize, c: usize) -> u16 {
        self.labels[r * self.width + c]
    }

    /// Labeled pixels per class, index 0 = class 1.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for &l in &self.labels {
            if l > 0 {
                counts[l as usize - 1] += 1;
            }
        }
        counts
    }

    pub fn labeled_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l > 0).count()
    }
}
