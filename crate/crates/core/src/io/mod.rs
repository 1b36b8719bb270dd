//! Point files, synthetic shapes, dataset manifests and checkpoints.

mod checkpoint;
mod manifest;
mod synth;
mod xyz;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CheckpointConfig, ClassifierMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use manifest::{manifest_load, write_dataset, DatasetManifest, ManifestEntry, Split, MANIFEST_FILE};
pub use synth::{sample_surface, synth_shapes, Shape};
pub use xyz::{load_xyz, parse_xyz, resample, save_xyz};

use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{normalize_cloud, PointCloud};

/// Labeled clouds with class names indexed by label.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub clouds: Vec<PointCloud>,
    pub labels: Vec<usize>,
    pub classes: Vec<String>,
    /// Relative path or generated name of each cloud.
    pub names: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.clouds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clouds.is_empty()
    }

    /// Subset in the given order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            clouds: indices.iter().map(|&i| self.clouds[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes.clone(),
            names: indices.iter().map(|&i| self.names[i].clone()).collect(),
        }
    }

    /// Load every manifest entry, resample to `n` points and normalize.
    pub fn load(manifest: &DatasetManifest, n: usize, seed: u64) -> Result<Dataset> {
        if manifest.entries.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let clouds = manifest
            .entries
            .par_iter()
            .enumerate()
            .map(|(i, e)| ingest(&manifest.root.join(&e.path), n, seed.wrapping_add(i as u64)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            clouds,
            labels: manifest.entries.iter().map(|e| manifest.class_index[&e.label]).collect(),
            classes: manifest.class_index.keys().cloned().collect(),
            names: manifest.entries.iter().map(|e| e.path.clone()).collect(),
        })
    }
}

/// Read a point file, resample it to `n` points and normalize it.
pub fn ingest(path: &Path, n: usize, seed: u64) -> Result<PointCloud> {
    let raw = load_xyz(path)?;
    normalize_cloud(&resample(&raw, n, seed)?)
}
