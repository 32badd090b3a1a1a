//! Dataset references and JSON config files.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use bvae_core::bvae::TrainConfig;
use bvae_core::datasets::{sha256_hex, ImageDataset};
use bvae_core::latent::LatentExperimentConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

/// A file-backed dataset with optional subsampling and class filtering.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    pub images: PathBuf,
    #[serde(default)]
    pub labels: Option<PathBuf>,
    /// Keep this many examples, drawn without replacement.
    #[serde(default)]
    pub subsample: Option<usize>,
    #[serde(default)]
    pub subsample_seed: u64,
    /// Drop examples of these classes (requires labels).
    #[serde(default)]
    pub exclude_classes: Vec<u32>,
}

impl DataSpec {
    pub fn from_images(images: PathBuf) -> Self {
        DataSpec {
            images,
            labels: None,
            subsample: None,
            subsample_seed: 0,
            exclude_classes: Vec::new(),
        }
    }

    fn rebase(&mut self, base: &Path) {
        self.images = base.join(&self.images);
        if let Some(l) = &mut self.labels {
            *l = base.join(&*l);
        }
    }

    pub fn load(&self) -> Result<ImageDataset> {
        let labels = self.labels.clone().or_else(|| sibling_labels(&self.images));
        let mut ds = ImageDataset::load_idx(&self.images, labels.as_deref())
            .with_context(|| format!("loading {}", self.images.display()))?;
        if !self.exclude_classes.is_empty() {
            if labels.is_none() {
                bail!(
                    "exclude_classes needs a label file for {}",
                    self.images.display()
                );
            }
            let drop: BTreeSet<u32> = self.exclude_classes.iter().copied().collect();
            let keep: Vec<usize> = (0..ds.len())
                .filter(|&i| !drop.contains(&ds.labels()[i]))
                .collect();
            ds = ds.select(&keep)?;
        }
        if let Some(n) = self.subsample {
            if n > ds.len() {
                bail!(
                    "{}: asked for {n} examples, only {} available",
                    self.images.display(),
                    ds.len()
                );
            }
            ds = ds.subsample(n, self.subsample_seed)?;
        }
        Ok(ds)
    }
}

/// `foo-images-idx3-ubyte.gz` pairs with `foo-labels-idx1-ubyte.gz`.
pub fn sibling_labels(images: &Path) -> Option<PathBuf> {
    let name = images.file_name()?.to_str()?;
    if !name.contains("images-idx3") {
        return None;
    }
    let candidate = images.with_file_name(name.replace("images-idx3", "labels-idx1"));
    candidate.exists().then_some(candidate)
}

/// `train` and `train-background` configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainFile {
    pub data: DataSpec,
    #[serde(default)]
    pub train: TrainConfig,
}

/// `latent-eval` configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatentFile {
    /// Labeled images for the classifier ensemble and the aggregated posterior.
    pub data: DataSpec,
    #[serde(default)]
    pub experiment: LatentExperimentConfig,
}

pub trait HasData {
    fn data_mut(&mut self) -> &mut DataSpec;
}

impl HasData for TrainFile {
    fn data_mut(&mut self) -> &mut DataSpec {
        &mut self.data
    }
}

impl HasData for LatentFile {
    fn data_mut(&mut self) -> &mut DataSpec {
        &mut self.data
    }
}

/// Parses a config file; relative data paths resolve against its directory.
/// Returns the config and the digest of the raw bytes.
pub fn read_config<T: DeserializeOwned + HasData>(path: &Path) -> Result<(T, String)> {
    let bytes = fs::read(path).with_context(|| format!("reading config {}", path.display()))?;
    let mut cfg: T = serde_json::from_slice(&bytes)
        .with_context(|| format!("config {} does not match the schema", path.display()))?;
    let base = path.parent().unwrap_or(Path::new("."));
    cfg.data_mut().rebase(base);
    Ok((cfg, sha256_hex(&bytes)))
}
