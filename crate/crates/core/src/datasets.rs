//! Image datasets: IDX parsing, cached fetching, class splits, corruption for
//! background models, minibatching and synthetic 2-D mixtures.

use std::collections::BTreeSet;
use std::fs::{self, File, OpenOptions};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{seeded, standard_normals};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// N examples of dimension `d_x`, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageDataset {
    images: Vec<f64>,
    d_x: usize,
    labels: Vec<u32>,
    n_classes: u32,
    source_name: String,
    /// Integer maximum of the original pixel grid; `None` for real-valued data.
    pixel_depth: Option<u32>,
}

impl ImageDataset {
    pub fn new(
        images: Vec<f64>,
        d_x: usize,
        labels: Vec<u32>,
        n_classes: u32,
        source_name: impl Into<String>,
        pixel_depth: Option<u32>,
    ) -> Result<Self> {
        if d_x == 0 || labels.is_empty() {
            return Err(Error::Domain("dataset must be non-empty".into()));
        }
        if images.len() != labels.len() * d_x {
            return Err(Error::Shape {
                op: "dataset",
                left: vec![labels.len(), d_x],
                right: vec![images.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::Domain(format!(
                "label {bad} >= class count {n_classes}"
            )));
        }
        if pixel_depth.is_some() {
            if let Some(bad) = images.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::Domain(format!("pixel value {bad} outside [0,1]")));
            }
        } else if images.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dataset".into()));
        }
        Ok(ImageDataset {
            images,
            d_x,
            labels,
            n_classes,
            source_name: source_name.into(),
            pixel_depth,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn d_x(&self) -> usize {
        self.d_x
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn n_classes(&self) -> u32 {
        self.n_classes
    }

    pub fn source_name(&self) -> &str {
        &self.source_name
    }

    pub fn pixel_depth(&self) -> Option<u32> {
        self.pixel_depth
    }

    pub fn pixels(&self) -> &[f64] {
        &self.images
    }

    pub fn image(&self, i: usize) -> &[f64] {
        &self.images[i * self.d_x..(i + 1) * self.d_x]
    }

    /// Rows `indices` stacked into a `len × d_x` matrix.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(indices.len() * self.d_x);
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        Tensor::matrix(indices.len(), self.d_x, data).expect("rows come from a validated dataset")
    }

    /// Keeps the given rows, in order. Empty selections are rejected.
    pub fn select(&self, indices: &[usize]) -> Result<ImageDataset> {
        let mut images = Vec::with_capacity(indices.len() * self.d_x);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Domain(format!("row {i} out of range")));
            }
            images.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        ImageDataset::new(
            images,
            self.d_x,
            labels,
            self.n_classes,
            self.source_name.clone(),
            self.pixel_depth,
        )
    }

    /// A seeded uniform subset of `n` rows (all rows when `n >= len`).
    pub fn subsample(&self, n: usize, seed: u64) -> Result<ImageDataset> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut seeded(seed));
        idx.truncate(n.min(self.len()));
        self.select(&idx)
    }

    /// SHA-256 over the pixel values (little-endian f64) followed by the labels.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.d_x as u64).to_le_bytes());
        for v in &self.images {
            h.update(v.to_le_bytes());
        }
        for l in &self.labels {
            h.update(l.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Decoded IDX payload.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Idx {
    Images {
        rows: usize,
        cols: usize,
        /// `n × rows × cols` raw bytes.
        pixels: Vec<u8>,
    },
    Labels(Vec<u8>),
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    let b = bytes.get(at..at + 4).ok_or(Error::Length {
        expected: at + 4,
        found: bytes.len(),
    })?;
    Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
}

/// Parses an IDX stream (u8 payloads only). Gzip-wrapped input is inflated first.
pub fn parse_idx(bytes: &[u8]) -> Result<Idx> {
    let inflated;
    let bytes = if bytes.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(bytes)
            .read_to_end(&mut out)
            .map_err(|e| Error::Format(format!("gzip: {e}")))?;
        inflated = out;
        &inflated[..]
    } else {
        bytes
    };
    let magic = read_u32(bytes, 0)?;
    match magic {
        IDX_IMAGES_MAGIC => {
            let n = read_u32(bytes, 4)? as usize;
            let rows = read_u32(bytes, 8)? as usize;
            let cols = read_u32(bytes, 12)? as usize;
            let expected = 16 + n * rows * cols;
            if bytes.len() < expected {
                return Err(Error::Length {
                    expected,
                    found: bytes.len(),
                });
            }
            Ok(Idx::Images {
                rows,
                cols,
                pixels: bytes[16..expected].to_vec(),
            })
        }
        IDX_LABELS_MAGIC => {
            let n = read_u32(bytes, 4)? as usize;
            let expected = 8 + n;
            if bytes.len() < expected {
                return Err(Error::Length {
                    expected,
                    found: bytes.len(),
                });
            }
            Ok(Idx::Labels(bytes[8..expected].to_vec()))
        }
        other => Err(Error::Format(format!(
            "unsupported IDX magic 0x{other:08X} (expected 0x{IDX_IMAGES_MAGIC:08X} or 0x{IDX_LABELS_MAGIC:08X})"
        ))),
    }
}

/// Serializes raw image bytes as an IDX3 stream.
pub fn encode_idx_images(n: usize, rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + pixels.len());
    for w in [IDX_IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&w.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

impl ImageDataset {
    /// Builds a dataset from IDX image bytes and (optionally) IDX label bytes.
    /// Without labels every example gets class 0.
    pub fn from_idx(images: &[u8], labels: Option<&[u8]>, name: &str) -> Result<Self> {
        let Idx::Images { rows, cols, pixels } = parse_idx(images)? else {
            return Err(Error::Format("expected an IDX image file".into()));
        };
        let d_x = rows * cols;
        if d_x == 0 {
            return Err(Error::Domain("zero-sized images".into()));
        }
        let n = pixels.len() / d_x;
        let labels: Vec<u32> = match labels {
            Some(bytes) => {
                let Idx::Labels(l) = parse_idx(bytes)? else {
                    return Err(Error::Format("expected an IDX label file".into()));
                };
                if l.len() != n {
                    return Err(Error::Length {
                        expected: n,
                        found: l.len(),
                    });
                }
                l.into_iter().map(u32::from).collect()
            }
            None => vec![0; n],
        };
        // IDX carries no class count; the MNIST family declares ten
        let n_classes = labels.iter().max().map_or(10, |m| (*m + 1).max(10));
        let images = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
        ImageDataset::new(images, d_x, labels, n_classes, name, Some(255))
    }

    pub fn load_idx(images: &Path, labels: Option<&Path>) -> Result<Self> {
        let img = fs::read(images)?;
        let lab = labels.map(fs::read).transpose()?;
        let name = images
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        ImageDataset::from_idx(&img, lab.as_deref(), &name)
    }

    /// Inverse of [`ImageDataset::from_idx`] for 8-bit data: (image bytes, label bytes).
    pub fn to_idx(&self, rows: usize, cols: usize) -> Result<(Vec<u8>, Vec<u8>)> {
        if rows * cols != self.d_x {
            return Err(Error::Shape {
                op: "to_idx",
                left: vec![rows, cols],
                right: vec![self.d_x],
            });
        }
        let depth = self
            .pixel_depth
            .ok_or_else(|| Error::Format("real-valued data has no IDX encoding".into()))?;
        let pixels: Vec<u8> = self
            .images
            .iter()
            .map(|v| (v * f64::from(depth)).round() as u8)
            .collect();
        let labels: Vec<u8> = self.labels.iter().map(|&l| l as u8).collect();
        Ok((
            encode_idx_images(self.len(), rows, cols, &pixels),
            encode_idx_labels(&labels),
        ))
    }
}

/// One entry of a dataset manifest file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub url: String,
    pub sha256: String,
    pub kind: String,
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

/// Source of remote bytes; swapped out by tests.
pub trait Transport {
    fn get(&self, url: &str) -> Result<Vec<u8>>;
}

/// `http(s)://` through ureq, `file://` from the local filesystem.
#[derive(Debug, Default, Clone)]
pub struct DefaultTransport {
    /// Base directory for relative `file://` URLs.
    pub base_dir: Option<PathBuf>,
}

impl Transport for DefaultTransport {
    fn get(&self, url: &str) -> Result<Vec<u8>> {
        let fetch_err = |reason: String| Error::Fetch {
            url: url.to_string(),
            reason,
        };
        if let Some(path) = url.strip_prefix("file://") {
            let p = Path::new(path);
            let p = match (&self.base_dir, p.is_relative()) {
                (Some(base), true) => base.join(p),
                _ => p.to_path_buf(),
            };
            return fs::read(&p).map_err(|e| fetch_err(format!("{}: {e}", p.display())));
        }
        let resp = ureq::get(url)
            .call()
            .map_err(|e| fetch_err(e.to_string()))?;
        resp.into_body()
            .with_config()
            .limit(1 << 30)
            .read_to_vec()
            .map_err(|e| fetch_err(e.to_string()))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Exclusive lock on a cache directory, released on drop.
struct CacheLock {
    file: File,
}

impl CacheLock {
    fn acquire(dir: &Path) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(dir.join(".lock"))?;
        file.lock()?;
        Ok(CacheLock { file })
    }
}

impl Drop for CacheLock {
    fn drop(&mut self) {
        let _ = self.file.unlock();
    }
}

/// Returns `<cache_dir>/<sha256>.bin`, downloading it first if absent.
pub fn fetch_with_cache(
    transport: &dyn Transport,
    url: &str,
    cache_dir: &Path,
    expected_sha256: &str,
) -> Result<PathBuf> {
    fs::create_dir_all(cache_dir)?;
    let expected = expected_sha256.to_ascii_lowercase();
    let target = cache_dir.join(format!("{expected}.bin"));
    let _lock = CacheLock::acquire(cache_dir)?;
    if target.exists() {
        let actual = sha256_hex(&fs::read(&target)?);
        if actual == expected {
            return Ok(target);
        }
        return Err(Error::Integrity {
            path: target,
            expected,
            actual,
        });
    }
    let bytes = transport.get(url)?;
    let actual = sha256_hex(&bytes);
    if actual != expected {
        return Err(Error::Integrity {
            path: target,
            expected,
            actual,
        });
    }
    let tmp = cache_dir.join(format!("{expected}.partial"));
    {
        let mut f = File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, &target)?;
    Ok(target)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitSpec {
    pub held_out_classes: BTreeSet<u32>,
    pub train_fraction: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn validate(&self, n_classes: u32) -> Result<()> {
        if let Some(&c) = self.held_out_classes.iter().find(|&&c| c >= n_classes) {
            return Err(Error::Domain(format!("held-out class {c} >= {n_classes}")));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return Err(Error::Domain(format!(
                "train_fraction {} outside (0,1]",
                self.train_fraction
            )));
        }
        Ok(())
    }

    /// The seeded `train_fraction` share of `ds` and the remainder (possibly empty).
    pub fn split_train(&self, ds: &ImageDataset) -> Result<(ImageDataset, Option<ImageDataset>)> {
        self.validate(ds.n_classes())?;
        let mut idx: Vec<usize> = (0..ds.len()).collect();
        idx.shuffle(&mut seeded(self.seed));
        let n_train = ((ds.len() as f64 * self.train_fraction).round() as usize).clamp(1, ds.len());
        let rest = &idx[n_train..];
        let rest = if rest.is_empty() {
            None
        } else {
            Some(ds.select(rest)?)
        };
        Ok((ds.select(&idx[..n_train])?, rest))
    }
}

/// Partitions `ds` into (in-distribution, held-out) by class. The held-out part is
/// `None` when no example belongs to a held-out class.
pub fn split_classes(
    ds: &ImageDataset,
    spec: &SplitSpec,
) -> Result<(ImageDataset, Option<ImageDataset>)> {
    spec.validate(ds.n_classes())?;
    let (ood, ind): (Vec<usize>, Vec<usize>) =
        (0..ds.len()).partition(|&i| spec.held_out_classes.contains(&ds.labels()[i]));
    if ind.is_empty() {
        return Err(Error::Domain(
            "every example is held out; in-distribution set is empty".into(),
        ));
    }
    let ood = if ood.is_empty() {
        None
    } else {
        Some(ds.select(&ood)?)
    };
    Ok((ds.select(&ind)?, ood))
}

/// Replaces each pixel with probability `mu` by a draw from U{0..255}/255.
pub fn corrupt(ds: &ImageDataset, mu: f64, seed: u64) -> Result<ImageDataset> {
    if !(0.0..=1.0).contains(&mu) {
        return Err(Error::Domain(format!("corruption rate {mu} outside [0,1]")));
    }
    let depth = ds.pixel_depth().unwrap_or(255);
    let mut rng = seeded(seed);
    let images = ds
        .pixels()
        .iter()
        .map(|&v| {
            if rng.random::<f64>() < mu {
                f64::from(rng.random_range(0..=depth)) / f64::from(depth)
            } else {
                v
            }
        })
        .collect();
    ImageDataset::new(
        images,
        ds.d_x(),
        ds.labels().to_vec(),
        ds.n_classes(),
        format!("{}+corrupt({mu})", ds.source_name()),
        Some(depth),
    )
}

/// One epoch of shuffled index batches; the final batch may be short.
#[derive(Clone, Debug)]
pub struct Minibatches {
    order: Vec<usize>,
    batch_size: usize,
    cursor: usize,
}

impl Iterator for Minibatches {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let batch = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        Some(batch)
    }
}

pub fn minibatches(n: usize, batch_size: usize, seed: u64) -> Result<Minibatches> {
    if batch_size == 0 || n == 0 {
        return Err(Error::Domain(format!(
            "batch size {batch_size} invalid for {n} examples"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeded(seed));
    Ok(Minibatches {
        order,
        // oversize batches collapse to one full batch
        batch_size: batch_size.min(n),
        cursor: 0,
    })
}

/// Isotropic Gaussian blobs; example `i` belongs to component `i mod centers.len()`.
pub fn synthetic_mixture(
    n: usize,
    centers: &[[f64; 2]],
    stddev: f64,
    seed: u64,
) -> Result<ImageDataset> {
    if centers.is_empty() {
        return Err(Error::Domain(
            "synthetic mixture needs at least one center".into(),
        ));
    }
    if n == 0 || stddev <= 0.0 {
        return Err(Error::Domain(format!(
            "invalid mixture n={n} stddev={stddev}"
        )));
    }
    let mut rng = seeded(seed);
    let noise = standard_normals(&mut rng, 2 * n);
    let mut images = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % centers.len();
        images.push(centers[c][0] + stddev * noise[2 * i]);
        images.push(centers[c][1] + stddev * noise[2 * i + 1]);
        labels.push(c as u32);
    }
    ImageDataset::new(
        images,
        2,
        labels,
        centers.len() as u32,
        "synthetic-mixture",
        None,
    )
}
