use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// Features (`N×dims` or `N×c×h×w`) with class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.shape().first() != Some(&labels.len()) {
            return Err(Error::dim("dataset", features.shape(), &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::arg(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Self {
            features,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.features.shape()[1..]
    }

    /// Gathers the rows at `indices` into a batch.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let width: usize = self.sample_shape().iter().product();
        let mut data = Vec::with_capacity(indices.len() * width);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.features.data()[i * width..(i + 1) * width]);
            labels.push(self.labels[i]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.sample_shape());
        (Tensor::new(&shape, data).expect("gathered rows"), labels)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitDataset {
    pub train: Dataset,
    pub test: Dataset,
}

/// Gaussian clusters around random unit-norm centers scaled by `separation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlobsConfig {
    pub num_classes: usize,
    pub dims: usize,
    pub samples_per_class: usize,
    pub spread: f64,
    pub separation: f64,
}

impl BlobsConfig {
    /// The task used by the statistical comparisons.
    pub fn standard() -> Self {
        Self {
            num_classes: 10,
            dims: 32,
            samples_per_class: 200,
            spread: 0.3,
            separation: 1.0,
        }
    }
}

/// 80/20 train/test split per class; deterministic under `rng`.
pub fn gen_blobs(cfg: &BlobsConfig, rng: &SeededRng) -> Result<SplitDataset> {
    if cfg.num_classes < 2 || cfg.dims < 2 {
        return Err(Error::arg("blobs need at least 2 classes and 2 dims"));
    }
    if cfg.samples_per_class < 5 || !(cfg.spread >= 0.0) || !(cfg.separation > 0.0) {
        return Err(Error::arg(
            "blobs need >= 5 samples per class, spread >= 0, separation > 0",
        ));
    }
    let mut center_rng = rng.split(0);
    let mut centers = vec![0.0; cfg.num_classes * cfg.dims];
    for c in centers.chunks_exact_mut(cfg.dims) {
        center_rng.fill_normal(c, 1.0);
        let norm = math::sqrt(c.iter().map(|v| v * v).sum());
        c.iter_mut().for_each(|v| *v *= cfg.separation / norm);
    }
    let n_test = cfg.samples_per_class / 5;
    let (mut train_x, mut train_y, mut test_x, mut test_y) =
        (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for class in 0..cfg.num_classes {
        let mut r = rng.split(1 + class as u64);
        let center = &centers[class * cfg.dims..(class + 1) * cfg.dims];
        for s in 0..cfg.samples_per_class {
            let (xs, ys) = if s < n_test {
                (&mut test_x, &mut test_y)
            } else {
                (&mut train_x, &mut train_y)
            };
            for &c in center {
                xs.push(c + r.normal(cfg.spread));
            }
            ys.push(class);
        }
    }
    let n_train = train_y.len();
    let n_test = test_y.len();
    Ok(SplitDataset {
        train: Dataset::new(
            Tensor::new(&[n_train, cfg.dims], train_x)?,
            train_y,
            cfg.num_classes,
        )?,
        test: Dataset::new(
            Tensor::new(&[n_test, cfg.dims], test_x)?,
            test_y,
            cfg.num_classes,
        )?,
    })
}

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format(format!("{what}: truncated header")))
}

/// Parses an IDX image/label pair (ubyte pixels scaled to `[0, 1]`) into an
/// `N×1×rows×cols` dataset. Nothing is returned unless both files are whole
/// and agree on the item count.
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    if be_u32(images, 0, "images")? != IDX_IMAGES_MAGIC {
        return Err(Error::Format(
            "images: bad magic, expected 0x00000803".into(),
        ));
    }
    if be_u32(labels, 0, "labels")? != IDX_LABELS_MAGIC {
        return Err(Error::Format(
            "labels: bad magic, expected 0x00000801".into(),
        ));
    }
    let n = be_u32(images, 4, "images")? as usize;
    let rows = be_u32(images, 8, "images")? as usize;
    let cols = be_u32(images, 12, "images")? as usize;
    let n_labels = be_u32(labels, 4, "labels")? as usize;
    if n != n_labels {
        return Err(Error::Format(format!(
            "count mismatch: {n} images vs {n_labels} labels"
        )));
    }
    if n == 0 || rows == 0 || cols == 0 {
        return Err(Error::Format("empty IDX file".into()));
    }
    let pixels = n * rows * cols;
    if images.len() != 16 + pixels {
        return Err(Error::Format(format!(
            "images: expected {} bytes, found {}",
            16 + pixels,
            images.len()
        )));
    }
    if labels.len() != 8 + n {
        return Err(Error::Format(format!(
            "labels: expected {} bytes, found {}",
            8 + n,
            labels.len()
        )));
    }
    let data: Vec<f64> = images[16..].iter().map(|&p| p as f64 / 255.0).collect();
    let labels: Vec<usize> = labels[8..].iter().map(|&l| l as usize).collect();
    let num_classes = labels.iter().max().map_or(1, |&m| m + 1).max(2);
    Dataset::new(Tensor::new(&[n, 1, rows, cols], data)?, labels, num_classes)
}
