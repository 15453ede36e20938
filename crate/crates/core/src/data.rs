//! Dataset ingestion: IDX image/label files (MNIST, Fashion-MNIST) and the
//! CIFAR-10 binary batch format, plus deterministic mini-batch index streams.
//!
//! Loaders scale pixel bytes by 1/255 so every value lands in [0, 1], and are
//! bit-exact across platforms for identical input files. Gzip-compressed
//! inputs are detected by their magic bytes and decompressed transparently.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;
use flate2::read::GzDecoder;
use std::io::Read;
use std::path::Path;

/// Inputs plus optional integer class labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub inputs: Tensor,
    pub labels: Option<Vec<u8>>,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Option<Vec<u8>>) -> Result<Dataset> {
        if let Some(l) = &labels {
            if l.len() != inputs.batch() {
                return Err(Error::Data(format!(
                    "count mismatch: {} samples vs {} labels",
                    inputs.batch(),
                    l.len()
                )));
            }
        }
        Ok(Dataset { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.inputs.batch()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample_shape(&self) -> &[usize] {
        self.inputs.sample_shape()
    }

    /// Same data with samples flattened to vectors.
    pub fn flattened(&self) -> Dataset {
        let n = self.len();
        let d = self.inputs.sample_len();
        Dataset {
            inputs: self.inputs.reshaped(&[n, d]).expect("flatten"),
            labels: self.labels.clone(),
        }
    }

    /// First `n` samples.
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        let indices: Vec<usize> = (0..n).collect();
        Dataset {
            inputs: self.inputs.gather(&indices),
            labels: self.labels.as_ref().map(|l| l[..n].to_vec()),
        }
    }

    /// One-hot (N, classes) targets from the labels.
    pub fn one_hot_labels(&self, classes: usize) -> Result<Tensor> {
        let labels = self
            .labels
            .as_ref()
            .ok_or_else(|| Error::Data("dataset has no labels".into()))?;
        let mut data = vec![0.0; labels.len() * classes];
        for (i, &l) in labels.iter().enumerate() {
            if l as usize >= classes {
                return Err(Error::Data(format!(
                    "label {l} out of range for {classes} classes"
                )));
            }
            data[i * classes + l as usize] = 1.0;
        }
        Ok(Tensor::from_parts(vec![labels.len(), classes], data))
    }
}

fn read_maybe_gzip(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::Data(format!("{}: bad gzip stream: {e}", path.display())))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], offset: usize) -> u32 {
    u32::from_be_bytes([
        bytes[offset],
        bytes[offset + 1],
        bytes[offset + 2],
        bytes[offset + 3],
    ])
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Load an IDX image file plus its label file. Images come out as
/// (N, H, W, 1) with values in [0, 1].
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img = read_maybe_gzip(images_path)?;
    if img.len() < 16 {
        return Err(Error::Data(format!(
            "{}: truncated header",
            images_path.display()
        )));
    }
    let magic = be_u32(&img, 0);
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Data(format!(
            "{}: bad magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}",
            images_path.display()
        )));
    }
    let n = be_u32(&img, 4) as usize;
    let h = be_u32(&img, 8) as usize;
    let w = be_u32(&img, 12) as usize;
    let expected = 16 + n * h * w;
    if img.len() != expected {
        return Err(Error::Data(format!(
            "{}: truncated file: expected {expected} bytes, got {}",
            images_path.display(),
            img.len()
        )));
    }

    let lbl = read_maybe_gzip(labels_path)?;
    if lbl.len() < 8 {
        return Err(Error::Data(format!(
            "{}: truncated header",
            labels_path.display()
        )));
    }
    let lbl_magic = be_u32(&lbl, 0);
    if lbl_magic != IDX_LABELS_MAGIC {
        return Err(Error::Data(format!(
            "{}: bad magic {lbl_magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}",
            labels_path.display()
        )));
    }
    let n_lbl = be_u32(&lbl, 4) as usize;
    if lbl.len() != 8 + n_lbl {
        return Err(Error::Data(format!(
            "{}: truncated file: expected {} bytes, got {}",
            labels_path.display(),
            8 + n_lbl,
            lbl.len()
        )));
    }
    if n_lbl != n {
        return Err(Error::Data(format!(
            "count mismatch: {n} images vs {n_lbl} labels"
        )));
    }

    let data: Vec<f64> = img[16..].iter().map(|&b| b as f64 / 255.0).collect();
    Dataset::new(
        Tensor::from_parts(vec![n, h, w, 1], data),
        Some(lbl[8..].to_vec()),
    )
}

const CIFAR_RECORD: usize = 3073;
const CIFAR_SIDE: usize = 32;

/// Load CIFAR-10 binary batches: each record is one label byte followed by
/// 3072 pixel bytes as row-major R, G, B planes. Output is (N, 32, 32, 3)
/// channels-last in [0, 1] with labels 0-9.
pub fn load_cifar10(batch_paths: &[impl AsRef<Path>]) -> Result<Dataset> {
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    for path in batch_paths {
        let path = path.as_ref();
        let bytes = read_maybe_gzip(path)?;
        if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
            return Err(Error::Data(format!(
                "{}: length {} is not a positive multiple of {CIFAR_RECORD}",
                path.display(),
                bytes.len()
            )));
        }
        for record in bytes.chunks(CIFAR_RECORD) {
            let label = record[0];
            if label > 9 {
                return Err(Error::Data(format!(
                    "{}: label {label} out of range 0-9",
                    path.display()
                )));
            }
            labels.push(label);
            let pixels = &record[1..];
            let plane = CIFAR_SIDE * CIFAR_SIDE;
            for y in 0..CIFAR_SIDE {
                for x in 0..CIFAR_SIDE {
                    for c in 0..3 {
                        inputs.push(pixels[c * plane + y * CIFAR_SIDE + x] as f64 / 255.0);
                    }
                }
            }
        }
    }
    let n = labels.len();
    Dataset::new(
        Tensor::from_parts(vec![n, CIFAR_SIDE, CIFAR_SIDE, 3], inputs),
        Some(labels),
    )
}

/// Deterministic mini-batch index sequence: a seeded permutation chunked into
/// batches, keeping the final short batch.
pub fn batches(
    dataset: &Dataset,
    batch_size: usize,
    rng: &mut Rng,
    shuffle: bool,
) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    if shuffle {
        rng.shuffle(&mut order);
    }
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}
