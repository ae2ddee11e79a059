//! Dataset loading: big-endian IDX image/label files and 3073-byte CIFAR-10
//! binary records, plus shared normalization and light augmentation.

use std::fs;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
const IDX_LABEL_MAGIC: u32 = 0x0000_0801;
const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<u8>,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<u8>) -> Result<Self> {
        if images.shape()[0] != labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} images with {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Copies selected samples into a batch tensor.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<u8>) {
        let [_, c, h, w] = self.images.shape();
        let sample = c * h * w;
        let mut out = Tensor::zeros([indices.len(), c, h, w]);
        let od = out.data_mut();
        for (row, &idx) in indices.iter().enumerate() {
            od[row * sample..(row + 1) * sample]
                .copy_from_slice(&self.images.data()[idx * sample..(idx + 1) * sample]);
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (out, labels)
    }
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    match bytes.get(offset..offset + 4) {
        Some(b) => Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]])),
        None => Err(Error::DatasetFormat {
            offset: offset as u64,
            message: format!("file ends inside a header field ({} bytes total)", bytes.len()),
        }),
    }
}

/// Parses an IDX image file into `[N, 1, rows, cols]` scaled to `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(Error::DatasetFormat {
            offset: 0,
            message: format!("bad image magic {magic:#010x} (expected {IDX_IMAGE_MAGIC:#010x})"),
        });
    }
    let count = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let expected = 16 + count * rows * cols;
    if bytes.len() != expected {
        return Err(Error::DatasetFormat {
            offset: bytes.len().min(expected) as u64,
            message: format!(
                "{count} images of {rows}x{cols} need {expected} bytes, file has {}",
                bytes.len()
            ),
        });
    }
    let data = bytes[16..].iter().map(|&b| b as f32 / 255.0).collect();
    Tensor::new([count, 1, rows, cols], data)
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_LABEL_MAGIC {
        return Err(Error::DatasetFormat {
            offset: 0,
            message: format!("bad label magic {magic:#010x} (expected {IDX_LABEL_MAGIC:#010x})"),
        });
    }
    let count = be_u32(bytes, 4)? as usize;
    let expected = 8 + count;
    if bytes.len() != expected {
        return Err(Error::DatasetFormat {
            offset: bytes.len().min(expected) as u64,
            message: format!("{count} labels need {expected} bytes, file has {}", bytes.len()),
        });
    }
    for (i, &label) in bytes[8..].iter().enumerate() {
        if label > 9 {
            return Err(Error::DatasetFormat {
                offset: (8 + i) as u64,
                message: format!("label {label} out of range 0..=9"),
            });
        }
    }
    Ok(bytes[8..].to_vec())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| {
        Error::DatasetFormat {
            offset: 0,
            message: format!("{}: {e}", path.display()),
        }
    })
}

pub fn load_idx_images(path: &Path) -> Result<Tensor> {
    parse_idx_images(&read_file(path)?)
}

pub fn load_idx_labels(path: &Path) -> Result<Vec<u8>> {
    parse_idx_labels(&read_file(path)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

/// Per-channel mean and population standard deviation over a whole set.
pub fn channel_stats(images: &Tensor) -> ChannelStats {
    let [n, c, h, w] = images.shape();
    let hw = h * w;
    let count = (n * hw).max(1) as f64;
    let mut mean = vec![0f64; c];
    let mut sq = vec![0f64; c];
    for s in 0..n {
        for ch in 0..c {
            for &v in &images.data()[(s * c + ch) * hw..(s * c + ch + 1) * hw] {
                mean[ch] += v as f64;
                sq[ch] += (v as f64) * (v as f64);
            }
        }
    }
    let mut std = vec![0f32; c];
    let mut mean32 = vec![0f32; c];
    for ch in 0..c {
        let m = mean[ch] / count;
        let var = (sq[ch] / count - m * m).max(0.0);
        mean32[ch] = m as f32;
        std[ch] = (var.sqrt() as f32).max(1e-6);
    }
    ChannelStats {
        mean: mean32,
        std,
    }
}

pub fn normalize(images: &mut Tensor, stats: &ChannelStats) {
    let [n, c, h, w] = images.shape();
    let hw = h * w;
    for s in 0..n {
        for ch in 0..c {
            let (m, sd) = (stats.mean[ch], stats.std[ch]);
            for v in &mut images.data_mut()[(s * c + ch) * hw..(s * c + ch + 1) * hw] {
                *v = (*v - m) / sd;
            }
        }
    }
}

/// Loads the four IDX files and standardizes both splits with the training
/// statistics.
pub fn load_mnist(dir: &Path) -> Result<(Dataset, Dataset)> {
    let mut train_images = load_idx_images(&dir.join("train-images-idx3-ubyte"))?;
    let train_labels = load_idx_labels(&dir.join("train-labels-idx1-ubyte"))?;
    let mut test_images = load_idx_images(&dir.join("t10k-images-idx3-ubyte"))?;
    let test_labels = load_idx_labels(&dir.join("t10k-labels-idx1-ubyte"))?;
    let stats = channel_stats(&train_images);
    normalize(&mut train_images, &stats);
    normalize(&mut test_images, &stats);
    Ok((
        Dataset::new(train_images, train_labels)?,
        Dataset::new(test_images, test_labels)?,
    ))
}

/// Appends one CIFAR-10 binary batch (label byte + RGB planes per record).
fn parse_cifar_batch(bytes: &[u8], images: &mut Vec<f32>, labels: &mut Vec<u8>) -> Result<()> {
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::DatasetFormat {
            offset: (bytes.len() - bytes.len() % CIFAR_RECORD) as u64,
            message: format!(
                "{} bytes is not a whole number of {CIFAR_RECORD}-byte records",
                bytes.len()
            ),
        });
    }
    for (i, record) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = record[0];
        if label > 9 {
            return Err(Error::DatasetFormat {
                offset: (i * CIFAR_RECORD) as u64,
                message: format!("label {label} out of range 0..=9"),
            });
        }
        labels.push(label);
        images.extend(record[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Ok(())
}

/// Loads the five training batches plus the test batch, standardizing both
/// splits with the training statistics.
pub fn load_cifar10(dir: &Path) -> Result<(Dataset, Dataset)> {
    let mut train_pixels = Vec::new();
    let mut train_labels = Vec::new();
    for i in 1..=5 {
        let bytes = read_file(&dir.join(format!("data_batch_{i}.bin")))?;
        parse_cifar_batch(&bytes, &mut train_pixels, &mut train_labels)?;
    }
    let mut test_pixels = Vec::new();
    let mut test_labels = Vec::new();
    let bytes = read_file(&dir.join("test_batch.bin"))?;
    parse_cifar_batch(&bytes, &mut test_pixels, &mut test_labels)?;

    let mut train_images = Tensor::new([train_labels.len(), 3, 32, 32], train_pixels)?;
    let mut test_images = Tensor::new([test_labels.len(), 3, 32, 32], test_pixels)?;
    let stats = channel_stats(&train_images);
    normalize(&mut train_images, &stats);
    normalize(&mut test_images, &stats);
    Ok((
        Dataset::new(train_images, train_labels)?,
        Dataset::new(test_images, test_labels)?,
    ))
}

/// In-place random horizontal flip plus a random crop from a zero-padded
/// border — the usual 32x32 recipe.
pub fn augment_flip_crop(images: &mut Tensor, pad: usize, rng: &mut impl Rng) {
    let [n, c, h, w] = images.shape();
    let hw = h * w;
    let mut scratch = vec![0.0f32; hw];
    for s in 0..n {
        let flip = rng.gen_bool(0.5);
        let dy = rng.gen_range(0..=2 * pad) as isize - pad as isize;
        let dx = rng.gen_range(0..=2 * pad) as isize - pad as isize;
        for ch in 0..c {
            let plane = &mut images.data_mut()[(s * c + ch) * hw..(s * c + ch + 1) * hw];
            for y in 0..h {
                for x in 0..w {
                    let sx = if flip { w - 1 - x } else { x } as isize + dx;
                    let sy = y as isize + dy;
                    scratch[y * w + x] =
                        if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                            plane[sy as usize * w + sx as usize]
                        } else {
                            0.0
                        };
                }
            }
            plane.copy_from_slice(&scratch);
        }
    }
}
