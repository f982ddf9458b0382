//! Dataset ingestion: CIFAR-10 binary batches, MNIST-style IDX files, and
//! the pad-4 random-crop + horizontal-flip training augmentation.

use std::fs;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-channel CIFAR-10 normalization constants (conventional values; the
/// choice is documented, not derived).
pub const CIFAR_MEAN: [f64; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR_STD: [f64; 3] = [0.2470, 0.2435, 0.2616];

/// Labeled image set in (N, C, H, W) layout, pixels already scaled and
/// (for CIFAR) normalized.
#[derive(Debug, Clone)]
pub struct Dataset<T: Scalar> {
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(images: Tensor<T>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.ndim() != 4 {
            return Err(Error::Shape("dataset images must be (N,C,H,W)".into()));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::Shape(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Format(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        Ok(Self {
            images,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Gather the images/labels at `indices` into a contiguous batch.
    pub fn batch(&self, indices: &[usize]) -> (Tensor<T>, Vec<usize>) {
        let s = self.images.shape();
        let plane = s[1] * s[2] * s[3];
        let mut out = Tensor::zeros(&[indices.len(), s[1], s[2], s[3]]);
        for (bi, &i) in indices.iter().enumerate() {
            out.data_mut()[bi * plane..(bi + 1) * plane]
                .copy_from_slice(&self.images.data()[i * plane..(i + 1) * plane]);
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (out, labels)
    }

    /// First `n` samples (for quick desk-scale subsets).
    pub fn take(&self, n: usize) -> Self {
        let n = n.min(self.len());
        let (images, labels) = self.batch(&(0..n).collect::<Vec<_>>());
        Self {
            images,
            labels,
            classes: self.classes,
        }
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })
}

fn be_u32(b: &[u8], off: usize) -> Result<u32> {
    b.get(off..off + 4)
        .map(|s| u32::from_be_bytes([s[0], s[1], s[2], s[3]]))
        .ok_or_else(|| Error::Format("truncated IDX header".into()))
}

/// Parse an IDX image file (magic 0x00000803, dims N x H x W, u8 pixels).
pub fn parse_idx_images<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    if be_u32(bytes, 0)? != 0x0000_0803 {
        return Err(Error::Format("bad IDX image magic".into()));
    }
    let n = be_u32(bytes, 4)? as usize;
    let h = be_u32(bytes, 8)? as usize;
    let w = be_u32(bytes, 12)? as usize;
    let expected = 16 + n * h * w;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "IDX image payload is {} bytes, expected {expected}",
            bytes.len()
        )));
    }
    let scale = T::from_f64(1.0 / 255.0);
    let data = bytes[16..]
        .iter()
        .map(|&b| T::from_usize(b as usize) * scale)
        .collect();
    Tensor::new(vec![n, 1, h, w], data)
}

/// Parse an IDX label file (magic 0x00000801, N u8 labels).
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    if be_u32(bytes, 0)? != 0x0000_0801 {
        return Err(Error::Format("bad IDX label magic".into()));
    }
    let n = be_u32(bytes, 4)? as usize;
    if bytes.len() != 8 + n {
        return Err(Error::Format(format!(
            "IDX label payload is {} bytes, expected {}",
            bytes.len(),
            8 + n
        )));
    }
    Ok(bytes[8..].iter().map(|&b| b as usize).collect())
}

fn idx_pair<T: Scalar>(dir: &Path, images: &str, labels: &str) -> Result<Dataset<T>> {
    let imgs = parse_idx_images(&read_file(&dir.join(images))?)?;
    let labs = parse_idx_labels(&read_file(&dir.join(labels))?)?;
    if imgs.shape()[0] != labs.len() {
        return Err(Error::Format(format!(
            "{} images but {} labels",
            imgs.shape()[0],
            labs.len()
        )));
    }
    Dataset::new(imgs, labs, 10)
}

/// Load an MNIST-layout directory (IDX files, 10 classes, pixels in [0,1]).
pub fn load_mnist<T: Scalar>(dir: &Path) -> Result<(Dataset<T>, Dataset<T>)> {
    let train = idx_pair(dir, "train-images-idx3-ubyte", "train-labels-idx1-ubyte")?;
    let test = idx_pair(dir, "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")?;
    Ok((train, test))
}

/// Parse CIFAR-10 3073-byte records: 1 label byte, then 3072 channel-major
/// pixels. Pixels are scaled to [0,1] and normalized per channel.
pub fn parse_cifar_records<T: Scalar>(bytes: &[u8]) -> Result<(Tensor<T>, Vec<usize>)> {
    const REC: usize = 3073;
    if bytes.is_empty() || bytes.len() % REC != 0 {
        return Err(Error::Format(format!(
            "CIFAR batch is {} bytes, not a multiple of {REC}",
            bytes.len()
        )));
    }
    let n = bytes.len() / REC;
    let mut images = Tensor::zeros(&[n, 3, 32, 32]);
    let mut labels = Vec::with_capacity(n);
    let inv255 = 1.0 / 255.0;
    for r in 0..n {
        let rec = &bytes[r * REC..(r + 1) * REC];
        labels.push(rec[0] as usize);
        for c in 0..3 {
            let (mean, std) = (CIFAR_MEAN[c], CIFAR_STD[c]);
            for px in 0..1024 {
                let v = (rec[1 + c * 1024 + px] as f64 * inv255 - mean) / std;
                images.data_mut()[(r * 3 + c) * 1024 + px] = T::from_f64(v);
            }
        }
    }
    Ok((images, labels))
}

/// Load the canonical CIFAR-10 binary batches from a directory.
pub fn load_cifar10<T: Scalar>(dir: &Path) -> Result<(Dataset<T>, Dataset<T>)> {
    let mut train_images: Vec<T> = Vec::new();
    let mut train_labels = Vec::new();
    let mut n_train = 0;
    for i in 1..=5 {
        let (imgs, labs) = parse_cifar_records(&read_file(&dir.join(format!(
            "data_batch_{i}.bin"
        )))?)?;
        n_train += imgs.shape()[0];
        train_images.extend_from_slice(imgs.data());
        train_labels.extend(labs);
    }
    let train = Dataset::new(
        Tensor::new(vec![n_train, 3, 32, 32], train_images)?,
        train_labels,
        10,
    )?;
    let (timgs, tlabs) = parse_cifar_records(&read_file(&dir.join("test_batch.bin"))?)?;
    let test = Dataset::new(timgs, tlabs, 10)?;
    Ok((train, test))
}

/// Pad-`pad` random crop plus horizontal flip, the CIFAR training pipeline.
/// Deterministic given the RNG state; applied per image.
pub fn random_crop_flip<T: Scalar>(batch: &Tensor<T>, pad: usize, rng: &mut impl Rng) -> Tensor<T> {
    let s = batch.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let mut out = Tensor::zeros(s);
    for ni in 0..n {
        let dy = rng.gen_range(0..=2 * pad) as isize - pad as isize;
        let dx = rng.gen_range(0..=2 * pad) as isize - pad as isize;
        let flip = rng.gen_bool(0.5);
        for ci in 0..c {
            for r in 0..h {
                let src_r = r as isize + dy;
                if src_r < 0 || src_r as usize >= h {
                    continue;
                }
                for col in 0..w {
                    let src_c = col as isize + dx;
                    if src_c < 0 || src_c as usize >= w {
                        continue;
                    }
                    let dst_c = if flip { w - 1 - col } else { col };
                    out.set(
                        &[ni, ci, r, dst_c],
                        batch.at(&[ni, ci, src_r as usize, src_c as usize]),
                    );
                }
            }
        }
    }
    out
}
