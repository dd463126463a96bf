//! MNIST IDX containers (big-endian headers, unsigned byte payloads).

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Length(format!("{what}: header truncated at byte {at}")))
}

fn payload<'a>(bytes: &'a [u8], header: usize, len: usize, what: &str) -> Result<&'a [u8]> {
    let available = bytes.len().saturating_sub(header);
    if available < len {
        return Err(Error::Length(format!(
            "{what}: header declares {len} payload bytes, only {available} present"
        )));
    }
    Ok(&bytes[header..header + len])
}

/// Parses an image file into `[N, 1, rows, cols]` with pixels scaled to [0, 1].
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor> {
    let magic = read_u32(bytes, 0, "idx images")?;
    if magic != IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "idx images: magic {magic:#010x}, expected {IMAGES_MAGIC:#010x}"
        )));
    }
    let n = read_u32(bytes, 4, "idx images")? as usize;
    let rows = read_u32(bytes, 8, "idx images")? as usize;
    let cols = read_u32(bytes, 12, "idx images")? as usize;
    if n == 0 || rows == 0 || cols == 0 {
        return Err(Error::Format(format!("idx images: empty dimensions {n}x{rows}x{cols}")));
    }
    let len = n
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| Error::Format("idx images: dimensions overflow".into()))?;
    let data = payload(bytes, 16, len, "idx images")?;
    let pixels = data.iter().map(|&b| f32::from(b) / 255.0).collect();
    Tensor::new(vec![n, 1, rows, cols], pixels)
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = read_u32(bytes, 0, "idx labels")?;
    if magic != LABELS_MAGIC {
        return Err(Error::Format(format!(
            "idx labels: magic {magic:#010x}, expected {LABELS_MAGIC:#010x}"
        )));
    }
    let n = read_u32(bytes, 4, "idx labels")? as usize;
    let data = payload(bytes, 8, n, "idx labels")?;
    if let Some(pos) = data.iter().position(|&l| l >= 10) {
        return Err(Error::Format(format!(
            "idx labels: label {} at index {pos} outside [0, 10)",
            data[pos]
        )));
    }
    Ok(data.to_vec())
}

/// Labeled images, `[N, 1, 28, 28]` in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<u8>,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<u8>) -> Result<Self> {
        images.expect_rank(4, "dataset images")?;
        if images.dim(0) != labels.len() {
            return Err(Error::Input(format!(
                "{} images but {} labels",
                images.dim(0),
                labels.len()
            )));
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Input("pixel values must lie in [0, 1]".into()));
        }
        Ok(Self { images, labels })
    }

    pub fn load(images: &Path, labels: &Path) -> Result<Self> {
        let img = parse_idx_images(&std::fs::read(images)?)?;
        let lab = parse_idx_labels(&std::fs::read(labels)?)?;
        Self::new(img, lab)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn pixels_per_image(&self) -> usize {
        self.images.len() / self.len()
    }

    /// Images `[start, end)` and their labels.
    pub fn batch(&self, start: usize, end: usize) -> Result<(Tensor, &[u8])> {
        let x = crate::tensor::slice_batch(&self.images, start, end)?;
        Ok((x, &self.labels[start..end]))
    }

    /// Gathers the given sample indices into one batch.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor, Vec<u8>)> {
        let per = self.pixels_per_image();
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Input(format!("sample {i} out of range {}", self.len())));
            }
            data.extend_from_slice(&self.images.data()[i * per..][..per]);
            labels.push(self.labels[i]);
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = indices.len();
        Ok((Tensor::new(shape, data)?, labels))
    }

    /// First `n` samples.
    pub fn take(&self, n: usize) -> Result<Self> {
        let (x, y) = self.batch(0, n.min(self.len()))?;
        Ok(Self { images: x, labels: y.to_vec() })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Paths of the standard uncompressed file names inside `dir`.
pub fn mnist_paths(dir: &Path, split: Split) -> (PathBuf, PathBuf) {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    (
        dir.join(format!("{prefix}-images-idx3-ubyte")),
        dir.join(format!("{prefix}-labels-idx1-ubyte")),
    )
}

pub fn load_mnist(dir: &Path, split: Split) -> Result<Dataset> {
    let (images, labels) = mnist_paths(dir, split);
    Dataset::load(&images, &labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(magic: u32, dims: &[u32]) -> Vec<u8> {
        let mut v = magic.to_be_bytes().to_vec();
        for d in dims {
            v.extend_from_slice(&d.to_be_bytes());
        }
        v
    }

    #[test]
    fn tiny_image_file() {
        let mut bytes = header(IMAGES_MAGIC, &[1, 2, 2]);
        bytes.extend_from_slice(&[0, 255, 128, 64]);
        let t = parse_idx_images(&bytes).unwrap();
        assert_eq!(t.shape(), &[1, 1, 2, 2]);
        let expected = [0.0, 1.0, 0.50196, 0.25098];
        for (a, b) in t.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn labels_magic_rejected_by_image_parser() {
        let mut bytes = header(LABELS_MAGIC, &[1, 2, 2]);
        bytes.extend_from_slice(&[0; 4]);
        assert!(matches!(parse_idx_images(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_payload() {
        let mut bytes = header(IMAGES_MAGIC, &[2, 2, 2]);
        bytes.extend_from_slice(&[0; 7]);
        assert!(matches!(parse_idx_images(&bytes), Err(Error::Length(_))));
        assert!(matches!(parse_idx_images(&bytes[..10]), Err(Error::Length(_))));
    }

    #[test]
    fn label_file() {
        let mut bytes = header(LABELS_MAGIC, &[3]);
        bytes.extend_from_slice(&[7, 2, 1]);
        assert_eq!(parse_idx_labels(&bytes).unwrap(), vec![7, 2, 1]);
        let mut bad = header(LABELS_MAGIC, &[2]);
        bad.extend_from_slice(&[3, 10]);
        assert!(matches!(parse_idx_labels(&bad), Err(Error::Format(_))));
    }

    #[test]
    fn huge_declared_dims_do_not_allocate() {
        let bytes = header(IMAGES_MAGIC, &[u32::MAX, u32::MAX, u32::MAX]);
        assert!(parse_idx_images(&bytes).is_err());
    }
}
