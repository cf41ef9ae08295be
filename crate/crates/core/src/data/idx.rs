//! IDX containers (the MNIST distribution format).

use std::path::Path;

use super::{DataError, Dataset};
use crate::tensor::Tensor;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32(bytes: &[u8], offset: usize, file: &str) -> Result<u32, DataError> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| DataError::Idx {
            file: file.to_string(),
            offset,
            reason: "truncated header".into(),
        })
}

fn check_magic(bytes: &[u8], expected: u32, file: &str) -> Result<(), DataError> {
    let magic = read_u32(bytes, 0, file)?;
    if magic != expected {
        return Err(DataError::Idx {
            file: file.to_string(),
            offset: 0,
            reason: format!("magic {magic:#010x}, expected {expected:#010x}"),
        });
    }
    Ok(())
}

fn check_len(bytes: &[u8], header: usize, payload: usize, file: &str) -> Result<(), DataError> {
    let expected = header + payload;
    if bytes.len() != expected {
        return Err(DataError::Idx {
            file: file.to_string(),
            offset: bytes.len().min(expected),
            reason: format!("file is {} bytes, header declares {expected}", bytes.len()),
        });
    }
    Ok(())
}

/// Parses an unsigned-byte image file into `[N, 1, H, W]` scaled to [0, 1].
pub fn parse_idx_images(bytes: &[u8], file: &str) -> Result<Tensor, DataError> {
    check_magic(bytes, IMAGES_MAGIC, file)?;
    let n = read_u32(bytes, 4, file)? as usize;
    let h = read_u32(bytes, 8, file)? as usize;
    let w = read_u32(bytes, 12, file)? as usize;
    check_len(bytes, 16, n * h * w, file)?;
    let data = bytes[16..].iter().map(|&b| b as f32 / 255.0).collect();
    Ok(Tensor::new(vec![n, 1, h, w], data).expect("length checked"))
}

pub fn parse_idx_labels(bytes: &[u8], file: &str) -> Result<Vec<usize>, DataError> {
    check_magic(bytes, LABELS_MAGIC, file)?;
    let n = read_u32(bytes, 4, file)? as usize;
    check_len(bytes, 8, n, file)?;
    Ok(bytes[8..].iter().map(|&b| b as usize).collect())
}

fn read(path: &Path) -> Result<Vec<u8>, DataError> {
    std::fs::read(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Loads an image/label file pair. Every sample lands in the train split;
/// the class count is the largest label plus one (at least 2).
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset, DataError> {
    let images = parse_idx_images(&read(images_path)?, &images_path.display().to_string())?;
    let labels = parse_idx_labels(&read(labels_path)?, &labels_path.display().to_string())?;
    let n = images.shape()[0];
    if n != labels.len() {
        return Err(DataError::CountMismatch {
            images: n,
            labels: labels.len(),
        });
    }
    let n_classes = labels.iter().map(|&l| l + 1).max().unwrap_or(0).max(2);
    Dataset::new(images, labels, n_classes, (0..n).collect(), Vec::new())
}
