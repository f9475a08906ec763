//! Big-endian IDX files: unsigned-byte image tensors and label vectors.

use std::fs;
use std::path::Path;

use deepbayes_tensor::Tensor;

use super::Dataset;
use crate::error::{Error, Result};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

/// Raw image payload of an IDX file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

fn read_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Truncated {
            path: path.to_path_buf(),
            expected: at + 4,
            actual: bytes.len(),
        })
}

fn check_magic(bytes: &[u8], expected: u32, path: &Path) -> Result<()> {
    let actual = read_u32(bytes, 0, path)?;
    if actual != expected {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected,
            actual,
        });
    }
    Ok(())
}

fn check_length(bytes: &[u8], expected: usize, path: &Path) -> Result<()> {
    if bytes.len() < expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected,
            actual: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("{} trailing bytes", bytes.len() - expected),
        });
    }
    Ok(())
}

/// `path` is only used for error messages.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<IdxImages> {
    check_magic(bytes, IMAGE_MAGIC, path)?;
    let count = read_u32(bytes, 4, path)? as usize;
    let rows = read_u32(bytes, 8, path)? as usize;
    let cols = read_u32(bytes, 12, path)? as usize;
    check_length(bytes, 16 + count * rows * cols, path)?;
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels: bytes[16..].to_vec(),
    })
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    check_magic(bytes, LABEL_MAGIC, path)?;
    let count = read_u32(bytes, 4, path)? as usize;
    check_length(bytes, 8 + count, path)?;
    Ok(bytes[8..].to_vec())
}

pub fn encode_idx_images(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    for v in [
        IMAGE_MAGIC,
        images.count as u32,
        images.rows as u32,
        images.cols as u32,
    ] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

pub fn write_idx(
    image_path: &Path,
    label_path: &Path,
    images: &IdxImages,
    labels: &[u8],
) -> Result<()> {
    fs::write(image_path, encode_idx_images(images)).map_err(|e| Error::io(image_path, e))?;
    fs::write(label_path, encode_idx_labels(labels)).map_err(|e| Error::io(label_path, e))
}

/// Loads an image/label pair, scaling pixels by 1/255. The class count is
/// one more than the largest label present.
pub fn load_idx(image_path: &Path, label_path: &Path) -> Result<Dataset> {
    let img_bytes = fs::read(image_path).map_err(|e| Error::io(image_path, e))?;
    let lbl_bytes = fs::read(label_path).map_err(|e| Error::io(label_path, e))?;
    let images = parse_idx_images(&img_bytes, image_path)?;
    let labels = parse_idx_labels(&lbl_bytes, label_path)?;
    if images.count != labels.len() {
        return Err(Error::Format {
            path: label_path.to_path_buf(),
            reason: format!(
                "{} labels for {} images in {}",
                labels.len(),
                images.count,
                image_path.display()
            ),
        });
    }
    let dim = images.rows * images.cols;
    let data = images.pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    let labels: Vec<usize> = labels.into_iter().map(usize::from).collect();
    let classes = labels.iter().max().map_or(1, |m| m + 1);
    Dataset::new(
        Tensor::new(vec![images.count, dim], data)?,
        labels,
        classes,
        image_path.display().to_string(),
    )
}
