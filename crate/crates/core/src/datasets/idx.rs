//! IDX files (the MNIST container): big-endian magic, big-endian u32
//! dimensions, then raw unsigned bytes.

use std::fs;
use std::path::Path;

use super::Example;
use crate::{Error, Result, Scalar};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

fn parse_err<T>(field: &str, reason: impl Into<String>) -> Result<T> {
    Err(Error::Parse {
        field: field.to_string(),
        reason: reason.into(),
    })
}

fn read_u32(bytes: &[u8], offset: usize, field: &str) -> Result<u32> {
    match bytes.get(offset..offset + 4) {
        Some(b) => Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]])),
        None => parse_err(field, "file truncated inside header"),
    }
}

/// Image tensor `(count, rows, cols)` with pixels in row-major order.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let magic = read_u32(bytes, 0, "images.magic")?;
    if magic != IMAGES_MAGIC {
        return parse_err(
            "images.magic",
            format!("expected {IMAGES_MAGIC:#010x}, found {magic:#010x}"),
        );
    }
    let count = read_u32(bytes, 4, "images.count")? as usize;
    let rows = read_u32(bytes, 8, "images.rows")? as usize;
    let cols = read_u32(bytes, 12, "images.cols")? as usize;
    let body = &bytes[16..];
    let expected = count * rows * cols;
    if body.len() < expected {
        return parse_err(
            "images.pixels",
            format!("truncated: {} of {expected} pixel bytes", body.len()),
        );
    }
    Ok((count, rows, cols, &body[..expected]))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    let magic = read_u32(bytes, 0, "labels.magic")?;
    if magic != LABELS_MAGIC {
        return parse_err(
            "labels.magic",
            format!("expected {LABELS_MAGIC:#010x}, found {magic:#010x}"),
        );
    }
    let count = read_u32(bytes, 4, "labels.count")? as usize;
    let body = &bytes[8..];
    if body.len() < count {
        return parse_err(
            "labels.values",
            format!("truncated: {} of {count} label bytes", body.len()),
        );
    }
    Ok(&body[..count])
}

/// Reads an image/label file pair; pixels are scaled to `[0, 1]`.
pub fn load_idx<T: Scalar>(images_path: &Path, labels_path: &Path) -> Result<Vec<Example<T>>> {
    let images = fs::read(images_path)?;
    let labels = fs::read(labels_path)?;
    examples_from_idx(&images, &labels)
}

pub fn examples_from_idx<T: Scalar>(images: &[u8], labels: &[u8]) -> Result<Vec<Example<T>>> {
    let (count, rows, cols, pixels) = parse_idx_images(images)?;
    let labels = parse_idx_labels(labels)?;
    if labels.len() != count {
        return parse_err(
            "labels.count",
            format!("{} labels for {count} images", labels.len()),
        );
    }
    let scale = T::of(1.0 / 255.0);
    let stride = rows * cols;
    Ok(labels
        .iter()
        .enumerate()
        .map(|(i, &label)| {
            let x = pixels[i * stride..(i + 1) * stride]
                .iter()
                .map(|&p| T::of(p as f64) * scale)
                .collect();
            Example::classification(x, label as usize)
        })
        .collect())
}

pub fn write_idx_images(path: &Path, rows: usize, cols: usize, pixels: &[Vec<u8>]) -> Result<()> {
    let mut out = Vec::with_capacity(16 + pixels.len() * rows * cols);
    out.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    out.extend_from_slice(&(pixels.len() as u32).to_be_bytes());
    out.extend_from_slice(&(rows as u32).to_be_bytes());
    out.extend_from_slice(&(cols as u32).to_be_bytes());
    for img in pixels {
        if img.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "image of {} bytes for {rows}x{cols}",
                img.len()
            )));
        }
        out.extend_from_slice(img);
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    fs::write(path, out)?;
    Ok(())
}
