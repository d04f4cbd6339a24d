//! MNIST in IDX format (big-endian headers, unsigned-byte payload).

use std::path::{Path, PathBuf};

use super::{DatasetHandle, DatasetKind, Split};
use crate::error::{Error, Result};

const IMAGES_MAGIC: u32 = 2051;
const LABELS_MAGIC: u32 = 2049;
const SIDE: usize = 28;

fn format_err(path: &Path, reason: String) -> Error {
    Error::Format { path: path.to_path_buf(), reason }
}

fn be_u32(bytes: &[u8], offset: usize) -> Option<u32> {
    bytes.get(offset..offset + 4).map(|b| u32::from_be_bytes(b.try_into().unwrap()))
}

/// Returns `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let header = |off: usize| {
        be_u32(bytes, off).ok_or_else(|| format_err(path, format!("truncated header at offset {off}")))
    };
    let magic = header(0)?;
    if magic != IMAGES_MAGIC {
        return Err(format_err(path, format!("bad magic at offset 0: expected {IMAGES_MAGIC}, found {magic}")));
    }
    let (count, rows, cols) = (header(4)? as usize, header(8)? as usize, header(12)? as usize);
    let need = count * rows * cols;
    let payload = &bytes[16..];
    if payload.len() != need {
        return Err(format_err(
            path,
            format!("expected {need} pixel bytes from offset 16 ({count}x{rows}x{cols}), found {}", payload.len()),
        ));
    }
    Ok((count, rows, cols, payload.to_vec()))
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    let header = |off: usize| {
        be_u32(bytes, off).ok_or_else(|| format_err(path, format!("truncated header at offset {off}")))
    };
    let magic = header(0)?;
    if magic != LABELS_MAGIC {
        return Err(format_err(path, format!("bad magic at offset 0: expected {LABELS_MAGIC}, found {magic}")));
    }
    let count = header(4)? as usize;
    let payload = &bytes[8..];
    if payload.len() != count {
        return Err(format_err(
            path,
            format!("expected {count} label bytes from offset 8, found {}", payload.len()),
        ));
    }
    if let Some(pos) = payload.iter().position(|&l| l > 9) {
        return Err(format_err(path, format!("label {} at offset {} outside 0..=9", payload[pos], 8 + pos)));
    }
    Ok(payload.to_vec())
}

pub fn write_idx_images(pixels: &[u8], count: usize, rows: usize, cols: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IMAGES_MAGIC, count as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn write_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Accepts both `t10k-images-idx3-ubyte` and `t10k-images.idx3-ubyte` spellings.
fn locate(dir: &Path, stem: &str, kind: &str) -> Result<PathBuf> {
    let names = [format!("{stem}-{kind}"), format!("{stem}.{kind}")];
    names.iter().map(|n| dir.join(n)).find(|p| p.is_file()).ok_or_else(|| {
        let p = dir.join(&names[0]);
        Error::io(p, std::io::Error::new(std::io::ErrorKind::NotFound, "MNIST file not found"))
    })
}

/// Loads one MNIST split from `dir`, scaling pixels to `[0, 1]`.
pub fn load_mnist(dir: &Path, split: Split) -> Result<DatasetHandle> {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    let img_path = locate(dir, &format!("{prefix}-images"), "idx3-ubyte")?;
    let lbl_path = locate(dir, &format!("{prefix}-labels"), "idx1-ubyte")?;
    let img_bytes = std::fs::read(&img_path).map_err(|e| Error::io(&img_path, e))?;
    let lbl_bytes = std::fs::read(&lbl_path).map_err(|e| Error::io(&lbl_path, e))?;
    let (count, rows, cols, pixels) = parse_idx_images(&img_bytes, &img_path)?;
    if rows != SIDE || cols != SIDE {
        return Err(format_err(&img_path, format!("expected {SIDE}x{SIDE} images, found {rows}x{cols}")));
    }
    let labels = parse_idx_labels(&lbl_bytes, &lbl_path)?;
    if labels.len() != count {
        return Err(format_err(
            &lbl_path,
            format!("{} labels for {count} images in {}", labels.len(), img_path.display()),
        ));
    }
    let images = pixels.iter().map(|&p| p as f32 / 255.0).collect();
    DatasetHandle::new(DatasetKind::Mnist, split, images, labels)
}

impl DatasetHandle {
    /// Re-encodes an MNIST handle as `(images, labels)` IDX files.
    pub fn to_idx(&self) -> Result<(Vec<u8>, Vec<u8>)> {
        if self.kind != DatasetKind::Mnist {
            return Err(Error::InvalidArgument("IDX export is MNIST-only".into()));
        }
        let pixels: Vec<u8> = self.images().iter().map(|&v| (v * 255.0).round() as u8).collect();
        Ok((write_idx_images(&pixels, self.len(), SIDE, SIDE), write_idx_labels(self.labels())))
    }
}
