//! CIFAR-10 binary version: 10000 records of 1 label byte + 3072 planar pixel bytes per file.

use std::path::Path;

use super::{DatasetHandle, DatasetKind, Split};
use crate::error::{Error, Result};

pub const CIFAR_RECORD_BYTES: usize = 1 + 3 * 32 * 32;
const RECORDS_PER_FILE: usize = 10_000;

/// Splits one batch file into `(labels, pixels)`; pixels stay in channel-row-column order.
pub fn parse_cifar_batch(bytes: &[u8], path: &Path) -> Result<(Vec<u8>, Vec<u8>)> {
    let want = RECORDS_PER_FILE * CIFAR_RECORD_BYTES;
    if bytes.len() != want {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("expected {want} bytes ({RECORDS_PER_FILE} records), found {}", bytes.len()),
        });
    }
    let mut labels = Vec::with_capacity(RECORDS_PER_FILE);
    let mut pixels = Vec::with_capacity(RECORDS_PER_FILE * (CIFAR_RECORD_BYTES - 1));
    for (k, record) in bytes.chunks_exact(CIFAR_RECORD_BYTES).enumerate() {
        if record[0] > 9 {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!("label {} at offset {} outside 0..=9", record[0], k * CIFAR_RECORD_BYTES),
            });
        }
        labels.push(record[0]);
        pixels.extend_from_slice(&record[1..]);
    }
    Ok((labels, pixels))
}

pub fn write_cifar_batch(labels: &[u8], pixels: &[u8]) -> Vec<u8> {
    let per = CIFAR_RECORD_BYTES - 1;
    assert_eq!(labels.len() * per, pixels.len());
    let mut out = Vec::with_capacity(labels.len() * CIFAR_RECORD_BYTES);
    for (l, px) in labels.iter().zip(pixels.chunks_exact(per)) {
        out.push(*l);
        out.extend_from_slice(px);
    }
    out
}

/// Loads `data_batch_1..5.bin` (train) or `test_batch.bin` (test), keeping the 0–255 scale.
pub fn load_cifar10(dir: &Path, split: Split) -> Result<DatasetHandle> {
    let files: Vec<String> = match split {
        Split::Train => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
        Split::Test => vec!["test_batch.bin".to_string()],
    };
    let mut labels = Vec::new();
    let mut images = Vec::new();
    for name in files {
        let path = dir.join(name);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let (l, px) = parse_cifar_batch(&bytes, &path)?;
        labels.extend(l);
        images.extend(px.into_iter().map(|p| p as f32));
    }
    DatasetHandle::new(DatasetKind::Cifar10, split, images, labels)
}
