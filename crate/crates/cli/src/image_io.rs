//! Single images to and from dataset-unit tensors.

use std::path::Path;

use image::{GrayImage, RgbImage};
use robustfeat::data::DatasetKind;
use robustfeat::{Error, Result, Tensor};

fn format_err(path: &Path, reason: String) -> Error {
    Error::Format { path: path.to_path_buf(), reason }
}

/// Reads a 28×28 grayscale (MNIST, scaled to [0, 1]) or 32×32 RGB
/// (CIFAR-10, kept in [0, 255]) image as a `[1, C, H, W]` tensor.
pub fn read_image(path: &Path, kind: DatasetKind) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| format_err(path, e.to_string()))?;
    let [c, h, w] = kind.dims();
    if (img.width() as usize, img.height() as usize) != (w, h) {
        return Err(Error::Shape(format!(
            "{} is {}x{}, {} expects {w}x{h}",
            path.display(),
            img.width(),
            img.height(),
            kind.name()
        )));
    }
    let data: Vec<f32> = match kind {
        DatasetKind::Mnist => img.to_luma8().pixels().map(|p| p[0] as f32 / 255.0).collect(),
        DatasetKind::Cifar10 => {
            let rgb = img.to_rgb8();
            (0..c).flat_map(|ch| rgb.pixels().map(move |p| p[ch] as f32)).collect()
        }
    };
    Tensor::new([1, c, h, w], data)
}

/// Writes a `[1, C, H, W]` tensor as PNG, rounding to the nearest 8-bit level.
pub fn write_image(path: &Path, x: &Tensor, kind: DatasetKind) -> Result<()> {
    let [c, h, w] = kind.dims();
    let d = x.data();
    let byte = |v: f32| v.round().clamp(0.0, 255.0) as u8;
    let saved = match kind {
        DatasetKind::Mnist => {
            GrayImage::from_fn(w as u32, h as u32, |i, j| image::Luma([byte(d[j as usize * w + i as usize] * 255.0)]))
                .save(path)
        }
        DatasetKind::Cifar10 => RgbImage::from_fn(w as u32, h as u32, |i, j| {
            let at = |ch: usize| byte(d[(ch * h + j as usize) * w + i as usize]);
            image::Rgb([at(0), at(1), at(2)])
        })
        .save(path),
    };
    debug_assert_eq!(d.len(), c * h * w);
    saved.map_err(|e| format_err(path, e.to_string()))
}
