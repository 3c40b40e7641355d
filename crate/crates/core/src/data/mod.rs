//! Dataset preparation: PNG loading, mask merging and dilation, splits,
//! augmentation and a synthetic two-ellipse dataset.

mod augment;
mod image;
mod split;
mod synth;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use augment::{apply_affine, augment, hflip, sample_rng, AffineParams, AugmentConfig};
pub use image::{read_png, resize_bilinear, resize_nearest, write_gray_png, write_plane_png, write_rgb_png};
pub use split::{split_cross, split_dataset, CrossMode, DatasetManifest, ManifestEntry, Split};
pub use synth::synth_dataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Montgomery,
    Shenzhen,
    Synthetic,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::Montgomery => "montgomery",
            Source::Shenzhen => "shenzhen",
            Source::Synthetic => "synthetic",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "montgomery" => Some(Source::Montgomery),
            "shenzhen" => Some(Source::Shenzhen),
            "synthetic" => Some(Source::Synthetic),
            _ => None,
        }
    }
}

impl std::fmt::Display for Source {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One image with its binary mask, both `(1, 1, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub source: Source,
    pub image: Tensor<f32>,
    pub mask: Tensor<f32>,
}

impl Sample {
    pub fn new(id: impl Into<String>, source: Source, image: Tensor<f32>, mask: Tensor<f32>) -> Result<Self> {
        if image.shape() != mask.shape() || image.shape().n != 1 || image.shape().c != 1 {
            return Err(Error::Contract(format!(
                "image {} and mask {} must both be (1, 1, H, W)",
                image.shape(),
                mask.shape()
            )));
        }
        if !image.all_finite() || !mask.all_finite() {
            return Err(Error::Contract(format!("sample {} has non-finite pixels", id.into())));
        }
        Ok(Sample {
            id: id.into(),
            source,
            image,
            mask,
        })
    }

    pub fn mask_is_binary(&self) -> bool {
        self.mask.data().iter().all(|&v| v == 0.0 || v == 1.0)
    }
}

/// Thresholds at 0.5 into exact `{0, 1}`.
pub fn binarize_mask(t: &Tensor<f32>) -> Tensor<f32> {
    t.map(|v| if v >= 0.5 { 1.0 } else { 0.0 })
}

/// Loads an image and its mask(s), resized to `size` (height, width).
///
/// Several mask files (Montgomery ships left and right lungs separately)
/// are merged by logical OR at native resolution. The image is resampled
/// bilinearly, the mask by nearest neighbour and then re-binarized.
pub fn load_sample(
    id: impl Into<String>,
    source: Source,
    image_path: &Path,
    mask_paths: &[&Path],
    size: (usize, usize),
) -> Result<Sample> {
    let image = read_png(image_path)?;
    let Some((first, rest)) = mask_paths.split_first() else {
        return Err(Error::Contract("at least one mask file is required".into()));
    };
    let mut mask = binarize_mask(&read_png(first)?);
    for path in rest {
        let other = binarize_mask(&read_png(path)?);
        if other.shape() != mask.shape() {
            return Err(Error::Image {
                path: path.to_path_buf(),
                message: format!("mask is {} but {} is {}", other.shape(), first.display(), mask.shape()),
            });
        }
        mask = mask.zip_map(&other, |a, b| a.max(b))?;
    }
    if mask.shape() != image.shape() {
        log::warn!(
            "{}: mask size {} differs from image size {}; both are resized",
            image_path.display(),
            mask.shape(),
            image.shape()
        );
    }
    let image = resize_bilinear(&image, size.0, size.1);
    let mask = binarize_mask(&resize_nearest(&mask, size.0, size.1));
    Sample::new(id, source, image, mask)
}

/// Morphological dilation with a `(2 * radius + 1)` square element,
/// applied `iterations` times. Pixels outside the mask count as
/// background.
pub fn dilate_mask(mask: &Tensor<f32>, radius: usize, iterations: usize) -> Tensor<f32> {
    let s = mask.shape();
    let mut cur = mask.clone();
    for _ in 0..iterations {
        let mut next = cur.clone();
        for (src, dst) in cur.data().chunks(s.plane()).zip(next.data_mut().chunks_mut(s.plane())) {
            // Separable max filter: rows then columns.
            let mut rows = vec![0.0f32; s.plane()];
            for y in 0..s.h {
                for x in 0..s.w {
                    let lo = x.saturating_sub(radius);
                    let hi = (x + radius).min(s.w - 1);
                    rows[y * s.w + x] = src[y * s.w + lo..=y * s.w + hi].iter().copied().fold(0.0, f32::max);
                }
            }
            for y in 0..s.h {
                let lo = y.saturating_sub(radius);
                let hi = (y + radius).min(s.h - 1);
                for x in 0..s.w {
                    dst[y * s.w + x] = (lo..=hi).map(|yy| rows[yy * s.w + x]).fold(0.0, f32::max);
                }
            }
        }
        cur = next;
    }
    cur
}
