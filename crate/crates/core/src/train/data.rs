//! Unpaired low/normal image sets held in memory, sampled as random crops.

use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use rand::Rng;

use crate::error::{Error, Result};
use crate::image::{crop_tensor, ImageBuffer};
use crate::tensor::Tensor;

/// Decoded images of one directory, in file-name order.
#[derive(Debug, Clone)]
pub struct ImageSet {
    pub names: Vec<String>,
    pub images: Vec<Tensor>,
}

impl ImageSet {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Sorted regular files of `dir`.
pub fn list_files(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::Dataset(format!("{} is not a directory", dir.display())));
    }
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Loads every decodable image of `dir` with both sides at least `min_side`.
/// Undecodable and undersized files are skipped with a warning.
pub fn load_image_dir(dir: &Path, min_side: usize) -> Result<ImageSet> {
    let mut set = ImageSet {
        names: Vec::new(),
        images: Vec::new(),
    };
    let mut seen = 0;
    for path in list_files(dir)? {
        seen += 1;
        let img = match ImageBuffer::load(&path) {
            Ok(img) => img,
            Err(e) => {
                warn!("skipping {}: {e}", path.display());
                continue;
            }
        };
        if img.width() < min_side || img.height() < min_side {
            warn!(
                "skipping {}: {}x{} is smaller than the {min_side} crop",
                path.display(),
                img.width(),
                img.height()
            );
            continue;
        }
        set.names.push(
            path.file_name()
                .map_or_else(String::new, |n| n.to_string_lossy().into_owned()),
        );
        set.images.push(img.to_tensor());
    }
    if set.is_empty() {
        return Err(Error::Dataset(format!(
            "{}: none of {seen} files is a decodable image of at least {min_side}x{min_side}",
            dir.display()
        )));
    }
    Ok(set)
}

/// Uniform crop offset and the cropped `[3, crop, crop]` tensor.
pub fn random_crop(rng: &mut impl Rng, img: &Tensor, crop: usize) -> Result<(Tensor, (usize, usize))> {
    let [_, h, w] = img.shape()[..] else {
        return Err(Error::Contract(format!("expected [C,H,W], got {:?}", img.shape())));
    };
    if h < crop || w < crop {
        return Err(Error::Dataset(format!("{h}x{w} image is smaller than the {crop} crop")));
    }
    let top = rng.random_range(0..=h - crop);
    let left = rng.random_range(0..=w - crop);
    Ok((crop_tensor(img, top, left, crop, crop)?, (top, left)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub low: Vec<Tensor>,
    pub normal: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub low: ImageSet,
    pub normal: ImageSet,
    pub crop_size: usize,
}

impl Dataset {
    pub fn load(low_dir: &Path, normal_dir: &Path, crop_size: usize) -> Result<Self> {
        Ok(Self {
            low: load_image_dir(low_dir, crop_size)?,
            normal: load_image_dir(normal_dir, crop_size)?,
            crop_size,
        })
    }

    pub fn from_images(low: Vec<Tensor>, normal: Vec<Tensor>, crop_size: usize) -> Result<Self> {
        let set = |images: Vec<Tensor>, kind: &str| -> Result<ImageSet> {
            if images.is_empty() {
                return Err(Error::Dataset(format!("no {kind} images")));
            }
            for t in &images {
                match t.shape() {
                    [3, h, w] if *h >= crop_size && *w >= crop_size => {}
                    s => {
                        return Err(Error::Dataset(format!(
                            "{kind} image {s:?} cannot give a {crop_size} crop"
                        )))
                    }
                }
            }
            Ok(ImageSet {
                names: (0..images.len()).map(|i| format!("{kind}{i}")).collect(),
                images,
            })
        };
        Ok(Self {
            low: set(low, "low")?,
            normal: set(normal, "normal")?,
            crop_size,
        })
    }

    /// `batch` low crops, then `batch` normal crops, each from a uniformly
    /// chosen image at a uniform offset.
    pub fn sample_batch(&self, rng: &mut impl Rng, batch: usize) -> Result<Batch> {
        let mut draw = |set: &ImageSet| -> Result<Vec<Tensor>> {
            (0..batch)
                .map(|_| {
                    let i = rng.random_range(0..set.len());
                    random_crop(rng, &set.images[i], self.crop_size).map(|(t, _)| t)
                })
                .collect()
        };
        let low = draw(&self.low)?;
        let normal = draw(&self.normal)?;
        Ok(Batch { low, normal })
    }

    /// Endless stream of batches driven by `rng`.
    pub fn batches<'a, R: Rng>(&'a self, rng: &'a mut R, batch: usize) -> impl Iterator<Item = Result<Batch>> + 'a {
        std::iter::repeat_with(move || self.sample_batch(rng, batch))
    }
}
