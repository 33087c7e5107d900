//! Datasets, image codecs, augmentation and the pair-structured sampler.

pub mod augment;
pub mod codec;
pub mod pairs;
pub mod synthetic;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::resize_planes;
use crate::tensor::Tensor;

pub use augment::{augment_train, crop_geometry, flip_horizontal, transform_eval, AugmentBuffer};
pub use pairs::{PairBatch, PairSampler};
pub use synthetic::{generate_synthetic, SyntheticSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    /// `[3, s, s]`, values in `[0, 1]`.
    pub pixels: Tensor<f32>,
    pub label: usize,
    pub id: String,
}

impl LabeledImage {
    pub fn size(&self) -> usize {
        self.pixels.shape()[1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<LabeledImage>,
    pub class_names: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.images.iter().map(|i| i.label).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for img in &self.images {
            counts[img.label] += 1;
        }
        counts
    }

    /// Image side length; errors unless every image is `3 x s x s` with the
    /// same `s`.
    pub fn image_size(&self) -> Result<usize> {
        let first = self
            .images
            .first()
            .ok_or_else(|| Error::Dataset("dataset is empty".into()))?
            .size();
        for img in &self.images {
            if img.pixels.shape() != [3, first, first] {
                return Err(Error::Dataset(format!(
                    "image {} has shape {:?}, expected [3, {first}, {first}]",
                    img.id,
                    img.pixels.shape()
                )));
            }
        }
        Ok(first)
    }

    /// Writes `root/<class_name>/<id>.ppm`.
    pub fn export(&self, root: &Path) -> Result<()> {
        for name in &self.class_names {
            let dir = root.join(name);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        for img in &self.images {
            let path = root.join(&self.class_names[img.label]).join(format!("{}.ppm", img.id));
            codec::write_ppm(&path, &img.pixels)?;
        }
        Ok(())
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let hidden = entry.file_name().to_string_lossy().starts_with('.');
        if !hidden {
            out.push(entry.path());
        }
    }
    out.sort();
    Ok(out)
}

/// Square RGB resize of `[3, h, w]` planes.
pub fn resize_image(pixels: &Tensor<f32>, size: usize) -> Result<Tensor<f32>> {
    let s = pixels.shape();
    if s[1] == size && s[2] == size {
        return Ok(pixels.clone());
    }
    Tensor::from_vec(&[3, size, size], resize_planes(pixels.data(), 3, s[1], s[2], size, size))
}

/// Loads `root/<class_name>/*.{ppm,png}`. Class indices follow the
/// lexicographic order of the folder names; images are resized to
/// `image_size`.
pub fn load_image_folder(root: &Path, image_size: usize) -> Result<Dataset> {
    if !root.is_dir() {
        return Err(Error::Dataset(format!("{} is not a directory", root.display())));
    }
    let classes: Vec<PathBuf> = sorted_entries(root)?.into_iter().filter(|p| p.is_dir()).collect();
    if classes.is_empty() {
        return Err(Error::Dataset(format!("no class folders under {}", root.display())));
    }
    let mut images = Vec::new();
    let mut class_names = Vec::new();
    for (label, dir) in classes.iter().enumerate() {
        let files: Vec<PathBuf> = sorted_entries(dir)?.into_iter().filter(|p| p.is_file()).collect();
        if files.is_empty() {
            return Err(Error::Dataset(format!("class folder {} is empty", dir.display())));
        }
        for path in files {
            let pixels = resize_image(&codec::read_image(&path)?, image_size)?;
            let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            images.push(LabeledImage { pixels, label, id: stem });
        }
        class_names.push(dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default());
    }
    Ok(Dataset { images, class_names })
}

/// Contents of `manifest.json` written next to an exported synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: SyntheticSpec,
    pub seed: u64,
    pub train_images: usize,
    pub test_images: usize,
    pub class_names: Vec<String>,
}

/// Writes `root/train`, `root/test` and `root/manifest.json`.
pub fn export_synthetic(root: &Path, spec: &SyntheticSpec, seed: u64) -> Result<Manifest> {
    let (train, test) = generate_synthetic(spec, seed)?;
    train.export(&root.join("train"))?;
    test.export(&root.join("test"))?;
    let manifest = Manifest {
        spec: spec.clone(),
        seed,
        train_images: train.len(),
        test_images: test.len(),
        class_names: train.class_names.clone(),
    };
    let path = root.join("manifest.json");
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    codec::write_file(&path, text.as_bytes())?;
    Ok(manifest)
}
