//! Train-time random crop + horizontal flip and the eval-time center crop,
//! both taken from a copy enlarged by about 15%.

use rand::Rng;

use super::{resize_image, Dataset, LabeledImage};
use crate::error::Result;
use crate::tensor::Tensor;

/// Side of the enlarged image and the largest crop offset for an `s x s`
/// target. The margin is kept even so the center crop is exact.
pub fn crop_geometry(s: usize) -> (usize, usize) {
    let half = (0.075 * s as f64).round() as usize;
    (s + 2 * half, 2 * half)
}

pub fn flip_horizontal(pixels: &Tensor<f32>) -> Tensor<f32> {
    let s = pixels.shape();
    let w = s[2];
    let data = pixels
        .data()
        .chunks(w)
        .flat_map(|row| row.iter().rev().copied())
        .collect();
    Tensor::from_vec(s, data).expect("same shape")
}

fn crop(enlarged: &Tensor<f32>, s: usize, oy: usize, ox: usize, flip: bool) -> Tensor<f32> {
    let big = enlarged.shape()[1];
    let d = enlarged.data();
    let mut out = Vec::with_capacity(3 * s * s);
    for c in 0..3 {
        for y in 0..s {
            let start = c * big * big + (oy + y) * big + ox;
            let row = &d[start..start + s];
            if flip {
                out.extend(row.iter().rev());
            } else {
                out.extend_from_slice(row);
            }
        }
    }
    Tensor::from_vec(&[3, s, s], out).expect("crop shape")
}

fn random_crop(enlarged: &Tensor<f32>, s: usize, margin: usize, rng: &mut impl Rng) -> Tensor<f32> {
    let oy = rng.random_range(0..=margin);
    let ox = rng.random_range(0..=margin);
    let flip = rng.random_bool(0.5);
    crop(enlarged, s, oy, ox, flip)
}

pub fn augment_train(img: &LabeledImage, rng: &mut impl Rng) -> Result<LabeledImage> {
    let s = img.size();
    let (big, margin) = crop_geometry(s);
    let enlarged = resize_image(&img.pixels, big)?;
    Ok(LabeledImage {
        pixels: random_crop(&enlarged, s, margin, rng),
        label: img.label,
        id: img.id.clone(),
    })
}

pub fn transform_eval(img: &LabeledImage) -> Result<LabeledImage> {
    let s = img.size();
    let (big, margin) = crop_geometry(s);
    let enlarged = resize_image(&img.pixels, big)?;
    Ok(LabeledImage {
        pixels: crop(&enlarged, s, margin / 2, margin / 2, false),
        label: img.label,
        id: img.id.clone(),
    })
}

/// Enlarged copies of every image in a dataset, so repeated epochs only pay
/// for the crop.
#[derive(Debug, Clone)]
pub struct AugmentBuffer {
    enlarged: Vec<Tensor<f32>>,
    size: usize,
    margin: usize,
}

impl AugmentBuffer {
    pub fn new(dataset: &Dataset) -> Result<Self> {
        let size = dataset.image_size()?;
        let (big, margin) = crop_geometry(size);
        let enlarged = dataset
            .images
            .iter()
            .map(|img| resize_image(&img.pixels, big))
            .collect::<Result<_>>()?;
        Ok(Self { enlarged, size, margin })
    }

    pub fn train(&self, index: usize, rng: &mut impl Rng) -> Tensor<f32> {
        random_crop(&self.enlarged[index], self.size, self.margin, rng)
    }

    pub fn eval(&self, index: usize) -> Tensor<f32> {
        crop(&self.enlarged[index], self.size, self.margin / 2, self.margin / 2, false)
    }
}
