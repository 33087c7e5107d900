//! Synthetic fine-grained dataset: textured backgrounds and neutral
//! distractor shapes shared by all classes, plus one small class glyph
//! (shape x color) at a random position.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{codec, Dataset, LabeledImage};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    /// Training images per class.
    pub images_per_class: usize,
    pub test_images_per_class: usize,
    pub image_size: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 8,
            images_per_class: 120,
            test_images_per_class: 40,
            image_size: 64,
        }
    }
}

const PALETTE: [[f64; 3]; 4] = [
    [0.85, 0.15, 0.15],
    [0.15, 0.75, 0.2],
    [0.2, 0.3, 0.9],
    [0.85, 0.75, 0.1],
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Glyph {
    Plus,
    Frame,
    Saltire,
    Diamond,
}

const GLYPHS: [Glyph; 4] = [Glyph::Plus, Glyph::Frame, Glyph::Saltire, Glyph::Diamond];

#[derive(Debug, Clone, Copy)]
enum Distractor {
    Disk,
    Bar,
    Wedge,
}

impl Glyph {
    /// Whether offset `(dy, dx)` from the glyph's top-left corner is ink,
    /// for a glyph of side `n`.
    fn covers(self, dy: i64, dx: i64, n: i64) -> bool {
        let t = (n / 4).max(2);
        let mid = n / 2;
        match self {
            Glyph::Plus => (dy - mid).abs() < t / 2 + 1 || (dx - mid).abs() < t / 2 + 1,
            Glyph::Frame => dy < t || dx < t || dy >= n - t || dx >= n - t,
            Glyph::Saltire => (dy - dx).abs() < t / 2 + 1 || (dy + dx - (n - 1)).abs() < t / 2 + 1,
            Glyph::Diamond => {
                let r = (dy - mid).abs() + (dx - mid).abs();
                r <= mid && r > mid - t
            }
        }
    }
}

impl SyntheticSpec {
    pub const MAX_CLASSES: usize = PALETTE.len() * GLYPHS.len();

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.num_classes > Self::MAX_CLASSES {
            return Err(Error::Config(format!(
                "num_classes must lie in 1..={}, got {}",
                Self::MAX_CLASSES,
                self.num_classes
            )));
        }
        if self.images_per_class == 0 || self.test_images_per_class == 0 {
            return Err(Error::Config("images per class must be positive".into()));
        }
        if self.image_size < 24 {
            return Err(Error::Config(format!("image_size must be at least 24, got {}", self.image_size)));
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        let width = (self.num_classes - 1).max(1).to_string().len();
        (0..self.num_classes).map(|k| format!("class_{k:0width$}")).collect()
    }
}

struct Canvas {
    s: usize,
    px: Vec<f64>,
}

impl Canvas {
    fn put(&mut self, y: i64, x: i64, rgb: [f64; 3]) {
        let s = self.s as i64;
        if (0..s).contains(&y) && (0..s).contains(&x) {
            let p = (y * s + x) as usize;
            for (c, v) in rgb.into_iter().enumerate() {
                self.px[c * self.s * self.s + p] = v;
            }
        }
    }
}

fn background(s: usize, rng: &mut ChaCha8Rng) -> Canvas {
    let base = rng.random_range(0.35..0.65);
    let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.04..0.04));
    let waves: Vec<[f64; 4]> = (0..3)
        .map(|_| {
            let freq = rng.random_range(1.5..6.0) / s as f64;
            let angle = rng.random_range(0.0..PI);
            let phase = rng.random_range(0.0..2.0 * PI);
            [freq * angle.cos(), freq * angle.sin(), phase, rng.random_range(0.04..0.09)]
        })
        .collect();
    let mut px = vec![0.0; 3 * s * s];
    for y in 0..s {
        for x in 0..s {
            let texture: f64 = waves
                .iter()
                .map(|w| w[3] * (2.0 * PI * (w[0] * x as f64 + w[1] * y as f64) + w[2]).sin())
                .sum();
            for c in 0..3 {
                let noise = rng.random_range(-0.06..0.06);
                px[c * s * s + y * s + x] = base + tint[c] + texture + noise;
            }
        }
    }
    Canvas { s, px }
}

fn draw_distractor(canvas: &mut Canvas, rng: &mut ChaCha8Rng) {
    let s = canvas.s as i64;
    let kind = [Distractor::Disk, Distractor::Bar, Distractor::Wedge][rng.random_range(0..3)];
    let n = rng.random_range(7..13i64);
    let (y0, x0) = (rng.random_range(0..s - n), rng.random_range(0..s - n));
    let gray = rng.random_range(0.1..0.9);
    let rgb: [f64; 3] = std::array::from_fn(|_| gray + rng.random_range(-0.05..0.05));
    let horizontal = rng.random_bool(0.5);
    for dy in 0..n {
        for dx in 0..n {
            let ink = match kind {
                Distractor::Disk => {
                    let (cy, cx) = (dy as f64 - (n - 1) as f64 / 2.0, dx as f64 - (n - 1) as f64 / 2.0);
                    cy * cy + cx * cx <= (n as f64 / 2.0).powi(2)
                }
                Distractor::Bar => {
                    let along = if horizontal { dy } else { dx };
                    (along - n / 2).abs() <= 1
                }
                Distractor::Wedge => dx <= dy,
            };
            if ink {
                canvas.put(y0 + dy, x0 + dx, rgb);
            }
        }
    }
}

fn draw_glyph(canvas: &mut Canvas, class: usize, rng: &mut ChaCha8Rng) {
    let s = canvas.s as i64;
    let glyph = GLYPHS[class / PALETTE.len()];
    let color = PALETTE[class % PALETTE.len()];
    // a quarter to five sixteenths of the side: 16..=20 px at 64
    let n = rng.random_range((s / 4).max(3)..=(s * 5 / 16).max(3));
    let margin = (s / 8).max(3);
    let y0 = rng.random_range(margin..=s - margin - n);
    let x0 = rng.random_range(margin..=s - margin - n);
    let shade = rng.random_range(-0.05..0.05);
    let rgb = color.map(|v| v + shade);
    for dy in 0..n {
        for dx in 0..n {
            if glyph.covers(dy, dx, n) {
                canvas.put(y0 + dy, x0 + dx, rgb);
            }
        }
    }
}

fn render(spec: &SyntheticSpec, class: usize, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let s = spec.image_size;
    let mut canvas = background(s, rng);
    let distractors = rng.random_range(2..5);
    for _ in 0..distractors {
        draw_distractor(&mut canvas, rng);
    }
    draw_glyph(&mut canvas, class, rng);
    // quantized to 8 bits so exported PPM files reload bit-exactly
    let px = canvas
        .px
        .iter()
        .map(|&v| codec::from_u8(codec::to_u8(v as f32)))
        .collect();
    Tensor::from_vec(&[3, s, s], px).expect("canvas shape")
}

fn split(spec: &SyntheticSpec, seed: u64, stream: u64, per_class: usize, prefix: &str) -> Dataset {
    let mut images = Vec::with_capacity(spec.num_classes * per_class);
    for class in 0..spec.num_classes {
        for i in 0..per_class {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream((stream << 32) | (class * per_class + i) as u64);
            images.push(LabeledImage {
                pixels: render(spec, class, &mut rng),
                label: class,
                id: format!("{prefix}_{class:02}_{i:04}"),
            });
        }
    }
    Dataset {
        images,
        class_names: spec.class_names(),
    }
}

/// Deterministic `(train, test)` pair; the two splits draw from disjoint RNG
/// streams.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    Ok((
        split(spec, seed, 1, spec.images_per_class, "train"),
        split(spec, seed, 2, spec.test_images_per_class, "test"),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            num_classes: 3,
            images_per_class: 4,
            test_images_per_class: 2,
            image_size: 32,
        }
    }

    #[test]
    fn deterministic_and_counted() {
        let (a, b) = generate_synthetic(&small(), 5).unwrap();
        let (c, d) = generate_synthetic(&small(), 5).unwrap();
        assert_eq!(a, c);
        assert_eq!(b, d);
        assert_eq!(a.class_counts(), [4, 4, 4]);
        assert_eq!(b.class_counts(), [2, 2, 2]);
        assert_ne!(a.images[0].pixels, b.images[0].pixels);
        let (e, _) = generate_synthetic(&small(), 6).unwrap();
        assert_ne!(a, e);
    }

    #[test]
    fn default_counts() {
        let spec = SyntheticSpec::default();
        assert_eq!(spec.num_classes * spec.images_per_class, 960);
        assert_eq!(spec.num_classes * spec.test_images_per_class, 320);
    }

    #[test]
    fn pixels_are_quantized_and_in_range() {
        let (a, _) = generate_synthetic(&small(), 0).unwrap();
        for img in &a.images {
            for &v in img.pixels.data() {
                assert!((0.0..=1.0).contains(&v));
                assert_eq!(codec::from_u8(codec::to_u8(v)), v);
            }
        }
    }

    #[test]
    fn glyphs_are_distinct() {
        let n = 12;
        let masks: Vec<Vec<bool>> = GLYPHS
            .iter()
            .map(|g| (0..n * n).map(|i| g.covers(i / n, i % n, n)).collect())
            .collect();
        for i in 0..masks.len() {
            for j in i + 1..masks.len() {
                assert_ne!(masks[i], masks[j]);
            }
        }
    }

    #[test]
    fn invalid_specs() {
        assert!(SyntheticSpec { num_classes: 17, ..small() }.validate().is_err());
        assert!(SyntheticSpec { image_size: 8, ..small() }.validate().is_err());
        assert_eq!(SyntheticSpec { num_classes: 12, ..small() }.class_names()[3], "class_03");
    }
}
