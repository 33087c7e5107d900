//! Small convolutional feature extractor: `conv -> relu -> maxpool` per stage.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{var, ParamTable, ParamVars};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    /// 2x2 max pooling with stride 2.
    #[default]
    Max,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub input_size: usize,
    pub stage_channels: Vec<usize>,
    pub kernel_size: usize,
    pub pool: PoolKind,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            input_size: 64,
            stage_channels: vec![16, 32, 64],
            kernel_size: 3,
            pool: PoolKind::Max,
        }
    }
}

pub type BackboneParams<T> = ParamTable<T>;

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.is_empty() || self.stage_channels.contains(&0) {
            return Err(Error::Config(format!(
                "stage_channels must be non-empty and positive, got {:?}",
                self.stage_channels
            )));
        }
        if self.kernel_size == 0 || self.kernel_size % 2 == 0 {
            return Err(Error::Config(format!(
                "kernel_size must be odd and positive, got {}",
                self.kernel_size
            )));
        }
        let side = self.feature_side();
        if side < 2 {
            return Err(Error::Config(format!(
                "input_size {} with {} stages leaves a {side}x{side} feature map; need at least 2x2",
                self.input_size,
                self.stage_channels.len()
            )));
        }
        Ok(())
    }

    /// Spatial side of the output feature map.
    pub fn feature_side(&self) -> usize {
        self.stage_channels
            .iter()
            .fold(self.input_size, |side, _| side / 2)
    }

    /// Channel count `c` handed to the co-attention module.
    pub fn channels(&self) -> usize {
        *self.stage_channels.last().expect("validated non-empty")
    }

    /// `[c, h, w]` of a single sample's features.
    pub fn feature_shape(&self) -> [usize; 3] {
        let side = self.feature_side();
        [self.channels(), side, side]
    }

    fn weight_name(stage: usize) -> String {
        format!("backbone.stage{stage}.weight")
    }

    fn bias_name(stage: usize) -> String {
        format!("backbone.stage{stage}.bias")
    }
}

/// Kaiming-normal kernels (`std = sqrt(2 / fan_in)`) and zero biases from a
/// seeded generator; the same seed always yields the same table.
pub fn init_backbone<T: Scalar>(config: &BackboneConfig, seed: u64) -> Result<BackboneParams<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut table = ParamTable::new();
    let mut c_in = 3;
    let k = config.kernel_size;
    for (stage, &c_out) in config.stage_channels.iter().enumerate() {
        let fan_in = c_in * k * k;
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        let weights: Vec<f64> = (0..c_out * fan_in).map(|_| normal.sample(&mut rng)).collect();
        table.insert(
            BackboneConfig::weight_name(stage),
            Tensor::from_f64(&[c_out, c_in, k, k], &weights)?,
        )?;
        table.insert(BackboneConfig::bias_name(stage), Tensor::zeros(&[c_out]))?;
        c_in = c_out;
    }
    Ok(table)
}

/// Runs `images [b, 3, s, s]` through every stage, producing `[b, c, h, w]`.
pub fn extract_features<T: Scalar>(
    tape: &mut Tape<T>,
    config: &BackboneConfig,
    params: &ParamVars,
    images: Var,
) -> Result<Var> {
    let s = tape.shape(images);
    if s.len() != 4 || s[1] != 3 || s[2] != config.input_size || s[3] != config.input_size {
        return Err(Error::shape(
            "extract_features",
            format!(
                "expected [b, 3, {0}, {0}] images, got {s:?}",
                config.input_size
            ),
        ));
    }
    let mut x = images;
    for stage in 0..config.stage_channels.len() {
        let w = var(params, &BackboneConfig::weight_name(stage))?;
        let b = var(params, &BackboneConfig::bias_name(stage))?;
        x = tape.conv2d(x, w, 1, config.kernel_size / 2)?;
        x = tape.add_channel_bias(x, b)?;
        x = tape.relu(x)?;
        x = match config.pool {
            PoolKind::Max => tape.maxpool2d(x, 2, 2)?,
        };
    }
    Ok(x)
}

/// Tape-free convenience: features for a batch of images.
pub fn features<T: Scalar>(
    config: &BackboneConfig,
    params: &BackboneParams<T>,
    images: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let vars = params.register_frozen(&mut tape);
    let x = tape.constant(images.clone());
    let f = extract_features(&mut tape, config, &vars, x)?;
    Ok(tape.value(f).clone())
}
