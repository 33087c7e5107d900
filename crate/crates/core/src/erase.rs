//! Attention-guided erasing: pick the dominant channel of the weighted
//! features, upsample it to image resolution, threshold it into a binary drop
//! mask and zero the masked pixels of the input image.
//!
//! Everything here runs on plain tensors, outside any tape. The erased image
//! is new input data for a second forward pass.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::upsample_bilinear;
use crate::tensor::{argmax, Scalar, Tensor};

/// How the `c x h x w` weighted features are reduced to one spatial map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AttentionReduce {
    /// The single channel with the largest global average.
    #[default]
    ArgmaxGap,
    /// Per-pixel maximum over channels.
    PixelMax,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap<T> {
    /// `s x s`, min-max normalized to `[0, 1]` (all zeros when constant).
    pub a: Tensor<T>,
    /// Channel the map was taken from. For [`AttentionReduce::PixelMax`] this
    /// is the channel holding the largest single response.
    pub source_channel: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DropMask<T> {
    /// `s x s` with entries in `{0, 1}`; 0 marks an erased pixel.
    pub m: Tensor<T>,
    pub theta_used: f64,
}

impl<T: Scalar> DropMask<T> {
    pub fn erased_fraction(&self) -> f64 {
        let kept: f64 = self.m.data().iter().map(|v| v.to_f64_lossy()).sum();
        1.0 - kept / self.m.numel() as f64
    }

    pub fn erased_count(&self) -> usize {
        self.m.data().iter().filter(|&&v| v == T::zero()).count()
    }
}

pub fn attention_map<T: Scalar>(fw: &Tensor<T>, image_size: usize, reduce: AttentionReduce) -> Result<AttentionMap<T>> {
    if fw.ndim() != 3 {
        return Err(Error::shape(
            "attention_map",
            format!("expected c x h x w features, got {:?}", fw.shape()),
        ));
    }
    let (c, h, w) = (fw.shape()[0], fw.shape()[1], fw.shape()[2]);
    let plane = h * w;
    let planes: Vec<&[T]> = fw.data().chunks(plane).collect();
    let (raw, source_channel) = match reduce {
        AttentionReduce::ArgmaxGap => {
            let inv = T::one() / T::from_usize(plane).expect("plane size");
            let means: Vec<T> = planes.iter().map(|p| p.iter().copied().sum::<T>() * inv).collect();
            let m = argmax(&means);
            (planes[m].to_vec(), m)
        }
        AttentionReduce::PixelMax => {
            let mut best = planes[0].to_vec();
            let mut owner = vec![0usize; plane];
            for (ch, p) in planes.iter().enumerate().skip(1) {
                for ((b, o), &v) in best.iter_mut().zip(owner.iter_mut()).zip(p.iter()) {
                    if v > *b {
                        *b = v;
                        *o = ch;
                    }
                }
            }
            let top = argmax(&best);
            (best, owner[top])
        }
    };
    debug_assert!(source_channel < c);
    let up = upsample_bilinear(&Tensor::from_vec(&[h, w], raw)?, image_size, image_size)?;
    let lo = up.data().iter().copied().fold(T::infinity(), T::min);
    let hi = up.data().iter().copied().fold(T::neg_infinity(), T::max);
    let a = if hi > lo {
        let span = hi - lo;
        up.map(|v| (v - lo) / span)
    } else {
        Tensor::zeros(up.shape())
    };
    Ok(AttentionMap { a, source_channel })
}

/// `m = 0` where `a > theta`, else `1`.
pub fn drop_mask<T: Scalar>(attention: &AttentionMap<T>, theta: f64) -> Result<DropMask<T>> {
    if !(theta > 0.0 && theta < 1.0) {
        return Err(Error::Config(format!("theta must lie in (0, 1), got {theta}")));
    }
    let t = T::from_f64_lossy(theta);
    let m = attention
        .a
        .map(|v| if v > t { T::zero() } else { T::one() });
    Ok(DropMask { m, theta_used: theta })
}

/// Multiplies every color channel of `image [3, s, s]` by the mask.
pub fn erase<T: Scalar>(image: &Tensor<T>, mask: &DropMask<T>) -> Result<Tensor<T>> {
    let s = image.shape();
    if s.len() != 3 || mask.m.shape() != &s[1..] {
        return Err(Error::Dimension {
            op: "erase",
            lhs: s.to_vec(),
            rhs: mask.m.shape().to_vec(),
        });
    }
    crate::instrument::bump(|c| c.erase += 1);
    let plane = s[1] * s[2];
    let m = mask.m.data();
    let data = image
        .data()
        .chunks(plane)
        .flat_map(|ch| ch.iter().zip(m).map(|(&p, &k)| p * k))
        .collect();
    Tensor::from_vec(s, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn amap(side: usize, data: &[f64]) -> AttentionMap<f64> {
        AttentionMap {
            a: Tensor::from_f64(&[side, side], data).unwrap(),
            source_channel: 0,
        }
    }

    #[test]
    fn picks_channel_with_largest_mean() {
        let mut data = vec![1.0; 4];
        data.extend([5.0; 4]);
        data.extend([3.0, 0.0, 0.0, 0.0]);
        let fw: Tensor<f64> = Tensor::from_f64(&[3, 2, 2], &data).unwrap();
        let a = attention_map(&fw, 4, AttentionReduce::ArgmaxGap).unwrap();
        assert_eq!(a.source_channel, 1);
        assert_eq!(a.a.shape(), &[4, 4]);

        let single: Tensor<f64> = Tensor::from_f64(&[1, 2, 2], &[0.1, 0.9, 0.3, 0.2]).unwrap();
        assert_eq!(attention_map(&single, 8, AttentionReduce::ArgmaxGap).unwrap().source_channel, 0);
    }

    #[test]
    fn pixel_max_reduction() {
        let fw: Tensor<f64> = Tensor::from_f64(&[2, 1, 2], &[1.0, 0.0, 0.0, 4.0]).unwrap();
        let a = attention_map(&fw, 2, AttentionReduce::PixelMax).unwrap();
        assert_eq!(a.source_channel, 1);
        assert_eq!(a.a.data(), &[0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn constant_channel_normalizes_to_zero() {
        let fw = Tensor::full(&[2, 3, 3], 2.5f64);
        let a = attention_map(&fw, 6, AttentionReduce::ArgmaxGap).unwrap();
        assert!(a.a.data().iter().all(|&v| v == 0.0));
        let m = drop_mask(&a, 0.5).unwrap();
        assert_eq!(m.erased_count(), 0);
    }

    #[test]
    fn normalized_range() {
        let fw = Tensor::from_f64(&[1, 2, 2], &[-3.0, 1.0, 2.0, 7.0]).unwrap();
        let a = attention_map(&fw, 5, AttentionReduce::ArgmaxGap).unwrap();
        let max = a.a.data().iter().copied().fold(f64::MIN, f64::max);
        let min = a.a.data().iter().copied().fold(f64::MAX, f64::min);
        assert_eq!((min, max), (0.0, 1.0));
    }

    #[test]
    fn mask_examples() {
        let m = drop_mask(&amap(2, &[0.9, 0.3, 0.6, 0.1]), 0.5).unwrap();
        assert_eq!(m.m.data(), &[0.0, 1.0, 0.0, 1.0]);
        assert_eq!(m.theta_used, 0.5);
        assert!((m.erased_fraction() - 0.5).abs() < 1e-12);

        let m = drop_mask(&amap(2, &[0.5, 0.3, 0.2, 0.1]), 0.5).unwrap();
        assert_eq!(m.m.data(), &[1.0; 4]);

        let m = drop_mask(&amap(2, &[1.0, 0.0, 0.2, 0.1]), 0.5).unwrap();
        assert!(m.erased_count() >= 1);
    }

    #[test]
    fn theta_outside_unit_interval_is_config_error() {
        let a = amap(1, &[0.5]);
        for theta in [0.0, 1.0, -0.1, 1.5, f64::NAN] {
            assert!(matches!(drop_mask(&a, theta), Err(Error::Config(_))));
        }
    }

    #[test]
    fn erase_examples() {
        let img = Tensor::from_f64(&[3, 2, 2], &(1..=12).map(f64::from).collect::<Vec<_>>()).unwrap();
        let ones = DropMask {
            m: Tensor::full(&[2, 2], 1.0),
            theta_used: 0.5,
        };
        assert_eq!(erase(&img, &ones).unwrap(), img);

        let zeros = DropMask {
            m: Tensor::zeros(&[2, 2]),
            theta_used: 0.5,
        };
        assert!(erase(&img, &zeros).unwrap().data().iter().all(|&v| v == 0.0));

        let checker = DropMask {
            m: Tensor::from_f64(&[2, 2], &[0.0, 1.0, 1.0, 0.0]).unwrap(),
            theta_used: 0.5,
        };
        let out = erase(&img, &checker).unwrap();
        assert_eq!(out.data(), &[0., 2., 3., 0., 0., 6., 7., 0., 0., 10., 11., 0.]);

        let wrong = DropMask {
            m: Tensor::zeros(&[3, 3]),
            theta_used: 0.5,
        };
        assert!(erase(&img, &wrong).is_err());
    }
}
