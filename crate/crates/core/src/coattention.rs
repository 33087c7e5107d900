//! Channel co-attention between the feature maps of a same-class image pair.
//!
//! With `F'1, F'2` the `c x l` reshapes of the two maps, the bilinear channel
//! similarity is `M = F'1 F'2^T` and the weight matrix is the row softmax of
//! `-M`. Both maps are then re-mixed by the same `W`: `F_W = W F'`.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Feature maps of two images of the same class.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePair<T> {
    pub f1: Tensor<T>,
    pub f2: Tensor<T>,
    pub label: usize,
}

impl<T: Scalar> FeaturePair<T> {
    pub fn new(f1: Tensor<T>, f2: Tensor<T>, label: usize) -> Result<Self> {
        if f1.ndim() != 3 || f1.shape() != f2.shape() {
            return Err(Error::Dimension {
                op: "feature_pair",
                lhs: f1.shape().to_vec(),
                rhs: f2.shape().to_vec(),
            });
        }
        Ok(Self { f1, f2, label })
    }

    pub fn channels(&self) -> usize {
        self.f1.shape()[0]
    }

    pub fn channel_weights(&self) -> Result<ChannelWeightMatrix<T>> {
        let mut tape = Tape::new();
        let (a, b) = (tape.constant(self.f1.clone()), tape.constant(self.f2.clone()));
        let cw = channel_weights(&mut tape, a, b)?;
        Ok(ChannelWeightMatrix {
            w: tape.value(cw.weights).clone(),
        })
    }

    pub fn coattend(&self, options: CoAttentionOptions) -> Result<(Tensor<T>, Tensor<T>, ChannelWeightMatrix<T>)> {
        let mut tape = Tape::new();
        let (a, b) = (tape.constant(self.f1.clone()), tape.constant(self.f2.clone()));
        let out = coattend(&mut tape, a, b, options)?;
        Ok((
            tape.value(out.fw1).clone(),
            tape.value(out.fw2).clone(),
            ChannelWeightMatrix {
                w: tape.value(out.weights).clone(),
            },
        ))
    }
}

/// Row-stochastic `c x c` channel weight matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelWeightMatrix<T> {
    pub w: Tensor<T>,
}

impl<T: Scalar> ChannelWeightMatrix<T> {
    pub fn new(w: Tensor<T>) -> Result<Self> {
        if w.ndim() != 2 || w.shape()[0] != w.shape()[1] {
            return Err(Error::shape(
                "channel_weights",
                format!("expected a square matrix, got {:?}", w.shape()),
            ));
        }
        Ok(Self { w })
    }

    pub fn channels(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.w
            .data()
            .chunks(self.channels())
            .map(|row| row.iter().map(|v| v.to_f64_lossy()).sum())
            .collect()
    }

    /// `W x f` for a `c x h x w` map.
    pub fn apply(&self, f: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let w = tape.constant(self.w.clone());
        let x = tape.constant(f.clone());
        let out = apply_channel_weights(&mut tape, w, x)?;
        Ok(tape.value(out).clone())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CoAttentionOptions {
    /// Re-mix the second map with `W^T` instead of `W`.
    pub transpose_for_second: bool,
}

/// Tape handles of one channel-weight computation.
#[derive(Debug, Clone, Copy)]
pub struct ChannelWeights {
    /// `M = F'1 F'2^T`
    pub bilinear: Var,
    /// `W = softmax_rows(-M)`
    pub weights: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct CoAttended {
    pub fw1: Var,
    pub fw2: Var,
    pub weights: Var,
    pub bilinear: Var,
}

fn as_matrix<T: Scalar>(tape: &mut Tape<T>, f: Var, op: &'static str) -> Result<(Var, [usize; 3])> {
    let s = tape.shape(f);
    if s.len() != 3 {
        return Err(Error::shape(op, format!("expected a c x h x w map, got {s:?}")));
    }
    let dims = [s[0], s[1], s[2]];
    Ok((tape.reshape(f, &[dims[0], dims[1] * dims[2]])?, dims))
}

pub fn channel_weights<T: Scalar>(tape: &mut Tape<T>, f1: Var, f2: Var) -> Result<ChannelWeights> {
    if tape.shape(f1) != tape.shape(f2) {
        return Err(Error::Dimension {
            op: "channel_weights",
            lhs: tape.shape(f1).to_vec(),
            rhs: tape.shape(f2).to_vec(),
        });
    }
    let (a, _) = as_matrix(tape, f1, "channel_weights")?;
    let (b, _) = as_matrix(tape, f2, "channel_weights")?;
    let bt = tape.transpose(b)?;
    let bilinear = tape.matmul(a, bt)?;
    let neg = tape.neg(bilinear)?;
    let weights = tape.softmax_rows(neg)?;
    Ok(ChannelWeights { bilinear, weights })
}

pub fn apply_channel_weights<T: Scalar>(tape: &mut Tape<T>, weights: Var, f: Var) -> Result<Var> {
    let (x, [c, h, w]) = as_matrix(tape, f, "apply_channel_weights")?;
    if tape.shape(weights) != [c, c] {
        return Err(Error::Dimension {
            op: "apply_channel_weights",
            lhs: tape.shape(weights).to_vec(),
            rhs: vec![c, h, w],
        });
    }
    let mixed = tape.matmul(weights, x)?;
    tape.reshape(mixed, &[c, h, w])
}

pub fn coattend<T: Scalar>(tape: &mut Tape<T>, f1: Var, f2: Var, options: CoAttentionOptions) -> Result<CoAttended> {
    crate::instrument::bump(|c| c.coattend += 1);
    let cw = channel_weights(tape, f1, f2)?;
    let fw1 = apply_channel_weights(tape, cw.weights, f1)?;
    let second = if options.transpose_for_second {
        tape.transpose(cw.weights)?
    } else {
        cw.weights
    };
    let fw2 = apply_channel_weights(tape, second, f2)?;
    Ok(CoAttended {
        fw1,
        fw2,
        weights: cw.weights,
        bilinear: cw.bilinear,
    })
}
