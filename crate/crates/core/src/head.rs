//! Bilinear pooling, the shared linear classifier, cross-entropy, center loss
//! and the combined three-stream objective.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{var, ParamTable, ParamVars};
use crate::tensor::{Scalar, Tensor};

/// Standard deviation of the randomly initialized classifier weights.
const CLASSIFIER_INIT_STD: f64 = 0.01;

/// Unit-norm (or zero) second-order descriptor of one feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct BilinearFeature<T> {
    pub v: Tensor<T>,
}

/// `B = F' F'^T / l`, flattened, then (optionally) signed square root and L2
/// normalization. `f` is `c x h x w`; the result has `c * c` entries.
pub fn bilinear_pool<T: Scalar>(tape: &mut Tape<T>, f: Var, normalize: bool) -> Result<Var> {
    let s = tape.shape(f).to_vec();
    if s.len() != 3 {
        return Err(Error::shape("bilinear_pool", format!("expected c x h x w, got {s:?}")));
    }
    let (c, l) = (s[0], s[1] * s[2]);
    let x = tape.reshape(f, &[c, l])?;
    let xt = tape.transpose(x)?;
    let gram = tape.matmul(x, xt)?;
    let gram = tape.scale(gram, T::one() / T::from_usize(l).expect("spatial size"))?;
    let flat = tape.reshape(gram, &[c * c])?;
    if !normalize {
        return Ok(flat);
    }
    let root = tape.signed_sqrt(flat)?;
    tape.l2_normalize(root)
}

/// Pools each sample of `features [b, c, h, w]` into a `[b, c*c]` matrix.
pub fn bilinear_pool_batch<T: Scalar>(tape: &mut Tape<T>, features: Var, normalize: bool) -> Result<Var> {
    let b = tape.shape(features)[0];
    let rows = (0..b)
        .map(|i| {
            let f = tape.select(features, i)?;
            bilinear_pool(tape, f, normalize)
        })
        .collect::<Result<Vec<_>>>()?;
    tape.stack(&rows)
}

/// Tape-free bilinear descriptor of one `c x h x w` map.
pub fn bilinear_feature<T: Scalar>(f: &Tensor<T>, normalize: bool) -> Result<BilinearFeature<T>> {
    let mut tape = Tape::new();
    let x = tape.constant(f.clone());
    let v = bilinear_pool(&mut tape, x, normalize)?;
    Ok(BilinearFeature {
        v: tape.value(v).clone(),
    })
}

/// `logits = V W^T + bias` for `V [b, d]`, `W [k, d]`, `bias [k]`.
pub fn classify<T: Scalar>(tape: &mut Tape<T>, features: Var, weights: Var, bias: Var) -> Result<Var> {
    let (sf, sw) = (tape.shape(features).to_vec(), tape.shape(weights).to_vec());
    let features = match sf.len() {
        1 => tape.reshape(features, &[1, sf[0]])?,
        2 => features,
        _ => {
            return Err(Error::Dimension {
                op: "classify",
                lhs: sf,
                rhs: sw,
            })
        }
    };
    crate::instrument::bump(|c| c.classify += 1);
    let wt = tape.transpose(weights)?;
    let logits = tape.matmul(features, wt)?;
    tape.add_row_bias(logits, bias)
}

/// Mean cross-entropy of `logits [b, k]` against integer labels.
pub fn cross_entropy<T: Scalar>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    tape.cross_entropy(logits, labels)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassCenters<T> {
    /// `[k, d]`, one row per class.
    pub centers: Tensor<T>,
    /// Center learning rate.
    pub alpha: f64,
    /// Weight of the center loss in the total objective.
    pub lambda: f64,
}

impl<T: Scalar> ClassCenters<T> {
    pub fn zeros(classes: usize, dim: usize, alpha: f64, lambda: f64) -> Self {
        Self {
            centers: Tensor::zeros(&[classes, dim]),
            alpha,
            lambda,
        }
    }

    pub fn classes(&self) -> usize {
        self.centers.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.centers.shape()[1]
    }

    fn check_labels(&self, labels: &[usize]) -> Result<()> {
        match labels.iter().find(|&&l| l >= self.classes()) {
            Some(&label) => Err(Error::Label {
                label,
                classes: self.classes(),
            }),
            None => Ok(()),
        }
    }

    /// `[b, d]` matrix of each label's center, as tape-constant data.
    pub fn gather(&self, labels: &[usize]) -> Result<Tensor<T>> {
        self.check_labels(labels)?;
        let d = self.dim();
        let mut out = Vec::with_capacity(labels.len() * d);
        for &l in labels {
            out.extend_from_slice(&self.centers.data()[l * d..(l + 1) * d]);
        }
        Tensor::from_vec(&[labels.len(), d], out)
    }

    /// Online update: `c_j -= alpha * sum_{i: y_i = j} (c_j - v_i) / (1 + n_j)`.
    /// Classes absent from `labels` are untouched.
    pub fn update(&mut self, features: &Tensor<T>, labels: &[usize]) -> Result<()> {
        self.check_labels(labels)?;
        let d = self.dim();
        if features.shape() != [labels.len(), d] {
            return Err(Error::Dimension {
                op: "update_centers",
                lhs: features.shape().to_vec(),
                rhs: vec![labels.len(), d],
            });
        }
        crate::instrument::bump(|c| c.center_updates += 1);
        let k = self.classes();
        let mut delta = vec![0.0f64; k * d];
        let mut counts = vec![0usize; k];
        let centers = self.centers.data();
        for (row, &l) in features.data().chunks(d).zip(labels) {
            counts[l] += 1;
            for j in 0..d {
                delta[l * d + j] += centers[l * d + j].to_f64_lossy() - row[j].to_f64_lossy();
            }
        }
        let alpha = self.alpha;
        let data = self.centers.data_mut();
        for class in (0..k).filter(|&c| counts[c] > 0) {
            let denom = 1.0 + counts[class] as f64;
            for j in 0..d {
                let i = class * d + j;
                let c = data[i].to_f64_lossy() - alpha * delta[i] / denom;
                data[i] = T::from_f64_lossy(c);
            }
        }
        Ok(())
    }
}

/// `(1 / 2b) * sum_i ||v_i - c_{y_i}||^2`. The centers enter as constants.
pub fn center_loss<T: Scalar>(
    tape: &mut Tape<T>,
    features: Var,
    labels: &[usize],
    centers: &ClassCenters<T>,
) -> Result<Var> {
    let target = centers.gather(labels)?;
    if tape.shape(features) != target.shape() {
        return Err(Error::Dimension {
            op: "center_loss",
            lhs: tape.shape(features).to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    let target = tape.constant(target);
    let diff = tape.sub(features, target)?;
    let sq = tape.sum_squares(diff)?;
    let b = T::from_usize(labels.len()).expect("batch size");
    tape.scale(sq, T::one() / (b + b))
}

/// The three classification streams: original image, co-attention weighted
/// features, erased image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stream {
    Original,
    Weighted,
    Erased,
}

impl Stream {
    pub const ALL: [Stream; 3] = [Stream::Original, Stream::Weighted, Stream::Erased];

    pub fn tag(self) -> &'static str {
        match self {
            Stream::Original => "o",
            Stream::Weighted => "w",
            Stream::Erased => "e",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

/// Logits `[b, k]` and bilinear features `[b, d]` of one stream.
#[derive(Debug, Clone, Copy)]
pub struct StreamOutput {
    pub logits: Var,
    pub features: Var,
}

/// Outputs of the enabled streams; disabled streams are `None`.
#[derive(Debug, Clone, Copy, Default)]
pub struct StreamOutputs {
    streams: [Option<StreamOutput>; 3],
}

impl StreamOutputs {
    pub fn set(&mut self, stream: Stream, out: StreamOutput) {
        self.streams[stream.index()] = Some(out);
    }

    pub fn get(&self, stream: Stream) -> Option<StreamOutput> {
        self.streams[stream.index()]
    }

    pub fn enabled(&self) -> impl Iterator<Item = (Stream, StreamOutput)> + '_ {
        Stream::ALL
            .into_iter()
            .filter_map(|s| self.get(s).map(|o| (s, o)))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    /// Cross-entropy per stream, `None` when the stream is disabled.
    pub cross_entropy: [Option<Var>; 3],
    /// Center loss summed over streams (before the `lambda` weight), `None`
    /// when `lambda == 0`.
    pub center: Option<Var>,
}

impl LossTerms {
    pub fn ce(&self, stream: Stream) -> Option<Var> {
        self.cross_entropy[stream.index()]
    }
}

/// `L = sum_s [ CE(logits_s) + lambda * center_loss(v_s) ]` over the enabled
/// streams, with `lambda` taken from `centers`.
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    streams: &StreamOutputs,
    labels: &[usize],
    centers: &ClassCenters<T>,
) -> Result<LossTerms> {
    let mut ce = [None; 3];
    let mut ce_sum: Option<Var> = None;
    let mut center_sum: Option<Var> = None;
    for (stream, out) in streams.enabled() {
        let l = cross_entropy(tape, out.logits, labels)?;
        ce[stream.index()] = Some(l);
        ce_sum = Some(match ce_sum {
            Some(acc) => tape.add(acc, l)?,
            None => l,
        });
        if centers.lambda != 0.0 {
            let c = center_loss(tape, out.features, labels, centers)?;
            center_sum = Some(match center_sum {
                Some(acc) => tape.add(acc, c)?,
                None => c,
            });
        }
    }
    let ce_sum = ce_sum.ok_or_else(|| Error::Config("total_loss needs at least one stream".into()))?;
    let total = match center_sum {
        Some(c) => {
            let weighted = tape.scale(c, T::from_f64_lossy(centers.lambda))?;
            tape.add(ce_sum, weighted)?
        }
        None => ce_sum,
    };
    Ok(LossTerms {
        total,
        cross_entropy: ce,
        center: center_sum,
    })
}

/// Classifier parameter names for one stream.
pub fn classifier_names(stream: Stream, shared: bool) -> (String, String) {
    if shared {
        ("head.weight".into(), "head.bias".into())
    } else {
        (
            format!("head.{}.weight", stream.tag()),
            format!("head.{}.bias", stream.tag()),
        )
    }
}

/// Randomly initialized classifier(s) over `dim`-dimensional features.
pub fn init_classifier<T: Scalar>(classes: usize, dim: usize, shared: bool, seed: u64) -> Result<ParamTable<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, CLASSIFIER_INIT_STD).expect("positive std");
    let mut table = ParamTable::new();
    let streams: &[Stream] = if shared { &[Stream::Original] } else { &Stream::ALL };
    for &s in streams {
        let (w, b) = classifier_names(s, shared);
        let weights: Vec<f64> = (0..classes * dim).map(|_| normal.sample(&mut rng)).collect();
        table.insert(w, Tensor::from_f64(&[classes, dim], &weights)?)?;
        table.insert(b, Tensor::zeros(&[classes]))?;
    }
    Ok(table)
}

/// Classifies `features [b, d]` with the stream's classifier.
pub fn classify_stream<T: Scalar>(
    tape: &mut Tape<T>,
    params: &ParamVars,
    stream: Stream,
    shared: bool,
    features: Var,
) -> Result<Var> {
    let (w, b) = classifier_names(stream, shared);
    classify(tape, features, var(params, &w)?, var(params, &b)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_constant_channel() {
        let f = Tensor::full(&[1, 2, 2], 1.0f64);
        let v = bilinear_feature(&f, true).unwrap();
        assert_eq!(v.v.data(), &[1.0]);
        let raw = bilinear_feature(&f, false).unwrap();
        assert_eq!(raw.v.data(), &[1.0]);
    }

    #[test]
    fn orthogonal_channels_have_zero_cross_terms() {
        let f: Tensor<f64> = Tensor::from_f64(&[2, 1, 4], &[1., 0., 2., 0., 0., 3., 0., 1.]).unwrap();
        let raw = bilinear_feature(&f, false).unwrap();
        assert_eq!(raw.v.data()[1], 0.0);
        assert_eq!(raw.v.data()[2], 0.0);
        assert!((raw.v.data()[0] - 5.0 / 4.0).abs() < 1e-12);
        assert!((raw.v.data()[3] - 10.0 / 4.0).abs() < 1e-12);
    }

    #[test]
    fn zero_features_pool_to_zero() {
        let f = Tensor::<f64>::zeros(&[3, 2, 2]);
        let v = bilinear_feature(&f, true).unwrap();
        assert!(v.v.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn classify_examples() {
        let mut tape = Tape::<f64>::new();
        let v = tape.constant(Tensor::from_f64(&[3], &[0.0, 0.6, 0.0]).unwrap());
        let zw = tape.constant(Tensor::zeros(&[2, 3]));
        let zb = tape.constant(Tensor::zeros(&[2]));
        let l = classify(&mut tape, v, zw, zb).unwrap();
        assert_eq!(tape.value(l).data(), &[0.0, 0.0]);

        let w = tape.constant(Tensor::from_f64(&[2, 3], &[0., 0., 0., 0., 2.5, 0.]).unwrap());
        let l = classify(&mut tape, v, w, zb).unwrap();
        assert_eq!(tape.shape(l), &[1, 2]);
        assert!((tape.value(l).data()[1] - 1.5).abs() < 1e-12);

        let bad = tape.constant(Tensor::zeros(&[2, 4]));
        assert!(classify(&mut tape, v, bad, zb).is_err());
    }

    #[test]
    fn center_loss_examples() {
        let centers = ClassCenters {
            centers: Tensor::from_f64(&[2, 2], &[1., 0., 0., 1.]).unwrap(),
            alpha: 0.5,
            lambda: 0.5,
        };
        let mut tape = Tape::<f64>::new();
        let at_center = tape.constant(centers.centers.clone());
        let l = center_loss(&mut tape, at_center, &[0, 1], &centers).unwrap();
        assert_eq!(tape.value(l).data(), &[0.0]);

        let one_off = tape.constant(Tensor::from_f64(&[1, 2], &[1., 1.]).unwrap());
        let l = center_loss(&mut tape, one_off, &[0], &centers).unwrap();
        assert!((tape.value(l).data()[0] - 0.5).abs() < 1e-12);

        assert!(matches!(
            center_loss(&mut tape, one_off, &[2], &centers),
            Err(Error::Label { label: 2, classes: 2 })
        ));
    }

    #[test]
    fn center_update_examples() {
        let mut centers: ClassCenters<f64> = ClassCenters {
            centers: Tensor::from_f64(&[2, 2], &[1., 1., 4., 4.]).unwrap(),
            alpha: 1.0,
            lambda: 0.5,
        };
        let v = Tensor::from_f64(&[1, 2], &[3., -1.]).unwrap();
        centers.update(&v, &[0]).unwrap();
        // one sample, alpha 1: c <- (c + v) / 2; class 1 untouched
        assert_eq!(centers.centers.data(), &[2., 0., 4., 4.]);
    }

    #[test]
    fn stream_loss_composition() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.param(Tensor::from_f64(&[2, 3], &[0.1, 0.5, -0.3, 1.2, 0.0, 0.4]).unwrap());
        let feats = tape.param(Tensor::from_f64(&[2, 2], &[0.6, 0.8, 1.0, 0.0]).unwrap());
        let centers = ClassCenters {
            centers: Tensor::from_f64(&[3, 2], &[0., 1., 1., 0., 0.5, 0.5]).unwrap(),
            alpha: 0.5,
            lambda: 0.0,
        };
        let out = StreamOutput { logits, features: feats };
        let mut single = StreamOutputs::default();
        single.set(Stream::Original, out);
        let labels = [1, 2];
        let one = total_loss(&mut tape, &single, &labels, &centers).unwrap();
        let ce = cross_entropy(&mut tape, logits, &labels).unwrap();
        assert_eq!(tape.value(one.total).data(), tape.value(ce).data());
        assert!(one.center.is_none());

        let mut triple = StreamOutputs::default();
        for s in Stream::ALL {
            triple.set(s, out);
        }
        let centers = ClassCenters { lambda: 0.5, ..centers };
        let single_full = total_loss(&mut tape, &single, &labels, &centers).unwrap();
        let three = total_loss(&mut tape, &triple, &labels, &centers).unwrap();
        let a = tape.value(single_full.total).data()[0];
        let b = tape.value(three.total).data()[0];
        assert!((b - 3.0 * a).abs() < 1e-12);
    }

    #[test]
    fn per_stream_classifier_names() {
        let shared = init_classifier::<f32>(4, 9, true, 0).unwrap();
        assert_eq!(shared.len(), 2);
        let split = init_classifier::<f32>(4, 9, false, 0).unwrap();
        assert_eq!(split.len(), 6);
        assert!(split.get("head.e.weight").is_ok());
    }
}
