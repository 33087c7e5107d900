//! Optimizer, schedule, the three-stream training step, evaluation, metrics
//! and checkpoints.

mod checkpoint;
mod metrics;

use std::collections::BTreeMap;

use crate::autodiff::{Tape, Var};
use crate::backbone::{extract_features, init_backbone};
use crate::coattention::{coattend, CoAttentionOptions};
use crate::config::TrainConfig;
use crate::data::pairs::epoch_rng;
use crate::data::{resize_image, AugmentBuffer, Dataset, LabeledImage, PairSampler};
use crate::erase::{attention_map, drop_mask, erase};
use crate::error::{Error, Result};
use crate::head::{
    bilinear_pool, classify_stream, init_classifier, total_loss, ClassCenters, LossTerms, Stream, StreamOutput,
    StreamOutputs,
};
use crate::params::{ParamTable, ParamVars};
use crate::tensor::{argmax, Scalar, Tensor};

pub use checkpoint::{
    checkpoint_precision, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_VERSION,
};
pub use metrics::{EpochRecord, MetricsLog, StepRecord};

/// Offset separating the augmentation streams from the pairing streams of
/// the same seed.
const AUGMENT_STREAM: u64 = 1 << 32;

/// `base_lr * anneal_factor ^ floor(epoch / anneal_every)`, rounded to 15
/// significant digits so decimal schedules come out as written (0.009, not
/// 0.009000000000000001).
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    let steps = (epoch / cfg.anneal_every) as i32;
    let raw = cfg.base_lr * cfg.anneal_factor.powi(steps);
    format!("{raw:.14e}").parse().expect("formatted float parses")
}

/// SGD with momentum and L2 weight decay:
/// `g' = g + wd p; buf = momentum buf + g'; p -= lr buf`.
/// Missing momentum buffers start at zero.
pub fn sgd_step<T: Scalar>(
    params: &mut ParamTable<T>,
    grads: &BTreeMap<String, Tensor<T>>,
    buffers: &mut ParamTable<T>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    let (lr, m, wd) = (T::from_f64_lossy(lr), T::from_f64_lossy(momentum), T::from_f64_lossy(weight_decay));
    for (name, p) in params.iter_mut() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::Config(format!("no gradient for parameter {name}")))?;
        if g.shape() != p.shape() {
            return Err(Error::Dimension {
                op: "sgd_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        if buffers.get(name).is_err() {
            buffers.insert(name.clone(), Tensor::zeros(p.shape()))?;
        }
        let buf = buffers.get_mut(name)?;
        if buf.shape() != p.shape() {
            return Err(Error::Dimension {
                op: "sgd_step",
                lhs: p.shape().to_vec(),
                rhs: buf.shape().to_vec(),
            });
        }
        let (pd, bd) = (p.data_mut(), buf.data_mut());
        for ((pv, bv), &gv) in pd.iter_mut().zip(bd.iter_mut()).zip(g.data()) {
            *bv = m * *bv + (gv + wd * *pv);
            *pv = *pv - lr * *bv;
        }
    }
    Ok(())
}

/// Everything a run needs to continue: parameters, optimizer buffers, class
/// centers and progress counters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<T> {
    pub config: TrainConfig,
    pub class_names: Vec<String>,
    pub params: ParamTable<T>,
    pub momentum: ParamTable<T>,
    pub centers: ClassCenters<T>,
    /// Completed epochs; the next epoch to run.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: u64,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(config: TrainConfig, class_names: Vec<String>) -> Result<Self> {
        config.validate()?;
        if class_names.is_empty() {
            return Err(Error::Config("at least one class is required".into()));
        }
        let backbone = config.backbone();
        let mut params = init_backbone::<T>(&backbone, config.seed)?;
        let c = backbone.channels();
        let k = class_names.len();
        params.extend(init_classifier(k, c * c, config.shared_classifier, config.seed.wrapping_add(1))?)?;
        let mut momentum = ParamTable::new();
        for (name, p) in params.iter() {
            momentum.insert(name.clone(), Tensor::zeros(p.shape()))?;
        }
        let centers = ClassCenters::zeros(k, c * c, config.alpha, config.effective_lambda());
        Ok(Self {
            config,
            class_names,
            params,
            momentum,
            centers,
            epoch: 0,
            step: 0,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }
}

/// Loss terms and accuracies of one optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub lr: f64,
    pub loss_total: f64,
    /// Cross-entropy per stream (original, weighted, erased).
    pub loss_ce: [Option<f64>; 3],
    pub loss_center: Option<f64>,
    /// Batch accuracy per stream.
    pub acc: [Option<f64>; 3],
    /// Number of classified streams in the step's graph.
    pub streams: usize,
    /// Mean fraction of erased pixels, when erasing is on.
    pub erased_fraction: Option<f64>,
}

impl StepMetrics {
    pub fn acc_train(&self) -> f64 {
        self.acc[0].unwrap_or(0.0)
    }
}

fn batch_accuracy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> f64 {
    let k = logits.shape()[1];
    let hits = logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count();
    hits as f64 / labels.len() as f64
}

fn pool_and_classify<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ParamVars,
    cfg: &TrainConfig,
    stream: Stream,
    maps: &[Var],
) -> Result<StreamOutput> {
    let pooled = maps
        .iter()
        .map(|&f| bilinear_pool(tape, f, cfg.signed_sqrt_l2))
        .collect::<Result<Vec<_>>>()?;
    let features = tape.stack(&pooled)?;
    let logits = classify_stream(tape, vars, stream, cfg.shared_classifier, features)?;
    Ok(StreamOutput { logits, features })
}

fn split_batch<T: Scalar>(tape: &mut Tape<T>, batch: Var) -> Result<Vec<Var>> {
    (0..tape.shape(batch)[0]).map(|i| tape.select(batch, i)).collect()
}

/// The erased copy of every image in `images [b, 3, s, s]`, each masked by
/// the attention of its own weighted features. Returns the batch and the
/// mean erased fraction.
pub fn erase_batch<T: Scalar>(
    images: &Tensor<T>,
    weighted: &[Tensor<T>],
    cfg: &TrainConfig,
) -> Result<(Tensor<T>, f64)> {
    let s = images.shape()[2];
    let mut erased = Vec::with_capacity(weighted.len());
    let mut fraction = 0.0;
    for (i, fw) in weighted.iter().enumerate() {
        let a = attention_map(fw, s, cfg.attention_reduce)?;
        let mask = drop_mask(&a, cfg.theta)?;
        fraction += mask.erased_fraction();
        erased.push(erase(&images.select(i)?, &mask)?);
    }
    Ok((Tensor::stack(&erased)?, fraction / weighted.len() as f64))
}

/// Tape handles of one training step's forward graph.
#[derive(Debug, Clone)]
pub struct StepGraph {
    /// Backbone features of the original batch, `[b, c, h, w]`.
    pub features: Var,
    /// Co-attention weight matrices, one per pair (empty without CA).
    pub weights: Vec<Var>,
    pub streams: StreamOutputs,
    pub terms: LossTerms,
    pub erased_fraction: Option<f64>,
}

/// Builds the forward graph of one step on a paired batch: original stream,
/// then the weighted stream (CA), then the erased stream (AE) and the total
/// loss. Fails if the erased stream reaches back into the attention pathway.
pub fn build_step_graph<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ParamVars,
    cfg: &TrainConfig,
    images: &Tensor<T>,
    labels: &[usize],
    centers: &ClassCenters<T>,
) -> Result<StepGraph> {
    let half = labels.len() / 2;
    let backbone = cfg.backbone();
    let x = tape.constant(images.clone());
    let f = extract_features(tape, &backbone, vars, x)?;
    let fo = split_batch(tape, f)?;

    let mut streams = StreamOutputs::default();
    streams.set(Stream::Original, pool_and_classify(tape, vars, cfg, Stream::Original, &fo)?);

    let mut weights = Vec::new();
    let fw = if cfg.enable_ca {
        let options = CoAttentionOptions {
            transpose_for_second: cfg.transpose_for_second,
        };
        let mut fw = fo.clone();
        for i in 0..half {
            let out = coattend(tape, fo[i], fo[i + half], options)?;
            fw[i] = out.fw1;
            fw[i + half] = out.fw2;
            weights.push(out.weights);
        }
        streams.set(Stream::Weighted, pool_and_classify(tape, vars, cfg, Stream::Weighted, &fw)?);
        fw
    } else {
        fo
    };

    let mut erased_fraction = None;
    if cfg.enable_ae {
        let weighted: Vec<Tensor<T>> = fw.iter().map(|&v| tape.value(v).clone()).collect();
        let (erased, fraction) = erase_batch(images, &weighted, cfg)?;
        erased_fraction = Some(fraction);
        let xe = tape.constant(erased);
        let fe = extract_features(tape, &backbone, vars, xe)?;
        let fe = split_batch(tape, fe)?;
        let out = pool_and_classify(tape, vars, cfg, Stream::Erased, &fe)?;
        if std::iter::once(&f).chain(&weights).any(|&r| tape.depends_on(out.logits, r)) {
            return Err(Error::Backward(
                "erased stream is connected to the attention pathway".into(),
            ));
        }
        streams.set(Stream::Erased, out);
    }

    let terms = total_loss(tape, &streams, labels, centers)?;
    Ok(StepGraph {
        features: f,
        weights,
        streams,
        terms,
        erased_fraction,
    })
}

/// One optimizer step on a paired batch `images [b, 3, s, s]`.
pub fn train_step<T: Scalar>(
    state: &mut TrainState<T>,
    images: &Tensor<T>,
    labels: &[usize],
    lr: f64,
) -> Result<StepMetrics> {
    let b = labels.len();
    let half = b / 2;
    if b == 0 || b % 2 != 0 || images.shape().first() != Some(&b) {
        return Err(Error::shape(
            "train_step",
            format!("need an even paired batch, got {b} labels for images {:?}", images.shape()),
        ));
    }
    if (0..half).any(|i| labels[i] != labels[i + half]) {
        return Err(Error::Dataset(format!("batch is not paired: {labels:?}")));
    }
    let cfg = state.config.clone();
    state.centers.alpha = cfg.alpha;
    state.centers.lambda = cfg.effective_lambda();

    let mut tape = Tape::new();
    let vars = state.params.register(&mut tape);
    let graph = build_step_graph(&mut tape, &vars, &cfg, images, labels, &state.centers)?;
    let (terms, streams, erased_fraction) = (graph.terms, graph.streams, graph.erased_fraction);
    tape.backward(terms.total)?;

    let scalar = |tape: &Tape<T>, v: Var| tape.value(v).data()[0].to_f64_lossy();
    let mut metrics = StepMetrics {
        lr,
        loss_total: scalar(&tape, terms.total),
        loss_ce: [None; 3],
        loss_center: terms.center.map(|c| scalar(&tape, c)),
        acc: [None; 3],
        streams: streams.enabled().count(),
        erased_fraction,
    };
    let mut stream_features = Vec::new();
    for (stream, out) in streams.enabled() {
        let slot = Stream::ALL.iter().position(|&s| s == stream).expect("known stream");
        metrics.loss_ce[slot] = terms.ce(stream).map(|v| scalar(&tape, v));
        metrics.acc[slot] = Some(batch_accuracy(tape.value(out.logits), labels));
        if cfg.enable_center {
            stream_features.push(tape.value(out.features).clone());
        }
    }
    let grads: BTreeMap<String, Tensor<T>> = vars
        .iter()
        .map(|(name, &v)| {
            let g = tape
                .grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(tape.shape(v)));
            (name.clone(), g)
        })
        .collect();
    drop(tape);

    sgd_step(
        &mut state.params,
        &grads,
        &mut state.momentum,
        lr,
        cfg.momentum,
        cfg.weight_decay,
    )?;
    if cfg.enable_center {
        let all = Tensor::stack(&stream_features)?;
        let d = all.shape()[2];
        let all = all.reshape(&[stream_features.len() * b, d])?;
        let repeated: Vec<usize> = stream_features.iter().flat_map(|_| labels.iter().copied()).collect();
        state.centers.update(&all, &repeated)?;
    }
    state.step += 1;
    Ok(metrics)
}

/// Class scores of the original-image stream for `images [n, 3, s, s]`.
pub fn predict_logits<T: Scalar>(state: &TrainState<T>, images: &Tensor<T>) -> Result<Tensor<T>> {
    let cfg = &state.config;
    let mut tape = Tape::new();
    let vars = state.params.register_frozen(&mut tape);
    let x = tape.constant(images.clone());
    let f = extract_features(&mut tape, &cfg.backbone(), &vars, x)?;
    let maps = split_batch(&mut tape, f)?;
    let out = pool_and_classify(&mut tape, &vars, cfg, Stream::Original, &maps)?;
    Ok(tape.value(out.logits).clone())
}

const EVAL_CHUNK: usize = 32;

/// Top-1 accuracy on center-cropped images, single-image path only.
pub fn evaluate<T: Scalar>(state: &TrainState<T>, data: &EvalSet) -> Result<f64> {
    let predictions = predict(state, data)?;
    let hits = predictions.iter().zip(&data.labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / data.labels.len() as f64)
}

pub fn predict<T: Scalar>(state: &TrainState<T>, data: &EvalSet) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(data.labels.len());
    let n = data.labels.len();
    for start in (0..n).step_by(EVAL_CHUNK) {
        let batch: Vec<Tensor<T>> = (start..n.min(start + EVAL_CHUNK))
            .map(|i| data.images.eval(i).cast())
            .collect();
        let logits = predict_logits(state, &Tensor::stack(&batch)?)?;
        let k = logits.shape()[1];
        out.extend(logits.data().chunks(k).map(argmax));
    }
    Ok(out)
}

/// Images resized to the network input with their crop buffers.
#[derive(Debug, Clone)]
pub struct EvalSet {
    pub images: AugmentBuffer,
    pub labels: Vec<usize>,
    pub ids: Vec<String>,
}

impl EvalSet {
    pub fn new(dataset: &Dataset, input_size: usize) -> Result<Self> {
        let resized = resized(dataset, input_size)?;
        Ok(Self {
            images: AugmentBuffer::new(&resized)?,
            labels: resized.labels(),
            ids: resized.images.iter().map(|i| i.id.clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn resized(dataset: &Dataset, input_size: usize) -> Result<Dataset> {
    if dataset.is_empty() {
        return Err(Error::Dataset("dataset is empty".into()));
    }
    let images = dataset
        .images
        .iter()
        .map(|img| {
            Ok(LabeledImage {
                pixels: resize_image(&img.pixels, input_size)?,
                label: img.label,
                id: img.id.clone(),
            })
        })
        .collect::<Result<_>>()?;
    Ok(Dataset {
        images,
        class_names: dataset.class_names.clone(),
    })
}

/// Train and test sets prepared for a run.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub class_names: Vec<String>,
    pub train: EvalSet,
    pub test: EvalSet,
}

impl TrainData {
    pub fn new(train: &Dataset, test: &Dataset, input_size: usize) -> Result<Self> {
        if train.class_names != test.class_names {
            return Err(Error::Dataset(format!(
                "train classes {:?} differ from test classes {:?}",
                train.class_names, test.class_names
            )));
        }
        Ok(Self {
            class_names: train.class_names.clone(),
            train: EvalSet::new(train, input_size)?,
            test: EvalSet::new(test, input_size)?,
        })
    }

    /// The synthetic dataset described by the config's data keys.
    pub fn synthetic(cfg: &TrainConfig) -> Result<Self> {
        let (train, test) = crate::data::generate_synthetic(&cfg.synthetic(), cfg.seed)?;
        Self::new(&train, &test, cfg.input_size)
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Runs one epoch (`state.epoch`), then evaluates on the test split.
pub fn train_epoch<T: Scalar>(
    state: &mut TrainState<T>,
    data: &TrainData,
    mut log: Option<&mut MetricsLog>,
) -> Result<EpochRecord> {
    let cfg = state.config.clone();
    let epoch = state.epoch;
    let lr = lr_at(epoch, &cfg);
    let sampler = PairSampler::new(&data.train.labels, cfg.batch_size, cfg.seed)?;
    let mut aug = epoch_rng(cfg.seed, AUGMENT_STREAM + epoch as u64);
    let mut steps = Vec::new();
    for batch in sampler.epoch(epoch as u64) {
        let images: Vec<Tensor<T>> = batch
            .indices
            .iter()
            .map(|&i| data.train.images.train(i, &mut aug).cast())
            .collect();
        let m = train_step(state, &Tensor::stack(&images)?, &batch.labels, lr)?;
        let record = StepRecord::new(epoch, state.step, &m);
        if let Some(log) = log.as_deref_mut() {
            log.append(&record)?;
        }
        steps.push(m);
    }
    state.epoch += 1;
    let acc_test = evaluate(state, &data.test)?;
    let ce = |slot: usize| {
        steps[0].loss_ce[slot].map(|_| mean(steps.iter().filter_map(|m| m.loss_ce[slot])))
    };
    let record = EpochRecord {
        epoch,
        step: state.step,
        lr,
        loss_total: mean(steps.iter().map(|m| m.loss_total)),
        loss_ce_o: ce(0),
        loss_ce_w: ce(1),
        loss_ce_e: ce(2),
        loss_center: steps[0]
            .loss_center
            .map(|_| mean(steps.iter().filter_map(|m| m.loss_center))),
        acc_train: mean(steps.iter().map(StepMetrics::acc_train)),
        acc_test,
    };
    if let Some(log) = log {
        log.append(&record)?;
    }
    Ok(record)
}

/// Trains until `state.config.epochs` epochs are complete; `on_epoch` sees
/// each epoch record as it is produced.
pub fn fit<T: Scalar>(
    state: &mut TrainState<T>,
    data: &TrainData,
    mut log: Option<&mut MetricsLog>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<Vec<EpochRecord>> {
    if state.class_names != data.class_names {
        return Err(Error::Dataset("checkpoint classes differ from the dataset classes".into()));
    }
    let mut records = Vec::new();
    while state.epoch < state.config.epochs {
        let r = train_epoch(state, data, log.as_deref_mut())?;
        on_epoch(&r);
        records.push(r);
    }
    Ok(records)
}
