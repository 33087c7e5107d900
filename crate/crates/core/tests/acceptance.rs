//! Acceptance suite. Runs every criterion in order and prints one PASS/FAIL
//! line each; exits non-zero if any fails.
//!
//! `cargo test -p pcanet --test acceptance` runs all ten. Passing criterion
//! numbers (`-- 1 4 9`) runs a subset. Criteria 5 and 10 share one desk-scale
//! ablation run (about half an hour on one core).

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use pcanet::ablate::{run_ablation, CONFIGURATIONS};
use pcanet::cam::{grad_cam, render_heatmap};
use pcanet::coattention::{apply_channel_weights, channel_weights, ChannelWeightMatrix, FeaturePair};
use pcanet::config::{Precision, TrainConfig};
use pcanet::data::{generate_synthetic, LabeledImage, PairSampler};
use pcanet::erase::{attention_map, drop_mask, erase, AttentionMap, AttentionReduce};
use pcanet::head::{bilinear_pool, center_loss, cross_entropy, ClassCenters, Stream};
use pcanet::params::ParamTable;
use pcanet::train::{
    build_step_graph, decode_checkpoint, encode_checkpoint, fit, load_checkpoint, lr_at, save_checkpoint,
    EpochRecord, MetricsLog, TrainData, TrainState,
};
use pcanet::{grad_check, Tape, Tensor};

use common::{max_abs_diff, random, random_f32, rng};

type Outcome = Result<String, String>;

fn check(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn e2s(e: pcanet::Error) -> String {
    e.to_string()
}

// ---------------------------------------------------------------- 1

const GRAD_TOL: f64 = 1e-4;
const EPS: f64 = 1e-6;

/// `sum(out * r)` for a fixed random `r`, so every output entry carries a
/// distinct weight into the scalar.
fn weighted_sum(tape: &mut Tape<f64>, out: pcanet::Var, seed: u64) -> pcanet::Result<pcanet::Var> {
    let r = random(&mut rng(seed), tape.shape(out), 1.0);
    let r = tape.constant(r);
    let prod = tape.mul(out, r)?;
    tape.sum(prod)
}

/// Tiny model for the end-to-end check: 4 channels on 8x8 inputs.
fn tiny_model_config() -> TrainConfig {
    TrainConfig {
        input_size: 8,
        stage_channels: vec![4],
        num_classes: 2,
        batch_size: 4,
        precision: Precision::F64,
        ..TrainConfig::default()
    }
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut g = rng(1);
    let mut worst: Vec<(&str, f64)> = Vec::new();
    let mut record = |name: &'static str, err: pcanet::Result<f64>| -> Result<(), String> {
        let err = err.map_err(e2s)?;
        worst.push((name, err));
        check(err < GRAD_TOL, format!("{name}: relative error {err:.3e}"))
    };

    let x = random(&mut g, &[3, 5], 2.0);
    record("softmax_rows", grad_check(|t, v| {
        let s = t.softmax_rows(v)?;
        weighted_sum(t, s, 10)
    }, &x, EPS))?;

    let (a, b) = (random(&mut g, &[3, 4], 1.0), random(&mut g, &[4, 2], 1.0));
    record("matmul (lhs)", grad_check(|t, v| {
        let bv = t.constant(b.clone());
        let p = t.matmul(v, bv)?;
        weighted_sum(t, p, 11)
    }, &a, EPS))?;
    record("matmul (rhs)", grad_check(|t, v| {
        let av = t.constant(a.clone());
        let p = t.matmul(av, v)?;
        weighted_sum(t, p, 12)
    }, &b, EPS))?;

    let (img, ker) = (random(&mut g, &[2, 2, 5, 5], 1.0), random(&mut g, &[3, 2, 3, 3], 1.0));
    for (stride, pad) in [(1, 0), (1, 1), (2, 1)] {
        record("conv2d (input)", grad_check(|t, v| {
            let k = t.constant(ker.clone());
            let y = t.conv2d(v, k, stride, pad)?;
            weighted_sum(t, y, 13)
        }, &img, EPS))?;
        record("conv2d (kernels)", grad_check(|t, v| {
            let i = t.constant(img.clone());
            let y = t.conv2d(i, v, stride, pad)?;
            weighted_sum(t, y, 14)
        }, &ker, EPS))?;
    }

    let f = random(&mut g, &[4, 3, 3], 1.0);
    record("bilinear_pool chain", grad_check(|t, v| {
        let p = bilinear_pool(t, v, true)?;
        weighted_sum(t, p, 15)
    }, &f, EPS))?;

    let (f1, f2) = (random(&mut g, &[4, 3, 3], 0.5), random(&mut g, &[4, 3, 3], 0.5));
    let coattn = |first: bool| {
        let other = if first { f2.clone() } else { f1.clone() };
        move |t: &mut Tape<f64>, v: pcanet::Var| {
            let o = t.constant(other.clone());
            let (a, b) = if first { (v, o) } else { (o, v) };
            let w = channel_weights(t, a, b)?.weights;
            let fw1 = apply_channel_weights(t, w, a)?;
            let fw2 = apply_channel_weights(t, w, b)?;
            let s1 = weighted_sum(t, fw1, 16)?;
            let s2 = weighted_sum(t, fw2, 17)?;
            t.add(s1, s2)
        }
    };
    record("channel_weights + apply (f1)", grad_check(coattn(true), &f1, EPS))?;
    record("channel_weights + apply (f2)", grad_check(coattn(false), &f2, EPS))?;

    let logits = random(&mut g, &[4, 3], 2.0);
    record("cross_entropy", grad_check(|t, v| cross_entropy(t, v, &[0, 2, 1, 2]), &logits, EPS))?;

    let feats = random(&mut g, &[4, 6], 1.0);
    let mut centers = ClassCenters::<f64>::zeros(3, 6, 0.5, 0.5);
    centers.centers = random(&mut g, &[3, 6], 1.0);
    record("center_loss", grad_check(|t, v| center_loss(t, v, &[0, 2, 1, 2], &centers), &feats, EPS))?;

    let cfg = tiny_model_config();
    let state = TrainState::<f64>::new(cfg.clone(), vec!["a".into(), "b".into()]).map_err(e2s)?;
    // Biases start at zero and erased pixels are exactly zero, which parks
    // pre-activations on the ReLU kink. Check at a generic point instead.
    let mut params = ParamTable::new();
    for (name, value) in state.params.iter() {
        let noise = random(&mut g, value.shape(), 0.1);
        let moved = Tensor::from_vec(value.shape(), value.data().iter().zip(noise.data()).map(|(a, b)| a + b).collect())
            .map_err(e2s)?;
        params.insert(name.clone(), moved).map_err(e2s)?;
    }
    let images = random(&mut g, &[4, 3, 8, 8], 0.5).map(|v| v + 0.5);
    let labels = [0, 1, 0, 1];
    let d = cfg.stage_channels[0].pow(2);
    let mut centers = ClassCenters::<f64>::zeros(2, d, cfg.alpha, cfg.lambda);
    centers.centers = random(&mut g, &[2, d], 0.2);
    for (name, value) in params.iter() {
        let err = grad_check(
            |t, v| {
                let mut vars = params.register_frozen(t);
                vars.insert(name.clone(), v);
                Ok(build_step_graph(t, &vars, &cfg, &images, &labels, &centers)?.terms.total)
            },
            value,
            EPS,
        )
        .map_err(e2s)?;
        worst.push(("total_loss", err));
        check(err < GRAD_TOL, format!("total_loss wrt {name}: relative error {err:.3e}"))?;
    }

    let secs = start.elapsed().as_secs_f64();
    check(secs < 60.0, format!("took {secs:.1} s"))?;
    let max = worst.iter().map(|w| w.1).fold(0.0, f64::max);
    Ok(format!("{} checks, max relative error {max:.2e}, {secs:.1} s", worst.len()))
}

// ---------------------------------------------------------------- 2

const INSTANCES: usize = 100;

fn criterion_2() -> Outcome {
    let mut g = rng(2);
    let mut worst = [0.0f64; 6];
    for _ in 0..INSTANCES {
        use rand::Rng;
        let c = g.random_range(1..6);
        let (h, w) = (g.random_range(1..5), g.random_range(1..5));
        let f1 = random(&mut g, &[c, h, w], 1.0);
        let f2 = random(&mut g, &[c, h, w], 1.0);

        let pair = FeaturePair::new(f1.clone(), f2.clone(), 0).map_err(e2s)?;
        let wm = pair.channel_weights().map_err(e2s)?;
        worst[0] = worst[0].max(max_abs_diff(wm.w.data(), &common::channel_weights(&f1, &f2)));

        let wr = random(&mut g, &[c, c], 1.0);
        let applied = ChannelWeightMatrix::new(wr.clone()).map_err(e2s)?.apply(&f1).map_err(e2s)?;
        worst[1] = worst[1].max(max_abs_diff(applied.data(), &common::apply_channel_weights(wr.data(), &f1)));

        for normalize in [false, true] {
            let v = pcanet::head::bilinear_feature(&f1, normalize).map_err(e2s)?.v;
            worst[2] = worst[2].max(max_abs_diff(v.data(), &common::bilinear_pool(&f1, normalize)));
        }

        let (m, k, n) = (g.random_range(1..7), g.random_range(1..7), g.random_range(1..7));
        let (a, b) = (random(&mut g, &[m, k], 1.0), random(&mut g, &[k, n], 1.0));
        let mut t = Tape::new();
        let (av, bv) = (t.constant(a.clone()), t.constant(b.clone()));
        let p = t.matmul(av, bv).map_err(e2s)?;
        worst[3] = worst[3].max(max_abs_diff(t.value(p).data(), &common::matmul(a.data(), b.data(), m, k, n)));

        let (ci, co) = (g.random_range(1..4), g.random_range(1..4));
        let kk = [1, 3, 5][g.random_range(0..3)];
        let side = g.random_range(kk..kk + 5);
        let (stride, pad) = (g.random_range(1..3), g.random_range(0..kk / 2 + 1));
        let x = random(&mut g, &[2, ci, side, side], 1.0);
        let kernels = random(&mut g, &[co, ci, kk, kk], 1.0);
        let oracle = common::conv2d(&x, &kernels, stride, pad);
        let mut t = Tape::new();
        let (xv, kv) = (t.constant(x.clone()), t.constant(kernels.clone()));
        let y = t.conv2d(xv, kv, stride, pad).map_err(e2s)?;
        check(t.value(y).shape() == oracle.shape(), "conv2d output shape")?;
        worst[4] = worst[4].max(max_abs_diff(t.value(y).data(), oracle.data()));

        let (x32, k32) = (random_f32(&mut g, &[2, ci, side, side], 1.0), random_f32(&mut g, &[co, ci, kk, kk], 1.0));
        let oracle = common::conv2d(&x32.cast(), &k32.cast(), stride, pad);
        let mut t = Tape::new();
        let (xv, kv) = (t.constant(x32), t.constant(k32));
        let y = t.conv2d(xv, kv, stride, pad).map_err(e2s)?;
        worst[5] = worst[5].max(max_abs_diff(&t.value(y).to_f64_vec(), oracle.data()));
    }
    let names = ["channel_weights", "apply_channel_weights", "bilinear_pool", "matmul", "conv2d f64", "conv2d f32"];
    for (i, (&err, name)) in worst.iter().zip(names).enumerate() {
        let tol = if i == 5 { 1e-5 } else { 1e-6 };
        check(err < tol, format!("{name}: max deviation {err:.3e} over {INSTANCES} instances"))?;
    }
    Ok(format!(
        "{INSTANCES} instances per op, max deviation {:.1e} (f64), {:.1e} (conv2d f32)",
        worst[..5].iter().copied().fold(0.0, f64::max),
        worst[5]
    ))
}

// ---------------------------------------------------------------- 3

fn criterion_3() -> Outcome {
    let mut g = rng(3);
    let mut worst = 0.0f64;
    let mut matrices = 0;
    for c in 1..=8 {
        for _ in 0..20 {
            let (f1, f2) = (random(&mut g, &[c, 3, 3], 3.0), random(&mut g, &[c, 3, 3], 3.0));
            let w = FeaturePair::new(f1.clone(), f2.clone(), 0).map_err(e2s)?.channel_weights().map_err(e2s)?;
            for s in w.row_sums() {
                worst = worst.max((s - 1.0).abs());
            }
            let w32 = FeaturePair::new(f1.cast::<f32>(), f2.cast(), 0)
                .map_err(e2s)?
                .channel_weights()
                .map_err(e2s)?;
            for s in w32.row_sums() {
                worst = worst.max((s - 1.0).abs());
            }
            if c == 1 {
                check(w.w.data() == [1.0] && w32.w.data() == [1.0], "c = 1 did not give W = [[1]] exactly")?;
            } else {
                check(w.w.shape() == [c, c], "W shape")?;
            }
            matrices += 2;
        }
    }
    // real backbone features, as produced during training
    let cfg = TrainConfig::default();
    let state = TrainState::<f32>::new(cfg.clone(), (0..8).map(|k| k.to_string()).collect()).map_err(e2s)?;
    let imgs = random_f32(&mut g, &[2, 3, 64, 64], 0.5).map(|v| v + 0.5);
    let f = pcanet::backbone::features(&cfg.backbone(), &state.params, &imgs).map_err(e2s)?;
    let w = FeaturePair::new(f.select(0).map_err(e2s)?, f.select(1).map_err(e2s)?, 0)
        .map_err(e2s)?
        .channel_weights()
        .map_err(e2s)?;
    for s in w.row_sums() {
        worst = worst.max((s - 1.0).abs());
    }
    matrices += 1;
    check(worst < 1e-6, format!("row sum off by {worst:.3e}"))?;
    Ok(format!("{matrices} matrices, max |row sum - 1| = {worst:.1e}; c = 1 gives [[1]]"))
}

// ---------------------------------------------------------------- 4

fn criterion_4() -> Outcome {
    let mut g = rng(4);
    let thetas = [0.1, 0.3, 0.5, 0.7, 0.9];
    let mut masks = 0;
    for _ in 0..50 {
        let fw = random(&mut g, &[4, 4, 4], 1.0);
        for reduce in [AttentionReduce::ArgmaxGap, AttentionReduce::PixelMax] {
            let a = attention_map(&fw, 16, reduce).map_err(e2s)?;
            let image = random(&mut g, &[3, 16, 16], 0.5).map(|v| v + 0.5);
            let mut previous: Option<Vec<f64>> = None;
            for &theta in &thetas {
                let m = drop_mask(&a, theta).map_err(e2s)?;
                check(m.m.data().iter().all(|&v| v == 0.0 || v == 1.0), "mask is not binary")?;
                let out = erase(&image, &m).map_err(e2s)?;
                for ch in 0..3 {
                    for p in 0..256 {
                        let (o, i) = (out.data()[ch * 256 + p], image.data()[ch * 256 + p]);
                        let expect = if m.m.data()[p] == 0.0 { 0.0 } else { i };
                        check(o == expect, "erased image differs from mask * image")?;
                    }
                }
                // raising theta can only shrink the erased set
                if let Some(prev) = &previous {
                    let grew = m.m.data().iter().zip(prev).any(|(&now, &before)| now == 0.0 && before == 1.0);
                    check(!grew, format!("erased set grew when theta rose to {theta}"))?;
                }
                previous = Some(m.m.data().to_vec());
                masks += 1;
            }
        }
    }
    let flat = attention_map(&Tensor::full(&[3, 4, 4], 0.7), 16, AttentionReduce::ArgmaxGap).map_err(e2s)?;
    for &theta in &thetas {
        check(drop_mask(&flat, theta).map_err(e2s)?.erased_count() == 0, "constant map erased pixels")?;
    }
    let zero_map = AttentionMap { a: Tensor::<f64>::zeros(&[4, 4]), source_channel: 0 };
    check(drop_mask(&zero_map, 0.5).map_err(e2s)?.erased_count() == 0, "all-zero map erased pixels")?;

    // tape instrumentation: the erased stream must not reach the attention
    // pathway, but must reach the shared parameters
    let cfg = tiny_model_config();
    let state = TrainState::<f64>::new(cfg.clone(), vec!["a".into(), "b".into()]).map_err(e2s)?;
    let images = random(&mut g, &[4, 3, 8, 8], 0.5).map(|v| v + 0.5);
    let mut tape = Tape::new();
    let vars = state.params.register(&mut tape);
    let graph = build_step_graph(&mut tape, &vars, &cfg, &images, &[0, 1, 0, 1], &state.centers).map_err(e2s)?;
    let logits_e = graph.streams.get(Stream::Erased).ok_or("no erased stream")?.logits;
    let logits_w = graph.streams.get(Stream::Weighted).ok_or("no weighted stream")?.logits;
    check(graph.weights.len() == 2, "expected one weight matrix per pair")?;
    for &root in std::iter::once(&graph.features).chain(&graph.weights) {
        check(!tape.depends_on(logits_e, root), "erased logits depend on the attention pathway")?;
        check(tape.depends_on(logits_w, root), "weighted logits lost their attention inputs")?;
    }
    for (name, &v) in &vars {
        check(tape.depends_on(logits_e, v), format!("erased logits do not reach {name}"))?;
    }
    Ok(format!(
        "{masks} masks over 5 thetas binary, exact and monotone; constant map erases nothing; erased logits reach all {} params and none of {} attention nodes",
        vars.len(),
        1 + graph.weights.len()
    ))
}

// ---------------------------------------------------------------- 5 + 10

const FULL_MIN: f64 = 0.90;
const BASE_MIN: f64 = 0.60;

fn desk_ablation() -> Result<(Outcome, Outcome), String> {
    let cfg = TrainConfig::preset("desk").map_err(e2s)?;
    let start = Instant::now();
    let data_secs = std::cell::Cell::new(0.0);
    let report = run_ablation(
        &cfg,
        &[0],
        &[],
        |c| {
            let t = Instant::now();
            let d = TrainData::synthetic(c);
            data_secs.set(t.elapsed().as_secs_f64());
            d
        },
        |row| eprintln!("    ablation: {:<14} accuracy {:.3} in {:.0} s", row.name, row.accuracy, row.seconds),
    )
    .map_err(e2s)?;
    let total = start.elapsed().as_secs_f64();
    let data_secs = data_secs.get();
    let row = |name: &str| report.rows.iter().find(|r| r.name == name).cloned();

    let c5 = (|| {
        let (full, base) = (row("ca+ae+center").ok_or("no full row")?, row("base").ok_or("no base row")?);
        let full_secs = full.seconds + data_secs;
        let detail = format!(
            "full {:.3} in {} epochs ({:.0} s), base {:.3}, gap {:+.3}",
            full.accuracy,
            full.epochs,
            full_secs,
            base.accuracy,
            full.accuracy - base.accuracy
        );
        check(full.epochs <= 30, format!("budget exceeded: {detail}"))?;
        check(full.accuracy >= FULL_MIN, format!("full model below {FULL_MIN}: {detail}"))?;
        check(base.accuracy >= BASE_MIN, format!("base model below {BASE_MIN}: {detail}"))?;
        check(full_secs < 600.0, format!("full run over 10 minutes: {detail}"))?;
        Ok(detail)
    })();

    let c10 = (|| {
        let names: Vec<&str> = report.rows.iter().map(|r| r.name.as_str()).collect();
        let expected: Vec<&str> = CONFIGURATIONS.iter().map(|c| c.0).collect();
        check(names == expected, format!("configurations {names:?}"))?;
        for r in &report.rows {
            check(
                r.accuracy.is_finite() && (0.0..=1.0).contains(&r.accuracy),
                format!("{}: accuracy {}", r.name, r.accuracy),
            )?;
        }
        check(total < 3600.0, format!("took {total:.0} s"))?;
        let summary: Vec<String> = report.rows.iter().map(|r| format!("{} {:.3}", r.name, r.accuracy)).collect();
        Ok(format!("{} rows in {:.1} min: {}", report.rows.len(), total / 60.0, summary.join(", ")))
    })();
    Ok((c5, c10))
}

// ---------------------------------------------------------------- 6

fn criterion_6() -> Outcome {
    let cfg = TrainConfig::default();
    let got = [lr_at(0, &cfg), lr_at(2, &cfg), lr_at(4, &cfg)];
    check(got == [0.01, 0.009, 0.0081], format!("lr at epochs 0/2/4 = {got:?}"))?;
    Ok(format!("{} -> {} -> {}", got[0], got[1], got[2]))
}

// ---------------------------------------------------------------- 7

fn small_run_config() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_size: 4,
        input_size: 32,
        stage_channels: vec![8, 16, 32],
        num_classes: 3,
        images_per_class: 6,
        test_images_per_class: 2,
        image_size: 32,
        precision: Precision::F64,
        ..TrainConfig::default()
    }
}

fn run_logged(cfg: &TrainConfig, data: &TrainData, metrics: &Path) -> Result<Vec<EpochRecord>, String> {
    let mut state = TrainState::<f64>::new(cfg.clone(), data.class_names.clone()).map_err(e2s)?;
    let mut log = MetricsLog::create(metrics).map_err(e2s)?;
    fit(&mut state, data, Some(&mut log), |_| {}).map_err(e2s)
}

fn criterion_7() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = small_run_config();
    let data = TrainData::synthetic(&cfg).map_err(e2s)?;
    let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    let full = run_logged(&cfg, &data, &a)?;
    run_logged(&cfg, &data, &b)?;
    let (ta, tb) = (std::fs::read(&a).map_err(|e| e.to_string())?, std::fs::read(&b).map_err(|e| e.to_string())?);
    check(!ta.is_empty() && ta == tb, "metrics.jsonl differs between identical-seed runs")?;

    // stop after one epoch, checkpoint, resume in a fresh state
    let ckpt = dir.path().join("checkpoint.pcan");
    let mut state = TrainState::<f64>::new(TrainConfig { epochs: 1, ..cfg.clone() }, data.class_names.clone())
        .map_err(e2s)?;
    fit(&mut state, &data, None, |_| {}).map_err(e2s)?;
    save_checkpoint(&state, &ckpt).map_err(e2s)?;
    let mut resumed: TrainState<f64> = load_checkpoint(&ckpt).map_err(e2s)?;
    resumed.config.epochs = cfg.epochs;
    let next = fit(&mut resumed, &data, None, |_| {}).map_err(e2s)?;
    check(next.len() == 1 && next[0] == full[1], format!("resumed epoch {:?} != {:?}", next.first(), full[1]))?;
    check(resumed.params == {
        let mut s = TrainState::<f64>::new(cfg.clone(), data.class_names.clone()).map_err(e2s)?;
        fit(&mut s, &data, None, |_| {}).map_err(e2s)?;
        s.params
    }, "resumed parameters differ from the uninterrupted run")?;

    let bytes = std::fs::read(&ckpt).map_err(|e| e.to_string())?;
    let decoded: TrainState<f64> = decode_checkpoint(&bytes).map_err(e2s)?;
    check(encode_checkpoint(&decoded).map_err(e2s)? == bytes, "checkpoint re-encode differs")?;
    let again = dir.path().join("again.pcan");
    save_checkpoint(&decoded, &again).map_err(e2s)?;
    check(std::fs::read(&again).map_err(|e| e.to_string())? == bytes, "saved checkpoint differs")?;
    let f32_state = TrainState::<f32>::new(TrainConfig { precision: Precision::F32, ..cfg }, data.class_names.clone())
        .map_err(e2s)?;
    let b32 = encode_checkpoint(&f32_state).map_err(e2s)?;
    check(encode_checkpoint(&decode_checkpoint::<f32>(&b32).map_err(e2s)?).map_err(e2s)? == b32, "f32 round trip")?;
    Ok(format!(
        "identical metrics.jsonl ({} bytes); resumed epoch 1 loss {:.6} matches; {} byte checkpoint round-trips",
        ta.len(),
        next[0].loss_total,
        bytes.len()
    ))
}

// ---------------------------------------------------------------- 8

fn criterion_8() -> Outcome {
    let cfg = TrainConfig::default();
    let (train, _) = generate_synthetic(&cfg.synthetic(), cfg.seed).map_err(e2s)?;
    let labels = train.labels();
    let mut checked = 0;
    for (batch_size, seed) in [(8, 0), (8, 7), (32, 0), (6, 3)] {
        let sampler = PairSampler::new(&labels, batch_size, seed).map_err(e2s)?;
        for epoch in 0..3 {
            let mut firsts = Vec::new();
            for b in sampler.epoch(epoch) {
                let h = b.indices.len() / 2;
                check(b.indices.len() % 2 == 0 && b.indices.len() <= batch_size, "batch size")?;
                for i in 0..h {
                    check(b.labels[i] == b.labels[i + h], format!("labels[{i}] != labels[{i}+b/2]"))?;
                    check(labels[b.indices[i]] == b.labels[i] && labels[b.indices[i + h]] == b.labels[i], "label lookup")?;
                }
                firsts.extend_from_slice(&b.indices[..h]);
                checked += 1;
            }
            firsts.sort_unstable();
            check(firsts == (0..labels.len()).collect::<Vec<_>>(), "first halves do not cover the dataset once")?;
        }
    }
    Ok(format!("{checked} batches over {} images: all paired, first halves enumerate the set", labels.len()))
}

// ---------------------------------------------------------------- 9

/// Two channels from a 1x1 conv, 4x4 input pooled to 2x2, two classes, no
/// signed sqrt so the hand computation stays short.
fn hand_model() -> Result<TrainState<f64>, String> {
    let cfg = TrainConfig {
        input_size: 4,
        stage_channels: vec![2],
        kernel_size: 1,
        num_classes: 2,
        signed_sqrt_l2: false,
        precision: Precision::F64,
        ..TrainConfig::default()
    };
    let mut state = TrainState::<f64>::new(cfg, vec!["left".into(), "right".into()]).map_err(e2s)?;
    let mut p = ParamTable::new();
    let t = |shape: &[usize], v: &[f64]| Tensor::from_f64(shape, v).unwrap();
    p.insert("backbone.stage0.weight", t(&[2, 3, 1, 1], &[1.0, 0.5, -0.5, -0.25, 1.0, 0.75])).unwrap();
    p.insert("backbone.stage0.bias", t(&[2], &[0.1, -0.2])).unwrap();
    p.insert("head.weight", t(&[2, 4], &[0.3, -0.2, 0.4, 0.1, -0.5, 0.6, 0.2, -0.1])).unwrap();
    p.insert("head.bias", t(&[2], &[0.0, 0.05])).unwrap();
    check(p.names().eq(state.params.names()), "hand model parameter names")?;
    state.params = p;
    Ok(state)
}

fn hand_image() -> LabeledImage {
    let px: Vec<f32> = (0..48).map(|i| ((i * 37 % 23) as f32) / 22.0).collect();
    LabeledImage {
        pixels: Tensor::from_vec(&[3, 4, 4], px).unwrap(),
        label: 0,
        id: "hand".into(),
    }
}

/// The Grad-CAM of [`hand_model`] written out scalar by scalar.
fn pencil_cam(image: &LabeledImage, target: usize) -> Vec<f64> {
    let x: Vec<f64> = image.pixels.data().iter().map(|&v| v as f64).collect();
    let w = [[1.0, 0.5, -0.5], [-0.25, 1.0, 0.75]];
    let bias = [0.1, -0.2];
    let head = [[0.3, -0.2, 0.4, 0.1], [-0.5, 0.6, 0.2, -0.1]];
    // conv + relu, then 2x2 max pool
    let mut f = [[0.0f64; 4]; 2];
    for k in 0..2 {
        for (cell, (oy, ox)) in [(0, 0), (0, 2), (2, 0), (2, 2)].into_iter().enumerate() {
            let mut best = f64::NEG_INFINITY;
            for dy in 0..2 {
                for dx in 0..2 {
                    let p = (oy + dy) * 4 + ox + dx;
                    let pre = w[k][0] * x[p] + w[k][1] * x[16 + p] + w[k][2] * x[32 + p] + bias[k];
                    best = best.max(pre.max(0.0));
                }
            }
            f[k][cell] = best;
        }
    }
    // score = sum_ij A_ij (sum_p F_i F_j) / 4, so dscore/dF_k = sum_j (A_kj + A_jk) F_j / 4
    let a = |i: usize, j: usize| head[target][i * 2 + j];
    let mut alpha = [0.0; 2];
    for k in 0..2 {
        let mut mean = 0.0;
        for p in 0..4 {
            mean += (0..2).map(|j| (a(k, j) + a(j, k)) * f[j][p] / 4.0).sum::<f64>();
        }
        alpha[k] = mean / 4.0;
    }
    let raw: Vec<f64> = (0..4).map(|p| (alpha[0] * f[0][p] + alpha[1] * f[1][p]).max(0.0)).collect();
    let up = common::upsample(&raw, 2, 2, 4, 4);
    let hi = up.iter().copied().fold(0.0, f64::max);
    up.iter().map(|v| if hi > 0.0 { v / hi } else { 0.0 }).collect()
}

fn criterion_9() -> Outcome {
    let state = hand_model()?;
    let image = hand_image();
    let mut worst = 0.0f64;
    let mut nonzero = 0;
    for target in 0..2 {
        let cam = grad_cam(&state, &image, target).map_err(e2s)?;
        let expect = pencil_cam(&image, target);
        worst = worst.max(max_abs_diff(cam.cam.data(), &expect));
        nonzero += expect.iter().filter(|&&v| v > 0.0).count();
    }
    check(worst < 1e-6, format!("cam differs from the hand computation by {worst:.3e}"))?;
    check(nonzero > 0, "hand model produced only all-zero maps")?;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut files = Vec::new();
    for run in 0..2 {
        let cam = grad_cam(&state, &image, 1).map_err(e2s)?;
        for ext in ["ppm", "png"] {
            let path = dir.path().join(format!("hand_{run}.{ext}"));
            render_heatmap(&cam, &image, &path).map_err(e2s)?;
            files.push(std::fs::read(&path).map_err(|e| e.to_string())?);
        }
    }
    check(files[0] == files[2] && files[1] == files[3], "heatmap files differ across runs")?;
    Ok(format!("max deviation {worst:.1e} from the hand computation; PPM and PNG byte-identical across runs"))
}

// ----------------------------------------------------------------

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(p) => Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())),
    }
}

fn main() {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let run = |n: usize| wanted.is_empty() || wanted.contains(&n);
    let titles = [
        "gradient integrity",
        "oracle equivalence",
        "channel weight rows",
        "drop mask and erase contract",
        "end-to-end desk run",
        "schedule fidelity",
        "determinism and persistence",
        "pairing contract",
        "grad-cam",
        "ablation harness",
    ];
    let quick: [(usize, fn() -> Outcome); 8] = [
        (1, criterion_1),
        (2, criterion_2),
        (3, criterion_3),
        (4, criterion_4),
        (6, criterion_6),
        (7, criterion_7),
        (8, criterion_8),
        (9, criterion_9),
    ];
    let mut results: Vec<(usize, Outcome)> = Vec::new();
    let mut report = |n: usize, r: Outcome| {
        match &r {
            Ok(d) => println!("PASS  {n:>2} {}: {d}", titles[n - 1]),
            Err(e) => println!("FAIL  {n:>2} {}: {e}", titles[n - 1]),
        }
        results.push((n, r));
    };
    for (n, f) in quick {
        if run(n) {
            report(n, guarded(f));
        }
    }
    if run(5) || run(10) {
        eprintln!("    training the six ablation configurations at desk scale...");
        let (c5, c10) = match catch_unwind(AssertUnwindSafe(desk_ablation)) {
            Ok(Ok(pair)) => pair,
            Ok(Err(e)) => (Err(e.clone()), Err(e)),
            Err(_) => (Err("panicked".into()), Err("panicked".into())),
        };
        if run(5) {
            report(5, c5);
        }
        if run(10) {
            report(10, c10);
        }
    }
    let failed = results.iter().filter(|r| r.1.is_err()).count();
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
