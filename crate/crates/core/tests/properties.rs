mod common;

use proptest::collection::vec;
use proptest::prelude::*;

use pcanet::coattention::{ChannelWeightMatrix, FeaturePair};
use pcanet::config::TrainConfig;
use pcanet::data::PairSampler;
use pcanet::erase::{attention_map, drop_mask, erase, AttentionReduce};
use pcanet::head::bilinear_feature;
use pcanet::train::lr_at;
use pcanet::{Tape, Tensor};

fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
    Tensor::from_vec(shape, data).unwrap()
}

/// `(c, h, w, data)` with `c*h*w` values in `[-2, 2]`.
fn feature_map(max_c: usize) -> impl Strategy<Value = (usize, usize, usize, Vec<f64>)> {
    (1..=max_c, 1..5usize, 1..5usize)
        .prop_flat_map(|(c, h, w)| (Just(c), Just(h), Just(w), vec(-2.0..2.0f64, c * h * w)))
}

fn permute_channels(f: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
    let c = perm.len();
    let l = f.numel() / c;
    let mut out = vec![0.0; f.numel()];
    for (i, &p) in perm.iter().enumerate() {
        out[i * l..(i + 1) * l].copy_from_slice(&f.data()[p * l..(p + 1) * l]);
    }
    tensor(f.shape(), out)
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(rows in 1..6usize, cols in 1..7usize, seed in any::<u64>(), scale in 0.1..50.0f64) {
        let x = common::random(&mut common::rng(seed), &[rows, cols], scale);
        let mut t = Tape::new();
        let v = t.constant(x);
        let s = t.softmax_rows(v).unwrap();
        for row in t.value(s).data().chunks(cols) {
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn coattention_commutes_with_channel_permutation(
        (c, h, w, a) in feature_map(6),
        b_seed in any::<u64>(),
        perm_seed in any::<u64>(),
    ) {
        use rand::seq::SliceRandom;
        let f1 = tensor(&[c, h, w], a);
        let f2 = common::random(&mut common::rng(b_seed), &[c, h, w], 2.0);
        let mut perm: Vec<usize> = (0..c).collect();
        perm.shuffle(&mut common::rng(perm_seed));

        let pair = FeaturePair::new(f1.clone(), f2.clone(), 0).unwrap();
        let (fw1, _, w0) = pair.coattend(Default::default()).unwrap();
        let permuted = FeaturePair::new(permute_channels(&f1, &perm), permute_channels(&f2, &perm), 0).unwrap();
        let (pfw1, _, w1) = permuted.coattend(Default::default()).unwrap();
        // W' = P W P^T
        for i in 0..c {
            for j in 0..c {
                prop_assert!((w1.w.get(&[i, j]) - w0.w.get(&[perm[i], perm[j]])).abs() < 1e-12);
            }
        }
        prop_assert!(close(pfw1.data(), permute_channels(&fw1, &perm).data(), 1e-12));
    }

    #[test]
    fn identity_weights_leave_features_unchanged((c, h, w, a) in feature_map(5)) {
        let f = tensor(&[c, h, w], a);
        let out = ChannelWeightMatrix::new(Tensor::eye(c)).unwrap().apply(&f).unwrap();
        prop_assert_eq!(out.data(), f.data());
    }

    #[test]
    fn bilinear_pool_ignores_spatial_order((c, h, w, a) in feature_map(5), perm_seed in any::<u64>(), normalize in any::<bool>()) {
        use rand::seq::SliceRandom;
        let f = tensor(&[c, h, w], a);
        let l = h * w;
        let mut perm: Vec<usize> = (0..l).collect();
        perm.shuffle(&mut common::rng(perm_seed));
        let mut shuffled = vec![0.0; f.numel()];
        for k in 0..c {
            for (p, &q) in perm.iter().enumerate() {
                shuffled[k * l + p] = f.data()[k * l + q];
            }
        }
        let v0 = bilinear_feature(&f, normalize).unwrap().v;
        let v1 = bilinear_feature(&tensor(&[c, h, w], shuffled), normalize).unwrap().v;
        prop_assert!(close(v0.data(), v1.data(), 1e-12));
        // symmetric Gram, unit norm after normalization unless all zero
        for i in 0..c {
            for j in 0..c {
                prop_assert!((v0.data()[i * c + j] - v0.data()[j * c + i]).abs() < 1e-12);
            }
        }
        if normalize {
            let n = v0.data().iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!(n == 0.0 || (n - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn erasing_is_idempotent_and_shrinks_with_theta(
        (c, h, w, a) in feature_map(4),
        size in 4..20usize,
        t1 in 0.01..0.99f64,
        t2 in 0.01..0.99f64,
        pixel_max in any::<bool>(),
    ) {
        let reduce = if pixel_max { AttentionReduce::PixelMax } else { AttentionReduce::ArgmaxGap };
        let map = attention_map(&tensor(&[c, h, w], a), size, reduce).unwrap();
        prop_assert!(map.a.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let (m_lo, m_hi) = (drop_mask(&map, lo).unwrap(), drop_mask(&map, hi).unwrap());
        prop_assert!(m_hi.erased_count() <= m_lo.erased_count());
        for (&l, &h) in m_lo.m.data().iter().zip(m_hi.m.data()) {
            prop_assert!(!(h == 0.0 && l == 1.0));
        }
        let image = common::random(&mut common::rng(size as u64), &[3, size, size], 1.0);
        let once = erase(&image, &m_lo).unwrap();
        let twice = erase(&once, &m_lo).unwrap();
        prop_assert_eq!(once.data(), twice.data());
    }

    #[test]
    fn every_batch_is_paired(
        labels in vec(0..5usize, 1..60),
        half in 1..8usize,
        seed in any::<u64>(),
        epoch in 0..20u64,
    ) {
        // relabel densely so every class in 0..k has an image
        let mut seen: Vec<usize> = labels.clone();
        seen.sort_unstable();
        seen.dedup();
        let labels: Vec<usize> = labels.iter().map(|l| seen.binary_search(l).unwrap()).collect();
        let sampler = PairSampler::new(&labels, 2 * half, seed).unwrap();
        let batches = sampler.epoch(epoch);
        prop_assert_eq!(batches.len(), sampler.batches_per_epoch());
        let mut firsts = Vec::new();
        for b in &batches {
            prop_assert!(b.is_paired());
            let h = b.half();
            firsts.extend_from_slice(&b.indices[..h]);
            for i in 0..h {
                let (x, y) = (b.indices[i], b.indices[i + h]);
                let class_size = labels.iter().filter(|&&l| l == labels[x]).count();
                prop_assert!(x != y || class_size == 1);
            }
        }
        firsts.sort_unstable();
        prop_assert_eq!(firsts, (0..labels.len()).collect::<Vec<_>>());
        prop_assert_eq!(&sampler.epoch(epoch), &batches);
    }

    #[test]
    fn lr_never_increases(base in 1e-4..1.0f64, factor in 0.1..1.0f64, every in 1..10usize, epochs in 1..200usize) {
        let cfg = TrainConfig { base_lr: base, anneal_factor: factor, anneal_every: every, ..TrainConfig::default() };
        let mut prev = lr_at(0, &cfg);
        prop_assert!((prev - base).abs() <= 1e-12 * base);
        for e in 1..epochs {
            let lr = lr_at(e, &cfg);
            prop_assert!(lr <= prev && lr > 0.0);
            prev = lr;
        }
    }

    #[test]
    fn config_json_round_trips(theta in 0.01..0.99f64, lambda in 0.0..2.0f64, seed in any::<u64>(), ca in any::<bool>()) {
        let mut cfg = TrainConfig { theta, lambda, seed, ..TrainConfig::default() };
        cfg.enable_ca = ca;
        prop_assert_eq!(TrainConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }
}
