mod common;

use std::sync::Arc;

use aquakv::calibration::{
    calibrate, calibrate_with, holdout_report, CalibConfig, CollectReconstructions,
};
use aquakv::kvcache::{
    encode_residual, encode_sequence, replay_reconstruct, replay_trace, segment_ranges,
    CacheConfig, CompressedKVCache, ReplayConfig,
};
use aquakv::predictor::Geometry;
use aquakv::pruning::{prune_then_compress, PruneConfig};
use aquakv::quantizer::{effective_bits, BackboneConfig, OverheadSpec, UniformConfig, VqConfig};
use aquakv::rng::Stream;
use aquakv::trace_io::{apply_rope, synth_trace, KVTrace, RopeMode, SynthConfig, TraceMeta};
use aquakv::{Error, Matrix};
use common::{normal_matrix, same_bits, small_trace};
use proptest::prelude::*;

fn uniform(bits: u8) -> BackboneConfig {
    BackboneConfig::Uniform(UniformConfig::new(bits))
}

fn vq(bits: u8) -> BackboneConfig {
    BackboneConfig::Vq(VqConfig::preset(bits).unwrap())
}

fn calib(cache: CacheConfig) -> CalibConfig {
    CalibConfig {
        cache,
        ..CalibConfig::default()
    }
}

fn replay(cache: CacheConfig) -> ReplayConfig {
    ReplayConfig {
        cache,
        ..ReplayConfig::default()
    }
}

fn small_geometry() -> Geometry {
    Geometry {
        n_layers: 2,
        n_kv_heads: 2,
        head_dim: 4,
    }
}

fn layer_data(tokens: usize, seed: u64) -> (Vec<Matrix>, Vec<Matrix>) {
    let mut s = Stream::new(seed);
    let k = (0..2)
        .map(|_| normal_matrix(tokens, 8, 1.0, &mut s))
        .collect();
    let v = (0..2)
        .map(|_| normal_matrix(tokens, 8, 1.0, &mut s))
        .collect();
    (k, v)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn storage_partition_holds_after_every_append(
        sinks in 0usize..6,
        buffer in 1usize..20,
        chunks in prop::collection::vec(1usize..25, 1..12),
        final_flush in any::<bool>(),
        identity in any::<bool>(),
    ) {
        let total: usize = chunks.iter().sum();
        let (k, v) = layer_data(total, 3);
        let backbone = if identity { BackboneConfig::Identity } else { uniform(2) };
        let cfg = CacheConfig { sink_tokens: sinks, buffer_tokens: buffer, final_flush, first_layer_bits: None, ..CacheConfig::with_backbone(backbone) };
        let mut cache = CompressedKVCache::new(small_geometry(), cfg, None).unwrap();
        let mut seen = 0;
        for c in &chunks {
            let kc: Vec<Matrix> = k.iter().map(|m| m.slice_rows(seen, seen + c)).collect();
            let vc: Vec<Matrix> = v.iter().map(|m| m.slice_rows(seen, seen + c)).collect();
            cache.append(&kc, &vc).unwrap();
            seen += c;
            cache.check_partition().unwrap();
            prop_assert_eq!(cache.n_tokens(), seen);
            prop_assert_eq!(cache.flushes(), segment_ranges(seen, sinks, buffer, false).len());
            prop_assert_eq!(cache.n_sinks() + cache.segment_tokens() + cache.buffered(), seen);
        }
        cache.finish().unwrap();
        cache.check_partition().unwrap();
        prop_assert_eq!(cache.segment_tokens(), segment_ranges(total, sinks, buffer, final_flush).iter().map(|r| r.len()).sum::<usize>());

        let recon = cache.reconstruct_all().unwrap();
        let exact_tail = total - cache.buffered();
        for (l, (kh, vh)) in recon.iter().enumerate() {
            prop_assert_eq!(kh.shape(), k[l].shape());
            if identity {
                prop_assert!(same_bits(kh, &k[l]) && same_bits(vh, &v[l]));
            }
            let s = sinks.min(total);
            prop_assert!(same_bits(&kh.slice_rows(0, s), &k[l].slice_rows(0, s)));
            prop_assert!(same_bits(&vh.slice_rows(exact_tail, total), &v[l].slice_rows(exact_tail, total)));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn calibration_and_replay_agree_bit_for_bit(
        sinks in 0usize..6,
        buffer in prop::sample::select(vec![16usize, 50, 128]),
        use_vq in any::<bool>(),
        first in prop::sample::select(vec![None, Some(3u8), Some(4)]),
        final_flush in any::<bool>(),
        seed in 0u64..1000,
    ) {
        let trace = small_trace(seed);
        let cache = CacheConfig {
            sink_tokens: sinks,
            buffer_tokens: buffer,
            first_layer_bits: first,
            final_flush,
            ..CacheConfig::with_backbone(if use_vq { vq(2) } else { uniform(2) })
        };
        let mut collect = CollectReconstructions::default();
        let cal = calibrate_with(&mut &trace, &calib(cache.clone()), &mut collect).unwrap();
        let replayed = replay_reconstruct(&trace, Some(Arc::new(cal.predictors)), &replay(cache)).unwrap();
        prop_assert_eq!(collect.0.len(), replayed.len());
        for (a, b) in collect.0.iter().zip(&replayed) {
            prop_assert!(same_bits(&a.0, &b.0) && same_bits(&a.1, &b.1));
        }
    }
}

#[test]
fn serialized_cache_is_deterministic_and_round_trips() {
    let trace = small_trace(1);
    let cache = CacheConfig {
        buffer_tokens: 64,
        ..CacheConfig::default()
    };
    let ps = Arc::new(
        calibrate(&mut &trace, &calib(cache.clone()))
            .unwrap()
            .predictors,
    );
    let cfg = replay(cache);
    let a = encode_sequence(&trace, 2, Some(ps.clone()), &cfg).unwrap();
    let b = encode_sequence(&trace, 2, Some(ps.clone()), &cfg).unwrap();
    let bytes = a.to_bytes().unwrap();
    assert_eq!(bytes, b.to_bytes().unwrap());
    let back = CompressedKVCache::from_bytes(&bytes, Some(ps)).unwrap();
    assert_eq!(back.to_bytes().unwrap(), bytes);
    for (x, y) in back
        .reconstruct_all()
        .unwrap()
        .iter()
        .zip(a.reconstruct_all().unwrap())
    {
        assert!(same_bits(&x.0, &y.0) && same_bits(&x.1, &y.1));
    }
    let n = bytes.len();
    let mut bad = bytes.clone();
    bad[n / 2] ^= 4;
    assert!(matches!(
        CompressedKVCache::from_bytes(&bad, None),
        Err(Error::Checksum { .. })
    ));
}

#[test]
fn more_backbone_bits_store_more_and_err_less() {
    let trace = small_trace(2);
    for family in [uniform as fn(u8) -> BackboneConfig, vq] {
        let mut last: Option<(u64, f64)> = None;
        for bits in [2u8, 3, 4] {
            let cfg = replay(CacheConfig {
                buffer_tokens: 32,
                ..CacheConfig::with_backbone(family(bits))
            });
            let stored = encode_sequence(&trace, 0, None, &cfg)
                .unwrap()
                .stored_bits(false);
            let mse = replay_trace(&trace, None, &cfg).unwrap().pooled.mse;
            if let Some((s, e)) = last {
                assert!(stored > s, "{bits}: {stored} <= {s}");
                assert!(mse <= e, "{bits}: {mse} > {e}");
            }
            last = Some((stored, mse));
        }
    }
}

/// Keys and values where every layer is an exact linear function of the
/// previous one, with no noise.
fn exact_linear_trace(seed: u64) -> KVTrace {
    let (layers, kv, lens) = (4, 8, vec![500, 500, 500, 500]);
    let n: usize = lens.iter().sum();
    let mut s = Stream::new(seed);
    let mut keys = vec![normal_matrix(n, kv, 1.0, &mut s)];
    let mut values = vec![normal_matrix(n, kv, 1.0, &mut s)];
    for l in 1..layers {
        let mut a = normal_matrix(kv, kv, 1.0, &mut s);
        a.scale(1.0 / (kv as f32).sqrt());
        let mut b = normal_matrix(2 * kv, kv, 1.0, &mut s);
        b.scale(1.0 / (2.0 * kv as f32).sqrt());
        let k = aquakv::LinearMap::new(a, vec![0.5; kv])
            .unwrap()
            .apply(&keys[l - 1])
            .unwrap();
        let v = aquakv::LinearMap::new(b, vec![-0.25; kv])
            .unwrap()
            .apply_parts(&[&values[l - 1], &k])
            .unwrap();
        keys.push(k);
        values.push(v);
    }
    KVTrace::new(TraceMeta::new(layers, 2, 4, lens), keys, values, None).unwrap()
}

#[test]
fn exact_linear_trace_is_predicted_almost_perfectly() {
    let trace = exact_linear_trace(4);
    let cache = CacheConfig {
        first_layer_bits: None,
        buffer_tokens: 64,
        ..CacheConfig::with_backbone(vq(2))
    };
    let cfg = CalibConfig {
        lambda: 0.0,
        ..calib(cache.clone())
    };
    let cal = calibrate(&mut &trace, &cfg).unwrap();
    for l in &cal.report.layers[1..] {
        assert!(l.key_predictor_evr.unwrap() >= 0.999, "{l:?}");
        assert!(l.value_predictor_evr.unwrap() >= 0.999, "{l:?}");
    }
    let with = replay_trace(
        &trace,
        Some(Arc::new(cal.predictors)),
        &replay(cache.clone()),
    )
    .unwrap();
    let without = replay_trace(&trace, None, &replay(cache)).unwrap();
    assert!(
        with.pooled.mse <= 1e-6 * without.pooled.mse,
        "{} vs {}",
        with.pooled.mse,
        without.pooled.mse
    );
}

#[test]
fn perfect_prediction_quantizes_a_zero_residual() {
    let x = normal_matrix(16, 64, 2.0, &mut Stream::new(9));
    for cfg in [uniform(2), vq(2), vq(4)] {
        let (block, hat) = encode_residual(&x, Some(&x), &cfg).unwrap();
        assert!(block
            .dequantize()
            .unwrap()
            .as_slice()
            .iter()
            .all(|v| *v == 0.0));
        assert!(same_bits(&hat, &x));
    }
}

fn shuffle_layers(t: &KVTrace, seed: u64) -> KVTrace {
    let l = t.meta.n_layers;
    let mut order: Vec<usize> = (0..l).collect();
    let mut s = Stream::new(seed);
    while order.iter().enumerate().all(|(i, &o)| i == o) {
        for i in (1..l).rev() {
            order.swap(i, (s.next_u64() % (i as u64 + 1)) as usize);
        }
    }
    let keys = order.iter().map(|&i| t.keys[i].clone()).collect();
    let values = order.iter().map(|&i| t.values[i].clone()).collect();
    KVTrace::new(t.meta.clone(), keys, values, None).unwrap()
}

fn synth_for_seed(seed: u64) -> KVTrace {
    synth_trace(&SynthConfig {
        n_layers: 8,
        n_kv_heads: 2,
        head_dim: 16,
        hidden_dim: 256,
        tokens: 2048,
        sequences: 4,
        seed,
        attention_stats: false,
        ..SynthConfig::default()
    })
    .unwrap()
}

#[test]
fn shuffling_layers_degrades_holdout_evr() {
    let cfg = calib(CacheConfig {
        buffer_tokens: 64,
        ..CacheConfig::with_backbone(uniform(2))
    });
    for seed in 0..5u64 {
        let t = synth_for_seed(seed);
        let ordered = calibrate(&mut &t, &cfg)
            .unwrap()
            .report
            .summary
            .predictor_evr
            .unwrap();
        let shuffled = calibrate(&mut &shuffle_layers(&t, seed), &cfg)
            .unwrap()
            .report
            .summary
            .predictor_evr
            .unwrap();
        assert!(
            ordered > shuffled,
            "seed {seed}: ordered {ordered} vs shuffled {shuffled}"
        );
    }
}

#[test]
fn train_evr_bounds_holdout_evr_on_average() {
    let cfg = calib(CacheConfig {
        buffer_tokens: 64,
        ..CacheConfig::with_backbone(uniform(2))
    });
    let (mut dk, mut dv) = (0.0, 0.0);
    for seed in 10..15u64 {
        let s = calibrate(&mut &synth_for_seed(seed), &cfg)
            .unwrap()
            .report
            .summary;
        dk += s.train_key_predictor_evr.unwrap() - s.key_predictor_evr.unwrap();
        dv += s.train_value_predictor_evr.unwrap() - s.value_predictor_evr.unwrap();
    }
    assert!(dk > 0.0 && dv > 0.0, "{dk} {dv}");
}

#[test]
fn holdout_report_rejects_other_geometry() {
    let t = small_trace(5);
    let cfg = calib(CacheConfig {
        buffer_tokens: 64,
        ..CacheConfig::with_backbone(uniform(2))
    });
    let ps = calibrate(&mut &t, &cfg).unwrap().predictors;
    let other = synth_trace(&SynthConfig {
        n_layers: 3,
        n_kv_heads: 2,
        head_dim: 16,
        hidden_dim: 128,
        tokens: 400,
        sequences: 2,
        ..SynthConfig::default()
    })
    .unwrap();
    assert!(matches!(
        holdout_report(&ps, &mut &other, &cfg),
        Err(Error::Incompatible(_))
    ));
    assert!(matches!(
        replay_trace(&other, Some(Arc::new(ps)), &replay(cfg.cache)),
        Err(Error::Incompatible(_))
    ));
}

#[test]
fn post_rope_traces_replay_in_pre_rope_mode() {
    let pre = small_trace(6);
    let mut post = pre.clone();
    let pos = pre.meta.positions();
    for k in &mut post.keys {
        *k = apply_rope(k, &pos, pre.meta.head_dim, pre.meta.rope_theta).unwrap();
    }
    post.meta.rope_mode = RopeMode::PostRope;
    let cfg = replay(CacheConfig::with_backbone(BackboneConfig::Identity));
    let a = replay_reconstruct(&pre, None, &cfg).unwrap();
    let b = replay_reconstruct(&post, None, &cfg).unwrap();
    for ((ka, _), (kb, _)) in a.iter().zip(&b) {
        let err = common::l2_diff(ka.as_slice(), kb.as_slice()) / common::l2(ka.as_slice());
        assert!(err < 1e-5, "{err}");
    }

    let ps = calibrate(
        &mut &pre,
        &calib(CacheConfig {
            buffer_tokens: 64,
            ..CacheConfig::with_backbone(uniform(2))
        }),
    )
    .unwrap()
    .predictors;
    let post_cfg = CacheConfig {
        rope_mode: RopeMode::PostRope,
        ..CacheConfig::default()
    };
    assert!(matches!(
        CompressedKVCache::new(Geometry::of_trace(&pre.meta), post_cfg, Some(Arc::new(ps))),
        Err(Error::Incompatible(_))
    ));
}

#[test]
fn full_prune_budget_equals_plain_replay() {
    let t = small_trace(7);
    let cfg = replay(CacheConfig {
        buffer_tokens: 64,
        ..CacheConfig::with_backbone(uniform(2))
    });
    let ps = Arc::new(
        calibrate(&mut &t, &calib(cfg.cache.clone()))
            .unwrap()
            .predictors,
    );
    let mut pruned = prune_then_compress(
        &t,
        Some(ps.clone()),
        &PruneConfig {
            budget: 1.0,
            shared: true,
            ..PruneConfig::default()
        },
        &cfg,
    )
    .unwrap();
    let mut plain = replay_trace(&t, Some(ps), &cfg).unwrap();
    pruned.replay.timing = None;
    plain.timing = None;
    assert_eq!(pruned.kept_tokens, t.meta.n_tokens);
    assert_eq!(pruned.replay, plain);
    assert_eq!(
        pruned.combined_bits_per_value,
        plain.measured_bits_per_value
    );
}

#[test]
fn pruned_cache_still_benefits_from_predictors() {
    let t = synth_trace(&SynthConfig {
        n_layers: 6,
        n_kv_heads: 2,
        head_dim: 16,
        hidden_dim: 256,
        tokens: 4096,
        sequences: 4,
        ..SynthConfig::default()
    })
    .unwrap();
    let cfg = replay(CacheConfig {
        buffer_tokens: 32,
        ..CacheConfig::default()
    });
    let ps = Arc::new(
        calibrate(&mut &t, &calib(cfg.cache.clone()))
            .unwrap()
            .predictors,
    );
    let prune = PruneConfig::default();
    let with = prune_then_compress(&t, Some(ps), &prune, &cfg).unwrap();
    let without = prune_then_compress(&t, None, &prune, &cfg).unwrap();
    assert_eq!(with.kept_tokens, without.kept_tokens);
    assert!(
        with.replay.pooled.mse < without.replay.pooled.mse,
        "{} vs {}",
        with.replay.pooled.mse,
        without.replay.pooled.mse
    );
    assert!(with.notes.iter().any(|n| n.contains("shared")));
}

#[test]
fn effective_bits_overheads_match_the_reported_vq_row() {
    let g = Geometry::preset("llama3.2-3b").unwrap();
    let backbone = vq(2);
    let first = CacheConfig::with_backbone(backbone)
        .first_layer_backbone()
        .unwrap();
    let o = OverheadSpec {
        layers: g.n_layers,
        tokens: 8192,
        kv_channels: g.kv_channels(),
        sink_tokens: 4,
        buffer_tokens: 0,
        first_layer: Some(first),
        predictor_params: g.predictor_params(),
    };
    let b = effective_bits(&backbone, &o).unwrap();
    let plain = effective_bits(
        &backbone,
        &OverheadSpec::plain(g.n_layers, 8192, g.kv_channels()),
    )
    .unwrap();
    assert!(
        (plain.bits_per_value - 2.02).abs() <= 0.05,
        "{}",
        plain.bits_per_value
    );
    assert!(
        (b.cache_bits_per_value - 2.09).abs() <= 0.05,
        "{}",
        b.cache_bits_per_value
    );
    let amortized = g.predictor_params() as f64 * 32.0 / b.total_values as f64;
    assert!((b.bits_per_value - b.cache_bits_per_value - amortized).abs() < 1e-12);
}
