mod common;

use aquakv::trace_io::{read_trace, write_trace, KVTrace, RopeMode, TraceReader};
use aquakv::Error;
use xxhash_rust::xxh64::xxh64;

/// 2 layers, 1 head, head_dim 4, 8 tokens in sequences of 5 and 3, written
/// byte by byte.
fn fixture(with_stats: bool) -> Vec<u8> {
    let header = format!(
        r#"{{"n_layers":2,"n_kv_heads":1,"head_dim":4,"n_tokens":8,"n_sequences":2,"sequence_lengths":[5,3],"rope_mode":"pre_rope","rope_theta":10000.0,"has_attention_stats":{with_stats},"source":"fixture"}}"#
    );
    let mut b = Vec::new();
    b.extend_from_slice(b"KVT1");
    b.extend_from_slice(&1u16.to_le_bytes());
    b.extend_from_slice(&(header.len() as u32).to_le_bytes());
    b.extend_from_slice(header.as_bytes());
    for layer in 0..2 {
        for role in 0..2 {
            for i in 0..32 {
                b.extend_from_slice(&fixture_value(layer, role, i).to_le_bytes());
            }
        }
    }
    if with_stats {
        for layer in 0..2 {
            for t in 0..8 {
                b.extend_from_slice(&((layer * 10 + t) as f32).to_le_bytes());
            }
        }
    }
    let sum = xxh64(&b, 0);
    b.extend_from_slice(&sum.to_le_bytes());
    b
}

fn fixture_value(layer: usize, role: usize, i: usize) -> f32 {
    (layer * 100 + role * 50) as f32 + i as f32 * 0.5 - 3.0
}

#[test]
fn hand_written_fixture_parses() {
    let t = KVTrace::from_bytes(&fixture(true)).unwrap();
    assert_eq!(t.meta.n_layers, 2);
    assert_eq!(t.meta.kv_channels(), 4);
    assert_eq!(t.meta.sequence_ranges(), vec![0..5, 5..8]);
    assert_eq!(t.meta.positions(), vec![0, 1, 2, 3, 4, 0, 1, 2]);
    assert_eq!(t.meta.source, "fixture");
    assert_eq!(t.keys[1].get(2, 3), fixture_value(1, 0, 11));
    assert_eq!(t.values[0].get(7, 0), fixture_value(0, 1, 28));
    assert_eq!(t.stats.as_ref().unwrap().scores[1][3], 13.0);
}

#[test]
fn fixture_round_trips_byte_for_byte() {
    for stats in [false, true] {
        let bytes = fixture(stats);
        let t = KVTrace::from_bytes(&bytes).unwrap();
        // Header JSON is re-serialized, so compare payloads and the parsed trace.
        let again = t.to_bytes().unwrap();
        assert_eq!(KVTrace::from_bytes(&again).unwrap(), t);
        let payload = 32 * 4 * 4 + if stats { 16 * 4 } else { 0 };
        assert_eq!(
            bytes[bytes.len() - 8 - payload..bytes.len() - 8],
            again[again.len() - 8 - payload..again.len() - 8]
        );
    }
}

#[test]
fn corrupt_fixtures_are_rejected() {
    let good = fixture(false);

    let mut flipped = good.clone();
    let mid = flipped.len() / 2;
    flipped[mid] ^= 1;
    assert!(matches!(
        KVTrace::from_bytes(&flipped),
        Err(Error::Checksum { .. })
    ));

    let mut magic = good.clone();
    magic[0] = b'X';
    assert!(matches!(KVTrace::from_bytes(&magic), Err(Error::Format(_))));

    let mut version = good.clone();
    version[4] = 9;
    assert!(KVTrace::from_bytes(&version).is_err());

    let short = &good[..good.len() - 20];
    assert!(matches!(
        KVTrace::from_bytes(short),
        Err(Error::Truncated { .. })
    ));

    let mut nan = good[..good.len() - 8].to_vec();
    let first_value = nan.len() - 32 * 4 * 4;
    nan[first_value..first_value + 4].copy_from_slice(&f32::NAN.to_le_bytes());
    let sum = xxh64(&nan, 0);
    nan.extend_from_slice(&sum.to_le_bytes());
    assert!(matches!(KVTrace::from_bytes(&nan), Err(Error::Format(_))));
}

#[test]
fn streaming_reader_matches_whole_read() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.kvt");
    let t = common::small_trace(3);
    write_trace(&t, &path).unwrap();
    let whole = read_trace(&path).unwrap();
    assert_eq!(whole, t);
    let mut r = TraceReader::open(&path).unwrap();
    r.verify().unwrap();
    assert_eq!(r.meta(), &t.meta);
    for layer in (0..t.meta.n_layers).rev() {
        let (k, v) = r.read_layer(layer).unwrap();
        assert_eq!(k, t.keys[layer]);
        assert_eq!(v, t.values[layer]);
    }
    assert_eq!(r.read_stats().unwrap(), t.stats);
}

#[test]
fn streaming_reader_detects_corruption_on_verify() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.kvt");
    let mut bytes = fixture(true);
    let n = bytes.len();
    bytes[n - 20] ^= 0x40;
    std::fs::write(&path, &bytes).unwrap();
    let mut r = TraceReader::open(&path).unwrap();
    assert!(matches!(r.verify(), Err(Error::Checksum { .. })));
}

#[test]
fn rope_mode_is_carried_in_the_header() {
    let mut t = KVTrace::from_bytes(&fixture(false)).unwrap();
    t.meta.rope_mode = RopeMode::PostRope;
    let back = KVTrace::from_bytes(&t.to_bytes().unwrap()).unwrap();
    assert_eq!(back.meta.rope_mode, RopeMode::PostRope);
}
