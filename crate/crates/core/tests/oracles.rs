//! Independent reimplementations checked against the library.

use std::collections::BTreeMap;
use std::path::Path;

use ed25519_dalek::{Signature, VerifyingKey};
use sha2::{Digest as _, Sha256};

use telos_core::agents::{forecast_capacity, local_train, HoltParams, LocalModel};
use telos_core::federation::{quantize, CongestionSchedule, CongestionWindow};
use telos_core::rng::{derive_seed, SeedStream};
use telos_core::scenario::{run_scenario, ScenarioConfig};
use telos_core::simnet::LinkSpec;
use telos_core::telemetry::{generate_kpi_series, GeneratorSpec};

fn splitmix(seed: u64, i: u64) -> u64 {
    let mut z = seed.wrapping_add((i + 1).wrapping_mul(0x9E3779B97F4A7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

fn unit(x: u64) -> f64 {
    (x >> 11) as f64 / 9007199254740992.0
}

#[test]
fn stream_matches_splitmix64() {
    for seed in [0u64, 1, 42, u64::MAX, 0xDEAD_BEEF] {
        let mut s = SeedStream::new(seed);
        for i in 0..64 {
            assert_eq!(s.next_u64(), splitmix(seed, i));
        }
    }
    // First output of the canonical SplitMix64 sequence seeded with 0.
    assert_eq!(SeedStream::new(0).next_u64(), 0xE220A8397B1DCDAF);
}

#[test]
fn derived_quantities_match() {
    let mut s = SeedStream::new(99);
    let mut i = 0;
    for _ in 0..100 {
        assert_eq!(s.uniform().to_bits(), unit(splitmix(99, i)).to_bits());
        i += 1;
        let (a, b) = (splitmix(99, i), splitmix(99, i + 1));
        i += 2;
        let g = (-2.0 * (1.0 - unit(a)).ln()).sqrt() * (2.0 * std::f64::consts::PI * unit(b)).cos();
        assert_eq!(s.gaussian().to_bits(), g.to_bits());
        let n = 1 + i * 7;
        assert_eq!(s.below(n), ((splitmix(99, i) as u128 * n as u128) >> 64) as u64);
        i += 1;
    }
}

#[test]
fn seed_derivation_is_sha256_prefix() {
    let mut h = Sha256::new();
    h.update(b"telemetry/op-a/kpi");
    h.update(7u64.to_le_bytes());
    h.update(3u64.to_le_bytes());
    let out = h.finalize();
    assert_eq!(derive_seed(7, "telemetry/op-a/kpi", 3), u64::from_le_bytes(out[..8].try_into().unwrap()));
}

#[test]
fn generator_reimplementation() {
    let spec = GeneratorSpec {
        base: 40.0,
        trend: 0.25,
        season_amplitude: 3.0,
        season_period: 12,
        noise_sigma: 1.5,
        length: 100,
        seed: 2024,
        interval_ms: 500,
        start_ms: 1000,
    };
    let series = generate_kpi_series("k", &spec).unwrap();
    let mut s = SeedStream::new(2024);
    for (t, &(ts, v)) in series.points().iter().enumerate() {
        let tf = t as f64;
        let expect = 40.0 + 0.25 * tf + 3.0 * (2.0 * std::f64::consts::PI * tf / 12.0).sin() + 1.5 * s.gaussian();
        assert_eq!(ts, 1000 + 500 * t as i64);
        assert_eq!(v.to_bits(), expect.to_bits());
    }
}

#[test]
fn transfer_time_hand_values() {
    assert_eq!(LinkSpec::new(10.0, 100.0).transfer_ms(0, 0), 10);
    assert_eq!(LinkSpec::new(0.0, 8.0).transfer_ms(1_000_000, 0), 1000);
    let mut congested = LinkSpec::new(10.0, 8.0);
    congested.congestion =
        CongestionSchedule::new(vec![CongestionWindow { start: 100, end: 200, multiplier: 3.0 }]).unwrap();
    // (10 + 1000·8/8000) · 3 = 33
    assert_eq!(congested.transfer_ms(1000, 150), 33);
    assert_eq!(congested.transfer_ms(1000, 250), 11);
}

#[test]
fn holt_hand_stepped() {
    // level_0 = 10, trend_0 = 2; x = [10, 12, 15], alpha 0.5, beta 0.3.
    // t=1: level 12, trend 2; t=2: level 14.5, trend 0.3·2.5 + 0.7·2 = 2.15.
    let f = forecast_capacity(&[10.0, 12.0, 15.0], 2, HoltParams { alpha: 0.5, beta: 0.3 }).unwrap();
    assert!((f[0] - 16.65).abs() < 1e-12, "{f:?}");
    assert!((f[1] - 18.8).abs() < 1e-12, "{f:?}");
}

#[test]
fn local_train_matches_explicit_gd() {
    let data = [(-1.0, -2.5), (0.0, 0.4), (0.5, 1.6), (1.0, 3.2)];
    let (m, _) = local_train(&LocalModel { weights: [0.5, -0.5], base_version: 0 }, &data, 7, 0.1).unwrap();
    let (mut w, mut b) = (0.5f64, -0.5f64);
    for _ in 0..7 {
        let n = data.len() as f64;
        let gw: f64 = data.iter().map(|(x, y)| 2.0 * (w * x + b - y) * x / n).sum();
        let gb: f64 = data.iter().map(|(x, y)| 2.0 * (w * x + b - y) / n).sum();
        w -= 0.1 * gw;
        b -= 0.1 * gb;
    }
    assert!((m.weights[0] - w).abs() < 1e-12 && (m.weights[1] - b).abs() < 1e-12);
}

#[test]
fn quantization_hand_values() {
    assert_eq!(quantize(&[1.0, -0.5], 2).unwrap(), vec![2 << 24, -(1 << 24)]);
    assert_eq!(quantize(&[2f64.powi(-25)], 1).unwrap(), vec![1]);
}

fn length_prefixed(h: &mut Sha256, bytes: &[u8]) {
    h.update((bytes.len() as u64).to_le_bytes());
    h.update(bytes);
}

#[test]
fn exported_ledger_verifies_independently() {
    let cfg = ScenarioConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios/reference.toml")).unwrap();
    let run = run_scenario(&cfg, None).unwrap();
    let mut prev: [u8; 32] = Sha256::digest(b"GENESIS").into();
    let mut types = BTreeMap::new();
    for (pos, line) in run.ledger.lines().enumerate() {
        let f: Vec<&str> = line.split(' ').collect();
        assert_eq!(f.len(), 8);
        assert_eq!(f[0].parse::<u64>().unwrap(), pos as u64);
        let ts: i64 = f[1].parse().unwrap();
        let payload = hex::decode(f[3]).unwrap();
        assert_eq!(hex::decode(f[4]).unwrap(), prev);
        let mut h = Sha256::new();
        h.update((pos as u64).to_le_bytes());
        h.update(ts.to_le_bytes());
        length_prefixed(&mut h, f[2].as_bytes());
        length_prefixed(&mut h, &payload);
        length_prefixed(&mut h, &prev);
        let hash: [u8; 32] = h.finalize().into();
        assert_eq!(hex::encode(hash), f[5], "entry {pos}");
        let key = VerifyingKey::from_bytes(&hex::decode(f[6]).unwrap().try_into().unwrap()).unwrap();
        let sig = Signature::from_bytes(&hex::decode(f[7]).unwrap().try_into().unwrap());
        key.verify_strict(&hash, &sig).unwrap();
        prev = hash;
        *types.entry(f[2].to_string()).or_insert(0) += 1;
    }
    assert_eq!(types["round-result"], 5);
    assert_eq!(types["update-commitment"], 15);
}

#[test]
fn trace_lines_are_time_ordered_and_balanced() {
    let cfg = ScenarioConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios/reference.toml")).unwrap();
    let run = run_scenario(&cfg, None).unwrap();
    let mut last = i64::MIN;
    let mut sent = BTreeMap::new();
    let mut delivered = BTreeMap::new();
    for line in run.trace.lines() {
        let f: Vec<&str> = line.split(' ').collect();
        let t: i64 = f[0].parse().unwrap();
        assert!(t >= last);
        last = t;
        match f[1] {
            "send" => *sent.entry(f[2].to_string()).or_insert(0) += 1,
            "deliver" => *delivered.entry(f[2].to_string()).or_insert(0) += 1,
            _ => {}
        }
    }
    assert_eq!(sent, delivered);
    assert!(!sent.is_empty());
}
