//! Serving store against an in-memory shadow.

use std::collections::BTreeSet;

use meterwatch::datagen::{generate_fleet, FleetSpec};
use meterwatch::store::{decode_snapshot, encode_snapshot, FaultPoint};
use meterwatch::{train_fleet, AnomalyRecord, DetectorConfig, Error, HourStamp, ServingStore};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn record(rng: &mut ChaCha8Rng, serial: u64) -> AnomalyRecord {
    let stamp = HourStamp::ymdh(2024, 1, 1, 0).add_hours(rng.random_range(0..24 * 40));
    AnomalyRecord {
        meter_id: format!("m{:02}", rng.random_range(0..12)),
        stamp,
        season: stamp.season(),
        actual: rng.random_range(0.0..50.0),
        predicted: rng.random_range(0.0..50.0),
        score: rng.random_range(0.0..0.05),
        epsilon_used: 0.05,
        model_version: serial,
    }
}

/// What the store should return: matching records by stamp, ties in
/// append order.
fn shadow_query(all: &[AnomalyRecord], meter: Option<&str>, from: HourStamp, to: HourStamp) -> Vec<AnomalyRecord> {
    let mut out: Vec<_> = all
        .iter()
        .filter(|r| meter.is_none_or(|m| r.meter_id == m) && r.stamp >= from && r.stamp <= to)
        .cloned()
        .collect();
    out.sort_by_key(|r| r.stamp);
    out
}

#[test]
fn ten_thousand_appends_match_shadow() {
    let dir = tempfile::tempdir().unwrap();
    let store = ServingStore::open(dir.path()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut shadow = Vec::new();
    let mut serial = 0;
    while shadow.len() < 10_000 {
        let n = rng.random_range(1..60);
        let mut batch: Vec<_> = (0..n)
            .map(|_| {
                serial += 1;
                record(&mut rng, serial)
            })
            .collect();
        batch.sort_by_key(|r| r.stamp);
        assert_eq!(store.append_anomalies(&batch).unwrap(), batch.len());
        shadow.extend(batch);

        if rng.random_bool(0.2) {
            let a = HourStamp::ymdh(2024, 1, 1, 0).add_hours(rng.random_range(-24..24 * 41));
            let b = a.add_hours(rng.random_range(0..24 * 10));
            let meter = rng.random_bool(0.5).then(|| format!("m{:02}", rng.random_range(0..12)));
            let got = store.query_anomalies(meter.as_deref(), a, b).unwrap();
            assert_eq!(got, shadow_query(&shadow, meter.as_deref(), a, b));
        }
    }
    let everything = store
        .query_anomalies(None, HourStamp::ymdh(2023, 1, 1, 0), HourStamp::ymdh(2025, 1, 1, 0))
        .unwrap();
    assert_eq!(everything.len(), shadow.len());
    assert_eq!(everything, shadow_query(&shadow, None, HourStamp::ymdh(2023, 1, 1, 0), HourStamp::ymdh(2025, 1, 1, 0)));

    // A fresh handle on the same directory sees the same log.
    let reopened = ServingStore::open(dir.path()).unwrap();
    let a = HourStamp::ymdh(2024, 1, 10, 0);
    let b = HourStamp::ymdh(2024, 1, 12, 23);
    assert_eq!(reopened.query_anomalies(None, a, b).unwrap(), shadow_query(&shadow, None, a, b));
}

#[test]
fn inverted_range_is_empty() {
    let dir = tempfile::tempdir().unwrap();
    let store = ServingStore::open(dir.path()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    store.append_anomalies(&[record(&mut rng, 1)]).unwrap();
    let a = HourStamp::ymdh(2024, 2, 1, 0);
    assert!(store.query_anomalies(None, a, a.add_hours(-1)).unwrap().is_empty());
}

#[test]
fn snapshots_publish_roundtrip_and_survive_crashes() {
    let mut spec = FleetSpec::new(3, 20, 2);
    spec.injection = None;
    let fleet = generate_fleet(&spec).unwrap();
    let snap = train_fleet(&fleet.series, &fleet.temperatures, &DetectorConfig::default(), 2).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let store = ServingStore::open(dir.path()).unwrap();
    assert!(matches!(store.latest_snapshot(), Err(Error::EmptyStore)));

    let mut v1 = snap.clone();
    v1.version = 1;
    store.publish_snapshot(&v1).unwrap();
    assert!(store.latest_snapshot().unwrap().same_content(&v1));

    // Same or older version is refused.
    assert!(matches!(store.publish_snapshot(&v1), Err(Error::StaleVersion { .. })));

    for (v, fault) in [(2, FaultPoint::BeforeSnapshotRename), (3, FaultPoint::BeforePointerFlip)] {
        let mut next = snap.clone();
        next.version = v;
        next.config.epsilon = 0.01 * v as f64;
        store.inject_fault(Some(fault));
        assert!(matches!(store.publish_snapshot(&next), Err(Error::InjectedFault(_))));
        let live = store.latest_snapshot().unwrap();
        assert_eq!(live.version, 1);
        assert!(live.same_content(&v1));
    }
    assert_eq!(store.list_versions().unwrap(), vec![1, 3]);

    let mut v4 = snap.clone();
    v4.version = 4;
    store.publish_snapshot(&v4).unwrap();
    assert_eq!(store.latest_version().unwrap(), Some(4));
    assert_eq!(store.get_snapshot(1).unwrap().config, v1.config);
}

#[test]
fn encoded_snapshot_is_bit_exact_and_tamper_evident() {
    let mut spec = FleetSpec::new(2, 30, 3);
    spec.injection = None;
    let fleet = generate_fleet(&spec).unwrap();
    let cfg = DetectorConfig::default().with_intercept(true);
    let snap = train_fleet(&fleet.series, &fleet.temperatures, &cfg, 1).unwrap();
    let text = encode_snapshot(&snap);
    let back = decode_snapshot(&text).unwrap();
    assert_eq!(back, snap);

    let model_line = text.lines().find(|l| l.starts_with("model,")).unwrap();
    let mut bytes = model_line.to_string().into_bytes();
    let last = bytes.len() - 1;
    bytes[last] = if bytes[last] == b'1' { b'2' } else { b'1' };
    let tampered = text.replacen(model_line, std::str::from_utf8(&bytes).unwrap(), 1);
    assert!(tampered != text);
    assert!(decode_snapshot(&tampered).is_err());
    assert!(decode_snapshot(&text[..text.len() / 2]).is_err());
}

#[test]
fn corrupt_snapshot_file_is_reported() {
    let mut spec = FleetSpec::new(1, 20, 4);
    spec.injection = None;
    let fleet = generate_fleet(&spec).unwrap();
    let mut snap = train_fleet(&fleet.series, &fleet.temperatures, &DetectorConfig::default(), 1).unwrap();
    snap.version = 1;
    let dir = tempfile::tempdir().unwrap();
    let store = ServingStore::open(dir.path()).unwrap();
    store.publish_snapshot(&snap).unwrap();

    let files: BTreeSet<_> = std::fs::read_dir(dir.path().join("snapshots"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    let path = files.into_iter().next().unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    std::fs::write(&path, text.replace("version=1", "version=9")).unwrap();
    let fresh = ServingStore::open(dir.path()).unwrap();
    assert!(matches!(fresh.latest_snapshot(), Err(Error::CorruptSnapshot { .. })));
}
