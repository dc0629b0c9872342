//! Publish snapshots, read them back, and query stored anomalies.

use meterwatch::datagen::{generate_fleet, FleetSpec};
use meterwatch::eval::replay;
use meterwatch::{train_fleet, DetectorConfig, HourStamp, ServingStore};

fn main() -> meterwatch::Result<()> {
    let dir = tempfile::tempdir().expect("temp dir");
    let store = ServingStore::open(dir.path())?;

    let fleet = generate_fleet(&FleetSpec::new(5, 45, 9))?;
    let config = DetectorConfig::default();
    for round in 1..=3 {
        let mut snapshot = train_fleet(&fleet.series, &fleet.temperatures, &config, 2)?;
        snapshot.version = round;
        store.publish_snapshot(&snapshot)?;
    }
    println!("versions {:?}, latest {:?}", store.list_versions()?, store.latest_version()?);

    let live = store.latest_snapshot()?;
    let records = replay(&fleet.series, &fleet.temperatures, &live, &config, None)?;
    store.append_anomalies(&records)?;

    let from = HourStamp::ymdh(2024, 1, 20, 0);
    let to = HourStamp::ymdh(2024, 1, 31, 23);
    let hits = store.query_anomalies(Some("m00002"), from, to)?;
    println!("m00002 anomalies {from}..{to}: {}", hits.len());
    for r in hits.iter().take(5) {
        println!("  {}", r.to_output_line());
    }
    Ok(())
}
