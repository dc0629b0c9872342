//! Batch layer and speed layer running together against one store.
//!
//! A batch thread retrains every few hundred milliseconds from a growing
//! reading log; the main thread streams the same readings through the
//! detector, always using whatever snapshot is live.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use meterwatch::datagen::{generate_fleet, FleetSpec};
use meterwatch::stream::{batches_from_readings, run_stream};
use meterwatch::trainer::{BatchLayer, MemoryReadingLog};
use meterwatch::{DetectorConfig, ServingStore, StreamDetector};

fn main() -> meterwatch::Result<()> {
    let dir = tempfile::tempdir().expect("temp dir");
    let store = Arc::new(ServingStore::open(dir.path())?);
    let fleet = generate_fleet(&FleetSpec::new(20, 60, 3))?;
    let config = DetectorConfig::default();

    // The first month is already in the log when the system starts.
    let log = Arc::new(MemoryReadingLog::new());
    let cutoff = fleet.series[0].first_stamp().expect("readings").add_days(30);
    let (history, live): (Vec<_>, Vec<_>) = fleet
        .series
        .iter()
        .flat_map(|s| s.readings())
        .partition(|r| r.stamp < cutoff);
    log.append(history);

    let batch = BatchLayer {
        store: store.clone(),
        log: log.clone(),
        temps: Arc::new(fleet.temperatures.clone()),
        config: config.clone(),
        parallelism: 2,
    };
    batch.run_cycle()?;

    let stop = Arc::new(AtomicBool::new(false));
    let batch_thread = {
        let stop = stop.clone();
        std::thread::spawn(move || batch.run(Duration::from_millis(200), &stop, None))
    };

    let mut detector = StreamDetector::new(config)?;
    let mut versions_seen = std::collections::BTreeSet::new();
    let batches = batches_from_readings(live).into_iter().map(|b| {
        log.append(b.readings.iter().map(|(m, kwh)| {
            meterwatch::MeterReading::new(m.clone(), b.stamp, *kwh).expect("valid reading")
        }));
        std::thread::sleep(Duration::from_millis(1));
        Ok(b)
    });
    let counters = run_stream(batches, &store, &fleet.temperatures, &mut detector, |r| {
        versions_seen.insert(r.model_version);
        Ok(())
    })?;

    stop.store(true, Ordering::Relaxed);
    let summary = batch_thread.join().expect("batch thread");
    println!(
        "speed layer: {} scored, {} anomalies, flagged under versions {:?}",
        counters.scored, counters.anomalies, versions_seen
    );
    println!("batch layer: {} cycles, {} failures", summary.cycles + 1, summary.failures);
    Ok(())
}
