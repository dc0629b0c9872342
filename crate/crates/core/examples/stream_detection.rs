//! Feed readings hour by hour through the speed-layer detector.

use meterwatch::datagen::{generate_fleet, FleetSpec};
use meterwatch::stream::batches_from_readings;
use meterwatch::{train_fleet, DetectorConfig, StreamDetector};

fn main() -> meterwatch::Result<()> {
    let fleet = generate_fleet(&FleetSpec::new(10, 60, 5))?;
    let config = DetectorConfig::default().with_intercept(true);
    let snapshot = train_fleet(&fleet.series, &fleet.temperatures, &config, 4)?;

    let mut detector = StreamDetector::new(config)?;
    let readings = fleet.series.iter().flat_map(|s| s.readings());
    for batch in batches_from_readings(readings) {
        for r in detector.process_hour(batch, &fleet.temperatures, Some(&snapshot))? {
            let injected = fleet.label_set().contains(&(r.meter_id.clone(), r.stamp));
            if injected {
                println!(
                    "{} {} actual {:.2} predicted {:.2} density {:.2e} (injected)",
                    r.meter_id, r.stamp, r.actual, r.predicted, r.score
                );
            }
        }
    }
    let c = detector.counters();
    println!(
        "{} scored, {} anomalies, {} waiting on lag history",
        c.scored, c.anomalies, c.skipped_incomplete_lags
    );
    Ok(())
}
