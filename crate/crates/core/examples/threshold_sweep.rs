//! Anomaly counts over several thresholds, with and without separate
//! weekend models.

use meterwatch::datagen::{generate_fleet, FleetSpec};
use meterwatch::eval::compare_day_types;
use meterwatch::DetectorConfig;

fn main() -> meterwatch::Result<()> {
    let mut spec = FleetSpec::new(20, 120, 8);
    spec.template.weekend_multiplier = 1.5;
    let fleet = generate_fleet(&spec)?;
    let config = DetectorConfig::default().with_intercept(true);
    let report = compare_day_types(&fleet.series, &fleet.temperatures, &config, &[0.05, 0.10, 0.15], 14, 4)?;
    print!("{}", report.to_csv());
    Ok(())
}
