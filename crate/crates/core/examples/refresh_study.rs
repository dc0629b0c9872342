//! How often models need rebuilding when consumption drifts upward.

use meterwatch::datagen::{generate_fleet, Drift, FleetSpec};
use meterwatch::eval::{refresh_study, RefreshSchedule};
use meterwatch::DetectorConfig;

fn main() -> meterwatch::Result<()> {
    let mut spec = FleetSpec::new(10, 120, 9);
    spec.injection = None;
    spec.template.drift = Some(Drift {
        start_day: 14,
        ramp_days: 90,
        increase: 0.3,
    });
    let fleet = generate_fleet(&spec)?;
    let config = DetectorConfig::default().with_intercept(true);
    let schedules = [RefreshSchedule::DAILY, RefreshSchedule::EveryDays(10), RefreshSchedule::Never];
    let report = refresh_study(&fleet.series, &fleet.temperatures, &config, &schedules, 28, 4)?;
    print!("{}", report.to_csv());
    Ok(())
}
