//! Fit per-hour models for a fleet and look at one of them.

use meterwatch::datagen::{generate_fleet, FleetSpec};
use meterwatch::{train_fleet, DayType, DetectorConfig, Season};

fn main() -> meterwatch::Result<()> {
    let fleet = generate_fleet(&FleetSpec::new(10, 90, 1))?;
    let config = DetectorConfig::default().with_intercept(true);

    let snapshot = train_fleet(&fleet.series, &fleet.temperatures, &config, 4)?;
    println!("{} models, {} skipped cells", snapshot.len(), snapshot.skipped.len());

    let meter = fleet.series[0].meter_id();
    let model = snapshot
        .get(meter, Season::new(18)?, DayType::AllDays)
        .expect("evening model");
    println!("{meter} at 18h:");
    println!("  lag weights {:?}", model.parx.alphas);
    println!("  temperature weights {:?}", model.parx.betas);
    println!("  intercept {:?}", model.parx.intercept);
    println!("  log-residual mean {:.3} sd {:.3}", model.gaussian.mu, model.gaussian.sigma);
    println!("  fitted on {} days", model.parx.n_samples);
    Ok(())
}
