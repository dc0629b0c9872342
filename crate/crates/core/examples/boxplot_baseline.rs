//! Compare the residual detector with per-hour boxplot fences.

use meterwatch::datagen::{generate_fleet, FleetSpec};
use meterwatch::eval::{compare_with_boxplot, detect_after_warmup};
use meterwatch::DetectorConfig;

fn main() -> meterwatch::Result<()> {
    let fleet = generate_fleet(&FleetSpec::new(30, 120, 11))?;
    let config = DetectorConfig::default().with_intercept(true);
    let (_, records, from) = detect_after_warmup(&fleet.series, &fleet.temperatures, &config, 14, 4)?;
    let cmp = compare_with_boxplot(&fleet.series, &records, &fleet.label_set(), from)?;
    print!("{}", cmp.to_csv());
    Ok(())
}
