//! Generate a small synthetic fleet and write it as CSV.
//!
//! cargo run --example generate_fleet -- /tmp/fleet

use meterwatch::datagen::{generate_fleet, FleetSpec};

fn main() -> meterwatch::Result<()> {
    let dir = std::env::args().nth(1).unwrap_or_else(|| "fleet".into());
    let spec = FleetSpec::new(20, 60, 42);
    let fleet = generate_fleet(&spec)?;
    fleet.write_to(dir.as_ref())?;

    let first = &fleet.series[0];
    println!(
        "{} meters, {} readings, {} injected anomalies in {dir}",
        fleet.series.len(),
        fleet.n_readings(),
        fleet.labels.len()
    );
    println!("first meter {} starts at {:?}", first.meter_id(), first.first_stamp());
    for a in fleet.labels.iter().take(3) {
        println!("  {} {} {} x{}", a.meter_id, a.stamp, a.kind.as_str(), a.magnitude);
    }
    Ok(())
}
