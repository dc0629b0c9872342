//! Shape of one meter's log-residuals over a year.

use meterwatch::datagen::{generate_fleet, FleetSpec};
use meterwatch::eval::residual_histogram;
use meterwatch::DetectorConfig;

fn main() -> meterwatch::Result<()> {
    let mut spec = FleetSpec::new(1, 365, 10);
    spec.injection = None;
    let fleet = generate_fleet(&spec)?;
    let config = DetectorConfig::default().with_intercept(true);
    let h = residual_histogram(&fleet.series[0], &fleet.temperatures, &config, None, 25)?;
    let widest = h.bins.iter().map(|b| b.count).max().unwrap_or(1);
    for b in &h.bins {
        let bar = "#".repeat(b.count * 60 / widest);
        println!("{:>7.2} {:>5} {bar}", (b.lower + b.upper) / 2.0, b.count);
    }
    let m = h.moments;
    println!("n {} mean {:.3} sd {:.3} skew {:.3} kurtosis {:.3}", m.n, m.mean, m.sd, m.skewness, m.excess_kurtosis);
    Ok(())
}
