//! Training and scoring time as the fleet grows.
//!
//! cargo run --release --example scaling

use meterwatch::eval::scaling_run;
use meterwatch::DetectorConfig;

fn main() -> meterwatch::Result<()> {
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    let report = scaling_run(&[250, 500, 1000], 60, 1, &DetectorConfig::default(), threads)?;
    print!("{}", report.to_csv());
    println!("train time ratios {:?}", report.train_ratios());
    Ok(())
}
