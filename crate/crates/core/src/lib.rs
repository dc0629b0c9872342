//! Online anomaly detection for hourly smart-meter readings.
//!
//! Each meter gets one periodic autoregressive model per hour of the day
//! (lagged readings plus temperature features), and the log of each
//! reading's absolute prediction error is scored against a Gaussian fitted
//! on training residuals. A batch layer retrains the whole fleet and
//! publishes immutable model snapshots; a speed layer scores readings hour by
//! hour against the latest snapshot.

pub mod baseline;
pub mod cli;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod formats;
pub mod parx;
pub mod residual;
pub mod store;
pub mod stream;
pub mod trainer;
pub mod types;

pub use error::{Error, Result};
pub use residual::{DetectorConfig, GaussianParams, SeasonDetectionModel};
pub use store::ServingStore;
pub use stream::{AnomalyRecord, StreamDetector};
pub use trainer::{train_fleet, ModelSnapshot};
pub use types::{ConsumptionSeries, DayType, DayTypePolicy, HourStamp, MeterReading, Season, TemperatureSeries};
