//! Batch layer: fit one PARX regression and one log-residual Gaussian per
//! `(meter, season, day_type)` cell and bundle them into a versioned
//! [`ModelSnapshot`]. Every cycle recomputes from the full reading history.

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, RwLock};
use std::time::{Duration, Instant};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::formats;
use crate::parx::{build_problem, fit_ols, ParxModel, RegressionProblem};
use crate::residual::{
    fit_gaussian_with_floor, log_l1_residual, DetectorConfig, ResidualMode, SeasonDetectionModel,
};
use crate::store::ServingStore;
use crate::types::{
    group_by_meter, ConsumptionSeries, DayType, HourStamp, MeterReading, Season,
    TemperatureSeries,
};

/// Identifies one trained cell.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ModelKey {
    pub meter_id: String,
    pub season: Season,
    pub day_type: DayType,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SkipReason {
    InsufficientRows { rows: usize, needed: usize },
    FitFailed(String),
}

impl SkipReason {
    pub fn label(&self) -> String {
        match self {
            SkipReason::InsufficientRows { rows, needed } => {
                format!("insufficient-rows:{rows}/{needed}")
            }
            SkipReason::FitFailed(msg) => format!("fit-failed:{}", msg.replace(',', ";")),
        }
    }

    pub fn parse(label: &str) -> Option<Self> {
        if let Some(rest) = label.strip_prefix("insufficient-rows:") {
            let (rows, needed) = rest.split_once('/')?;
            return Some(SkipReason::InsufficientRows {
                rows: rows.parse().ok()?,
                needed: needed.parse().ok()?,
            });
        }
        label
            .strip_prefix("fit-failed:")
            .map(|m| SkipReason::FitFailed(m.to_string()))
    }
}

/// A cell that could not be trained, as listed in a snapshot's skip report.
#[derive(Debug, Clone, PartialEq)]
pub struct SkippedCell {
    pub key: ModelKey,
    pub reason: SkipReason,
}

/// Output of training a single meter.
#[derive(Debug, Clone, Default)]
pub struct MeterTraining {
    pub models: Vec<SeasonDetectionModel>,
    pub skipped: Vec<SkippedCell>,
}

impl MeterTraining {
    pub fn low_sample(&self) -> impl Iterator<Item = &SeasonDetectionModel> {
        self.models.iter().filter(|m| m.parx.is_low_sample())
    }
}

type MeterModels = BTreeMap<(Season, DayType), SeasonDetectionModel>;

/// Immutable, versioned set of detection models for the fleet.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSnapshot {
    pub version: u64,
    pub created_at: HourStamp,
    pub config: DetectorConfig,
    models: BTreeMap<String, MeterModels>,
    pub skipped: Vec<SkippedCell>,
}

impl ModelSnapshot {
    pub fn new(version: u64, created_at: HourStamp, config: DetectorConfig) -> Self {
        Self {
            version,
            created_at,
            config,
            models: BTreeMap::new(),
            skipped: Vec::new(),
        }
    }

    pub fn insert(&mut self, model: SeasonDetectionModel) {
        let p = &model.parx;
        self.models
            .entry(p.meter_id.clone())
            .or_default()
            .insert((p.season, p.day_type), model);
    }

    pub fn get(&self, meter_id: &str, season: Season, day_type: DayType) -> Option<&SeasonDetectionModel> {
        self.models.get(meter_id)?.get(&(season, day_type))
    }

    pub fn len(&self) -> usize {
        self.models.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    pub fn meters(&self) -> impl Iterator<Item = &str> {
        self.models.keys().map(String::as_str)
    }

    pub fn models_for(&self, meter_id: &str) -> impl Iterator<Item = &SeasonDetectionModel> {
        self.models.get(meter_id).into_iter().flat_map(|m| m.values())
    }

    /// All models ordered by `(meter_id, season, day_type)`.
    pub fn iter(&self) -> impl Iterator<Item = &SeasonDetectionModel> {
        self.models.values().flat_map(|m| m.values())
    }

    /// True when the snapshots hold the same models and skip report.
    pub fn same_content(&self, other: &ModelSnapshot) -> bool {
        self.models == other.models && self.skipped == other.skipped && self.config == other.config
    }
}

/// Fit every season/day-type cell of one meter. Cells without enough data
/// are reported, not fatal.
pub fn train_meter_report(
    series: &ConsumptionSeries,
    temps: &TemperatureSeries,
    config: &DetectorConfig,
) -> Result<MeterTraining> {
    config.validate()?;
    let calendar = config.calendar();
    let mut out = MeterTraining::default();
    for season in Season::all() {
        for &day_type in DayType::cells(config.day_type_policy) {
            let key = ModelKey {
                meter_id: series.meter_id().to_string(),
                season,
                day_type,
            };
            let problem = build_problem(
                series,
                temps,
                season,
                day_type,
                &calendar,
                config.order_p,
                config.fit_intercept,
            );
            let fitted = problem.and_then(|p| fit_cell(series.meter_id(), season, day_type, &p, config));
            match fitted {
                Ok(model) => out.models.push(model),
                Err(Error::InsufficientData { rows, needed }) => out.skipped.push(SkippedCell {
                    key,
                    reason: SkipReason::InsufficientRows { rows, needed },
                }),
                Err(e) => out.skipped.push(SkippedCell {
                    key,
                    reason: SkipReason::FitFailed(e.to_string()),
                }),
            }
        }
    }
    Ok(out)
}

/// Like [`train_meter_report`] but fails when no cell at all could be trained.
pub fn train_meter(
    series: &ConsumptionSeries,
    temps: &TemperatureSeries,
    config: &DetectorConfig,
) -> Result<MeterTraining> {
    if series.is_empty() {
        return Err(Error::InvalidInput(format!(
            "meter {} has no readings",
            series.meter_id()
        )));
    }
    let report = train_meter_report(series, temps, config)?;
    if report.models.is_empty() {
        return Err(Error::MeterUntrainable(series.meter_id().to_string()));
    }
    Ok(report)
}

fn fit_cell(
    meter_id: &str,
    season: Season,
    day_type: DayType,
    problem: &RegressionProblem,
    config: &DetectorConfig,
) -> Result<SeasonDetectionModel> {
    let needed = problem.n_columns();
    let (fit_rows, score_rows) = match config.residual_mode {
        ResidualMode::InSample => (problem.clone(), problem.clone()),
        ResidualMode::HoldOut { fraction } => {
            let n = problem.n_samples();
            let held = ((n as f64) * fraction).ceil() as usize;
            let lead = n.saturating_sub(held);
            if lead < needed || held < 2 {
                return Err(Error::InsufficientData {
                    rows: n,
                    needed: needed + 2,
                });
            }
            (problem.slice_rows(0..lead), problem.slice_rows(lead..n))
        }
    };
    let coefficients = fit_ols(&fit_rows)?;
    let parx = ParxModel::from_coefficients(meter_id, season, day_type, &fit_rows, &coefficients)?;
    let predicted = score_rows.fitted_values(&coefficients);
    let residuals: Vec<f64> = score_rows
        .target()
        .iter()
        .zip(&predicted)
        .map(|(&actual, &pred)| log_l1_residual(actual, pred, config.residual_floor))
        .collect();
    let gaussian = fit_gaussian_with_floor(&residuals, config.sigma_floor)?;
    Ok(SeasonDetectionModel { parx, gaussian })
}

/// Train every meter and assemble a snapshot (version 1; the batch layer
/// renumbers on publish). Output does not depend on `parallelism`.
pub fn train_fleet(
    dataset: &[ConsumptionSeries],
    temps: &TemperatureSeries,
    config: &DetectorConfig,
    parallelism: usize,
) -> Result<ModelSnapshot> {
    if dataset.is_empty() {
        return Err(Error::InvalidInput("empty dataset".into()));
    }
    config.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .map_err(|e| Error::InvalidInput(format!("thread pool: {e}")))?;
    let reports: Vec<Result<MeterTraining>> = pool.install(|| {
        dataset
            .par_iter()
            .map(|s| train_meter_report(s, temps, config))
            .collect()
    });

    let created_at = dataset
        .iter()
        .filter_map(ConsumptionSeries::last_stamp)
        .max()
        .ok_or_else(|| Error::InvalidInput("dataset has no readings".into()))?;
    let mut snapshot = ModelSnapshot::new(1, created_at, config.clone());
    let mut low_sample = 0usize;
    let mut untrainable = 0usize;
    for report in reports {
        let report = report?;
        if report.models.is_empty() {
            untrainable += 1;
        }
        low_sample += report.low_sample().count();
        report.models.into_iter().for_each(|m| snapshot.insert(m));
        snapshot.skipped.extend(report.skipped);
    }
    if low_sample > 0 {
        log::warn!("{low_sample} cells trained on fewer than {} rows", crate::parx::LOW_SAMPLE_ROWS);
    }
    if untrainable > 0 {
        log::warn!("{untrainable} meters had no trainable cell");
    }
    if snapshot.is_empty() {
        return Err(Error::InsufficientData { rows: 0, needed: 1 });
    }
    Ok(snapshot)
}

/// Append-only source of every reading received so far.
pub trait ReadingLog: Send + Sync {
    fn read_all(&self) -> Result<Vec<MeterReading>>;
}

/// Readings file that other processes append to.
#[derive(Debug, Clone)]
pub struct FileReadingLog {
    pub path: PathBuf,
}

impl ReadingLog for FileReadingLog {
    fn read_all(&self) -> Result<Vec<MeterReading>> {
        formats::read_readings(&self.path)
    }
}

/// Directory of readings files; every `*.csv` in it is read on each cycle.
#[derive(Debug, Clone)]
pub struct DirReadingLog {
    pub dir: PathBuf,
}

impl ReadingLog for DirReadingLog {
    fn read_all(&self) -> Result<Vec<MeterReading>> {
        let mut paths: Vec<PathBuf> = fs::read_dir(&self.dir)
            .map_err(|e| Error::io(&self.dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "csv"))
            .collect();
        paths.sort();
        let mut out = Vec::new();
        for p in paths {
            out.extend(formats::read_readings(&p)?);
        }
        Ok(out)
    }
}

#[derive(Debug, Default)]
pub struct MemoryReadingLog {
    readings: RwLock<Vec<MeterReading>>,
}

impl MemoryReadingLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn append(&self, readings: impl IntoIterator<Item = MeterReading>) {
        self.readings.write().expect("log lock").extend(readings);
    }

    pub fn len(&self) -> usize {
        self.readings.read().expect("log lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl ReadingLog for MemoryReadingLog {
    fn read_all(&self) -> Result<Vec<MeterReading>> {
        Ok(self.readings.read().expect("log lock").clone())
    }
}

pub trait TemperatureSource: Send + Sync {
    fn load(&self) -> Result<TemperatureSeries>;
}

impl TemperatureSource for TemperatureSeries {
    fn load(&self) -> Result<TemperatureSeries> {
        Ok(self.clone())
    }
}

#[derive(Debug, Clone)]
pub struct FileTemperatureSource {
    pub path: PathBuf,
}

impl TemperatureSource for FileTemperatureSource {
    fn load(&self) -> Result<TemperatureSeries> {
        formats::read_temperatures(&self.path)
    }
}

/// Loops full-recompute training cycles and publishes each result.
pub struct BatchLayer {
    pub store: Arc<ServingStore>,
    pub log: Arc<dyn ReadingLog>,
    pub temps: Arc<dyn TemperatureSource>,
    pub config: DetectorConfig,
    pub parallelism: usize,
}

#[derive(Debug, Default, Clone)]
pub struct BatchRunSummary {
    pub cycles: usize,
    pub published: Vec<u64>,
    pub failures: usize,
}

impl BatchLayer {
    /// One cycle: read everything available now, train, publish. On error the
    /// store keeps serving its previous snapshot.
    pub fn run_cycle(&self) -> Result<u64> {
        let readings = self.log.read_all()?;
        let temps = self.temps.load()?;
        let dataset = group_by_meter(readings)?;
        let mut snapshot = train_fleet(&dataset, &temps, &self.config, self.parallelism)?;
        snapshot.version = self.store.latest_version()?.unwrap_or(0) + 1;
        self.store.publish_snapshot(&snapshot)
    }

    /// Run cycles every `interval` until `stop` is set or `max_cycles` is hit.
    pub fn run(&self, interval: Duration, stop: &AtomicBool, max_cycles: Option<usize>) -> BatchRunSummary {
        let mut summary = BatchRunSummary::default();
        while !stop.load(Ordering::Relaxed) && max_cycles.is_none_or(|m| summary.cycles < m) {
            let started = Instant::now();
            match self.run_cycle() {
                Ok(v) => {
                    log::info!("published snapshot v{v} in {:?}", started.elapsed());
                    summary.published.push(v);
                }
                Err(e) => {
                    log::error!("batch cycle failed, previous snapshot stays live: {e}");
                    summary.failures += 1;
                }
            }
            summary.cycles += 1;
            if max_cycles.is_some_and(|m| summary.cycles >= m) {
                break;
            }
            let deadline = Instant::now() + interval;
            while Instant::now() < deadline && !stop.load(Ordering::Relaxed) {
                std::thread::sleep((deadline - Instant::now()).min(Duration::from_millis(50)));
            }
        }
        summary
    }
}
