//! Command-line front end. Settings come from an optional TOML file
//! (`--config`) and are overridden by flags; the effective settings are
//! written next to every file the command produces.
//!
//! Exit codes: 0 success, 2 usage, 3 bad or insufficient data, 4 I/O.

use std::ffi::OsString;
use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::AtomicBool;
use std::sync::Arc;
use std::time::Duration;

use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::baseline::detect_boxplot;
use crate::datagen::{generate_fleet, label_set, read_labels, AnomalyKind, Drift, FleetSpec, InjectionPlan};
use crate::error::Error;
use crate::eval::{self, LabelSet, RefreshSchedule};
use crate::formats;
use crate::residual::DetectorConfig;
use crate::store::{read_snapshot_file, write_snapshot_file, ServingStore};
use crate::stream::{
    batches_from_readings, reading_lines, run_stream, AnomalyRecord, HourBatch, HourBatcher,
    ReloadingTemperatureFile, StreamDetector, ANOMALY_HEADER,
};
use crate::trainer::{
    train_fleet, BatchLayer, DirReadingLog, FileReadingLog, FileTemperatureSource, ReadingLog,
};
use crate::types::{group_by_meter, DayTypePolicy, HourStamp, MeterReading, Season};

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_IO: i32 = 4;
pub const STORE_ENV: &str = "METERWATCH_STORE";

/// Everything a run can be configured with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub detector: DetectorConfig,
    pub parallelism: usize,
    pub seed: u64,
    pub warmup_days: i64,
    pub store: Option<PathBuf>,
    pub readings: Option<PathBuf>,
    pub temps: Option<PathBuf>,
    pub labels: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            detector: DetectorConfig::default(),
            parallelism: std::thread::available_parallelism().map_or(1, |n| n.get()),
            seed: 1,
            warmup_days: 14,
            store: None,
            readings: None,
            temps: None,
            labels: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text)
            .map_err(|e| Error::parse(path.display().to_string(), e.to_string()).into())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage: {m}"),
            CliError::Core(e) => e.fmt(f),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Core(e) if e.is_data_error() => EXIT_DATA,
            CliError::Core(_) => EXIT_IO,
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |e| Error::io(path, e).into()
}

#[derive(Debug, Parser)]
#[command(name = "meterwatch", version, about = "Anomaly detection for hourly smart-meter readings")]
pub struct Cli {
    /// TOML file with run settings; flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Worker threads for training and scoring.
    #[arg(long, global = true)]
    pub parallelism: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Default)]
pub struct DetectorArgs {
    /// Density threshold below which a reading is anomalous.
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Number of previous days used as regressors.
    #[arg(long)]
    pub order: Option<usize>,
    /// One model per hour (`all`) or separate workday/weekend models (`split`).
    #[arg(long = "day-type")]
    pub day_type: Option<DayTypePolicy>,
    /// File with one holiday date (YYYY-MM-DD) per line.
    #[arg(long)]
    pub holidays: Option<PathBuf>,
    /// Add a constant term to every regression.
    #[arg(long)]
    pub fit_intercept: bool,
}

#[derive(Debug, Args, Default)]
pub struct InputArgs {
    #[arg(long)]
    pub readings: Option<PathBuf>,
    #[arg(long)]
    pub temps: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic fleet: readings, temperatures and anomaly labels.
    Generate {
        #[arg(long, default_value_t = 10)]
        meters: usize,
        #[arg(long, default_value_t = 30)]
        days: usize,
        #[arg(long)]
        seed: Option<u64>,
        /// Fraction of readings per meter turned into anomalies.
        #[arg(long, default_value_t = 0.005)]
        inject_rate: f64,
        #[arg(long, default_value_t = 5.0)]
        magnitude: f64,
        #[arg(long, default_value = "2024-01-01")]
        start: NaiveDate,
        #[arg(long, default_value_t = 1.0)]
        weekend_multiplier: f64,
        /// Ramp the base load up by this fraction over 90 days.
        #[arg(long)]
        drift: Option<f64>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Fit models for every meter and write a model file or publish to a store.
    Train {
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        detector: DetectorArgs,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Publish to this store (also read from the environment).
        #[arg(long, env = STORE_ENV)]
        store: Option<PathBuf>,
    },
    /// Score a reading stream against a model file or a store.
    Detect {
        /// Model file or store directory.
        #[arg(long)]
        models: PathBuf,
        #[arg(long)]
        temps: Option<PathBuf>,
        #[command(flatten)]
        detector: DetectorArgs,
        /// `stdin`, `tcp:PORT`, or a readings file path.
        #[arg(long, default_value = "stdin")]
        source: Source,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-hour boxplot outliers of every meter.
    Baseline {
        #[arg(long)]
        readings: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Precision and recall of anomaly output against labels.
    Evaluate {
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Detector output (anomaly lines with header).
        #[arg(long)]
        anomalies: PathBuf,
        /// Ignore labels and flags before this hour (YYYY-MM-DDTHH).
        #[arg(long)]
        from: Option<HourStamp>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Anomaly counts over thresholds, optionally for both day-type policies.
    Sweep {
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        detector: DetectorArgs,
        #[arg(long, value_delimiter = ',', default_value = "0.05,0.10,0.15")]
        epsilons: Vec<f64>,
        #[arg(long)]
        compare_day_types: bool,
        #[arg(long)]
        warmup_days: Option<i64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Anomaly counts when models are rebuilt daily, every N days, or never.
    RefreshStudy {
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        detector: DetectorArgs,
        /// Schedules: `daily`, `never`, or a day count.
        #[arg(long, value_delimiter = ',', default_value = "daily,10,never")]
        schedules: Vec<String>,
        #[arg(long)]
        warmup_days: Option<i64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Histogram and moments of one meter's log-residuals.
    Histogram {
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        detector: DetectorArgs,
        #[arg(long)]
        meter: String,
        /// Hour of day; all hours when omitted.
        #[arg(long)]
        season: Option<u8>,
        #[arg(long, default_value_t = 30)]
        bins: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Training and scoring wall times over fleet sizes.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "1000,2000,4000")]
        meters: Vec<usize>,
        #[arg(long, default_value_t = 60)]
        days: usize,
        #[command(flatten)]
        detector: DetectorArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Batch layer: retrain from the reading log and publish, in a loop.
    ServeBatch {
        /// Readings file or directory of readings files.
        #[arg(long)]
        readings: Option<PathBuf>,
        #[arg(long)]
        temps: Option<PathBuf>,
        #[arg(long, env = STORE_ENV)]
        store: Option<PathBuf>,
        #[command(flatten)]
        detector: DetectorArgs,
        #[arg(long, default_value_t = 24.0)]
        interval_hours: f64,
        /// Stop after this many cycles.
        #[arg(long)]
        max_cycles: Option<usize>,
    },
    /// Speed layer: score a stream against the store's live snapshot.
    ServeDetect {
        #[arg(long, env = STORE_ENV)]
        store: Option<PathBuf>,
        #[arg(long)]
        temps: Option<PathBuf>,
        #[command(flatten)]
        detector: DetectorArgs,
        #[arg(long, default_value = "stdin")]
        source: Source,
        /// For tcp sources: stop after this many connections.
        #[arg(long)]
        max_connections: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Source {
    Stdin,
    Tcp(u16),
    File(PathBuf),
}

impl FromStr for Source {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s == "stdin" || s == "-" {
            return Ok(Source::Stdin);
        }
        if let Some(port) = s.strip_prefix("tcp:") {
            return port.parse().map(Source::Tcp).map_err(|e| format!("bad port {port:?}: {e}"));
        }
        Ok(Source::File(PathBuf::from(s.strip_prefix("file:").unwrap_or(s))))
    }
}

fn apply_detector_args(cfg: &mut RunConfig, args: &DetectorArgs) -> CliResult<()> {
    let d = &mut cfg.detector;
    if let Some(e) = args.epsilon {
        d.epsilon = e;
    }
    if let Some(p) = args.order {
        d.order_p = p;
    }
    if let Some(policy) = args.day_type {
        d.day_type_policy = policy;
    }
    if args.fit_intercept {
        d.fit_intercept = true;
    }
    if let Some(path) = &args.holidays {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let date = NaiveDate::parse_from_str(line, "%Y-%m-%d").map_err(|e| {
                Error::parse(format!("{}:{}", path.display(), i + 1), e.to_string())
            })?;
            d.holidays.insert(date);
        }
    }
    d.validate()?;
    Ok(())
}

fn apply_inputs(cfg: &mut RunConfig, input: &InputArgs) {
    if input.readings.is_some() {
        cfg.readings.clone_from(&input.readings);
    }
    if input.temps.is_some() {
        cfg.temps.clone_from(&input.temps);
    }
}

fn required<'a>(value: &'a Option<PathBuf>, flag: &str) -> CliResult<&'a Path> {
    value
        .as_deref()
        .ok_or_else(|| CliError::Usage(format!("--{flag} is required (flag or config file)")))
}

/// Write `content` to `out` with the effective config beside it, or to stdout.
fn emit(out: Option<&Path>, content: &str, cfg: &RunConfig) -> CliResult<()> {
    match out {
        Some(path) => {
            fs::write(path, content).map_err(io_err(path))?;
            let side = config_sidecar(path);
            fs::write(&side, cfg.to_toml()).map_err(io_err(&side))?;
        }
        None => {
            let mut stdout = io::stdout().lock();
            stdout
                .write_all(content.as_bytes())
                .map_err(|e| CliError::Core(e.into()))?;
        }
    }
    Ok(())
}

pub fn config_sidecar(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(OsString::from).unwrap_or_default();
    name.push(".config.toml");
    path.with_file_name(name)
}

fn load_series(path: &Path) -> CliResult<Vec<crate::types::ConsumptionSeries>> {
    Ok(group_by_meter(formats::read_readings(path)?)?)
}

/// Parse arguments, run, and return the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        // Downstream reader went away, as with `| head`.
        Err(CliError::Core(Error::RawIo(e))) if e.kind() == std::io::ErrorKind::BrokenPipe => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> CliResult<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(p) = cli.parallelism {
        cfg.parallelism = p.max(1);
    }
    match cli.command {
        Command::Generate {
            meters,
            days,
            seed,
            inject_rate,
            magnitude,
            start,
            weekend_multiplier,
            drift,
            out_dir,
        } => {
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let mut spec = FleetSpec::new(meters, days, cfg.seed);
            spec.start = start;
            spec.template.weekend_multiplier = weekend_multiplier;
            spec.template.ar_alphas.resize(cfg.detector.order_p, 0.0);
            spec.template.drift = drift.map(|increase| Drift {
                start_day: 0,
                ramp_days: 90,
                increase,
            });
            spec.injection = (inject_rate > 0.0).then_some(InjectionPlan {
                rate: inject_rate,
                kind: if magnitude >= 1.0 { AnomalyKind::Spike } else { AnomalyKind::Drop },
                magnitude,
            });
            let fleet = generate_fleet(&spec)?;
            fleet.write_to(&out_dir)?;
            let side = out_dir.join("config.toml");
            fs::write(&side, cfg.to_toml()).map_err(io_err(&side))?;
            eprintln!(
                "generated {} meters x {days} days: {} readings, {} labels -> {}",
                meters,
                fleet.n_readings(),
                fleet.labels.len(),
                out_dir.display()
            );
        }
        Command::Train { input, detector, out, store } => {
            apply_inputs(&mut cfg, &input);
            apply_detector_args(&mut cfg, &detector)?;
            if store.is_some() {
                cfg.store = store;
            }
            if out.is_none() && cfg.store.is_none() {
                return Err(CliError::Usage("train needs --out or --store".into()));
            }
            let series = load_series(required(&cfg.readings, "readings")?)?;
            let temps = formats::read_temperatures(required(&cfg.temps, "temps")?)?;
            let mut snapshot = train_fleet(&series, &temps, &cfg.detector, cfg.parallelism)?;
            eprintln!(
                "trained {} models for {} meters, {} cells skipped",
                snapshot.len(),
                series.len(),
                snapshot.skipped.len()
            );
            if let Some(path) = &out {
                write_snapshot_file(path, &snapshot)?;
                eprintln!("wrote {}", path.display());
            }
            if let Some(root) = &cfg.store {
                let store = ServingStore::open(root)?;
                snapshot.version = store.latest_version()?.unwrap_or(0) + 1;
                let v = store.publish_snapshot(&snapshot)?;
                eprintln!("published v{v} to {}", root.display());
            }
        }
        Command::Detect {
            models,
            temps,
            detector,
            source,
            out,
        } => {
            apply_detector_args(&mut cfg, &detector)?;
            if temps.is_some() {
                cfg.temps = temps;
            }
            let temps = ReloadingTemperatureFile::open(required(&cfg.temps, "temps")?)?;
            let mut sink = AnomalySink::open(out.as_deref(), &cfg)?;
            let mut det = StreamDetector::new(cfg.detector.clone())?;
            let batches = open_source(&source, Some(1))?;
            let counters = if models.is_dir() {
                let store = ServingStore::open(&models)?;
                run_stream(batches, &store, &temps, &mut det, |r| sink.write(r))?
            } else {
                let snapshot = read_snapshot_file(&models)?;
                for batch in batches {
                    for r in det.process_hour(batch?, &temps, Some(&snapshot))? {
                        sink.write(&r)?;
                    }
                }
                for r in det.drain_pending(&temps, Some(&snapshot), None)? {
                    sink.write(&r)?;
                }
                det.counters()
            };
            sink.finish()?;
            eprintln!(
                "scored {} readings over {} hours: {} anomalies, {} without model, {} without full lags",
                counters.scored,
                counters.hours,
                counters.anomalies,
                counters.skipped_no_model,
                counters.skipped_incomplete_lags
            );
        }
        Command::Baseline { readings, out } => {
            if readings.is_some() {
                cfg.readings = readings;
            }
            let series = load_series(required(&cfg.readings, "readings")?)?;
            let mut csv = String::from("meter_id,stamp,kwh,fence\n");
            let (mut upper, mut lower) = (0, 0);
            for s in &series {
                let found = detect_boxplot(s)?;
                upper += found.upper.len();
                lower += found.lower.len();
                for stamp in found.all() {
                    let kwh = s.get(stamp).expect("flagged stamp exists");
                    let fence = if found.upper.contains(&stamp) { "upper" } else { "lower" };
                    csv.push_str(&format!("{},{stamp},{kwh},{fence}\n", s.meter_id()));
                }
            }
            emit(out.as_deref(), &csv, &cfg)?;
            eprintln!("boxplot outliers: {upper} above, {lower} below the fences");
        }
        Command::Evaluate {
            labels,
            anomalies,
            from,
            out,
        } => {
            if labels.is_some() {
                cfg.labels = labels;
            }
            let labels = label_set(&read_labels(required(&cfg.labels, "labels")?)?);
            let mut flagged = read_flagged(&anomalies)?;
            let labels = match from {
                Some(f) => {
                    flagged = eval::since(&flagged, f);
                    eval::since(&labels, f)
                }
                None => labels,
            };
            let m = eval::evaluate(&labels, &flagged);
            let csv = format!(
                "true_positives,false_positives,false_negatives,precision,recall,f1\n{},{},{},{:.6},{:.6},{:.6}\n",
                m.true_positives, m.false_positives, m.false_negatives, m.precision, m.recall, m.f1
            );
            emit(out.as_deref(), &csv, &cfg)?;
            eprintln!(
                "precision {:.3}  recall {:.3}  f1 {:.3}  ({} flagged, {} labeled)",
                m.precision,
                m.recall,
                m.f1,
                m.flagged(),
                labels.len()
            );
        }
        Command::Sweep {
            input,
            detector,
            epsilons,
            compare_day_types,
            warmup_days,
            out,
        } => {
            apply_inputs(&mut cfg, &input);
            apply_detector_args(&mut cfg, &detector)?;
            if let Some(w) = warmup_days {
                cfg.warmup_days = w;
            }
            let series = load_series(required(&cfg.readings, "readings")?)?;
            let temps = formats::read_temperatures(required(&cfg.temps, "temps")?)?;
            let csv = if compare_day_types {
                let r = eval::compare_day_types(&series, &temps, &cfg.detector, &epsilons, cfg.warmup_days, cfg.parallelism)?;
                eprintln!("all-days counts {:?}, split counts {:?}", r.all_days.counts(), r.split.counts());
                r.to_csv()
            } else {
                let r = eval::sweep_epsilon(&series, &temps, &cfg.detector, &epsilons, cfg.warmup_days, cfg.parallelism)?;
                eprintln!("counts {:?} over epsilons {epsilons:?}", r.counts());
                r.to_csv()
            };
            emit(out.as_deref(), &csv, &cfg)?;
        }
        Command::RefreshStudy {
            input,
            detector,
            schedules,
            warmup_days,
            out,
        } => {
            apply_inputs(&mut cfg, &input);
            apply_detector_args(&mut cfg, &detector)?;
            if let Some(w) = warmup_days {
                cfg.warmup_days = w;
            }
            let schedules = schedules
                .iter()
                .map(|s| parse_schedule(s))
                .collect::<CliResult<Vec<_>>>()?;
            let series = load_series(required(&cfg.readings, "readings")?)?;
            let temps = formats::read_temperatures(required(&cfg.temps, "temps")?)?;
            let r = eval::refresh_study(&series, &temps, &cfg.detector, &schedules, cfg.warmup_days, cfg.parallelism)?;
            for (sched, n) in &r.rows {
                eprintln!("{:>14}: {n} anomalies", sched.label());
            }
            emit(out.as_deref(), &r.to_csv(), &cfg)?;
        }
        Command::Histogram {
            input,
            detector,
            meter,
            season,
            bins,
            out,
        } => {
            apply_inputs(&mut cfg, &input);
            apply_detector_args(&mut cfg, &detector)?;
            let season = season.map(Season::new).transpose()?;
            let series = load_series(required(&cfg.readings, "readings")?)?;
            let temps = formats::read_temperatures(required(&cfg.temps, "temps")?)?;
            let one = series
                .iter()
                .find(|s| s.meter_id() == meter)
                .ok_or_else(|| Error::InvalidInput(format!("meter {meter} not in readings")))?;
            let h = eval::residual_histogram(one, &temps, &cfg.detector, season, bins)?;
            let m = h.moments;
            eprintln!(
                "n {}  mean {:.4}  sd {:.4}  skewness {:.4}  excess kurtosis {:.4}",
                m.n, m.mean, m.sd, m.skewness, m.excess_kurtosis
            );
            emit(out.as_deref(), &h.to_csv(), &cfg)?;
        }
        Command::Bench {
            meters,
            days,
            detector,
            out,
        } => {
            apply_detector_args(&mut cfg, &detector)?;
            let r = eval::scaling_run(&meters, days, cfg.seed, &cfg.detector, cfg.parallelism)?;
            for p in &r.points {
                eprintln!(
                    "{:>6} meters: train {:.3}s, last day {:.3}s (slowest hour {:.3}s)",
                    p.meters, p.train_secs, p.detect_secs, p.slowest_hour_secs
                );
            }
            emit(out.as_deref(), &r.to_csv(), &cfg)?;
        }
        Command::ServeBatch {
            readings,
            temps,
            store,
            detector,
            interval_hours,
            max_cycles,
        } => {
            apply_inputs(&mut cfg, &InputArgs { readings, temps });
            apply_detector_args(&mut cfg, &detector)?;
            if store.is_some() {
                cfg.store = store;
            }
            if !(interval_hours.is_finite() && interval_hours >= 0.0) {
                return Err(CliError::Usage(format!("bad --interval-hours {interval_hours}")));
            }
            let root = required(&cfg.store, "store")?;
            let readings = required(&cfg.readings, "readings")?.to_path_buf();
            let log: Arc<dyn ReadingLog> = if readings.is_dir() {
                Arc::new(DirReadingLog { dir: readings })
            } else {
                Arc::new(FileReadingLog { path: readings })
            };
            let layer = BatchLayer {
                store: Arc::new(ServingStore::open(root)?),
                log,
                temps: Arc::new(FileTemperatureSource {
                    path: required(&cfg.temps, "temps")?.to_path_buf(),
                }),
                config: cfg.detector.clone(),
                parallelism: cfg.parallelism,
            };
            let stop = AtomicBool::new(false);
            let summary = layer.run(Duration::from_secs_f64(interval_hours * 3600.0), &stop, max_cycles);
            eprintln!(
                "{} cycles, published {:?}, {} failures",
                summary.cycles, summary.published, summary.failures
            );
            if summary.published.is_empty() && summary.failures > 0 {
                // Re-run once to surface the cause with the right exit code.
                layer.run_cycle()?;
            }
        }
        Command::ServeDetect {
            store,
            temps,
            detector,
            source,
            max_connections,
            out,
        } => {
            apply_detector_args(&mut cfg, &detector)?;
            if store.is_some() {
                cfg.store = store;
            }
            if temps.is_some() {
                cfg.temps = temps;
            }
            let store = ServingStore::open(required(&cfg.store, "store")?)?;
            let temps = ReloadingTemperatureFile::open(required(&cfg.temps, "temps")?)?;
            let mut sink = AnomalySink::open(out.as_deref(), &cfg)?;
            let mut det = StreamDetector::new(cfg.detector.clone())?;
            let batches = open_source(&source, max_connections)?;
            let c = run_stream(batches, &store, &temps, &mut det, |r| sink.write(r))?;
            sink.finish()?;
            eprintln!(
                "scored {} readings over {} hours: {} anomalies, {} stale refreshes",
                c.scored, c.hours, c.anomalies, c.stale_refreshes
            );
        }
    }
    Ok(())
}

fn parse_schedule(s: &str) -> CliResult<RefreshSchedule> {
    match s.trim() {
        "daily" => Ok(RefreshSchedule::DAILY),
        "never" => Ok(RefreshSchedule::Never),
        n => n
            .parse::<u32>()
            .ok()
            .filter(|d| *d > 0)
            .map(RefreshSchedule::EveryDays)
            .ok_or_else(|| CliError::Usage(format!("bad schedule {s:?}"))),
    }
}

/// `(meter, stamp)` of every line of a detector output file.
fn read_flagged(path: &Path) -> CliResult<LabelSet> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut out = LabelSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        let line = line.trim();
        if line.is_empty() || line == ANOMALY_HEADER {
            continue;
        }
        let mut fields = line.split(',');
        let (Some(meter), Some(stamp)) = (fields.next(), fields.next()) else {
            return Err(Error::parse(format!("{}:{}", path.display(), i + 1), "expected meter_id,stamp,...").into());
        };
        let stamp = stamp
            .parse()
            .map_err(|e: Error| Error::parse(format!("{}:{}", path.display(), i + 1), e.to_string()))?;
        out.insert((meter.to_string(), stamp));
    }
    Ok(out)
}

type BatchStream = Box<dyn Iterator<Item = crate::Result<HourBatch>>>;

/// Hourly batches from the source. Files may be in any order; stdin and
/// tcp streams are expected in time order.
fn open_source(source: &Source, max_connections: Option<usize>) -> CliResult<BatchStream> {
    match source {
        Source::File(path) => {
            let readings = formats::read_readings(path)?;
            Ok(Box::new(batches_from_readings(readings).into_iter().map(Ok)))
        }
        Source::Stdin => {
            let lines = reading_lines(BufReader::new(io::stdin()));
            Ok(Box::new(HourBatcher::new(lines)))
        }
        Source::Tcp(port) => {
            let listener = TcpListener::bind(("127.0.0.1", *port))
                .map_err(|e| Error::io(format!("tcp:{port}"), e))?;
            eprintln!("listening on {}", listener.local_addr().map_err(|e| CliError::Core(e.into()))?);
            let incoming = std::iter::from_fn(move || Some(listener.accept().map(|(s, _)| s)))
                .take(max_connections.unwrap_or(usize::MAX));
            let readings = incoming.flat_map(|conn| -> Box<dyn Iterator<Item = crate::Result<MeterReading>>> {
                match conn {
                    Ok(stream) => Box::new(reading_lines(BufReader::new(stream))),
                    Err(e) => Box::new(std::iter::once(Err(e.into()))),
                }
            });
            Ok(Box::new(HourBatcher::new(readings)))
        }
    }
}

/// Anomaly lines to a file or stdout, header first.
struct AnomalySink {
    out: Box<dyn Write>,
    path: Option<PathBuf>,
}

impl AnomalySink {
    fn open(path: Option<&Path>, cfg: &RunConfig) -> CliResult<Self> {
        let mut out: Box<dyn Write> = match path {
            Some(p) => {
                let side = config_sidecar(p);
                fs::write(&side, cfg.to_toml()).map_err(io_err(&side))?;
                Box::new(io::BufWriter::new(fs::File::create(p).map_err(io_err(p))?))
            }
            None => Box::new(io::stdout()),
        };
        writeln!(out, "{ANOMALY_HEADER}").map_err(|e| CliError::Core(e.into()))?;
        Ok(Self {
            out,
            path: path.map(Path::to_path_buf),
        })
    }

    fn write(&mut self, r: &AnomalyRecord) -> crate::Result<()> {
        writeln!(self.out, "{}", r.to_output_line())?;
        if self.path.is_none() {
            self.out.flush()?;
        }
        Ok(())
    }

    fn finish(mut self) -> CliResult<()> {
        self.out.flush().map_err(|e| CliError::Core(e.into()))
    }
}
