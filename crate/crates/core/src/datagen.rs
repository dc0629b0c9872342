//! Seeded synthetic fleets with labeled anomalies.
//!
//! Each hour of a meter follows its own linear recursion over the same hour
//! on previous days:
//!
//! ```text
//! clean[d,s] = w(d) * drift(d) * base[s] + sum_i alpha_i * y[d-i,s] + beta . XT(T[d,s])
//! y[d,s]     = max(clean[d,s] + sign * noise_scale * base[s] * exp(noise_sigma * z), 0)
//! ```
//!
//! where `w(d)` is the weekend multiplier on Saturdays and Sundays. The noise
//! has a random sign and a log-normal magnitude, so the log of the absolute
//! prediction error of a correctly specified model is close to
//! `N(ln(noise_scale * base[s]), noise_sigma^2)`.
//!
//! Every meter draws from its own RNG stream derived from the fleet seed and
//! the meter id, so the output does not depend on thread count or on which
//! other meters are generated.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use chrono::{Datelike, NaiveDate};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::formats;
use crate::parx::exogenous_features;
use crate::types::{is_weekend, ConsumptionSeries, HourStamp, TemperatureSeries, SEASONS};

pub const LABELS_HEADER: &str = "meter_id,stamp,kind,magnitude";
pub const READINGS_FILE: &str = "readings.csv";
pub const TEMPERATURE_FILE: &str = "temps.csv";
pub const LABELS_FILE: &str = "labels.csv";

/// Derive an RNG for one named stream of a seeded run.
pub fn stream_rng(seed: u64, stream: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(stream.as_bytes());
    let digest = h.finalize();
    let mut bytes = [0u8; 32];
    bytes.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(bytes)
}

/// Annual and diurnal sinusoids plus an AR(1) day-level weather anomaly and
/// hourly jitter.
#[derive(Debug, Clone, PartialEq)]
pub struct TemperatureModel {
    pub annual_mean: f64,
    pub annual_amplitude: f64,
    /// Day of year (1-based) of the coldest day.
    pub coldest_day: f64,
    pub diurnal_amplitude: f64,
    /// Hour of the coldest point of the day.
    pub coldest_hour: f64,
    pub weather_sd: f64,
    pub weather_persistence: f64,
    pub hourly_jitter: f64,
}

impl Default for TemperatureModel {
    fn default() -> Self {
        Self {
            annual_mean: 9.5,
            annual_amplitude: 5.5,
            coldest_day: 15.0,
            diurnal_amplitude: 3.0,
            coldest_hour: 4.0,
            weather_sd: 2.5,
            weather_persistence: 0.7,
            hourly_jitter: 0.5,
        }
    }
}

impl TemperatureModel {
    /// Noise-free model: sinusoids only.
    pub fn smooth(annual_mean: f64, annual_amplitude: f64, diurnal_amplitude: f64) -> Self {
        Self {
            annual_mean,
            annual_amplitude,
            diurnal_amplitude,
            weather_sd: 0.0,
            hourly_jitter: 0.0,
            ..Self::default()
        }
    }

    pub fn generate(&self, start: NaiveDate, days: usize, seed: u64) -> TemperatureSeries {
        let mut rng = stream_rng(seed, "temperature");
        let innovation = self.weather_sd * (1.0 - self.weather_persistence.powi(2)).max(0.0).sqrt();
        let mut weather = 0.0;
        let mut series = TemperatureSeries::new();
        for d in 0..days {
            let date = start + chrono::Days::new(d as u64);
            if d > 0 {
                let z: f64 = StandardNormal.sample(&mut rng);
                weather = self.weather_persistence * weather + innovation * z;
            }
            let doy = date.ordinal() as f64;
            let seasonal = self.annual_mean
                - self.annual_amplitude * (2.0 * PI * (doy - self.coldest_day) / 365.25).cos();
            for hour in 0..SEASONS as u8 {
                let diurnal = -self.diurnal_amplitude
                    * (2.0 * PI * (hour as f64 - self.coldest_hour) / 24.0).cos();
                let jitter: f64 = StandardNormal.sample(&mut rng);
                let t = seasonal + diurnal + weather + self.hourly_jitter * jitter;
                let stamp = HourStamp::new(date, hour).expect("hour in range");
                series.push(stamp, t).expect("stamps generated in order");
            }
        }
        series
    }
}

/// Linear ramp of the base load: factor 1 before `start_day`, reaching
/// `1 + increase` after `ramp_days` more days.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Drift {
    pub start_day: usize,
    pub ramp_days: usize,
    pub increase: f64,
}

impl Drift {
    pub fn factor(&self, day: usize) -> f64 {
        if day <= self.start_day {
            return 1.0;
        }
        let t = (day - self.start_day) as f64 / self.ramp_days.max(1) as f64;
        1.0 + self.increase * t.min(1.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeterProfile {
    pub meter_id: String,
    pub base_pattern: [f64; SEASONS],
    pub weekend_multiplier: f64,
    pub temp_betas: [f64; 3],
    pub ar_alphas: Vec<f64>,
    /// Standard deviation of the log noise magnitude.
    pub noise_sigma: f64,
    /// Typical noise magnitude as a fraction of the hour's base load.
    pub noise_scale: f64,
    pub drift: Option<Drift>,
    pub rng_seed: u64,
}

impl MeterProfile {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidInput(format!("{}: {msg}", self.meter_id)));
        if self.base_pattern.iter().any(|b| !b.is_finite() || *b < 0.0) {
            return bad("base pattern must be finite and non-negative".into());
        }
        if !(self.weekend_multiplier.is_finite() && self.weekend_multiplier >= 0.0) {
            return bad(format!("weekend multiplier {}", self.weekend_multiplier));
        }
        if self.ar_alphas.is_empty() {
            return bad("at least one autoregressive coefficient is required".into());
        }
        let mass: f64 = self.ar_alphas.iter().map(|a| a.abs()).sum();
        if !mass.is_finite() || mass >= 1.0 {
            return bad(format!("sum of |alpha| must be < 1, got {mass}"));
        }
        if self.temp_betas.iter().any(|b| !b.is_finite()) {
            return bad("non-finite temperature coefficient".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_scale >= 0.0)
            || !self.noise_sigma.is_finite()
            || !self.noise_scale.is_finite()
        {
            return bad("noise parameters must be finite and non-negative".into());
        }
        Ok(())
    }

    pub fn order(&self) -> usize {
        self.ar_alphas.len()
    }

    /// Generate `days` full days starting at `start`. Temperatures must
    /// cover every hour.
    pub fn generate(
        &self,
        start: NaiveDate,
        days: usize,
        temps: &TemperatureSeries,
    ) -> Result<ConsumptionSeries> {
        self.validate()?;
        let p = self.order();
        if days < p + 1 {
            return Err(Error::InvalidInput(format!(
                "need at least {} days for order {p}, got {days}",
                p + 1
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.rng_seed);
        let alpha_sum: f64 = self.ar_alphas.iter().sum();
        // Days before the start are assumed to sit at the stationary level
        // of the base load alone.
        let mut history: Vec<[f64; SEASONS]> = Vec::with_capacity(days);
        let prior: [f64; SEASONS] = std::array::from_fn(|s| self.base_pattern[s] / (1.0 - alpha_sum));
        let mut series = ConsumptionSeries::new(self.meter_id.clone());
        for d in 0..days {
            let date = start + chrono::Days::new(d as u64);
            let weekday_factor = if is_weekend(date) { self.weekend_multiplier } else { 1.0 };
            let level = weekday_factor * self.drift.map_or(1.0, |dr| dr.factor(d));
            let mut today = [0.0; SEASONS];
            for s in 0..SEASONS {
                let stamp = HourStamp::new(date, s as u8)?;
                let celsius = temps.get(stamp).ok_or_else(|| {
                    Error::InvalidInput(format!("no temperature for {stamp}"))
                })?;
                let xt = exogenous_features(celsius)?.as_array();
                let mut clean = level * self.base_pattern[s];
                for (i, alpha) in self.ar_alphas.iter().enumerate() {
                    let lag = if d > i { history[d - 1 - i][s] } else { prior[s] };
                    clean += alpha * lag;
                }
                clean += self.temp_betas.iter().zip(xt).map(|(b, x)| b * x).sum::<f64>();
                let z: f64 = StandardNormal.sample(&mut rng);
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                let noise = sign * self.noise_scale * self.base_pattern[s] * (self.noise_sigma * z).exp();
                let y = (clean + noise).max(0.0);
                today[s] = y;
                series.push(stamp, y)?;
            }
            history.push(today);
        }
        Ok(series)
    }
}

/// Ranges from which per-meter profiles are drawn.
#[derive(Debug, Clone, PartialEq)]
pub struct FleetTemplate {
    /// Multiplier range applied to the shared daily shape.
    pub scale_range: (f64, f64),
    pub weekend_multiplier: f64,
    /// Temperature coefficients per unit of scale.
    pub temp_betas: [f64; 3],
    /// Relative jitter on the temperature coefficients.
    pub beta_jitter: f64,
    pub ar_alphas: Vec<f64>,
    pub noise_sigma: f64,
    pub noise_scale: f64,
    pub drift: Option<Drift>,
}

impl Default for FleetTemplate {
    fn default() -> Self {
        Self {
            scale_range: (0.5, 1.5),
            weekend_multiplier: 1.0,
            temp_betas: [0.02, 0.05, 0.4],
            beta_jitter: 0.2,
            ar_alphas: vec![0.2, 0.1, 0.05],
            noise_sigma: 0.25,
            noise_scale: 0.3,
            drift: None,
        }
    }
}

/// Household-like daily shape: overnight base, morning and evening peaks.
pub fn daily_shape() -> [f64; SEASONS] {
    std::array::from_fn(|h| {
        let h = h as f64;
        let bump = |center: f64, width: f64| (-0.5 * ((h - center) / width).powi(2)).exp();
        0.35 + 0.35 * bump(8.0, 1.5) + 0.65 * bump(19.0, 2.0) + 0.15 * bump(13.0, 2.5)
    })
}

pub fn meter_name(index: usize) -> String {
    format!("m{index:05}")
}

impl FleetTemplate {
    pub fn profile(&self, meter_id: &str, seed: u64) -> MeterProfile {
        let mut rng = stream_rng(seed, &format!("profile/{meter_id}"));
        let (lo, hi) = self.scale_range;
        let scale = if hi > lo { rng.random_range(lo..hi) } else { lo };
        let shape = daily_shape();
        let mut jitter = || 1.0 + self.beta_jitter * (2.0 * rng.random::<f64>() - 1.0);
        let temp_betas = std::array::from_fn(|i| scale * self.temp_betas[i] * jitter());
        let rng_seed = rng.random();
        MeterProfile {
            meter_id: meter_id.to_string(),
            base_pattern: shape.map(|v| scale * v),
            weekend_multiplier: self.weekend_multiplier,
            temp_betas,
            ar_alphas: self.ar_alphas.clone(),
            noise_sigma: self.noise_sigma,
            noise_scale: self.noise_scale,
            drift: self.drift,
            rng_seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AnomalyKind {
    Spike,
    Drop,
}

impl AnomalyKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AnomalyKind::Spike => "spike",
            AnomalyKind::Drop => "drop",
        }
    }
}

impl fmt::Display for AnomalyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AnomalyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spike" => Ok(AnomalyKind::Spike),
            "drop" => Ok(AnomalyKind::Drop),
            other => Err(Error::InvalidInput(format!("unknown anomaly kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InjectedAnomaly {
    pub meter_id: String,
    pub stamp: HourStamp,
    pub kind: AnomalyKind,
    pub magnitude: f64,
}

impl InjectedAnomaly {
    pub fn validate(&self) -> Result<()> {
        let ok = match self.kind {
            AnomalyKind::Spike => self.magnitude > 1.0,
            AnomalyKind::Drop => self.magnitude >= 0.0 && self.magnitude < 1.0,
        };
        if !ok || !self.magnitude.is_finite() {
            return Err(Error::InvalidInput(format!(
                "{} magnitude {} out of range",
                self.kind, self.magnitude
            )));
        }
        Ok(())
    }
}

/// Apply anomalies to one series. Every anomaly must target this meter, an
/// existing stamp, and each stamp at most once.
pub fn inject(series: &ConsumptionSeries, anomalies: &[InjectedAnomaly]) -> Result<ConsumptionSeries> {
    let mut by_stamp = BTreeMap::new();
    for a in anomalies {
        a.validate()?;
        if a.meter_id != series.meter_id() {
            return Err(Error::InvalidInput(format!(
                "anomaly for {} applied to {}",
                a.meter_id,
                series.meter_id()
            )));
        }
        if series.get(a.stamp).is_none() {
            return Err(Error::InvalidInput(format!("no reading at {} to alter", a.stamp)));
        }
        if by_stamp.insert(a.stamp, a.magnitude).is_some() {
            return Err(Error::InvalidInput(format!("duplicate injection at {}", a.stamp)));
        }
    }
    series.map_values(|stamp, kwh| by_stamp.get(&stamp).map_or(kwh, |m| kwh * m))
}

/// How many readings of each meter to alter at random.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InjectionPlan {
    pub rate: f64,
    pub kind: AnomalyKind,
    pub magnitude: f64,
}

impl Default for InjectionPlan {
    fn default() -> Self {
        Self {
            rate: 0.005,
            kind: AnomalyKind::Spike,
            magnitude: 5.0,
        }
    }
}

impl InjectionPlan {
    /// `floor(rate * len)` distinct stamps drawn uniformly.
    pub fn draw(&self, series: &ConsumptionSeries, seed: u64) -> Vec<InjectedAnomaly> {
        let n = series.len();
        let count = ((self.rate * n as f64).floor() as usize).min(n);
        let mut rng = stream_rng(seed, &format!("inject/{}", series.meter_id()));
        let mut picks = sample(&mut rng, n, count).into_vec();
        picks.sort_unstable();
        picks
            .into_iter()
            .map(|i| InjectedAnomaly {
                meter_id: series.meter_id().to_string(),
                stamp: series.points()[i].0,
                kind: self.kind,
                magnitude: self.magnitude,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FleetSpec {
    pub n_meters: usize,
    pub start: NaiveDate,
    pub days: usize,
    pub seed: u64,
    pub template: FleetTemplate,
    pub temperature: TemperatureModel,
    pub injection: Option<InjectionPlan>,
}

impl FleetSpec {
    pub fn new(n_meters: usize, days: usize, seed: u64) -> Self {
        Self {
            n_meters,
            start: NaiveDate::from_ymd_opt(2024, 1, 1).expect("valid date"),
            days,
            seed,
            template: FleetTemplate::default(),
            temperature: TemperatureModel::default(),
            injection: Some(InjectionPlan::default()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedFleet {
    pub temperatures: TemperatureSeries,
    pub profiles: Vec<MeterProfile>,
    /// Observed series, anomalies included.
    pub series: Vec<ConsumptionSeries>,
    pub labels: Vec<InjectedAnomaly>,
}

impl GeneratedFleet {
    pub fn label_set(&self) -> BTreeSet<(String, HourStamp)> {
        label_set(&self.labels)
    }

    pub fn n_readings(&self) -> usize {
        self.series.iter().map(ConsumptionSeries::len).sum()
    }

    /// Write readings, temperatures and labels into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        formats::write_readings(&dir.join(READINGS_FILE), &self.series)?;
        formats::write_temperatures(&dir.join(TEMPERATURE_FILE), &self.temperatures)?;
        write_labels(&dir.join(LABELS_FILE), &self.labels)
    }
}

pub fn label_set(labels: &[InjectedAnomaly]) -> BTreeSet<(String, HourStamp)> {
    labels.iter().map(|l| (l.meter_id.clone(), l.stamp)).collect()
}

pub fn generate_fleet(spec: &FleetSpec) -> Result<GeneratedFleet> {
    if spec.n_meters == 0 {
        return Err(Error::InvalidInput("fleet needs at least one meter".into()));
    }
    let p = spec.template.ar_alphas.len();
    if spec.days < p + 1 {
        return Err(Error::InvalidInput(format!(
            "need at least {} days for order {p}, got {}",
            p + 1,
            spec.days
        )));
    }
    let temperatures = spec.temperature.generate(spec.start, spec.days, spec.seed);
    let per_meter: Vec<(MeterProfile, ConsumptionSeries, Vec<InjectedAnomaly>)> = (0..spec.n_meters)
        .into_par_iter()
        .map(|i| {
            let profile = spec.template.profile(&meter_name(i), spec.seed);
            let clean = profile.generate(spec.start, spec.days, &temperatures)?;
            let labels = spec
                .injection
                .map(|plan| plan.draw(&clean, spec.seed))
                .unwrap_or_default();
            let observed = inject(&clean, &labels)?;
            Ok((profile, observed, labels))
        })
        .collect::<Result<_>>()?;
    let mut fleet = GeneratedFleet {
        temperatures,
        profiles: Vec::with_capacity(spec.n_meters),
        series: Vec::with_capacity(spec.n_meters),
        labels: Vec::new(),
    };
    for (profile, series, labels) in per_meter {
        fleet.profiles.push(profile);
        fleet.series.push(series);
        fleet.labels.extend(labels);
    }
    Ok(fleet)
}

pub fn write_labels(path: &Path, labels: &[InjectedAnomaly]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut write = || -> std::io::Result<()> {
        writeln!(w, "{LABELS_HEADER}")?;
        for l in labels {
            writeln!(w, "{},{},{},{}", l.meter_id, l.stamp, l.kind, l.magnitude)?;
        }
        w.flush()
    };
    write().map_err(|e| Error::io(path, e))
}

pub fn read_labels(path: &Path) -> Result<Vec<InjectedAnomaly>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let source = path.display().to_string();
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim();
        let location = format!("{source}:{}", i + 1);
        if i == 0 {
            if line != LABELS_HEADER {
                return Err(Error::parse(location, format!("expected header {LABELS_HEADER:?}")));
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let [meter, stamp, kind, magnitude] = fields[..] else {
            return Err(Error::parse(location, "expected 4 fields"));
        };
        let parse_err = |e: &dyn fmt::Display| Error::parse(location.clone(), e.to_string());
        out.push(InjectedAnomaly {
            meter_id: meter.to_string(),
            stamp: stamp.parse().map_err(|e: Error| parse_err(&e))?,
            kind: kind.parse().map_err(|e: Error| parse_err(&e))?,
            magnitude: magnitude
                .parse()
                .map_err(|e: std::num::ParseFloatError| parse_err(&e))?,
        });
    }
    Ok(out)
}
