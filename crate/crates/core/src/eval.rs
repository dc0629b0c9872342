//! Experiments against generator ground truth: confusion metrics, threshold
//! sweeps, day-type comparison, model refresh schedules, residual shape,
//! boxplot comparison and wall-time scaling.
//!
//! Reports render as CSV so they can be plotted elsewhere.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::time::Instant;

use crate::baseline::detect_boxplot;
use crate::datagen::{generate_fleet, FleetSpec};
use crate::error::{Error, Result};
use crate::parx::build_problem;
use crate::residual::{log_l1_residual, DetectorConfig};
use crate::stream::{batches_from_readings, AnomalyRecord, StreamDetector};
use crate::trainer::{train_fleet, ModelSnapshot};
use crate::types::{ConsumptionSeries, DayType, DayTypePolicy, HourStamp, Season, TemperatureSeries};

pub type LabelSet = BTreeSet<(String, HourStamp)>;

/// Hour-level confusion counts and the derived rates. Precision is 0 when
/// nothing was flagged, recall is 0 when nothing was labeled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Metrics {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            true_positives: tp,
            false_positives: fp,
            false_negatives: fn_,
            precision,
            recall,
            f1,
        }
    }

    pub fn flagged(&self) -> usize {
        self.true_positives + self.false_positives
    }
}

pub fn evaluate(labels: &LabelSet, flagged: &LabelSet) -> Metrics {
    let tp = flagged.intersection(labels).count();
    Metrics::from_counts(tp, flagged.len() - tp, labels.len() - tp)
}

/// Keep only entries stamped at or after `from`.
pub fn since(set: &LabelSet, from: HourStamp) -> LabelSet {
    set.iter().filter(|(_, s)| *s >= from).cloned().collect()
}

pub fn flagged_set(records: &[AnomalyRecord]) -> LabelSet {
    records.iter().map(|r| (r.meter_id.clone(), r.stamp)).collect()
}

/// Stream every reading through a fresh detector against one snapshot.
/// Readings before `score_from` only warm the windows.
pub fn replay(
    series: &[ConsumptionSeries],
    temps: &TemperatureSeries,
    snapshot: &ModelSnapshot,
    config: &DetectorConfig,
    score_from: Option<HourStamp>,
) -> Result<Vec<AnomalyRecord>> {
    let mut detector = StreamDetector::new(config.clone())?;
    let readings = series.iter().flat_map(ConsumptionSeries::readings);
    let mut out = Vec::new();
    for batch in batches_from_readings(readings) {
        if score_from.is_some_and(|from| batch.stamp < from) {
            for (meter, kwh) in &batch.readings {
                detector.ingest(meter, batch.stamp, *kwh);
            }
            continue;
        }
        out.extend(detector.process_hour(batch, temps, Some(snapshot))?);
    }
    out.extend(detector.drain_pending(temps, Some(snapshot), None)?);
    Ok(out)
}

fn first_stamp(series: &[ConsumptionSeries]) -> Result<HourStamp> {
    series
        .iter()
        .filter_map(ConsumptionSeries::first_stamp)
        .min()
        .ok_or_else(|| Error::InvalidInput("no readings".into()))
}

/// Train on the full history, then replay it scoring from day
/// `warmup_days` on.
pub fn detect_after_warmup(
    series: &[ConsumptionSeries],
    temps: &TemperatureSeries,
    config: &DetectorConfig,
    warmup_days: i64,
    parallelism: usize,
) -> Result<(ModelSnapshot, Vec<AnomalyRecord>, HourStamp)> {
    let snapshot = train_fleet(series, temps, config, parallelism)?;
    let from = first_stamp(series)?.add_days(warmup_days);
    let records = replay(series, temps, &snapshot, config, Some(from))?;
    Ok((snapshot, records, from))
}

/// Anomaly count per threshold, one model fit shared by all thresholds.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub rows: Vec<(f64, usize)>,
}

impl SweepReport {
    pub fn counts(&self) -> Vec<usize> {
        self.rows.iter().map(|r| r.1).collect()
    }

    pub fn is_monotone(&self) -> bool {
        let mut rows = self.rows.clone();
        rows.sort_by(|a, b| a.0.total_cmp(&b.0));
        rows.windows(2).all(|w| w[0].1 <= w[1].1)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("epsilon,anomalies\n");
        for (eps, n) in &self.rows {
            let _ = writeln!(s, "{eps},{n}");
        }
        s
    }
}

pub fn sweep_epsilon(
    series: &[ConsumptionSeries],
    temps: &TemperatureSeries,
    config: &DetectorConfig,
    epsilons: &[f64],
    warmup_days: i64,
    parallelism: usize,
) -> Result<SweepReport> {
    let snapshot = train_fleet(series, temps, config, parallelism)?;
    let from = first_stamp(series)?.add_days(warmup_days);
    let rows = epsilons
        .iter()
        .map(|&eps| {
            let cfg = config.clone().with_epsilon(eps);
            replay(series, temps, &snapshot, &cfg, Some(from)).map(|r| (eps, r.len()))
        })
        .collect::<Result<_>>()?;
    Ok(SweepReport { rows })
}

/// Counts per threshold under one model per hour versus separate workday
/// and weekend/holiday models.
#[derive(Debug, Clone, PartialEq)]
pub struct DayTypeReport {
    pub all_days: SweepReport,
    pub split: SweepReport,
}

impl DayTypeReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epsilon,all_days,split\n");
        for ((eps, a), (_, b)) in self.all_days.rows.iter().zip(&self.split.rows) {
            let _ = writeln!(s, "{eps},{a},{b}");
        }
        s
    }
}

pub fn compare_day_types(
    series: &[ConsumptionSeries],
    temps: &TemperatureSeries,
    config: &DetectorConfig,
    epsilons: &[f64],
    warmup_days: i64,
    parallelism: usize,
) -> Result<DayTypeReport> {
    let run = |policy| {
        let cfg = config.clone().with_policy(policy);
        sweep_epsilon(series, temps, &cfg, epsilons, warmup_days, parallelism)
    };
    Ok(DayTypeReport {
        all_days: run(DayTypePolicy::Unified)?,
        split: run(DayTypePolicy::Split)?,
    })
}

/// How often the models are rebuilt while the stream runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RefreshSchedule {
    EveryDays(u32),
    Never,
}

impl RefreshSchedule {
    pub const DAILY: RefreshSchedule = RefreshSchedule::EveryDays(1);

    pub fn label(&self) -> String {
        match self {
            RefreshSchedule::EveryDays(1) => "daily".into(),
            RefreshSchedule::EveryDays(n) => format!("every-{n}-days"),
            RefreshSchedule::Never => "never".into(),
        }
    }
}

/// Stream the data day by day from `warmup_days` on, retraining on
/// everything received so far on the schedule. The first model is trained
/// on the warm-up days for every schedule.
pub fn replay_with_refresh(
    series: &[ConsumptionSeries],
    temps: &TemperatureSeries,
    config: &DetectorConfig,
    schedule: RefreshSchedule,
    warmup_days: i64,
    parallelism: usize,
) -> Result<Vec<AnomalyRecord>> {
    let start = first_stamp(series)?;
    let from = start.add_days(warmup_days);
    let history = |until: HourStamp| -> Vec<ConsumptionSeries> {
        series
            .iter()
            .map(|s| s.truncated(until.add_hours(-1)))
            .filter(|s| !s.is_empty())
            .collect()
    };
    let mut snapshot = train_fleet(&history(from), temps, config, parallelism)?;
    let mut detector = StreamDetector::new(config.clone())?;
    let readings = series.iter().flat_map(ConsumptionSeries::readings);
    let mut out = Vec::new();
    let mut trained_at = from.date();
    for batch in batches_from_readings(readings) {
        if batch.stamp < from {
            for (meter, kwh) in &batch.readings {
                detector.ingest(meter, batch.stamp, *kwh);
            }
            continue;
        }
        if let RefreshSchedule::EveryDays(k) = schedule {
            let due = batch.stamp.hour() == 0
                && (batch.stamp.date() - trained_at).num_days() >= i64::from(k.max(1));
            if due {
                snapshot = train_fleet(&history(batch.stamp), temps, config, parallelism)?;
                trained_at = batch.stamp.date();
            }
        }
        out.extend(detector.process_hour(batch, temps, Some(&snapshot))?);
    }
    out.extend(detector.drain_pending(temps, Some(&snapshot), None)?);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefreshReport {
    pub rows: Vec<(RefreshSchedule, usize)>,
}

impl RefreshReport {
    pub fn count(&self, schedule: RefreshSchedule) -> Option<usize> {
        self.rows.iter().find(|r| r.0 == schedule).map(|r| r.1)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("schedule,anomalies\n");
        for (sched, n) in &self.rows {
            let _ = writeln!(s, "{},{n}", sched.label());
        }
        s
    }
}

pub fn refresh_study(
    series: &[ConsumptionSeries],
    temps: &TemperatureSeries,
    config: &DetectorConfig,
    schedules: &[RefreshSchedule],
    warmup_days: i64,
    parallelism: usize,
) -> Result<RefreshReport> {
    let rows = schedules
        .iter()
        .map(|&sched| {
            replay_with_refresh(series, temps, config, sched, warmup_days, parallelism)
                .map(|r| (sched, r.len()))
        })
        .collect::<Result<_>>()?;
    Ok(RefreshReport { rows })
}

/// Population moments of a sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Moments {
    pub n: usize,
    pub mean: f64,
    pub sd: f64,
    pub skewness: f64,
    pub excess_kurtosis: f64,
}

pub fn moments(values: &[f64]) -> Result<Moments> {
    if values.is_empty() {
        return Err(Error::InsufficientData { rows: 0, needed: 1 });
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let central = |k: i32| values.iter().map(|v| (v - mean).powi(k)).sum::<f64>() / n;
    let m2 = central(2);
    let (skewness, excess_kurtosis) = if m2 > 0.0 {
        (central(3) / m2.powf(1.5), central(4) / (m2 * m2) - 3.0)
    } else {
        (0.0, 0.0)
    };
    Ok(Moments {
        n: values.len(),
        mean,
        sd: m2.sqrt(),
        skewness,
        excess_kurtosis,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub bins: Vec<Bin>,
    pub moments: Moments,
}

impl Histogram {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("lower,upper,count\n");
        for b in &self.bins {
            let _ = writeln!(s, "{},{},{}", b.lower, b.upper, b.count);
        }
        s
    }
}

/// Equal-width bins over the sample range. A constant sample lands in the
/// first bin.
pub fn histogram(values: &[f64], n_bins: usize) -> Result<Histogram> {
    if n_bins == 0 {
        return Err(Error::InvalidInput("need at least one bin".into()));
    }
    let moments = moments(values)?;
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo) / n_bins as f64;
    let mut bins: Vec<Bin> = (0..n_bins)
        .map(|i| Bin {
            lower: lo + width * i as f64,
            upper: if i + 1 == n_bins { hi } else { lo + width * (i + 1) as f64 },
            count: 0,
        })
        .collect();
    for v in values {
        let i = if width > 0.0 {
            (((v - lo) / width) as usize).min(n_bins - 1)
        } else {
            0
        };
        bins[i].count += 1;
    }
    Ok(Histogram { bins, moments })
}

/// In-sample log-residuals of one meter, for one season or all of them.
pub fn meter_log_residuals(
    series: &ConsumptionSeries,
    temps: &TemperatureSeries,
    config: &DetectorConfig,
    season: Option<Season>,
) -> Result<Vec<f64>> {
    let calendar = config.calendar();
    let seasons: Vec<Season> = match season {
        Some(s) => vec![s],
        None => Season::all().collect(),
    };
    let mut out = Vec::new();
    for s in seasons {
        for &day_type in DayType::cells(config.day_type_policy) {
            let problem =
                build_problem(series, temps, s, day_type, &calendar, config.order_p, config.fit_intercept)?;
            let w = crate::parx::fit_ols(&problem)?;
            let fitted = problem.fitted_values(&w);
            out.extend(
                problem
                    .target()
                    .iter()
                    .zip(fitted)
                    .map(|(&y, f)| log_l1_residual(y, f, config.residual_floor)),
            );
        }
    }
    Ok(out)
}

pub fn residual_histogram(
    series: &ConsumptionSeries,
    temps: &TemperatureSeries,
    config: &DetectorConfig,
    season: Option<Season>,
    n_bins: usize,
) -> Result<Histogram> {
    histogram(&meter_log_residuals(series, temps, config, season)?, n_bins)
}

/// Statistical detector and per-hour boxplot fences on the same data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaselineComparison {
    pub statistical: Metrics,
    pub boxplot: Metrics,
}

impl BaselineComparison {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("detector,flagged,true_positives,precision,recall,f1\n");
        for (name, m) in [("statistical", self.statistical), ("boxplot", self.boxplot)] {
            let _ = writeln!(
                s,
                "{name},{},{},{:.4},{:.4},{:.4}",
                m.flagged(),
                m.true_positives,
                m.precision,
                m.recall,
                m.f1
            );
        }
        s
    }
}

pub fn boxplot_flags(series: &[ConsumptionSeries]) -> Result<LabelSet> {
    let mut out = LabelSet::new();
    for s in series {
        for stamp in detect_boxplot(s)?.all() {
            out.insert((s.meter_id().to_string(), stamp));
        }
    }
    Ok(out)
}

/// Both detectors scored from `from` on against `labels`.
pub fn compare_with_boxplot(
    series: &[ConsumptionSeries],
    records: &[AnomalyRecord],
    labels: &LabelSet,
    from: HourStamp,
) -> Result<BaselineComparison> {
    let labels = since(labels, from);
    Ok(BaselineComparison {
        statistical: evaluate(&labels, &since(&flagged_set(records), from)),
        boxplot: evaluate(&labels, &since(&boxplot_flags(series)?, from)),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalingPoint {
    pub meters: usize,
    pub train_secs: f64,
    /// Scoring the final day, 24 hourly batches.
    pub detect_secs: f64,
    pub slowest_hour_secs: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingReport {
    pub points: Vec<ScalingPoint>,
}

impl ScalingReport {
    /// Train-time ratio between consecutive sizes.
    pub fn train_ratios(&self) -> Vec<f64> {
        self.points
            .windows(2)
            .map(|w| w[1].train_secs / w[0].train_secs)
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("meters,train_secs,detect_secs,slowest_hour_secs\n");
        for p in &self.points {
            let _ = writeln!(
                s,
                "{},{:.4},{:.4},{:.4}",
                p.meters, p.train_secs, p.detect_secs, p.slowest_hour_secs
            );
        }
        s
    }
}

/// Generate a fleet per size (untimed), then time training and the
/// scoring of the last day.
pub fn scaling_run(
    meter_counts: &[usize],
    days: usize,
    seed: u64,
    config: &DetectorConfig,
    parallelism: usize,
) -> Result<ScalingReport> {
    let mut points = Vec::new();
    for &meters in meter_counts {
        let mut spec = FleetSpec::new(meters, days, seed);
        spec.injection = None;
        let fleet = generate_fleet(&spec)?;

        let t0 = Instant::now();
        let snapshot = train_fleet(&fleet.series, &fleet.temperatures, config, parallelism)?;
        let train_secs = t0.elapsed().as_secs_f64();

        let last_day = first_stamp(&fleet.series)?.add_days(days as i64 - 1);
        let mut detector = StreamDetector::new(config.clone())?;
        let readings = fleet.series.iter().flat_map(ConsumptionSeries::readings);
        let mut detect_secs = 0.0;
        let mut slowest_hour_secs: f64 = 0.0;
        for batch in batches_from_readings(readings) {
            if batch.stamp < last_day {
                for (meter, kwh) in &batch.readings {
                    detector.ingest(meter, batch.stamp, *kwh);
                }
                continue;
            }
            let t = Instant::now();
            detector.process_hour(batch, &fleet.temperatures, Some(&snapshot))?;
            let secs = t.elapsed().as_secs_f64();
            detect_secs += secs;
            slowest_hour_secs = slowest_hour_secs.max(secs);
        }
        points.push(ScalingPoint {
            meters,
            train_secs,
            detect_secs,
            slowest_hour_secs,
        });
    }
    Ok(ScalingReport { points })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key(m: &str, day: u32, hour: u8) -> (String, HourStamp) {
        (m.to_string(), HourStamp::ymdh(2024, 3, day, hour))
    }

    #[test]
    fn perfect_and_empty_detectors() {
        let labels: LabelSet = [key("a", 1, 1), key("b", 2, 5)].into_iter().collect();
        let m = evaluate(&labels, &labels);
        assert_eq!((m.precision, m.recall, m.f1), (1.0, 1.0, 1.0));
        let m = evaluate(&labels, &LabelSet::new());
        assert_eq!((m.recall, m.precision, m.false_negatives), (0.0, 0.0, 2));
    }

    #[test]
    fn mixed_counts() {
        let labels: LabelSet = [key("a", 1, 1), key("a", 1, 2), key("b", 1, 1)].into_iter().collect();
        let flagged: LabelSet = [key("a", 1, 1), key("b", 1, 2)].into_iter().collect();
        let m = evaluate(&labels, &flagged);
        assert_eq!((m.true_positives, m.false_positives, m.false_negatives), (1, 1, 2));
        assert_eq!(m.precision, 0.5);
        assert!((m.recall - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn moments_of_symmetric_sample() {
        let m = moments(&[-2.0, -1.0, 0.0, 1.0, 2.0]).unwrap();
        assert_eq!(m.mean, 0.0);
        assert_eq!(m.skewness, 0.0);
        assert!((m.sd - 2f64.sqrt()).abs() < 1e-15);
        // m4 = 34/5, m2^2 = 4
        assert!((m.excess_kurtosis - (34.0 / 5.0 / 4.0 - 3.0)).abs() < 1e-12);
    }

    #[test]
    fn histogram_shapes() {
        let h = histogram(&[1.0; 10], 5).unwrap();
        assert_eq!(h.bins.len(), 5);
        assert_eq!(h.bins.iter().filter(|b| b.count > 0).count(), 1);
        let h = histogram(&[0.0, 0.5, 1.0, 1.0], 2).unwrap();
        assert_eq!(h.bins.iter().map(|b| b.count).collect::<Vec<_>>(), vec![1, 3]);
        assert_eq!(h.to_csv().lines().count(), 3);
    }

    #[test]
    fn refresh_labels() {
        assert_eq!(RefreshSchedule::DAILY.label(), "daily");
        assert_eq!(RefreshSchedule::EveryDays(10).label(), "every-10-days");
        assert_eq!(RefreshSchedule::Never.label(), "never");
    }
}
