//! Speed layer: per-meter sliding windows over the last `p` days at each hour
//! and hourly scoring of incoming readings against the live snapshot.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::io::BufRead;
use std::path::PathBuf;
use std::sync::Mutex;

use chrono::{Duration, NaiveDate};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::formats;
use crate::residual::{classify_score, score, DetectorConfig, Verdict};
use crate::store::ServingStore;
use crate::trainer::ModelSnapshot;
use crate::types::{HourStamp, MeterReading, Season, SEASONS};

/// Batches at least this large are scored on the rayon pool.
const PARALLEL_BATCH: usize = 512;

/// One flagged reading.
#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyRecord {
    pub meter_id: String,
    pub stamp: HourStamp,
    pub season: Season,
    pub actual: f64,
    pub predicted: f64,
    /// Density of the log-residual; always below `epsilon_used`.
    pub score: f64,
    pub epsilon_used: f64,
    pub model_version: u64,
}

pub const ANOMALY_HEADER: &str = "meter_id,stamp,season,actual,predicted,score,model_version";

impl AnomalyRecord {
    /// `meter_id,stamp,season,actual,predicted,score,model_version`
    pub fn to_output_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.meter_id,
            self.stamp,
            self.season,
            self.actual,
            self.predicted,
            self.score,
            self.model_version
        )
    }

    /// Output line plus the epsilon it was judged against.
    pub fn to_store_line(&self) -> String {
        format!("{},{}", self.to_output_line(), self.epsilon_used)
    }

    pub fn parse_store_line(line: &str) -> Result<Self> {
        let cols: Vec<&str> = line.trim().split(',').collect();
        if cols.len() != 8 {
            return Err(Error::parse(line, "anomaly record needs 8 fields"));
        }
        let num = |i: usize| -> Result<f64> {
            cols[i]
                .parse()
                .map_err(|e| Error::parse(line, format!("field {i}: {e}")))
        };
        let season: u8 = cols[2]
            .parse()
            .map_err(|e| Error::parse(line, format!("season: {e}")))?;
        Ok(Self {
            meter_id: cols[0].to_string(),
            stamp: cols[1].parse()?,
            season: Season::new(season)?,
            actual: num(3)?,
            predicted: num(4)?,
            score: num(5)?,
            model_version: cols[6]
                .parse()
                .map_err(|e| Error::parse(line, format!("model_version: {e}")))?,
            epsilon_used: num(7)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IngestOutcome {
    Inserted,
    /// Same stamp seen before; the new value replaced it.
    Replaced,
    /// Older than anything the window can still use.
    DroppedTooOld,
}

/// The last `order` readings for each hour-of-day of one meter.
///
/// A reading is dropped when its date is more than `order` days before the
/// newest date seen, or when its season already holds `order` newer dates.
#[derive(Debug, Clone)]
pub struct MeterWindow {
    meter_id: String,
    order: usize,
    // Per season, ascending by date, at most `order` entries.
    seasons: Vec<Vec<(NaiveDate, f64)>>,
    last_updated: Option<HourStamp>,
}

impl MeterWindow {
    pub fn new(meter_id: impl Into<String>, order: usize) -> Self {
        assert!(order >= 1, "window order must be >= 1");
        Self {
            meter_id: meter_id.into(),
            order,
            seasons: (0..SEASONS).map(|_| Vec::with_capacity(order + 1)).collect(),
            last_updated: None,
        }
    }

    pub fn meter_id(&self) -> &str {
        &self.meter_id
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn last_updated(&self) -> Option<HourStamp> {
        self.last_updated
    }

    /// Total readings held across all seasons.
    pub fn len(&self) -> usize {
        self.seasons.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn ingest(&mut self, stamp: HourStamp, kwh: f64) -> IngestOutcome {
        let date = stamp.date();
        if let Some(newest) = self.last_updated {
            if date < newest.date() - Duration::days(self.order as i64) {
                return IngestOutcome::DroppedTooOld;
            }
        }
        let buf = &mut self.seasons[stamp.season().index()];
        match buf.binary_search_by_key(&date, |e| e.0) {
            Ok(i) => {
                buf[i].1 = kwh;
                return IngestOutcome::Replaced;
            }
            Err(i) => {
                if i == 0 && buf.len() >= self.order {
                    return IngestOutcome::DroppedTooOld;
                }
                buf.insert(i, (date, kwh));
                if buf.len() > self.order {
                    buf.remove(0);
                }
            }
        }
        if self.last_updated.is_none_or(|l| stamp > l) {
            self.last_updated = Some(stamp);
        }
        IngestOutcome::Inserted
    }

    /// Readings at `season` on the `order` days before `date`, most recent
    /// first; `None` unless all of them are present.
    pub fn lags(&self, season: Season, date: NaiveDate) -> Option<Vec<f64>> {
        self.lags_of(season, date, self.order)
    }

    pub fn lags_of(&self, season: Season, date: NaiveDate, order: usize) -> Option<Vec<f64>> {
        if order > self.order {
            return None;
        }
        let buf = &self.seasons[season.index()];
        (1..=order as i64)
            .map(|k| {
                let want = date - Duration::days(k);
                buf.binary_search_by_key(&want, |e| e.0).ok().map(|i| buf[i].1)
            })
            .collect()
    }

    /// Everything held for `season`, most recent first.
    pub fn recent(&self, season: Season) -> Vec<(NaiveDate, f64)> {
        self.seasons[season.index()].iter().rev().copied().collect()
    }
}

/// Running tallies kept by the detector.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StreamCounters {
    pub hours: u64,
    pub ingested: u64,
    pub duplicates: u64,
    pub dropped_too_old: u64,
    pub scored: u64,
    pub anomalies: u64,
    pub skipped_no_model: u64,
    pub skipped_incomplete_lags: u64,
    pub deferred_hours: u64,
    pub expired_deferrals: u64,
    pub unscored_no_snapshot: u64,
    pub stale_refreshes: u64,
}

/// All readings sharing one hour stamp.
#[derive(Debug, Clone, PartialEq)]
pub struct HourBatch {
    pub stamp: HourStamp,
    pub readings: Vec<(String, f64)>,
}

impl HourBatch {
    pub fn new(stamp: HourStamp) -> Self {
        Self {
            stamp,
            readings: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.readings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.readings.is_empty()
    }
}

/// Group readings into hourly batches ordered by stamp.
pub fn batches_from_readings(readings: impl IntoIterator<Item = MeterReading>) -> Vec<HourBatch> {
    let mut by_stamp: BTreeMap<HourStamp, HourBatch> = BTreeMap::new();
    for r in readings {
        by_stamp
            .entry(r.stamp)
            .or_insert_with(|| HourBatch::new(r.stamp))
            .readings
            .push((r.meter_id, r.kwh));
    }
    by_stamp.into_values().collect()
}

/// Cuts a time-ordered stream of readings into hourly batches: a batch is
/// emitted when a reading with a different stamp arrives or the input ends.
pub struct HourBatcher<I> {
    inner: I,
    current: Option<HourBatch>,
    done: bool,
}

impl<I> HourBatcher<I> {
    pub fn new(inner: I) -> Self {
        Self {
            inner,
            current: None,
            done: false,
        }
    }
}

impl<I: Iterator<Item = Result<MeterReading>>> Iterator for HourBatcher<I> {
    type Item = Result<HourBatch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return self.current.take().map(Ok);
        }
        loop {
            match self.inner.next() {
                None => {
                    self.done = true;
                    return self.current.take().map(Ok);
                }
                Some(Err(e)) => return Some(Err(e)),
                Some(Ok(r)) => match &mut self.current {
                    Some(b) if b.stamp == r.stamp => b.readings.push((r.meter_id, r.kwh)),
                    slot => {
                        let mut fresh = HourBatch::new(r.stamp);
                        fresh.readings.push((r.meter_id, r.kwh));
                        if let Some(prev) = slot.replace(fresh) {
                            return Some(Ok(prev));
                        }
                    }
                },
            }
        }
    }
}

/// Readings from a line stream in the readings-file format. A header line
/// is skipped; blank lines are ignored.
pub fn reading_lines<R: BufRead>(reader: R) -> impl Iterator<Item = Result<MeterReading>> {
    reader.lines().filter_map(|line| match line {
        Err(e) => Some(Err(e.into())),
        Ok(l) if l.trim().is_empty() || formats::is_readings_header(&l) => None,
        Ok(l) => Some(formats::parse_reading_line(&l)),
    })
}

/// Where the detector gets the hour's outdoor temperature.
pub trait TemperatureLookup {
    fn temperature_at(&self, stamp: HourStamp) -> Option<f64>;
}

impl TemperatureLookup for crate::types::TemperatureSeries {
    fn temperature_at(&self, stamp: HourStamp) -> Option<f64> {
        self.get(stamp)
    }
}

/// Temperature file that is re-read whenever a lookup misses, so hours
/// deferred for a missing temperature resolve once the file grows.
#[derive(Debug)]
pub struct ReloadingTemperatureFile {
    path: PathBuf,
    cache: Mutex<crate::types::TemperatureSeries>,
}

impl ReloadingTemperatureFile {
    pub fn open(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        let series = formats::read_temperatures(&path)?;
        Ok(Self {
            path,
            cache: Mutex::new(series),
        })
    }
}

impl TemperatureLookup for ReloadingTemperatureFile {
    fn temperature_at(&self, stamp: HourStamp) -> Option<f64> {
        let mut cache = self.cache.lock().expect("temperature cache");
        if let Some(t) = cache.get(stamp) {
            return Some(t);
        }
        if cache.last_stamp().is_some_and(|l| l >= stamp) {
            return None;
        }
        match formats::read_temperatures(&self.path) {
            Ok(fresh) => {
                *cache = fresh;
                cache.get(stamp)
            }
            Err(e) => {
                log::warn!("reloading {}: {e}", self.path.display());
                None
            }
        }
    }
}

enum Scored {
    NoModel,
    IncompleteLags,
    Normal,
    Anomaly(AnomalyRecord),
}

/// Speed-layer state: one window per meter plus counters and hours waiting
/// for their temperature.
#[derive(Debug)]
pub struct StreamDetector {
    config: DetectorConfig,
    windows: HashMap<String, MeterWindow>,
    counters: StreamCounters,
    pending: VecDeque<HourBatch>,
    /// Deferred hours older than this (relative to the newest hour seen) are
    /// ingested unscored.
    pub max_deferral_hours: i64,
}

impl StreamDetector {
    pub fn new(config: DetectorConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            windows: HashMap::new(),
            counters: StreamCounters::default(),
            pending: VecDeque::new(),
            max_deferral_hours: 48,
        })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn counters(&self) -> StreamCounters {
        self.counters
    }

    pub fn window(&self, meter_id: &str) -> Option<&MeterWindow> {
        self.windows.get(meter_id)
    }

    pub fn pending_hours(&self) -> usize {
        self.pending.len()
    }

    pub fn ingest(&mut self, meter_id: &str, stamp: HourStamp, kwh: f64) -> IngestOutcome {
        let order = self.config.order_p;
        let window = match self.windows.get_mut(meter_id) {
            Some(w) => w,
            None => self
                .windows
                .entry(meter_id.to_string())
                .or_insert_with(|| MeterWindow::new(meter_id, order)),
        };
        let outcome = window.ingest(stamp, kwh);
        match outcome {
            IngestOutcome::Inserted => self.counters.ingested += 1,
            IngestOutcome::Replaced => {
                self.counters.ingested += 1;
                self.counters.duplicates += 1;
            }
            IngestOutcome::DroppedTooOld => self.counters.dropped_too_old += 1,
        }
        outcome
    }

    fn score_one(
        &self,
        meter_id: &str,
        stamp: HourStamp,
        kwh: f64,
        temperature: f64,
        snapshot: &ModelSnapshot,
        calendar: &crate::types::DayCalendar,
    ) -> Result<Scored> {
        let day_type = calendar.classify(stamp.date());
        let Some(model) = snapshot.get(meter_id, stamp.season(), day_type) else {
            return Ok(Scored::NoModel);
        };
        let Some(lags) = self
            .windows
            .get(meter_id)
            .and_then(|w| w.lags_of(stamp.season(), stamp.date(), model.parx.order_p))
        else {
            return Ok(Scored::IncompleteLags);
        };
        let predicted = model.parx.predict(&lags, temperature)?;
        let s = score(kwh, predicted, &model.gaussian, self.config.residual_floor);
        Ok(match classify_score(s, self.config.epsilon) {
            Verdict::Normal => Scored::Normal,
            Verdict::Anomaly(score) => Scored::Anomaly(AnomalyRecord {
                meter_id: meter_id.to_string(),
                stamp,
                season: stamp.season(),
                actual: kwh,
                predicted,
                score,
                epsilon_used: self.config.epsilon,
                model_version: snapshot.version,
            }),
        })
    }

    /// Score every reading of one hour, then add them to the windows.
    ///
    /// Lags always come from actual past readings; flagged readings are
    /// ingested like any other.
    pub fn detect_hour(
        &mut self,
        batch: &HourBatch,
        temperature: f64,
        snapshot: &ModelSnapshot,
    ) -> Result<Vec<AnomalyRecord>> {
        if snapshot.is_empty() {
            return Err(Error::InvalidInput("snapshot has no models".into()));
        }
        if !temperature.is_finite() {
            return Err(Error::InvalidInput(format!(
                "non-finite temperature at {}",
                batch.stamp
            )));
        }
        let calendar = snapshot.config.calendar();
        let stamp = batch.stamp;
        let score = |(meter, kwh): &(String, f64)| {
            self.score_one(meter, stamp, *kwh, temperature, snapshot, &calendar)
        };
        let scored: Vec<Result<Scored>> = if batch.len() >= PARALLEL_BATCH {
            batch.readings.par_iter().map(score).collect()
        } else {
            batch.readings.iter().map(score).collect()
        };

        let mut records = Vec::new();
        for s in scored {
            match s? {
                Scored::NoModel => self.counters.skipped_no_model += 1,
                Scored::IncompleteLags => self.counters.skipped_incomplete_lags += 1,
                Scored::Normal => self.counters.scored += 1,
                Scored::Anomaly(rec) => {
                    self.counters.scored += 1;
                    records.push(rec);
                }
            }
        }
        self.counters.anomalies += records.len() as u64;
        self.counters.hours += 1;
        for (meter, kwh) in &batch.readings {
            self.ingest(meter, stamp, *kwh);
        }
        Ok(records)
    }

    fn ingest_unscored(&mut self, batch: &HourBatch) {
        for (meter, kwh) in &batch.readings {
            self.ingest(meter, batch.stamp, *kwh);
        }
    }

    /// Queue `batch` and run every queued hour whose temperature is known.
    /// Hours still missing a temperature stay queued.
    pub fn process_hour(
        &mut self,
        batch: HourBatch,
        temps: &dyn TemperatureLookup,
        snapshot: Option<&ModelSnapshot>,
    ) -> Result<Vec<AnomalyRecord>> {
        let newest = batch.stamp;
        if temps.temperature_at(newest).is_none() {
            self.counters.deferred_hours += 1;
        }
        self.pending.push_back(batch);
        self.drain_pending(temps, snapshot, Some(newest))
    }

    /// Retry deferred hours; with `newest` set, stale ones are expired.
    pub fn drain_pending(
        &mut self,
        temps: &dyn TemperatureLookup,
        snapshot: Option<&ModelSnapshot>,
        newest: Option<HourStamp>,
    ) -> Result<Vec<AnomalyRecord>> {
        let mut out = Vec::new();
        let mut still = VecDeque::new();
        while let Some(batch) = self.pending.pop_front() {
            match temps.temperature_at(batch.stamp) {
                Some(t) => match snapshot.filter(|s| !s.is_empty()) {
                    Some(snap) => out.extend(self.detect_hour(&batch, t, snap)?),
                    None => {
                        self.counters.unscored_no_snapshot += batch.len() as u64;
                        self.counters.hours += 1;
                        self.ingest_unscored(&batch);
                    }
                },
                None => {
                    let expired = newest.is_some_and(|n| {
                        batch.stamp.add_hours(self.max_deferral_hours) < n
                    });
                    if expired {
                        log::warn!("no temperature for {} after {}h; ingesting unscored", batch.stamp, self.max_deferral_hours);
                        self.counters.expired_deferrals += 1;
                        self.ingest_unscored(&batch);
                    } else {
                        still.push_back(batch);
                    }
                }
            }
        }
        self.pending = still;
        Ok(out)
    }
}

/// Drive the detector over `source`: per hour refresh the snapshot from the
/// store, score, append anomalies to the store and hand them to `sink`.
/// If the store cannot be read the last known snapshot stays in use.
pub fn run_stream<I>(
    source: I,
    store: &ServingStore,
    temps: &dyn TemperatureLookup,
    detector: &mut StreamDetector,
    mut sink: impl FnMut(&AnomalyRecord) -> Result<()>,
) -> Result<StreamCounters>
where
    I: IntoIterator<Item = Result<HourBatch>>,
{
    let mut snapshot: Option<std::sync::Arc<ModelSnapshot>> = None;
    let mut emit = |records: Vec<AnomalyRecord>| -> Result<()> {
        store.append_anomalies(&records)?;
        records.iter().try_for_each(&mut sink)
    };
    for batch in source {
        let batch = batch?;
        match store.latest_snapshot() {
            Ok(s) => snapshot = Some(s),
            Err(e) => {
                detector.counters.stale_refreshes += 1;
                match &snapshot {
                    Some(s) => log::warn!("snapshot refresh failed, staying on v{}: {e}", s.version),
                    None => log::warn!("no snapshot available yet: {e}"),
                }
            }
        }
        let records = detector.process_hour(batch, temps, snapshot.as_deref())?;
        emit(records)?;
    }
    let records = detector.drain_pending(temps, snapshot.as_deref(), None)?;
    emit(records)?;
    if detector.pending_hours() > 0 {
        log::warn!(
            "stream ended with {} hours still waiting for temperature",
            detector.pending_hours()
        );
    }
    Ok(detector.counters())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(day: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(2024, 5, day).unwrap()
    }

    fn st(day: u32, hour: u8) -> HourStamp {
        HourStamp::new(d(day), hour).unwrap()
    }

    #[test]
    fn single_reading() {
        let mut w = MeterWindow::new("m", 3);
        assert_eq!(w.ingest(st(1, 4), 1.0), IngestOutcome::Inserted);
        assert_eq!(w.len(), 1);
        assert_eq!(w.last_updated(), Some(st(1, 4)));
    }

    #[test]
    fn eviction_keeps_last_p_days() {
        let mut w = MeterWindow::new("m", 3);
        for day in 1..=4 {
            w.ingest(st(day, 7), day as f64);
        }
        let s7 = Season::new(7).unwrap();
        let dates: Vec<_> = w.recent(s7).iter().map(|e| e.0).collect();
        assert_eq!(dates, vec![d(4), d(3), d(2)]);
        assert_eq!(w.lags(s7, d(5)), Some(vec![4.0, 3.0, 2.0]));
        assert_eq!(w.lags(s7, d(4)), None);
    }

    #[test]
    fn old_reading_is_dropped() {
        let mut w = MeterWindow::new("m", 3);
        w.ingest(st(10, 0), 1.0);
        assert_eq!(w.ingest(st(5, 3), 1.0), IngestOutcome::DroppedTooOld);
        assert_eq!(w.ingest(st(7, 3), 1.0), IngestOutcome::Inserted);
        assert_eq!(w.ingest(st(7, 3), 2.0), IngestOutcome::Replaced);
        assert_eq!(w.recent(Season::new(3).unwrap()), vec![(d(7), 2.0)]);
    }

    #[test]
    fn out_of_order_within_window() {
        let mut w = MeterWindow::new("m", 3);
        for day in [3, 1, 2] {
            w.ingest(st(day, 0), day as f64);
        }
        assert_eq!(w.lags(Season::new(0).unwrap(), d(4)), Some(vec![3.0, 2.0, 1.0]));
    }

    #[test]
    fn batcher_groups_consecutive_stamps() {
        let rs = vec![
            MeterReading::new("a", st(1, 0), 1.0),
            MeterReading::new("b", st(1, 0), 2.0),
            MeterReading::new("a", st(1, 1), 3.0),
        ];
        let batches: Vec<_> = HourBatcher::new(rs.into_iter()).collect::<Result<_>>().unwrap();
        assert_eq!(batches.len(), 2);
        assert_eq!(batches[0].len(), 2);
        assert_eq!(batches[1].stamp, st(1, 1));
    }

    #[test]
    fn record_line_roundtrip() {
        let r = AnomalyRecord {
            meter_id: "m1".into(),
            stamp: st(3, 9),
            season: Season::new(9).unwrap(),
            actual: 4.2,
            predicted: 0.8,
            score: 1.0e-7,
            epsilon_used: 0.05,
            model_version: 12,
        };
        assert_eq!(r.to_output_line(), "m1,2024-05-03T09,9,4.2,0.8,0.0000001,12");
        assert_eq!(AnomalyRecord::parse_store_line(&r.to_store_line()).unwrap(), r);
    }
}
