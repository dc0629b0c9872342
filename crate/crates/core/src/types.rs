//! Shared domain vocabulary: hour stamps, seasons, day types and the
//! consumption/temperature series every other module works on.
//!
//! All stamps are naive local civil time. No DST modeling: a skipped or
//! repeated hour is just a gap or a duplicate.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use chrono::{Datelike, Duration, NaiveDate, Weekday};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of seasons (hours) in the daily period.
pub const SEASONS: usize = 24;

/// A calendar date plus hour-of-day, ordered chronologically.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct HourStamp {
    date: NaiveDate,
    hour: u8,
}

impl HourStamp {
    pub fn new(date: NaiveDate, hour: u8) -> Result<Self> {
        if hour as usize >= SEASONS {
            return Err(Error::InvalidInput(format!("hour {hour} outside 0..=23")));
        }
        Ok(Self { date, hour })
    }

    /// Convenience constructor; panics on an impossible date or hour.
    pub fn ymdh(year: i32, month: u32, day: u32, hour: u8) -> Self {
        let date = NaiveDate::from_ymd_opt(year, month, day).expect("valid calendar date");
        Self::new(date, hour).expect("valid hour")
    }

    pub fn date(&self) -> NaiveDate {
        self.date
    }

    pub fn hour(&self) -> u8 {
        self.hour
    }

    pub fn season(&self) -> Season {
        Season(self.hour)
    }

    /// Shift by a signed number of hours.
    pub fn add_hours(&self, hours: i64) -> Self {
        let total = self.hour as i64 + hours;
        let days = total.div_euclid(SEASONS as i64);
        let hour = total.rem_euclid(SEASONS as i64) as u8;
        Self {
            date: self.date + Duration::days(days),
            hour,
        }
    }

    pub fn add_days(&self, days: i64) -> Self {
        Self {
            date: self.date + Duration::days(days),
            hour: self.hour,
        }
    }

    pub fn next_hour(&self) -> Self {
        self.add_hours(1)
    }
}

impl fmt::Display for HourStamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}T{:02}", self.date.format("%Y-%m-%d"), self.hour)
    }
}

impl FromStr for HourStamp {
    type Err = Error;

    /// Parses `YYYY-MM-DDTHH`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (date, hour) = s
            .split_once('T')
            .ok_or_else(|| Error::parse(s, "expected YYYY-MM-DDTHH"))?;
        let date = NaiveDate::parse_from_str(date, "%Y-%m-%d")
            .map_err(|e| Error::parse(s, format!("bad date: {e}")))?;
        if hour.len() != 2 {
            return Err(Error::parse(s, "hour must be two digits"));
        }
        let hour: u8 = hour
            .parse()
            .map_err(|e| Error::parse(s, format!("bad hour: {e}")))?;
        HourStamp::new(date, hour).map_err(|e| Error::parse(s, e.to_string()))
    }
}

/// Hour-of-day index `0..=23`, the periodic unit of the PARX model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Season(u8);

impl Season {
    pub fn new(value: u8) -> Result<Self> {
        if value as usize >= SEASONS {
            return Err(Error::InvalidInput(format!("season {value} outside 0..=23")));
        }
        Ok(Season(value))
    }

    pub fn value(self) -> u8 {
        self.0
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn all() -> impl Iterator<Item = Season> {
        (0..SEASONS as u8).map(Season)
    }
}

impl fmt::Display for Season {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

pub fn season_of(stamp: HourStamp) -> Season {
    stamp.season()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum DayType {
    AllDays,
    Workday,
    WeekendHoliday,
}

impl DayType {
    pub fn as_str(self) -> &'static str {
        match self {
            DayType::AllDays => "all",
            DayType::Workday => "workday",
            DayType::WeekendHoliday => "weekend",
        }
    }

    /// Cells a policy trains: one for unified, two for split.
    pub fn cells(policy: DayTypePolicy) -> &'static [DayType] {
        match policy {
            DayTypePolicy::Unified => &[DayType::AllDays],
            DayTypePolicy::Split => &[DayType::Workday, DayType::WeekendHoliday],
        }
    }
}

impl fmt::Display for DayType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DayType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(DayType::AllDays),
            "workday" => Ok(DayType::Workday),
            "weekend" => Ok(DayType::WeekendHoliday),
            other => Err(Error::parse(other, "unknown day type")),
        }
    }
}

/// Whether all days share one model per season or workdays and
/// weekends/holidays get separate models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DayTypePolicy {
    #[default]
    #[serde(alias = "all")]
    Unified,
    Split,
}

impl DayTypePolicy {
    pub fn as_str(self) -> &'static str {
        match self {
            DayTypePolicy::Unified => "all",
            DayTypePolicy::Split => "split",
        }
    }
}

impl FromStr for DayTypePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" | "unified" => Ok(DayTypePolicy::Unified),
            "split" => Ok(DayTypePolicy::Split),
            other => Err(Error::parse(other, "day-type policy must be `all` or `split`")),
        }
    }
}

/// Day-type policy together with the explicit holiday list it consults.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DayCalendar {
    pub policy: DayTypePolicy,
    pub holidays: BTreeSet<NaiveDate>,
}

impl DayCalendar {
    pub fn unified() -> Self {
        Self::default()
    }

    pub fn split(holidays: impl IntoIterator<Item = NaiveDate>) -> Self {
        Self {
            policy: DayTypePolicy::Split,
            holidays: holidays.into_iter().collect(),
        }
    }

    pub fn classify(&self, date: NaiveDate) -> DayType {
        classify_day(date, self.policy, &self.holidays)
    }
}

/// Map a date onto its day type. Workday iff Mon–Fri and not a listed holiday.
pub fn classify_day(
    date: NaiveDate,
    policy: DayTypePolicy,
    holidays: &BTreeSet<NaiveDate>,
) -> DayType {
    match policy {
        DayTypePolicy::Unified => DayType::AllDays,
        DayTypePolicy::Split => {
            if is_weekend(date) || holidays.contains(&date) {
                DayType::WeekendHoliday
            } else {
                DayType::Workday
            }
        }
    }
}

pub fn is_weekend(date: NaiveDate) -> bool {
    matches!(date.weekday(), Weekday::Sat | Weekday::Sun)
}

/// One hourly consumption observation.
#[derive(Debug, Clone, PartialEq)]
pub struct MeterReading {
    pub meter_id: String,
    pub stamp: HourStamp,
    pub kwh: f64,
}

impl MeterReading {
    pub fn new(meter_id: impl Into<String>, stamp: HourStamp, kwh: f64) -> Result<Self> {
        validate_kwh(kwh)?;
        Ok(Self {
            meter_id: meter_id.into(),
            stamp,
            kwh,
        })
    }
}

pub(crate) fn validate_kwh(kwh: f64) -> Result<()> {
    if !kwh.is_finite() || kwh < 0.0 {
        return Err(Error::InvalidInput(format!(
            "kwh must be finite and non-negative, got {kwh}"
        )));
    }
    Ok(())
}

/// Readings of one meter, strictly increasing by stamp.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConsumptionSeries {
    meter_id: String,
    points: Vec<(HourStamp, f64)>,
}

impl ConsumptionSeries {
    pub fn new(meter_id: impl Into<String>) -> Self {
        Self {
            meter_id: meter_id.into(),
            points: Vec::new(),
        }
    }

    /// Build from points in any order. Duplicate stamps keep the last value.
    pub fn from_unsorted(
        meter_id: impl Into<String>,
        points: impl IntoIterator<Item = (HourStamp, f64)>,
    ) -> Result<Self> {
        let mut by_stamp = BTreeMap::new();
        for (stamp, kwh) in points {
            validate_kwh(kwh)?;
            by_stamp.insert(stamp, kwh);
        }
        Ok(Self {
            meter_id: meter_id.into(),
            points: by_stamp.into_iter().collect(),
        })
    }

    /// Append a reading; rejected unless strictly after the last stamp.
    pub fn push(&mut self, stamp: HourStamp, kwh: f64) -> Result<()> {
        validate_kwh(kwh)?;
        if let Some((last, _)) = self.points.last() {
            if stamp <= *last {
                return Err(Error::InvalidInput(format!(
                    "reading at {stamp} not after last stamp {last} for meter {}",
                    self.meter_id
                )));
            }
        }
        self.points.push((stamp, kwh));
        Ok(())
    }

    pub fn meter_id(&self) -> &str {
        &self.meter_id
    }

    pub fn points(&self) -> &[(HourStamp, f64)] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn first_stamp(&self) -> Option<HourStamp> {
        self.points.first().map(|p| p.0)
    }

    pub fn last_stamp(&self) -> Option<HourStamp> {
        self.points.last().map(|p| p.0)
    }

    pub fn get(&self, stamp: HourStamp) -> Option<f64> {
        self.points
            .binary_search_by_key(&stamp, |p| p.0)
            .ok()
            .map(|i| self.points[i].1)
    }

    /// Per-date values at one season.
    pub fn season_values(&self, season: Season) -> BTreeMap<NaiveDate, f64> {
        self.points
            .iter()
            .filter(|(stamp, _)| stamp.season() == season)
            .map(|(stamp, kwh)| (stamp.date(), *kwh))
            .collect()
    }

    pub fn readings(&self) -> impl Iterator<Item = MeterReading> + '_ {
        self.points.iter().map(move |(stamp, kwh)| MeterReading {
            meter_id: self.meter_id.clone(),
            stamp: *stamp,
            kwh: *kwh,
        })
    }

    /// Keep only readings with `stamp <= until`.
    pub fn truncated(&self, until: HourStamp) -> Self {
        let end = self.points.partition_point(|p| p.0 <= until);
        Self {
            meter_id: self.meter_id.clone(),
            points: self.points[..end].to_vec(),
        }
    }

    pub fn map_values(&self, mut f: impl FnMut(HourStamp, f64) -> f64) -> Result<Self> {
        let points = self
            .points
            .iter()
            .map(|&(stamp, kwh)| {
                let v = f(stamp, kwh);
                validate_kwh(v).map(|_| (stamp, v))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            meter_id: self.meter_id.clone(),
            points,
        })
    }
}

/// Hourly outdoor temperature observations in °C, strictly increasing by stamp.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TemperatureSeries {
    observations: Vec<(HourStamp, f64)>,
}

impl TemperatureSeries {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_unsorted(observations: impl IntoIterator<Item = (HourStamp, f64)>) -> Result<Self> {
        let mut by_stamp = BTreeMap::new();
        for (stamp, t) in observations {
            if !t.is_finite() {
                return Err(Error::InvalidInput(format!(
                    "non-finite temperature at {stamp}"
                )));
            }
            by_stamp.insert(stamp, t);
        }
        Ok(Self {
            observations: by_stamp.into_iter().collect(),
        })
    }

    pub fn push(&mut self, stamp: HourStamp, celsius: f64) -> Result<()> {
        if !celsius.is_finite() {
            return Err(Error::InvalidInput(format!(
                "non-finite temperature at {stamp}"
            )));
        }
        if let Some((last, _)) = self.observations.last() {
            if stamp <= *last {
                return Err(Error::InvalidInput(format!(
                    "temperature at {stamp} not after last stamp {last}"
                )));
            }
        }
        self.observations.push((stamp, celsius));
        Ok(())
    }

    pub fn get(&self, stamp: HourStamp) -> Option<f64> {
        self.observations
            .binary_search_by_key(&stamp, |p| p.0)
            .ok()
            .map(|i| self.observations[i].1)
    }

    pub fn observations(&self) -> &[(HourStamp, f64)] {
        &self.observations
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn last_stamp(&self) -> Option<HourStamp> {
        self.observations.last().map(|p| p.0)
    }
}

/// Group loose readings into per-meter series, ordered by meter id.
pub fn group_by_meter(
    readings: impl IntoIterator<Item = MeterReading>,
) -> Result<Vec<ConsumptionSeries>> {
    let mut grouped: BTreeMap<String, Vec<(HourStamp, f64)>> = BTreeMap::new();
    for r in readings {
        grouped.entry(r.meter_id).or_default().push((r.stamp, r.kwh));
    }
    grouped
        .into_iter()
        .map(|(id, points)| ConsumptionSeries::from_unsorted(id, points))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn date(y: i32, m: u32, d: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(y, m, d).unwrap()
    }

    #[test]
    fn season_of_returns_hour() {
        assert_eq!(season_of(HourStamp::ymdh(2024, 1, 1, 0)).value(), 0);
        assert_eq!(season_of(HourStamp::ymdh(2024, 1, 1, 23)).value(), 23);
        assert_eq!(season_of(HourStamp::ymdh(2024, 6, 15, 7)).value(), 7);
    }

    #[test]
    fn classify_day_policies() {
        let none = BTreeSet::new();
        // 2024-06-15 is a Saturday, 2024-06-12 a Wednesday.
        assert_eq!(
            classify_day(date(2024, 6, 15), DayTypePolicy::Unified, &none),
            DayType::AllDays
        );
        assert_eq!(
            classify_day(date(2024, 6, 15), DayTypePolicy::Split, &none),
            DayType::WeekendHoliday
        );
        assert_eq!(
            classify_day(date(2024, 6, 12), DayTypePolicy::Split, &none),
            DayType::Workday
        );
        let holidays: BTreeSet<_> = [date(2024, 6, 12)].into();
        assert_eq!(
            classify_day(date(2024, 6, 12), DayTypePolicy::Split, &holidays),
            DayType::WeekendHoliday
        );
    }

    #[test]
    fn stamp_parse_and_display() {
        let s: HourStamp = "2024-03-09T07".parse().unwrap();
        assert_eq!(s, HourStamp::ymdh(2024, 3, 9, 7));
        assert_eq!(s.to_string(), "2024-03-09T07");
        assert!("2024-03-09T24".parse::<HourStamp>().is_err());
        assert!("2024-03-09 07".parse::<HourStamp>().is_err());
        assert!("2024-02-30T01".parse::<HourStamp>().is_err());
    }

    #[test]
    fn stamp_arithmetic_crosses_days() {
        let s = HourStamp::ymdh(2024, 12, 31, 23);
        assert_eq!(s.next_hour(), HourStamp::ymdh(2025, 1, 1, 0));
        assert_eq!(s.add_hours(-24), HourStamp::ymdh(2024, 12, 30, 23));
        assert_eq!(
            HourStamp::ymdh(2024, 1, 1, 0).add_hours(-1),
            HourStamp::ymdh(2023, 12, 31, 23)
        );
    }

    #[test]
    fn push_rejects_non_increasing() {
        let mut s = ConsumptionSeries::new("m1");
        s.push(HourStamp::ymdh(2024, 1, 1, 5), 1.0).unwrap();
        assert!(s.push(HourStamp::ymdh(2024, 1, 1, 5), 2.0).is_err());
        assert!(s.push(HourStamp::ymdh(2024, 1, 1, 4), 2.0).is_err());
        assert!(s.push(HourStamp::ymdh(2024, 1, 1, 6), -1.0).is_err());
        assert!(s.push(HourStamp::ymdh(2024, 1, 1, 6), f64::NAN).is_err());
        s.push(HourStamp::ymdh(2024, 1, 1, 6), 0.0).unwrap();
        assert_eq!(s.len(), 2);
    }

    #[test]
    fn from_unsorted_sorts_and_keeps_last_duplicate() {
        let a = HourStamp::ymdh(2024, 1, 2, 0);
        let b = HourStamp::ymdh(2024, 1, 1, 0);
        let s = ConsumptionSeries::from_unsorted("m", [(a, 1.0), (b, 2.0), (a, 3.0)]).unwrap();
        assert_eq!(s.points(), &[(b, 2.0), (a, 3.0)]);
    }

    #[test]
    fn ordering_matches_calendar() {
        let a = HourStamp::ymdh(2024, 1, 1, 23);
        let b = HourStamp::ymdh(2024, 1, 2, 0);
        assert!(a < b);
    }
}
