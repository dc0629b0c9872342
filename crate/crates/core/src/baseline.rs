//! Boxplot baseline: per hour-of-day, readings outside
//! `[q1 - 1.5 IQR, q3 + 1.5 IQR]` are outliers.
//!
//! Quartiles use linear interpolation between closest ranks (the "type 7"
//! convention of R and NumPy's default).

use crate::error::{Error, Result};
use crate::types::{ConsumptionSeries, HourStamp, Season, SEASONS};

pub const FENCE_FACTOR: f64 = 1.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quartiles {
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
}

impl Quartiles {
    pub fn iqr(&self) -> f64 {
        self.q3 - self.q1
    }

    pub fn fences(&self) -> (f64, f64) {
        let spread = FENCE_FACTOR * self.iqr();
        (self.q1 - spread, self.q3 + spread)
    }
}

/// Type-7 quantile of already sorted data.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn quartiles(samples: &[f64]) -> Result<Quartiles> {
    if samples.len() < 4 {
        return Err(Error::InsufficientData {
            rows: samples.len(),
            needed: 4,
        });
    }
    if samples.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput("non-finite sample".into()));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(Quartiles {
        q1: quantile_sorted(&sorted, 0.25),
        median: quantile_sorted(&sorted, 0.5),
        q3: quantile_sorted(&sorted, 0.75),
    })
}

/// Outliers of one series, split by which fence they crossed.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BoxplotOutliers {
    pub upper: Vec<HourStamp>,
    pub lower: Vec<HourStamp>,
}

impl BoxplotOutliers {
    pub fn len(&self) -> usize {
        self.upper.len() + self.lower.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Both fences, ordered by stamp.
    pub fn all(&self) -> Vec<HourStamp> {
        let mut v: Vec<_> = self.upper.iter().chain(&self.lower).copied().collect();
        v.sort();
        v
    }
}

/// Boxplot outliers per hour-of-day. Every season present needs at least 4
/// readings; seasons with no readings at all are ignored.
pub fn detect_boxplot(series: &ConsumptionSeries) -> Result<BoxplotOutliers> {
    let mut by_season: Vec<Vec<(HourStamp, f64)>> = vec![Vec::new(); SEASONS];
    for &(stamp, kwh) in series.points() {
        by_season[stamp.season().index()].push((stamp, kwh));
    }
    let mut out = BoxplotOutliers::default();
    for points in by_season.iter().filter(|p| !p.is_empty()) {
        let values: Vec<f64> = points.iter().map(|p| p.1).collect();
        let q = quartiles(&values)?;
        let (low, high) = q.fences();
        for &(stamp, kwh) in points {
            if kwh > high {
                out.upper.push(stamp);
            } else if kwh < low {
                out.lower.push(stamp);
            }
        }
    }
    out.upper.sort();
    out.lower.sort();
    Ok(out)
}

/// Fences per season, for reporting.
pub fn season_fences(series: &ConsumptionSeries) -> Vec<(Season, Option<Quartiles>)> {
    Season::all()
        .map(|s| {
            let v: Vec<f64> = series.season_values(s).into_values().collect();
            (s, quartiles(&v).ok())
        })
        .collect()
}
