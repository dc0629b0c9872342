//! Periodic autoregression with exogenous temperature variables.
//!
//! For hour-of-day `s` and day `n` the model is
//!
//! ```text
//! Y[s,n] = sum_i alpha[s,i] * Y[s,n-i] + b1*XT1 + b2*XT2 + b3*XT3
//! ```
//!
//! with no constant term by default. `XT1..3` are the cooling, heating and
//! overheating transforms of the hour's temperature.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::types::{
    ConsumptionSeries, DayCalendar, DayType, HourStamp, Season, TemperatureSeries,
};

pub const COOLING_THRESHOLD: f64 = 20.0;
pub const HEATING_THRESHOLD: f64 = 16.0;
pub const OVERHEATING_THRESHOLD: f64 = 5.0;

/// Below this many training rows a fitted cell is flagged as low-sample.
pub const LOW_SAMPLE_ROWS: usize = 30;

/// Gram-matrix condition number above which the solver switches to SVD.
pub const GRAM_CONDITION_LIMIT: f64 = 1e12;

/// Piecewise-linear temperature regressors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExogenousFeatures {
    /// Degrees above 20 °C.
    pub cooling: f64,
    /// Degrees below 16 °C.
    pub heating: f64,
    /// Degrees below 5 °C.
    pub overheating: f64,
}

impl ExogenousFeatures {
    pub fn as_array(&self) -> [f64; 3] {
        [self.cooling, self.heating, self.overheating]
    }
}

pub fn exogenous_features(celsius: f64) -> Result<ExogenousFeatures> {
    if !celsius.is_finite() {
        return Err(Error::InvalidInput(format!(
            "temperature must be finite, got {celsius}"
        )));
    }
    let above = |limit: f64| if celsius > limit { celsius - limit } else { 0.0 };
    let below = |limit: f64| if celsius < limit { limit - celsius } else { 0.0 };
    Ok(ExogenousFeatures {
        cooling: above(COOLING_THRESHOLD),
        heating: below(HEATING_THRESHOLD),
        overheating: below(OVERHEATING_THRESHOLD),
    })
}

/// Lagged consumptions plus temperature features arranged as a linear
/// regression. Row `i` is `[Y[n-1] .. Y[n-p], XT1, XT2, XT3 (, 1)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionProblem {
    design: DMatrix<f64>,
    target: DVector<f64>,
    stamps: Vec<HourStamp>,
    order: usize,
    intercept: bool,
}

impl RegressionProblem {
    /// Wrap an arbitrary design matrix; `stamps` may be empty.
    pub fn from_rows(rows: &[Vec<f64>], target: &[f64]) -> Result<Self> {
        let n = rows.len();
        if n != target.len() {
            return Err(Error::InvalidInput(format!(
                "{n} rows but {} targets",
                target.len()
            )));
        }
        let k = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::InvalidInput("ragged design rows".into()));
        }
        let design = DMatrix::from_fn(n, k, |i, j| rows[i][j]);
        Ok(Self {
            design,
            target: DVector::from_column_slice(target),
            stamps: Vec::new(),
            order: k.saturating_sub(3),
            intercept: false,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.design.nrows()
    }

    pub fn n_columns(&self) -> usize {
        self.design.ncols()
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn has_intercept(&self) -> bool {
        self.intercept
    }

    pub fn design(&self) -> &DMatrix<f64> {
        &self.design
    }

    pub fn target(&self) -> &DVector<f64> {
        &self.target
    }

    /// Stamp of the target reading of each row.
    pub fn stamps(&self) -> &[HourStamp] {
        &self.stamps
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.design.row(i).iter().copied().collect()
    }

    /// Problem restricted to the rows in `range`.
    pub fn slice_rows(&self, range: std::ops::Range<usize>) -> Self {
        let len = range.end - range.start;
        Self {
            design: self.design.rows(range.start, len).into_owned(),
            target: self.target.rows(range.start, len).into_owned(),
            stamps: self.stamps[range].to_vec(),
            order: self.order,
            intercept: self.intercept,
        }
    }

    /// `X w` for the given coefficients.
    pub fn fitted_values(&self, coefficients: &[f64]) -> Vec<f64> {
        let w = DVector::from_column_slice(coefficients);
        (&self.design * w).iter().copied().collect()
    }

    pub fn residual_norm(&self, coefficients: &[f64]) -> f64 {
        let w = DVector::from_column_slice(coefficients);
        (&self.design * w - &self.target).norm()
    }
}

/// Assemble the regression rows for one `(season, day_type)` cell.
///
/// A day contributes a row when it matches `day_type`, has readings at
/// `season` on each of the `order` preceding calendar days, and has a
/// temperature at the same hour. Gaps are dropped, never imputed.
pub fn build_problem(
    series: &ConsumptionSeries,
    temps: &TemperatureSeries,
    season: Season,
    day_type: DayType,
    calendar: &DayCalendar,
    order: usize,
    intercept: bool,
) -> Result<RegressionProblem> {
    if order == 0 {
        return Err(Error::InvalidInput("autoregression order must be >= 1".into()));
    }
    let values = series.season_values(season);
    let cols = order + 3 + usize::from(intercept);
    let mut data = Vec::new();
    let mut target = Vec::new();
    let mut stamps = Vec::new();

    'days: for (&date, &y) in &values {
        if day_type != DayType::AllDays && calendar.classify(date) != day_type {
            continue;
        }
        let stamp = HourStamp::new(date, season.value())?;
        let Some(t) = temps.get(stamp) else { continue };
        let row_start = data.len();
        for lag in 1..=order as i64 {
            match values.get(&(date - chrono::Duration::days(lag))) {
                Some(&v) => data.push(v),
                None => {
                    data.truncate(row_start);
                    continue 'days;
                }
            }
        }
        data.extend(exogenous_features(t)?.as_array());
        if intercept {
            data.push(1.0);
        }
        target.push(y);
        stamps.push(stamp);
    }

    let n = target.len();
    if n == 0 {
        return Err(Error::InsufficientData { rows: 0, needed: 1 });
    }
    Ok(RegressionProblem {
        design: DMatrix::from_row_slice(n, cols, &data),
        target: DVector::from_vec(target),
        stamps,
        order,
        intercept,
    })
}

/// Least-squares coefficients minimizing `||X w - y||`.
///
/// Solves the normal equations by Cholesky when the Gram matrix is well
/// conditioned; otherwise returns the minimum-norm solution from an SVD of
/// `X`.
pub fn fit_ols(problem: &RegressionProblem) -> Result<Vec<f64>> {
    let x = &problem.design;
    let y = &problem.target;
    let (n, k) = x.shape();
    if k == 0 {
        return Err(Error::InvalidInput("design matrix has no columns".into()));
    }
    if n < k {
        return Err(Error::InsufficientData { rows: n, needed: k });
    }

    let gram = x.transpose() * x;
    let eig = gram.symmetric_eigenvalues();
    let max = eig.max();
    let min = eig.min();
    if min > 0.0 && max / min <= GRAM_CONDITION_LIMIT {
        if let Some(chol) = gram.clone().cholesky() {
            let w = chol.solve(&(x.transpose() * y));
            if w.iter().all(|v| v.is_finite()) {
                return Ok(w.iter().copied().collect());
            }
        }
    }

    let svd = x.clone().svd(true, true);
    let sigma_max = svd.singular_values.max();
    let tol = sigma_max * (n.max(k) as f64) * f64::EPSILON;
    let w = svd
        .solve(y, tol)
        .map_err(|e| Error::InvalidInput(format!("SVD solve failed: {e}")))?;
    Ok(w.iter().copied().collect())
}

/// Fitted regression coefficients for one `(meter, season, day_type)` cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ParxModel {
    pub meter_id: String,
    pub season: Season,
    pub day_type: DayType,
    pub order_p: usize,
    /// Lag coefficients, most recent day first.
    pub alphas: Vec<f64>,
    pub betas: [f64; 3],
    /// Constant term; zero unless fitted with an intercept column.
    pub intercept: f64,
    pub trained_through: HourStamp,
    pub n_samples: usize,
}

impl ParxModel {
    /// Split a coefficient vector from [`fit_ols`] back into model terms.
    pub fn from_coefficients(
        meter_id: impl Into<String>,
        season: Season,
        day_type: DayType,
        problem: &RegressionProblem,
        coefficients: &[f64],
    ) -> Result<Self> {
        let p = problem.order;
        if coefficients.len() != problem.n_columns() || problem.stamps.is_empty() {
            return Err(Error::InvalidInput(
                "coefficients do not match the regression problem".into(),
            ));
        }
        if coefficients.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidInput("non-finite coefficient".into()));
        }
        Ok(Self {
            meter_id: meter_id.into(),
            season,
            day_type,
            order_p: p,
            alphas: coefficients[..p].to_vec(),
            betas: [coefficients[p], coefficients[p + 1], coefficients[p + 2]],
            intercept: if problem.intercept {
                coefficients[p + 3]
            } else {
                0.0
            },
            trained_through: *problem.stamps.last().expect("non-empty"),
            n_samples: problem.n_samples(),
        })
    }

    pub fn is_low_sample(&self) -> bool {
        self.n_samples < LOW_SAMPLE_ROWS
    }

    /// Expected consumption given the previous `p` days at this hour
    /// (most recent first) and the current temperature.
    pub fn predict(&self, lags: &[f64], celsius: f64) -> Result<f64> {
        if lags.len() != self.order_p {
            return Err(Error::InvalidInput(format!(
                "expected {} lags, got {}",
                self.order_p,
                lags.len()
            )));
        }
        if lags.iter().any(|l| !l.is_finite()) {
            return Err(Error::InvalidInput("non-finite lag".into()));
        }
        let xt = exogenous_features(celsius)?.as_array();
        let ar: f64 = self.alphas.iter().zip(lags).map(|(a, l)| a * l).sum();
        let exo: f64 = self.betas.iter().zip(xt).map(|(b, x)| b * x).sum();
        Ok(ar + exo + self.intercept)
    }
}
