//! Residual scoring: the natural log of the absolute prediction error is
//! modeled as Gaussian (so the error itself is log-normal), and a reading is
//! anomalous when the Gaussian *density* of its log-error falls below `epsilon`.
//!
//! Note that `epsilon` is a density threshold, not a tail probability. A value
//! of 0.05 is not a 5% significance level; its meaning depends on the fitted
//! spread. A tight residual model (small sigma) has a high peak and flags
//! points only far out in the tails, while a wide model flags more of its mass.
//!
//! Both tails flag: a residual far *smaller* than usual has a low density too.

use std::collections::BTreeSet;
use std::f64::consts::PI;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parx::ParxModel;
use crate::types::{DayCalendar, DayTypePolicy};

pub const DEFAULT_RESIDUAL_FLOOR: f64 = 1e-6;
pub const DEFAULT_SIGMA_FLOOR: f64 = 1e-3;
pub const DEFAULT_EPSILON: f64 = 0.05;
pub const DEFAULT_ORDER: usize = 3;

/// Mean and standard deviation of log-residuals for one cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianParams {
    pub mu: f64,
    pub sigma: f64,
    pub n_samples: usize,
}

impl GaussianParams {
    pub fn new(mu: f64, sigma: f64, n_samples: usize) -> Result<Self> {
        if !mu.is_finite() || !sigma.is_finite() || sigma <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "invalid gaussian parameters mu={mu} sigma={sigma}"
            )));
        }
        Ok(Self {
            mu,
            sigma,
            n_samples,
        })
    }

    /// Density at the mean.
    pub fn peak(&self) -> f64 {
        1.0 / (self.sigma * (2.0 * PI).sqrt())
    }
}

/// Which rows feed the Gaussian fit.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum ResidualMode {
    /// Residuals on the same days the regression was fit on.
    #[default]
    InSample,
    /// Fit the regression on the leading rows and the Gaussian on the
    /// trailing `fraction` of rows.
    HoldOut { fraction: f64 },
}

/// Thresholds and modeling choices shared by training and detection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    pub epsilon: f64,
    pub order_p: usize,
    pub day_type_policy: DayTypePolicy,
    pub holidays: BTreeSet<NaiveDate>,
    pub residual_floor: f64,
    pub sigma_floor: f64,
    pub fit_intercept: bool,
    pub residual_mode: ResidualMode,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            epsilon: DEFAULT_EPSILON,
            order_p: DEFAULT_ORDER,
            day_type_policy: DayTypePolicy::Unified,
            holidays: BTreeSet::new(),
            residual_floor: DEFAULT_RESIDUAL_FLOOR,
            sigma_floor: DEFAULT_SIGMA_FLOOR,
            fit_intercept: false,
            residual_mode: ResidualMode::InSample,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.epsilon) {
            return Err(Error::InvalidInput(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if self.order_p == 0 {
            return Err(Error::InvalidInput("order_p must be >= 1".into()));
        }
        if !positive(self.residual_floor) {
            return Err(Error::InvalidInput("residual_floor must be > 0".into()));
        }
        if !positive(self.sigma_floor) {
            return Err(Error::InvalidInput("sigma_floor must be > 0".into()));
        }
        if let ResidualMode::HoldOut { fraction } = self.residual_mode {
            if !(fraction > 0.0 && fraction < 1.0) {
                return Err(Error::InvalidInput(format!(
                    "hold-out fraction must be in (0, 1), got {fraction}"
                )));
            }
        }
        Ok(())
    }

    pub fn calendar(&self) -> DayCalendar {
        DayCalendar {
            policy: self.day_type_policy,
            holidays: self.holidays.clone(),
        }
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    pub fn with_policy(mut self, policy: DayTypePolicy) -> Self {
        self.day_type_policy = policy;
        self
    }

    pub fn with_order(mut self, order_p: usize) -> Self {
        self.order_p = order_p;
        self
    }

    pub fn with_intercept(mut self, fit_intercept: bool) -> Self {
        self.fit_intercept = fit_intercept;
        self
    }
}

/// A fitted regression plus the residual model for the same cell.
#[derive(Debug, Clone, PartialEq)]
pub struct SeasonDetectionModel {
    pub parx: ParxModel,
    pub gaussian: GaussianParams,
}

/// `ln(max(|actual - predicted|, floor))`.
pub fn log_l1_residual(actual: f64, predicted: f64, floor: f64) -> f64 {
    (actual - predicted).abs().max(floor).ln()
}

/// Mean and population standard deviation with the default sigma floor.
pub fn fit_gaussian(samples: &[f64]) -> Result<GaussianParams> {
    fit_gaussian_with_floor(samples, DEFAULT_SIGMA_FLOOR)
}

pub fn fit_gaussian_with_floor(samples: &[f64], sigma_floor: f64) -> Result<GaussianParams> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::InsufficientData { rows: n, needed: 2 });
    }
    if samples.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput("non-finite residual sample".into()));
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
    GaussianParams::new(mean, var.sqrt().max(sigma_floor), n)
}

pub fn density(x: f64, params: &GaussianParams) -> f64 {
    let z = (x - params.mu) / params.sigma;
    params.peak() * (-0.5 * z * z).exp()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Verdict {
    Normal,
    Anomaly(f64),
}

impl Verdict {
    pub fn is_anomaly(&self) -> bool {
        matches!(self, Verdict::Anomaly(_))
    }
}

/// Density of the reading's log-residual under `params`.
pub fn score(actual: f64, predicted: f64, params: &GaussianParams, residual_floor: f64) -> f64 {
    density(log_l1_residual(actual, predicted, residual_floor), params)
}

pub fn classify(
    actual: f64,
    predicted: f64,
    params: &GaussianParams,
    config: &DetectorConfig,
) -> Verdict {
    classify_score(
        score(actual, predicted, params, config.residual_floor),
        config.epsilon,
    )
}

pub fn classify_score(score: f64, epsilon: f64) -> Verdict {
    if score < epsilon {
        Verdict::Anomaly(score)
    } else {
        Verdict::Normal
    }
}
