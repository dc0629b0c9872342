//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use chrono::NaiveDate;
use meterwatch::{ConsumptionSeries, HourStamp, TemperatureSeries};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const HOUR: u8 = 12;

/// Temperature regressors written out case by case.
pub fn features_by_cases(t: f64) -> [f64; 3] {
    let mut out = [0.0; 3];
    if t > 20.0 {
        out[0] = t - 20.0;
    }
    if t < 16.0 {
        out[1] = 16.0 - t;
    }
    if t < 5.0 {
        out[2] = 5.0 - t;
    }
    out
}

/// Gaussian elimination with partial pivoting.
pub fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        a.swap(col, pivot);
        b.swap(col, pivot);
        let (top, rest) = a.split_at_mut(col + 1);
        let pivot_row = &top[col];
        for (i, row) in rest.iter_mut().enumerate() {
            let f = row[col] / pivot_row[col];
            for (x, p) in row[col..].iter_mut().zip(&pivot_row[col..]) {
                *x -= f * p;
            }
            b[col + 1 + i] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let tail: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - tail) / a[row][row];
    }
    x
}

/// Least squares through the normal equations.
pub fn ols(rows: &[Vec<f64>], y: &[f64]) -> Vec<f64> {
    let k = rows[0].len();
    let mut gram = vec![vec![0.0; k]; k];
    let mut rhs = vec![0.0; k];
    for (r, &t) in rows.iter().zip(y) {
        for i in 0..k {
            rhs[i] += r[i] * t;
            for j in 0..k {
                gram[i][j] += r[i] * r[j];
            }
        }
    }
    solve(gram, rhs)
}

pub fn relative_error(estimate: &[f64], truth: &[f64]) -> f64 {
    let diff: f64 = estimate.iter().zip(truth).map(|(a, b)| (a - b).powi(2)).sum();
    let norm: f64 = truth.iter().map(|b| b * b).sum();
    (diff / norm).sqrt()
}

/// A single-hour autoregression with temperature terms and no intercept.
#[derive(Debug, Clone)]
pub struct RandomParx {
    pub alphas: Vec<f64>,
    pub betas: [f64; 3],
}

impl RandomParx {
    pub fn draw(seed: u64, order: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut alphas: Vec<f64> = (0..order).map(|_| rng.random_range(0.05..0.5)).collect();
        let total: f64 = alphas.iter().sum();
        if total > 0.85 {
            alphas.iter_mut().for_each(|a| *a *= 0.85 / total);
        }
        let betas = [
            rng.random_range(0.1..1.0),
            rng.random_range(0.1..1.0),
            rng.random_range(0.1..1.0),
        ];
        Self { alphas, betas }
    }

    pub fn coefficients(&self) -> Vec<f64> {
        self.alphas.iter().chain(&self.betas).copied().collect()
    }

    /// `days` consecutive readings at `HOUR`, each multiplied by
    /// `exp(noise_sigma * z)`. Daily temperatures are uniform on [-10, 35].
    pub fn simulate(&self, seed: u64, days: usize, noise_sigma: f64) -> (ConsumptionSeries, TemperatureSeries) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let start = NaiveDate::from_ymd_opt(2024, 1, 1).unwrap();
        let p = self.alphas.len();
        let mut y: Vec<f64> = (0..p).map(|_| rng.random_range(2.0..6.0)).collect();
        let mut temps = TemperatureSeries::new();
        let mut series = ConsumptionSeries::new("sim");
        for (d, &v) in y.iter().enumerate() {
            let stamp = HourStamp::new(start + chrono::Duration::days(d as i64), HOUR).unwrap();
            series.push(stamp, v).unwrap();
        }
        for d in p..days {
            let t: f64 = rng.random_range(-10.0..35.0);
            let x = features_by_cases(t);
            let clean: f64 = (1..=p).map(|i| self.alphas[i - 1] * y[d - i]).sum::<f64>()
                + x.iter().zip(&self.betas).map(|(a, b)| a * b).sum::<f64>();
            let z: f64 = rng.sample(StandardNormal);
            let v = clean * (noise_sigma * z).exp();
            y.push(v);
            let stamp = HourStamp::new(start + chrono::Duration::days(d as i64), HOUR).unwrap();
            series.push(stamp, v).unwrap();
            temps.push(stamp, t).unwrap();
        }
        (series, temps)
    }
}
