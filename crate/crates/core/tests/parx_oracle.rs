//! Least-squares fits and regression rows checked against a reference
//! solver and a by-hand row builder.

mod common;

use chrono::NaiveDate;
use meterwatch::parx::{build_problem, fit_ols, RegressionProblem};
use meterwatch::types::DayCalendar;
use meterwatch::{ConsumptionSeries, DayType, DayTypePolicy, HourStamp, Season, TemperatureSeries};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn square_system_is_solved_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for k in 1..8 {
        let rows: Vec<Vec<f64>> = (0..k)
            .map(|i| {
                (0..k)
                    .map(|j| if i == j { 1.0 + rng.random::<f64>() } else { 0.1 * rng.random::<f64>() })
                    .collect()
            })
            .collect();
        let w: Vec<f64> = (0..k).map(|_| rng.random_range(-3.0..3.0)).collect();
        let y: Vec<f64> = rows.iter().map(|r| r.iter().zip(&w).map(|(a, b)| a * b).sum()).collect();
        let fit = fit_ols(&RegressionProblem::from_rows(&rows, &y).unwrap()).unwrap();
        assert!(max_abs_diff(&fit, &w) <= 1e-8, "k={k}: {fit:?} vs {w:?}");
        assert!(max_abs_diff(&fit, &common::solve(rows.clone(), y.clone())) <= 1e-8);
    }
}

#[test]
fn overdetermined_fits_match_normal_equations() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for trial in 0..200 {
        let k = rng.random_range(1..8);
        let n = rng.random_range(k..k + 60);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..k).map(|_| rng.random_range(-5.0..5.0)).collect())
            .collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
        let fit = fit_ols(&RegressionProblem::from_rows(&rows, &y).unwrap()).unwrap();
        let reference = common::ols(&rows, &y);
        let scale = reference.iter().map(|v| v.abs()).fold(1.0, f64::max);
        assert!(max_abs_diff(&fit, &reference) <= 1e-8 * scale, "trial {trial}");
    }
}

#[test]
fn rank_deficient_design_gets_minimum_norm_solution() {
    // Second column always zero, third a copy of the first.
    let rows: Vec<Vec<f64>> = (1..=20).map(|i| vec![i as f64, 0.0, i as f64]).collect();
    let y: Vec<f64> = (1..=20).map(|i| 4.0 * i as f64).collect();
    let fit = fit_ols(&RegressionProblem::from_rows(&rows, &y).unwrap()).unwrap();
    assert!(max_abs_diff(&fit, &[2.0, 0.0, 2.0]) <= 1e-8, "{fit:?}");
}

#[test]
fn too_few_rows_is_an_error() {
    let rows = [vec![1.0, 2.0], vec![3.0, 4.0]];
    let short = RegressionProblem::from_rows(&rows[..1], &[1.0]).unwrap();
    assert!(fit_ols(&short).is_err());
}

/// Rows assembled straight from the raw readings.
fn rows_by_hand(
    raw: &[(HourStamp, f64)],
    temps: &TemperatureSeries,
    season: u8,
    order: i64,
    day_type: DayType,
    calendar: &DayCalendar,
) -> (Vec<Vec<f64>>, Vec<f64>) {
    let at = |date: NaiveDate| raw.iter().find(|(s, _)| *s == HourStamp::new(date, season).unwrap()).map(|r| r.1);
    let mut rows = Vec::new();
    let mut y = Vec::new();
    for &(stamp, v) in raw {
        if stamp.hour() != season {
            continue;
        }
        if day_type != DayType::AllDays && calendar.classify(stamp.date()) != day_type {
            continue;
        }
        let Some(t) = temps.get(stamp) else { continue };
        let lags: Option<Vec<f64>> = (1..=order).map(|k| at(stamp.date() - chrono::Duration::days(k))).collect();
        let Some(mut row) = lags else { continue };
        row.extend(common::features_by_cases(t));
        rows.push(row);
        y.push(v);
    }
    (rows, y)
}

#[test]
fn regression_rows_match_hand_built_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let start = NaiveDate::from_ymd_opt(2024, 5, 1).unwrap();
    for trial in 0..30 {
        let mut raw = Vec::new();
        let mut temps = TemperatureSeries::new();
        for d in 0..40 {
            for h in [7u8, 19] {
                let stamp = HourStamp::new(start + chrono::Duration::days(d), h).unwrap();
                if rng.random_bool(0.85) {
                    raw.push((stamp, rng.random_range(0.0..9.0)));
                }
                if rng.random_bool(0.9) {
                    temps.push(stamp, rng.random_range(-15.0..35.0)).unwrap();
                }
            }
        }
        let series = ConsumptionSeries::from_unsorted("m", raw.clone()).unwrap();
        let calendar = DayCalendar {
            policy: DayTypePolicy::Split,
            holidays: [start + chrono::Duration::days(9)].into(),
        };
        let order = 1 + trial % 4;
        for day_type in [DayType::AllDays, DayType::Workday, DayType::WeekendHoliday] {
            let season = Season::new(19).unwrap();
            let (rows, y) = rows_by_hand(&raw, &temps, 19, order as i64, day_type, &calendar);
            match build_problem(&series, &temps, season, day_type, &calendar, order, false) {
                Ok(p) => {
                    let got: Vec<Vec<f64>> = (0..p.n_samples()).map(|i| p.row(i)).collect();
                    assert_eq!(got, rows, "trial {trial} {day_type}");
                    assert_eq!(p.target().as_slice(), y.as_slice());
                }
                Err(_) => assert!(rows.is_empty(), "trial {trial} {day_type}"),
            }
        }
    }
}

#[test]
fn noiseless_model_is_recovered() {
    for seed in 0..20 {
        let model = common::RandomParx::draw(seed, 3);
        let (series, temps) = model.simulate(seed, 120, 0.0);
        let calendar = DayCalendar::default();
        let p = build_problem(&series, &temps, Season::new(common::HOUR).unwrap(), DayType::AllDays, &calendar, 3, false)
            .unwrap();
        let fit = fit_ols(&p).unwrap();
        assert!(common::relative_error(&fit, &model.coefficients()) <= 1e-6);
    }
}
