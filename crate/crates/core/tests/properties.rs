//! Invariants over generated inputs.

use std::collections::BTreeSet;

use meterwatch::baseline::{detect_boxplot, quartiles};
use meterwatch::formats::{format_reading_line, parse_reading_line};
use meterwatch::parx::exogenous_features;
use meterwatch::residual::{classify, density, fit_gaussian, log_l1_residual, GaussianParams, Verdict};
use meterwatch::stream::{batches_from_readings, MeterWindow};
use meterwatch::{ConsumptionSeries, DetectorConfig, HourStamp, MeterReading, Season};
use proptest::prelude::*;

fn stamp() -> impl Strategy<Value = HourStamp> {
    (0i64..3000, 0i64..24).prop_map(|(d, h)| HourStamp::ymdh(2020, 1, 1, 0).add_days(d).add_hours(h))
}

fn gaussian() -> impl Strategy<Value = GaussianParams> {
    (-15.0f64..5.0, 1e-3f64..5.0).prop_map(|(mu, sigma)| GaussianParams { mu, sigma, n_samples: 10 })
}

proptest! {
    #[test]
    fn features_are_nonnegative_and_continuous(t in -50.0f64..60.0) {
        let f = exogenous_features(t).unwrap().as_array();
        prop_assert!(f.iter().all(|v| *v >= 0.0));
        let g = exogenous_features(t + 1e-6).unwrap().as_array();
        for (a, b) in f.iter().zip(g) {
            prop_assert!((a - b).abs() <= 1e-6 + 1e-12);
        }
    }

    #[test]
    fn density_peaks_at_mean_and_is_symmetric(g in gaussian(), dx in 0.0f64..10.0) {
        let peak = density(g.mu, &g);
        prop_assert!(density(g.mu + dx, &g) <= peak);
        let (l, r) = (density(g.mu - dx, &g), density(g.mu + dx, &g));
        prop_assert!((l - r).abs() <= 1e-12 * peak.max(1.0));
    }

    #[test]
    fn larger_threshold_flags_a_superset(
        g in gaussian(),
        actual in 0.0f64..50.0,
        predicted in 0.0f64..50.0,
        e1 in 1e-4f64..1.0,
        e2 in 1e-4f64..1.0,
    ) {
        let (lo, hi) = if e1 <= e2 { (e1, e2) } else { (e2, e1) };
        let at = |eps: f64| {
            let cfg = DetectorConfig::default().with_epsilon(eps);
            matches!(classify(actual, predicted, &g, &cfg), Verdict::Anomaly(_))
        };
        prop_assert!(!at(lo) || at(hi));
    }

    #[test]
    fn log_residual_respects_floor(a in 0.0f64..100.0, p in -10.0f64..100.0) {
        let x = log_l1_residual(a, p, 1e-6);
        prop_assert!(x >= 1e-6f64.ln());
        prop_assert!(x.is_finite());
    }

    #[test]
    fn fitted_gaussian_matches_sample(xs in prop::collection::vec(-20.0f64..20.0, 2..200)) {
        let g = fit_gaussian(&xs).unwrap();
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        prop_assert!((g.mu - mean).abs() <= 1e-9 * mean.abs().max(1.0));
        prop_assert!((g.sigma - var.sqrt().max(1e-3)).abs() <= 1e-9);
    }

    #[test]
    fn quartiles_are_ordered(xs in prop::collection::vec(-100.0f64..100.0, 4..300)) {
        let q = quartiles(&xs).unwrap();
        let min = xs.iter().copied().fold(f64::INFINITY, f64::min);
        let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(min <= q.q1 && q.q1 <= q.median && q.median <= q.q3 && q.q3 <= max);
    }

    #[test]
    fn boxplot_flags_lie_outside_fences(values in prop::collection::vec(0.0f64..20.0, 8..60), spike in 30.0f64..500.0) {
        let start = HourStamp::ymdh(2024, 1, 1, 3);
        let mut points: Vec<_> = values.iter().enumerate().map(|(i, v)| (start.add_days(i as i64), *v)).collect();
        points.push((start.add_days(values.len() as i64), spike));
        let series = ConsumptionSeries::from_unsorted("m", points.clone()).unwrap();
        let out = detect_boxplot(&series).unwrap();
        let all: Vec<f64> = points.iter().map(|p| p.1).collect();
        let (lo, hi) = quartiles(&all).unwrap().fences();
        let flagged: BTreeSet<_> = out.all().into_iter().collect();
        for (s, v) in points {
            prop_assert_eq!(flagged.contains(&s), v < lo || v > hi);
        }
    }

    #[test]
    fn stamp_text_roundtrip(s in stamp(), k in -500i64..500) {
        let back: HourStamp = s.to_string().parse().unwrap();
        prop_assert_eq!(back, s);
        prop_assert_eq!(s.add_hours(k).add_hours(-k), s);
        prop_assert_eq!(s.add_days(k).season(), s.season());
    }

    #[test]
    fn reading_line_roundtrip(s in stamp(), kwh in 0.0f64..1e6, id in "[a-z][a-z0-9_]{0,8}") {
        let r = MeterReading::new(id, s, kwh).unwrap();
        prop_assert_eq!(parse_reading_line(&format_reading_line(&r)).unwrap(), r);
    }

    #[test]
    fn batches_cover_readings_in_time_order(raw in prop::collection::vec((0usize..4, 0i64..200, 0.0f64..9.0), 0..300)) {
        let start = HourStamp::ymdh(2024, 6, 1, 0);
        let readings: Vec<_> = raw
            .iter()
            .map(|&(m, h, v)| MeterReading::new(format!("m{m}"), start.add_hours(h), v).unwrap())
            .collect();
        let batches = batches_from_readings(readings.clone());
        prop_assert!(batches.windows(2).all(|w| w[0].stamp < w[1].stamp));
        let total: usize = batches.iter().map(|b| b.readings.len()).sum();
        prop_assert_eq!(total, readings.len());
        for b in &batches {
            prop_assert!(b.readings.iter().all(|(m, v)| readings.iter().any(|r| r.stamp == b.stamp && &r.meter_id == m && r.kwh == *v)));
        }
    }

    #[test]
    fn window_never_exceeds_order(order in 1usize..6, raw in prop::collection::vec((0i64..24 * 30, 0.0f64..9.0), 1..400)) {
        let start = HourStamp::ymdh(2024, 6, 1, 0);
        let mut w = MeterWindow::new("m", order);
        for (h, v) in raw {
            w.ingest(start.add_hours(h), v);
            prop_assert!(w.len() <= order * 24);
        }
        for s in Season::all() {
            let held = w.recent(s);
            prop_assert!(held.len() <= order);
            prop_assert!(held.windows(2).all(|p| p[0].0 > p[1].0));
        }
    }
}
