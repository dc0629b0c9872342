//! End-to-end runs of the command-line tool.

use std::io::Write;
use std::path::Path;
use std::process::{Command, Output, Stdio};

fn meterwatch(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_meterwatch"))
        .args(args)
        .env_remove("METERWATCH_STORE")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = meterwatch(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(meterwatch(&["--help"]).status.code(), Some(0));
    assert_eq!(meterwatch(&["--version"]).status.code(), Some(0));
    assert_eq!(meterwatch(&["train", "--bogus"]).status.code(), Some(2));
    assert_eq!(meterwatch(&[]).status.code(), Some(2));
    assert_eq!(meterwatch(&["train", "--readings", "x.csv"]).status.code(), Some(2));
}

#[test]
fn missing_and_malformed_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = meterwatch(&["baseline", "--readings", p(&dir.path().join("absent.csv"))]);
    assert_eq!(out.status.code(), Some(4));

    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "meter_id,timestamp,kwh\nm1,2024-01-01T00,-3\n").unwrap();
    assert_eq!(meterwatch(&["baseline", "--readings", p(&bad)]).status.code(), Some(3));

    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "no_such_key = 1\n").unwrap();
    let out = meterwatch(&["--config", p(&cfg), "baseline", "--readings", p(&bad)]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn generate_train_detect_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["generate", "--meters", "10", "--days", "30", "--seed", "4", "--out-dir", p(d)]);
    for f in ["readings.csv", "temps.csv", "labels.csv", "config.toml"] {
        assert!(d.join(f).exists(), "{f}");
    }
    let readings = d.join("readings.csv");
    let temps = d.join("temps.csv");
    let model = d.join("model.snap");
    ok(&["train", "--readings", p(&readings), "--temps", p(&temps), "--fit-intercept", "--out", p(&model)]);

    let anomalies = d.join("anomalies.csv");
    ok(&[
        "detect", "--models", p(&model), "--temps", p(&temps), "--fit-intercept",
        "--source", p(&readings), "--out", p(&anomalies),
    ]);
    let text = std::fs::read_to_string(&anomalies).unwrap();
    assert!(text.starts_with("meter_id,stamp,season,actual,predicted,score,model_version\n"));
    assert!(text.lines().count() > 1);
    assert!(d.join("anomalies.csv.config.toml").exists());

    let metrics = ok(&["evaluate", "--labels", p(&d.join("labels.csv")), "--anomalies", p(&anomalies)]);
    let row: Vec<f64> = metrics.lines().nth(1).unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    let recall = row[4];
    assert!(recall > 0.0, "{metrics}");

    // Same readings over stdin give the same anomalies.
    let mut child = Command::new(env!("CARGO_BIN_EXE_meterwatch"))
        .args(["detect", "--models", p(&model), "--temps", p(&temps), "--fit-intercept"])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let batches = meterwatch::stream::batches_from_readings(meterwatch::formats::read_readings(&readings).unwrap());
    {
        let mut stdin = child.stdin.take().unwrap();
        writeln!(stdin, "meter_id,timestamp,kwh").unwrap();
        for b in batches {
            for (m, v) in b.readings {
                writeln!(stdin, "{m},{},{v}", b.stamp).unwrap();
            }
        }
    }
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success());
    let mut a: Vec<_> = text.lines().collect();
    let streamed = String::from_utf8(out.stdout).unwrap();
    let mut b: Vec<_> = streamed.lines().collect();
    a.sort();
    b.sort();
    assert_eq!(a, b);
}

#[test]
fn store_backed_serving_and_studies() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["generate", "--meters", "4", "--days", "30", "--seed", "2", "--out-dir", p(d)]);
    let readings = d.join("readings.csv");
    let temps = d.join("temps.csv");
    let store = d.join("store");
    ok(&[
        "serve-batch", "--readings", p(&readings), "--temps", p(&temps), "--store", p(&store),
        "--interval-hours", "0", "--max-cycles", "2",
    ]);
    assert_eq!(std::fs::read_to_string(store.join("CURRENT")).unwrap().trim(), "2");

    let out = ok(&["detect", "--models", p(&store), "--temps", p(&temps), "--source", p(&readings)]);
    assert!(out.lines().skip(1).all(|l| l.ends_with(",2")));

    let sweep = ok(&["sweep", "--readings", p(&readings), "--temps", p(&temps), "--epsilons", "0.05,0.1"]);
    assert_eq!(sweep.lines().next(), Some("epsilon,anomalies"));
    let hist = ok(&[
        "histogram", "--readings", p(&readings), "--temps", p(&temps), "--meter", "m00001", "--bins", "7",
    ]);
    assert_eq!(hist.lines().count(), 8);
    let base = ok(&["baseline", "--readings", p(&readings)]);
    assert_eq!(base.lines().next(), Some("meter_id,stamp,kwh,fence"));

    let cfg = d.join("run.toml");
    std::fs::write(&cfg, "warmup_days = 10\n[detector]\nepsilon = 0.1\nfit_intercept = true\n").unwrap();
    let out = d.join("refresh.csv");
    ok(&[
        "--config", p(&cfg), "refresh-study", "--readings", p(&readings), "--temps", p(&temps),
        "--schedules", "daily,never", "--out", p(&out),
    ]);
    let echoed = std::fs::read_to_string(d.join("refresh.csv.config.toml")).unwrap();
    assert!(echoed.contains("warmup_days = 10"));
    assert!(echoed.contains("epsilon = 0.1"));
}
