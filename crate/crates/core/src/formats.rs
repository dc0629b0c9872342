//! Plain-text file formats shared by ingestion, datagen and the CLI.
//!
//! Readings: header `meter_id,stamp,kwh`, then `meter_id,YYYY-MM-DDTHH,kwh`.
//! Temperatures: header `stamp,celsius`, then `YYYY-MM-DDTHH,celsius`.
//! Input order is not significant.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::types::{ConsumptionSeries, HourStamp, MeterReading, TemperatureSeries};

pub const READINGS_HEADER: &str = "meter_id,stamp,kwh";
pub const TEMPERATURE_HEADER: &str = "stamp,celsius";

/// Parse one `meter_id,stamp,kwh` line.
pub fn parse_reading_line(line: &str) -> Result<MeterReading> {
    let mut fields = line.trim().split(',');
    let (Some(id), Some(stamp), Some(kwh), None) =
        (fields.next(), fields.next(), fields.next(), fields.next())
    else {
        return Err(Error::parse(line, "expected 3 comma-separated fields"));
    };
    if id.is_empty() {
        return Err(Error::parse(line, "empty meter id"));
    }
    let stamp: HourStamp = stamp.parse()?;
    let kwh: f64 = kwh
        .trim()
        .parse()
        .map_err(|e| Error::parse(line, format!("bad kwh: {e}")))?;
    MeterReading::new(id, stamp, kwh).map_err(|e| Error::parse(line, e.to_string()))
}

pub fn format_reading_line(r: &MeterReading) -> String {
    format!("{},{},{}", r.meter_id, r.stamp, r.kwh)
}

pub fn is_readings_header(line: &str) -> bool {
    line.trim().starts_with("meter_id")
}

pub fn read_readings(path: &Path) -> Result<Vec<MeterReading>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_readings_from(BufReader::new(file), &path.display().to_string())
}

pub fn read_readings_from(reader: impl BufRead, source: &str) -> Result<Vec<MeterReading>> {
    let mut lines = reader.lines().enumerate();
    match lines.next() {
        Some((_, Ok(header))) if is_readings_header(&header) => {}
        Some((_, Ok(_))) => {
            return Err(Error::parse(
                format!("{source}:1"),
                format!("missing header `{READINGS_HEADER}`"),
            ))
        }
        Some((_, Err(e))) => return Err(e.into()),
        None => return Ok(Vec::new()),
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let reading = parse_reading_line(&line).map_err(|e| match e {
            Error::Parse { message, .. } => Error::parse(format!("{source}:{}", i + 1), message),
            other => other,
        })?;
        out.push(reading);
    }
    Ok(out)
}

pub fn write_readings<'a>(
    path: &Path,
    series: impl IntoIterator<Item = &'a ConsumptionSeries>,
) -> Result<u64> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut rows = 0u64;
    let io = |e| Error::io(path, e);
    writeln!(w, "{READINGS_HEADER}").map_err(io)?;
    for s in series {
        for (stamp, kwh) in s.points() {
            writeln!(w, "{},{},{}", s.meter_id(), stamp, kwh).map_err(io)?;
            rows += 1;
        }
    }
    w.flush().map_err(io)?;
    Ok(rows)
}

pub fn read_temperatures(path: &Path) -> Result<TemperatureSeries> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_temperatures_from(BufReader::new(file), &path.display().to_string())
}

pub fn read_temperatures_from(reader: impl BufRead, source: &str) -> Result<TemperatureSeries> {
    let mut obs = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || (i == 0 && trimmed.starts_with("stamp")) {
            continue;
        }
        let loc = || format!("{source}:{}", i + 1);
        let (stamp, t) = trimmed
            .split_once(',')
            .ok_or_else(|| Error::parse(loc(), "expected `stamp,celsius`"))?;
        let stamp: HourStamp = stamp
            .parse()
            .map_err(|e: Error| Error::parse(loc(), e.to_string()))?;
        let t: f64 = t
            .trim()
            .parse()
            .map_err(|e| Error::parse(loc(), format!("bad temperature: {e}")))?;
        obs.push((stamp, t));
    }
    TemperatureSeries::from_unsorted(obs)
}

pub fn write_temperatures(path: &Path, temps: &TemperatureSeries) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "{TEMPERATURE_HEADER}").map_err(io)?;
    for (stamp, t) in temps.observations() {
        writeln!(w, "{stamp},{t}").map_err(io)?;
    }
    w.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_reading_lines() {
        let r = parse_reading_line("m-7,2024-01-02T13,0.75").unwrap();
        assert_eq!(r.meter_id, "m-7");
        assert_eq!(r.stamp, HourStamp::ymdh(2024, 1, 2, 13));
        assert_eq!(r.kwh, 0.75);
        assert!(parse_reading_line("m,2024-01-02T13").is_err());
        assert!(parse_reading_line("m,2024-01-02T13,-1").is_err());
        assert!(parse_reading_line(",2024-01-02T13,1").is_err());
        assert!(parse_reading_line("m,2024-01-02T13,1,extra").is_err());
    }

    #[test]
    fn header_is_required() {
        let body = "m,2024-01-02T13,1.0\n";
        assert!(read_readings_from(body.as_bytes(), "x").is_err());
        let ok = format!("{READINGS_HEADER}\n{body}\n");
        assert_eq!(read_readings_from(ok.as_bytes(), "x").unwrap().len(), 1);
    }

    #[test]
    fn temperature_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let temps = TemperatureSeries::from_unsorted([
            (HourStamp::ymdh(2024, 1, 1, 1), -3.25),
            (HourStamp::ymdh(2024, 1, 1, 0), 0.1),
        ])
        .unwrap();
        write_temperatures(&path, &temps).unwrap();
        assert_eq!(read_temperatures(&path).unwrap(), temps);
    }
}
