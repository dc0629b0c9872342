//! Serving layer: a directory holding versioned snapshot files, a pointer
//! file naming the live version, and per-day append-only anomaly logs.
//!
//! ```text
//! <root>/
//!   CURRENT                      live version number
//!   snapshots/v00000000000000000007.snap
//!   anomalies/2024-03-01.csv
//! ```
//!
//! Publishing writes the snapshot to a temp file, syncs, renames it into
//! place, then swaps `CURRENT` the same way. A reader resolves `CURRENT` once
//! and reads an immutable file, so it never observes a partial snapshot.
//!
//! # Snapshot file
//!
//! ```text
//! meterwatch-snapshot
//! format_version=1
//! version=<u64>
//! created_at=<YYYY-MM-DDTHH>
//! epsilon=<f64>
//! order_p=<usize>
//! day_type_policy=<all|split>
//! holidays=<YYYY-MM-DD;...>
//! residual_floor=<f64>
//! sigma_floor=<f64>
//! fit_intercept=<bool>
//! residual_mode=<in-sample|hold-out:FRACTION>
//! models=<count>
//! skipped=<count>
//! checksum=<sha256 hex over every other line>
//! ---
//! model,meter_id,season,day_type,p,alpha_1..alpha_p,beta_1,beta_2,beta_3,mu,sigma,n_samples,intercept,trained_through,residual_samples
//! skip,meter_id,season,day_type,reason
//! ```
//!
//! Floats are written as `{:.16e}` (17 significant digits), which parses
//! back to the identical bit pattern.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use chrono::NaiveDate;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::parx::ParxModel;
use crate::residual::{DetectorConfig, GaussianParams, ResidualMode, SeasonDetectionModel};
use crate::stream::AnomalyRecord;
use crate::trainer::{ModelKey, ModelSnapshot, SkipReason, SkippedCell};
use crate::types::{DayType, DayTypePolicy, HourStamp, Season};

pub const SNAPSHOT_FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "meterwatch-snapshot";
const POINTER: &str = "CURRENT";

/// Crash points for fault-injection tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultPoint {
    /// Snapshot temp file written but not renamed into place.
    BeforeSnapshotRename,
    /// Snapshot file in place but `CURRENT` not yet swapped.
    BeforePointerFlip,
}

#[derive(Debug)]
pub struct ServingStore {
    root: PathBuf,
    cache: Mutex<Option<Arc<ModelSnapshot>>>,
    publish_lock: Mutex<()>,
    anomaly_lock: Mutex<()>,
    fault: Mutex<Option<FaultPoint>>,
}

impl ServingStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        for dir in [root.join("snapshots"), root.join("anomalies")] {
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        Ok(Self {
            root,
            cache: Mutex::new(None),
            publish_lock: Mutex::new(()),
            anomaly_lock: Mutex::new(()),
            fault: Mutex::new(None),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Arm a one-shot crash at `point` for the next publish.
    pub fn inject_fault(&self, point: Option<FaultPoint>) {
        *self.fault.lock().expect("fault lock") = point;
    }

    fn take_fault(&self, point: FaultPoint) -> bool {
        let mut f = self.fault.lock().expect("fault lock");
        if *f == Some(point) {
            *f = None;
            true
        } else {
            false
        }
    }

    fn snapshot_path(&self, version: u64) -> PathBuf {
        self.root.join("snapshots").join(format!("v{version:020}.snap"))
    }

    /// Version `CURRENT` points at, if any snapshot was ever published.
    pub fn latest_version(&self) -> Result<Option<u64>> {
        let path = self.root.join(POINTER);
        match fs::read_to_string(&path) {
            Ok(s) => s
                .trim()
                .parse()
                .map(Some)
                .map_err(|e| Error::parse(path.display().to_string(), format!("bad pointer: {e}"))),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(Error::io(path, e)),
        }
    }

    /// Durably write `snapshot`, then flip the pointer to it.
    pub fn publish_snapshot(&self, snapshot: &ModelSnapshot) -> Result<u64> {
        let _guard = self.publish_lock.lock().expect("publish lock");
        let current = self.latest_version()?.unwrap_or(0);
        if snapshot.version <= current {
            return Err(Error::StaleVersion {
                offered: snapshot.version,
                current,
            });
        }
        let text = encode_snapshot(snapshot);
        let final_path = self.snapshot_path(snapshot.version);
        let tmp = final_path.with_extension("snap.tmp");
        write_synced(&tmp, text.as_bytes())?;
        if self.take_fault(FaultPoint::BeforeSnapshotRename) {
            return Err(Error::InjectedFault("crash before snapshot rename"));
        }
        fs::rename(&tmp, &final_path).map_err(|e| Error::io(&final_path, e))?;
        sync_dir(&self.root.join("snapshots"));
        if self.take_fault(FaultPoint::BeforePointerFlip) {
            return Err(Error::InjectedFault("crash before pointer flip"));
        }
        let pointer = self.root.join(POINTER);
        let pointer_tmp = self.root.join(format!("{POINTER}.tmp"));
        write_synced(&pointer_tmp, format!("{}\n", snapshot.version).as_bytes())?;
        fs::rename(&pointer_tmp, &pointer).map_err(|e| Error::io(&pointer, e))?;
        sync_dir(&self.root);
        Ok(snapshot.version)
    }

    /// The snapshot `CURRENT` points at. Cached until the pointer moves.
    pub fn latest_snapshot(&self) -> Result<Arc<ModelSnapshot>> {
        let version = self.latest_version()?.ok_or(Error::EmptyStore)?;
        if let Some(cached) = self.cache.lock().expect("cache lock").as_ref() {
            if cached.version == version {
                return Ok(Arc::clone(cached));
            }
        }
        let snap = Arc::new(self.get_snapshot(version)?);
        *self.cache.lock().expect("cache lock") = Some(Arc::clone(&snap));
        Ok(snap)
    }

    pub fn get_snapshot(&self, version: u64) -> Result<ModelSnapshot> {
        let path = self.snapshot_path(version);
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(Error::SnapshotNotFound(version))
            }
            Err(e) => return Err(Error::io(&path, e)),
        };
        let snap = decode_snapshot(&text).map_err(|reason| Error::CorruptSnapshot {
            path: path.clone(),
            reason,
        })?;
        if snap.version != version {
            return Err(Error::CorruptSnapshot {
                path,
                reason: format!("file claims version {}", snap.version),
            });
        }
        Ok(snap)
    }

    /// Versions with a complete snapshot file on disk, ascending.
    pub fn list_versions(&self) -> Result<Vec<u64>> {
        let dir = self.root.join("snapshots");
        let mut out: Vec<u64> = fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                let name = e.file_name().into_string().ok()?;
                name.strip_prefix('v')?.strip_suffix(".snap")?.parse().ok()
            })
            .collect();
        out.sort_unstable();
        Ok(out)
    }

    fn anomaly_path(&self, date: NaiveDate) -> PathBuf {
        self.root
            .join("anomalies")
            .join(format!("{}.csv", date.format("%Y-%m-%d")))
    }

    /// Append records to the per-day logs, in the order given.
    pub fn append_anomalies(&self, records: &[AnomalyRecord]) -> Result<usize> {
        if records.is_empty() {
            return Ok(0);
        }
        let _guard = self.anomaly_lock.lock().expect("anomaly lock");
        let mut i = 0;
        while i < records.len() {
            let date = records[i].stamp.date();
            let path = self.anomaly_path(date);
            let mut file = OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            let mut buf = String::new();
            while i < records.len() && records[i].stamp.date() == date {
                buf.push_str(&records[i].to_store_line());
                buf.push('\n');
                i += 1;
            }
            file.write_all(buf.as_bytes())
                .and_then(|_| file.sync_data())
                .map_err(|e| Error::io(&path, e))?;
        }
        Ok(records.len())
    }

    /// Records with `from <= stamp <= to`, optionally for one meter, ordered
    /// by stamp and then by append order.
    pub fn query_anomalies(
        &self,
        meter_id: Option<&str>,
        from: HourStamp,
        to: HourStamp,
    ) -> Result<Vec<AnomalyRecord>> {
        let mut out = Vec::new();
        if from > to {
            return Ok(out);
        }
        let mut date = from.date();
        while date <= to.date() {
            let path = self.anomaly_path(date);
            match File::open(&path) {
                Ok(f) => {
                    for line in BufReader::new(f).lines() {
                        let line = line.map_err(|e| Error::io(&path, e))?;
                        if line.trim().is_empty() {
                            continue;
                        }
                        let rec = AnomalyRecord::parse_store_line(&line)?;
                        if rec.stamp >= from
                            && rec.stamp <= to
                            && meter_id.is_none_or(|m| m == rec.meter_id)
                        {
                            out.push(rec);
                        }
                    }
                }
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
                Err(e) => return Err(Error::io(&path, e)),
            }
            date = date.succ_opt().expect("date in range");
        }
        out.sort_by_key(|r| r.stamp);
        Ok(out)
    }
}

fn write_synced(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes)
        .and_then(|_| f.sync_all())
        .map_err(|e| Error::io(path, e))
}

fn sync_dir(dir: &Path) {
    if let Ok(d) = File::open(dir) {
        let _ = d.sync_all();
    }
}

fn f(x: f64) -> String {
    format!("{x:.16e}")
}

fn mode_label(mode: ResidualMode) -> String {
    match mode {
        ResidualMode::InSample => "in-sample".into(),
        ResidualMode::HoldOut { fraction } => format!("hold-out:{}", f(fraction)),
    }
}

fn checksum(header: &[String], body: &[String]) -> String {
    let mut h = Sha256::new();
    for line in header.iter().chain(body) {
        h.update(line.as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

/// Standalone model file, same format as the store's snapshot files.
pub fn write_snapshot_file(path: &Path, snapshot: &ModelSnapshot) -> Result<()> {
    fs::write(path, encode_snapshot(snapshot)).map_err(|e| Error::io(path, e))
}

pub fn read_snapshot_file(path: &Path) -> Result<ModelSnapshot> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    decode_snapshot(&text).map_err(|reason| Error::CorruptSnapshot {
        path: path.to_path_buf(),
        reason,
    })
}

/// Serialize a snapshot to the text format described in the module docs.
pub fn encode_snapshot(s: &ModelSnapshot) -> String {
    let c = &s.config;
    let holidays: Vec<String> = c.holidays.iter().map(|d| d.format("%Y-%m-%d").to_string()).collect();
    let header = vec![
        MAGIC.to_string(),
        format!("format_version={SNAPSHOT_FORMAT_VERSION}"),
        format!("version={}", s.version),
        format!("created_at={}", s.created_at),
        format!("epsilon={}", f(c.epsilon)),
        format!("order_p={}", c.order_p),
        format!("day_type_policy={}", c.day_type_policy.as_str()),
        format!("holidays={}", holidays.join(";")),
        format!("residual_floor={}", f(c.residual_floor)),
        format!("sigma_floor={}", f(c.sigma_floor)),
        format!("fit_intercept={}", c.fit_intercept),
        format!("residual_mode={}", mode_label(c.residual_mode)),
        format!("models={}", s.len()),
        format!("skipped={}", s.skipped.len()),
    ];
    let mut body = Vec::with_capacity(s.len() + s.skipped.len());
    for m in s.iter() {
        let p = &m.parx;
        let mut line = format!("model,{},{},{},{}", p.meter_id, p.season, p.day_type, p.order_p);
        for a in &p.alphas {
            let _ = write!(line, ",{}", f(*a));
        }
        for b in &p.betas {
            let _ = write!(line, ",{}", f(*b));
        }
        let g = &m.gaussian;
        let _ = write!(
            line,
            ",{},{},{},{},{},{}",
            f(g.mu),
            f(g.sigma),
            p.n_samples,
            f(p.intercept),
            p.trained_through,
            g.n_samples
        );
        body.push(line);
    }
    for sk in &s.skipped {
        body.push(format!(
            "skip,{},{},{},{}",
            sk.key.meter_id,
            sk.key.season,
            sk.key.day_type,
            sk.reason.label()
        ));
    }
    let sum = checksum(&header, &body);
    let mut out = String::new();
    for line in &header {
        out.push_str(line);
        out.push('\n');
    }
    let _ = writeln!(out, "checksum={sum}");
    out.push_str("---\n");
    for line in &body {
        out.push_str(line);
        out.push('\n');
    }
    out
}

/// Parse and verify a snapshot file. Errors describe the first problem found.
pub fn decode_snapshot(text: &str) -> std::result::Result<ModelSnapshot, String> {
    let mut lines = text.lines();
    let mut header = Vec::new();
    let mut stored_sum = None;
    for line in lines.by_ref() {
        if line == "---" {
            break;
        }
        if let Some(sum) = line.strip_prefix("checksum=") {
            stored_sum = Some(sum.to_string());
        } else {
            header.push(line.to_string());
        }
    }
    let body: Vec<String> = lines.map(str::to_string).collect();
    let stored_sum = stored_sum.ok_or("missing checksum")?;
    if checksum(&header, &body) != stored_sum {
        return Err("checksum mismatch".into());
    }
    if header.first().map(String::as_str) != Some(MAGIC) {
        return Err("not a snapshot file".into());
    }
    let field = |name: &str| -> std::result::Result<&str, String> {
        header
            .iter()
            .find_map(|l| l.strip_prefix(name).and_then(|r| r.strip_prefix('=')))
            .ok_or_else(|| format!("missing header field {name}"))
    };
    let num = |name: &str| -> std::result::Result<f64, String> {
        field(name)?.parse().map_err(|e| format!("{name}: {e}"))
    };
    let format_version: u32 = field("format_version")?.parse().map_err(|e| format!("{e}"))?;
    if format_version != SNAPSHOT_FORMAT_VERSION {
        return Err(format!("unsupported format version {format_version}"));
    }
    let version: u64 = field("version")?.parse().map_err(|e| format!("version: {e}"))?;
    let created_at: HourStamp = field("created_at")?.parse().map_err(|e: Error| e.to_string())?;
    let holidays: BTreeSet<NaiveDate> = field("holidays")?
        .split(';')
        .filter(|s| !s.is_empty())
        .map(|s| NaiveDate::parse_from_str(s, "%Y-%m-%d").map_err(|e| format!("holiday {s}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    let residual_mode = match field("residual_mode")? {
        "in-sample" => ResidualMode::InSample,
        other => {
            let frac = other
                .strip_prefix("hold-out:")
                .ok_or_else(|| format!("bad residual_mode {other}"))?;
            ResidualMode::HoldOut {
                fraction: frac.parse().map_err(|e| format!("residual_mode: {e}"))?,
            }
        }
    };
    let config = DetectorConfig {
        epsilon: num("epsilon")?,
        order_p: field("order_p")?.parse().map_err(|e| format!("order_p: {e}"))?,
        day_type_policy: field("day_type_policy")?
            .parse::<DayTypePolicy>()
            .map_err(|e| e.to_string())?,
        holidays,
        residual_floor: num("residual_floor")?,
        sigma_floor: num("sigma_floor")?,
        fit_intercept: field("fit_intercept")?.parse().map_err(|e| format!("fit_intercept: {e}"))?,
        residual_mode,
    };
    let n_models: usize = field("models")?.parse().map_err(|e| format!("models: {e}"))?;
    let n_skipped: usize = field("skipped")?.parse().map_err(|e| format!("skipped: {e}"))?;

    let mut snap = ModelSnapshot::new(version, created_at, config);
    for (i, line) in body.iter().enumerate() {
        let ctx = |e: String| format!("body line {}: {e}", i + 1);
        let cols: Vec<&str> = line.split(',').collect();
        match cols.first().copied() {
            Some("model") => snap.insert(decode_model(&cols).map_err(ctx)?),
            Some("skip") => snap.skipped.push(decode_skip(&cols).map_err(ctx)?),
            Some("") | None => {}
            Some(other) => return Err(ctx(format!("unknown record kind {other}"))),
        }
    }
    if snap.len() != n_models || snap.skipped.len() != n_skipped {
        return Err(format!(
            "record count mismatch: {} models / {} skipped, header says {n_models} / {n_skipped}",
            snap.len(),
            snap.skipped.len()
        ));
    }
    Ok(snap)
}

fn parse_key(cols: &[&str]) -> std::result::Result<ModelKey, String> {
    let season: u8 = cols[2].parse().map_err(|e| format!("season: {e}"))?;
    Ok(ModelKey {
        meter_id: cols[1].to_string(),
        season: Season::new(season).map_err(|e| e.to_string())?,
        day_type: cols[3].parse::<DayType>().map_err(|e| e.to_string())?,
    })
}

fn decode_model(cols: &[&str]) -> std::result::Result<SeasonDetectionModel, String> {
    if cols.len() < 5 {
        return Err("truncated model record".into());
    }
    let key = parse_key(cols)?;
    let p: usize = cols[4].parse().map_err(|e| format!("p: {e}"))?;
    if cols.len() != 5 + p + 3 + 6 {
        return Err(format!("model record has {} fields for p={p}", cols.len()));
    }
    let nums = |range: std::ops::Range<usize>| -> std::result::Result<Vec<f64>, String> {
        cols[range]
            .iter()
            .map(|s| s.parse::<f64>().map_err(|e| format!("number {s}: {e}")))
            .collect()
    };
    let alphas = nums(5..5 + p)?;
    let betas = nums(5 + p..8 + p)?;
    let rest = &cols[8 + p..];
    let mu: f64 = rest[0].parse().map_err(|e| format!("mu: {e}"))?;
    let sigma: f64 = rest[1].parse().map_err(|e| format!("sigma: {e}"))?;
    let n_samples: usize = rest[2].parse().map_err(|e| format!("n_samples: {e}"))?;
    let intercept: f64 = rest[3].parse().map_err(|e| format!("intercept: {e}"))?;
    let trained_through: HourStamp = rest[4].parse().map_err(|e: Error| e.to_string())?;
    let residual_samples: usize = rest[5].parse().map_err(|e| format!("residual_samples: {e}"))?;
    Ok(SeasonDetectionModel {
        parx: ParxModel {
            meter_id: key.meter_id,
            season: key.season,
            day_type: key.day_type,
            order_p: p,
            alphas,
            betas: [betas[0], betas[1], betas[2]],
            intercept,
            trained_through,
            n_samples,
        },
        gaussian: GaussianParams::new(mu, sigma, residual_samples).map_err(|e| e.to_string())?,
    })
}

fn decode_skip(cols: &[&str]) -> std::result::Result<SkippedCell, String> {
    if cols.len() != 5 {
        return Err("skip record needs 5 fields".into());
    }
    Ok(SkippedCell {
        key: parse_key(cols)?,
        reason: SkipReason::parse(cols[4]).ok_or_else(|| format!("bad skip reason {}", cols[4]))?,
    })
}
