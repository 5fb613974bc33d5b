//! On-disk formats.
//!
//! | file              | format | one record per             |
//! |-------------------|--------|----------------------------|
//! | trip log          | JSONL  | stop event                 |
//! | ground truth      | JSON   | simulation (sidecar)       |
//! | flow ledger       | CSV    | (estate, elevator, floor, date) |
//! | features          | CSV    | floor key                  |
//! | anomaly records   | JSONL  | emitted record             |
//!
//! Floats are written in shortest round-trip decimal form, so every format
//! reads back bit-exactly.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use chrono::NaiveDate;

use crate::error::{Error, Result};
use crate::event::{StopEvent, DEFAULT_CAPACITY};
use crate::features::FloorDayAggregate;
use crate::flowrec::FlowLedger;
use crate::flowsim::GroundTruth;
use crate::key::{validate_ident, DayKind, FloorKey, ATTR_SLOTS, HOURS};
use crate::pipeline::AnomalyRecord;

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| Error::io(path, e))
}

fn write_jsonl<T: serde::Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = create(path)?;
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_trip_log(path: impl AsRef<Path>, events: &[StopEvent]) -> Result<()> {
    write_jsonl(path.as_ref(), events)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IngestOptions {
    pub capacity: usize,
    /// Fail the whole file when more than this fraction of lines is malformed.
    pub max_reject_fraction: f64,
}

impl Default for IngestOptions {
    fn default() -> Self {
        IngestOptions {
            capacity: DEFAULT_CAPACITY,
            max_reject_fraction: 0.10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Reject {
    /// 1-based line number.
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct Ingested {
    pub events: Vec<StopEvent>,
    pub rejects: Vec<Reject>,
}

/// Parses and validates a trip log. Malformed lines are collected rather
/// than aborting; blank lines are skipped. Events come back sorted by
/// timestamp (stable), hence in order within each elevator.
pub fn ingest_reader(reader: impl BufRead, options: &IngestOptions) -> std::io::Result<Ingested> {
    let mut out = Ingested::default();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<StopEvent>(&line)
            .map_err(|e| e.to_string())
            .and_then(|ev| ev.validate(options.capacity).map(|_| ev).map_err(|e| e.to_string()));
        match parsed {
            Ok(ev) => out.events.push(ev),
            Err(reason) => out.rejects.push(Reject { line: i + 1, reason }),
        }
    }
    out.events.sort_by_key(|e| e.timestamp);
    Ok(out)
}

pub fn ingest(path: impl AsRef<Path>, options: &IngestOptions) -> Result<Ingested> {
    let path = path.as_ref();
    let out = ingest_reader(open(path)?, options).map_err(|e| Error::io(path, e))?;
    let total = out.events.len() + out.rejects.len();
    if total > 0 && out.rejects.len() as f64 > options.max_reject_fraction * total as f64 {
        return Err(Error::TooManyRejects {
            path: path.to_path_buf(),
            rejected: out.rejects.len(),
            total,
        });
    }
    for r in &out.rejects {
        tracing::warn!(path = %path.display(), line = r.line, reason = %r.reason, "rejected trip-log line");
    }
    Ok(out)
}

pub fn write_truth(path: impl AsRef<Path>, truth: &GroundTruth) -> Result<()> {
    let path = path.as_ref();
    let mut w = create(path)?;
    serde_json::to_writer(&mut w, truth)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_truth(path: impl AsRef<Path>) -> Result<GroundTruth> {
    Ok(serde_json::from_reader(open(path.as_ref())?)?)
}

/// Ledger CSV header: key columns, counts, `hour_00..hour_23`,
/// `class_sum_1..class_sum_22`, `score_sum_1..score_sum_22`.
pub fn ledger_header() -> Vec<String> {
    let mut h: Vec<String> = [
        "estate",
        "elevator",
        "floor",
        "date",
        "day_kind",
        "in_count",
        "out_count",
        "passenger_count",
    ]
    .map(String::from)
    .to_vec();
    h.extend((0..HOURS).map(|i| format!("hour_{i:02}")));
    h.extend((1..=ATTR_SLOTS).map(|i| format!("class_sum_{i}")));
    h.extend((1..=ATTR_SLOTS).map(|i| format!("score_sum_{i}")));
    h
}

pub fn write_ledger_to(w: impl Write, ledger: &FlowLedger) -> Result<()> {
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(ledger_header())?;
    for a in ledger.iter() {
        let mut row = vec![
            a.key.floor.estate.clone(),
            a.key.floor.elevator.clone(),
            a.key.floor.floor.to_string(),
            a.key.date.to_string(),
            match a.day_kind {
                DayKind::Weekday => "weekday".into(),
                DayKind::Weekend => "weekend".into(),
            },
            a.in_count.to_string(),
            a.out_count.to_string(),
            a.passenger_count.to_string(),
        ];
        row.extend(a.hour_histogram.iter().map(u32::to_string));
        row.extend(a.attr_class_sum.iter().map(f64::to_string));
        row.extend(a.attr_score_sum.iter().map(f64::to_string));
        csv.write_record(row)?;
    }
    csv.flush().map_err(|e| Error::data(e.to_string()))?;
    Ok(())
}

pub fn write_ledger(path: impl AsRef<Path>, ledger: &FlowLedger) -> Result<()> {
    write_ledger_to(create(path.as_ref())?, ledger)
}

pub fn read_ledger_from(r: impl Read) -> Result<FlowLedger> {
    let mut csv = csv::Reader::from_reader(r);
    let expected = ledger_header();
    if csv.headers()?.iter().ne(expected.iter().map(String::as_str)) {
        return Err(Error::data("ledger header does not match the documented layout"));
    }
    let mut ledger = FlowLedger::new();
    for (n, row) in csv.records().enumerate() {
        let row = row?;
        let line = n + 2;
        let bad = |col: &str| Error::data(format!("ledger line {line}: bad {col}"));
        let num = |i: usize| -> Result<u32> { row[i].parse().map_err(|_| bad(&expected[i])) };
        let real = |i: usize| -> Result<f64> { row[i].parse().map_err(|_| bad(&expected[i])) };
        validate_ident("estate", &row[0])?;
        validate_ident("elevator", &row[1])?;
        let key = FloorKey::new(&row[0], &row[1], num(2)?);
        let date: NaiveDate = row[3].parse().map_err(|_| bad("date"))?;
        let mut a = FloorDayAggregate::empty(key.on(date));
        let kind = match &row[4] {
            "weekday" => DayKind::Weekday,
            "weekend" => DayKind::Weekend,
            _ => return Err(bad("day_kind")),
        };
        if kind != a.day_kind {
            return Err(bad("day_kind"));
        }
        a.in_count = num(5)?;
        a.out_count = num(6)?;
        a.passenger_count = num(7)?;
        for h in 0..HOURS {
            a.hour_histogram[h] = num(8 + h)?;
        }
        for s in 0..ATTR_SLOTS {
            a.attr_class_sum[s] = real(8 + HOURS + s)?;
            a.attr_score_sum[s] = real(8 + HOURS + ATTR_SLOTS + s)?;
        }
        a.validate()
            .map_err(|e| Error::data(format!("ledger line {line}: {e}")))?;
        if ledger.get(&a.key).is_some() {
            return Err(Error::data(format!("ledger line {line}: duplicate key")));
        }
        ledger.insert(a);
    }
    Ok(ledger)
}

pub fn read_ledger(path: impl AsRef<Path>) -> Result<FlowLedger> {
    read_ledger_from(open(path.as_ref())?)
}

/// Feature CSV: `estate,elevator,floor` followed by the layout's named columns
/// in layout order.
pub fn write_features_to<'a>(
    w: impl Write,
    names: &[String],
    rows: impl IntoIterator<Item = (&'a FloorKey, &'a [f64])>,
) -> Result<()> {
    let mut csv = csv::Writer::from_writer(w);
    let mut header = vec!["estate".to_string(), "elevator".into(), "floor".into()];
    header.extend(names.iter().cloned());
    csv.write_record(&header)?;
    for (key, values) in rows {
        if values.len() != names.len() {
            return Err(Error::data(format!(
                "{key}: {} values for {} columns",
                values.len(),
                names.len()
            )));
        }
        let mut row = vec![key.estate.clone(), key.elevator.clone(), key.floor.to_string()];
        row.extend(values.iter().map(f64::to_string));
        csv.write_record(row)?;
    }
    csv.flush().map_err(|e| Error::data(e.to_string()))?;
    Ok(())
}

pub fn read_features_from(r: impl Read, names: &[String]) -> Result<Vec<(FloorKey, Vec<f64>)>> {
    let mut csv = csv::Reader::from_reader(r);
    let header = csv.headers()?.clone();
    let expected = ["estate", "elevator", "floor"]
        .into_iter()
        .chain(names.iter().map(String::as_str));
    if header.iter().ne(expected) {
        return Err(Error::data("feature header does not match the layout"));
    }
    let mut out = Vec::new();
    for (n, row) in csv.records().enumerate() {
        let row = row?;
        let bad = || Error::data(format!("feature line {}: malformed", n + 2));
        let key = FloorKey::new(&row[0], &row[1], row[2].parse().map_err(|_| bad())?);
        let values = row
            .iter()
            .skip(3)
            .map(|v| v.parse().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        out.push((key, values));
    }
    Ok(out)
}

pub fn write_anomalies(path: impl AsRef<Path>, records: &[AnomalyRecord]) -> Result<()> {
    write_jsonl(path.as_ref(), records)
}

pub fn read_anomalies(path: impl AsRef<Path>) -> Result<Vec<AnomalyRecord>> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec =
            serde_json::from_str(&line).map_err(|e| Error::data(format!("{} line {}: {e}", path.display(), i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}
