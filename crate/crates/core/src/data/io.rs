//! CSV ingestion and export.
//!
//! Visits are stored long-form with header `poi_id,timestamp_utc,visits`, one
//! row per POI-hour and ISO-8601 UTC timestamps on whole hours. Metadata uses
//! `poi_id,name,address,hours,phone,top_category,sub_category,latitude,longitude`.

use std::collections::HashMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use chrono::{DateTime, Duration, Timelike, Utc};

use super::{PoiMetadata, VisitSeriesDataset};
use crate::error::{Error, Result};

const VISITS_HEADER: [&str; 3] = ["poi_id", "timestamp_utc", "visits"];
const METADATA_HEADER: [&str; 9] = [
    "poi_id",
    "name",
    "address",
    "hours",
    "phone",
    "top_category",
    "sub_category",
    "latitude",
    "longitude",
];

/// What had to be repaired while loading a visits file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoadReport {
    pub rows: usize,
    /// POI-hours absent from the file and filled with zero visits.
    pub missing_count: usize,
    pub missing_by_poi: Vec<(String, usize)>,
}

pub fn format_timestamp(ts: DateTime<Utc>) -> String {
    ts.format("%Y-%m-%dT%H:%M:%SZ").to_string()
}

pub fn parse_timestamp(s: &str) -> std::result::Result<DateTime<Utc>, String> {
    let ts = DateTime::parse_from_rfc3339(s.trim())
        .map_err(|e| format!("bad timestamp `{s}`: {e}"))?
        .with_timezone(&Utc);
    if ts.minute() != 0 || ts.second() != 0 || ts.nanosecond() != 0 {
        return Err(format!("timestamp `{s}` is not on a whole hour"));
    }
    Ok(ts)
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::io(path, e))
}

fn check_header(
    headers: &csv::StringRecord,
    expected: &[&str],
    path: &Path,
) -> Result<()> {
    let got: Vec<&str> = headers.iter().map(str::trim).collect();
    if got != expected {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            msg: format!("expected header `{}`, got `{}`", expected.join(","), got.join(",")),
        });
    }
    Ok(())
}

pub fn load_visits_csv(path: &Path) -> Result<(VisitSeriesDataset, LoadReport)> {
    read_visits(open(path)?, path)
}

/// Parses a visits table; `path` is used only in error messages.
pub fn read_visits(reader: impl Read, path: &Path) -> Result<(VisitSeriesDataset, LoadReport)> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers().map_err(|e| csv_error(e, path))?.clone();
    check_header(&headers, &VISITS_HEADER, path)?;

    let mut order: Vec<String> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut rows: Vec<Vec<(DateTime<Utc>, f64)>> = Vec::new();
    let mut count = 0;
    for record in rdr.records() {
        let record = record.map_err(|e| csv_error(e, path))?;
        let line = record.position().map_or(0, |p| p.line());
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        if record.len() != 3 {
            return Err(parse_err(format!("expected 3 fields, got {}", record.len())));
        }
        let id = record[0].trim().to_string();
        if id.is_empty() {
            return Err(parse_err("empty poi_id".into()));
        }
        let ts = parse_timestamp(&record[1]).map_err(parse_err)?;
        let visits: f64 = record[2]
            .trim()
            .parse()
            .map_err(|_| parse_err(format!("bad visit count `{}`", &record[2])))?;
        if !visits.is_finite() || visits < 0.0 {
            return Err(parse_err(format!("visit count {visits} must be finite and ≥ 0")));
        }
        let slot = *index.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            rows.push(Vec::new());
            rows.len() - 1
        });
        if let Some(&(last, _)) = rows[slot].last() {
            if ts == last {
                return Err(Error::Schema(format!(
                    "line {line}: duplicate row for ({id}, {})",
                    format_timestamp(ts)
                )));
            }
            if ts < last {
                return Err(Error::Schema(format!(
                    "line {line}: timestamps for {id} are not increasing ({} after {})",
                    format_timestamp(ts),
                    format_timestamp(last)
                )));
            }
        }
        rows[slot].push((ts, visits));
        count += 1;
    }
    let Some(start) = rows.iter().flatten().map(|(t, _)| *t).min() else {
        return Err(Error::Schema(format!("{}: no data rows", path.display())));
    };
    let end = rows.iter().flatten().map(|(t, _)| *t).max().unwrap_or(start);
    let len = ((end - start).num_hours() + 1) as usize;

    let mut report = LoadReport {
        rows: count,
        ..Default::default()
    };
    let mut visits = Vec::with_capacity(order.len());
    for (id, entries) in order.iter().zip(&rows) {
        let mut series = vec![0.0; len];
        for &(ts, v) in entries {
            series[(ts - start).num_hours() as usize] = v;
        }
        let missing = len - entries.len();
        if missing > 0 {
            report.missing_count += missing;
            report.missing_by_poi.push((id.clone(), missing));
        }
        visits.push(series);
    }
    let ds = VisitSeriesDataset::new(order, start, visits)?;
    Ok((ds, report))
}

pub fn write_visits_csv(ds: &VisitSeriesDataset, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_visits(ds, file).map_err(|e| Error::io(path, e))
}

fn write_visits(ds: &VisitSeriesDataset, out: impl Write) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(VISITS_HEADER)?;
    let stamps: Vec<String> = (0..ds.len())
        .map(|h| format_timestamp(ds.start() + Duration::hours(h as i64)))
        .collect();
    for (id, series) in ds.poi_ids().iter().zip(ds.visits()) {
        for (ts, v) in stamps.iter().zip(series) {
            w.write_record([id.as_str(), ts.as_str(), &v.to_string()])?;
        }
    }
    w.flush()
}

pub fn load_metadata_csv(path: &Path) -> Result<Vec<PoiMetadata>> {
    read_metadata(open(path)?, path)
}

pub fn read_metadata(reader: impl Read, path: &Path) -> Result<Vec<PoiMetadata>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers().map_err(|e| csv_error(e, path))?.clone();
    check_header(&headers, &METADATA_HEADER, path)?;
    let mut out: Vec<PoiMetadata> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for record in rdr.deserialize::<PoiMetadata>() {
        let meta = record.map_err(|e| csv_error(e, path))?;
        meta.validate()?;
        if !seen.insert(meta.poi_id.clone()) {
            return Err(Error::Schema(format!("duplicate metadata for {}", meta.poi_id)));
        }
        out.push(meta);
    }
    Ok(out)
}

pub fn write_metadata_csv(metadata: &[PoiMetadata], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    for m in metadata {
        w.serialize(m).map_err(|e| csv_error(e, path))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_error(e: csv::Error, path: &Path) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: e.to_string(),
    }
}
