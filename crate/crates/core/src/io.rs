//! File formats: CSV for point and series data, JSON for records.
//!
//! Floats are written with Rust's shortest round-trip formatting, so a
//! write/read cycle is lossless and repeated writes are byte-identical.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::dynamics::{Polyline, SeriesMeta, TimeSeries};
use crate::error::{Error, Result};
use crate::manifold::{CloudPoint, HpdrGrid};

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    Ok(csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(create(path)?))
}

fn parse_f64(s: &str, path: &Path, line: u64) -> Result<f64> {
    s.trim()
        .parse()
        .map_err(|_| Error::Parameter(format!("{}:{line}: '{s}' is not a number", path.display())))
}

fn parse_usize(s: &str, path: &Path, line: u64) -> Result<usize> {
    s.trim()
        .parse()
        .map_err(|_| Error::Parameter(format!("{}:{line}: '{s}' is not a nonnegative integer", path.display())))
}

fn read_rows(path: &Path, header: &[&str]) -> Result<Vec<(u64, csv::StringRecord)>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let got: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if got.iter().map(String::as_str).ne(header.iter().copied()) {
        return Err(Error::Parameter(format!(
            "{}: expected header '{}', found '{}'",
            path.display(),
            header.join(","),
            got.join(",")
        )));
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != header.len() {
            return Err(Error::Parameter(format!("{}:{line}: expected {} fields", path.display(), header.len())));
        }
        rows.push((line, rec));
    }
    Ok(rows)
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

/// Sidecar path of a series CSV: `foo.csv` → `foo.json`.
pub fn sidecar_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("json")
}

/// One value per row under the header `x`, plus a JSON sidecar with the
/// provenance when the series has any.
pub fn write_series(path: &Path, series: &TimeSeries) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["x"])?;
    for x in &series.values {
        w.write_record([x.to_string()])?;
    }
    w.flush()?;
    if let Some(meta) = &series.meta {
        write_json(&sidecar_path(path), meta)?;
    }
    Ok(())
}

/// Read a series CSV, picking up the sidecar if it exists.
pub fn read_series(path: &Path) -> Result<TimeSeries> {
    let values = read_rows(path, &["x"])?
        .into_iter()
        .map(|(line, rec)| parse_f64(&rec[0], path, line))
        .collect::<Result<Vec<_>>>()?;
    let side = sidecar_path(path);
    let meta = if side.exists() { Some(read_json::<SeriesMeta>(&side)?) } else { None };
    Ok(TimeSeries { values, meta })
}

/// Columns `x,y,depth`.
pub fn write_polyline(path: &Path, line: &Polyline) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["x", "y", "depth"])?;
    for (p, d) in line.points.iter().zip(&line.depth) {
        w.write_record([p[0].to_string(), p[1].to_string(), d.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_polyline(path: &Path) -> Result<Polyline> {
    let mut line = Polyline::default();
    for (n, rec) in read_rows(path, &["x", "y", "depth"])? {
        line.points.push([parse_f64(&rec[0], path, n)?, parse_f64(&rec[1], path, n)?]);
        line.depth.push(parse_usize(&rec[2], path, n)?);
    }
    Ok(line)
}

/// Columns `x,y,source_id,sweep_index`.
pub fn write_cloud(path: &Path, points: &[CloudPoint]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["x", "y", "source_id", "sweep_index"])?;
    for p in points {
        w.write_record([
            p.x.to_string(),
            p.y.to_string(),
            p.source_id.to_string(),
            p.sweep_index.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_cloud(path: &Path) -> Result<Vec<CloudPoint>> {
    read_rows(path, &["x", "y", "source_id", "sweep_index"])?
        .into_iter()
        .map(|(n, rec)| {
            Ok(CloudPoint {
                x: parse_f64(&rec[0], path, n)?,
                y: parse_f64(&rec[1], path, n)?,
                source_id: parse_usize(&rec[2], path, n)?,
                sweep_index: parse_usize(&rec[3], path, n)?,
            })
        })
        .collect()
}

/// Count matrix as headerless CSV, one grid row per line, plus the JSON
/// header at `header_path`.
pub fn write_grid(csv_path: &Path, header_path: &Path, grid: &HpdrGrid) -> Result<()> {
    let mut w = csv_writer(csv_path)?;
    for r in 0..grid.rows {
        w.write_record(grid.row(r).iter().map(u64::to_string))?;
    }
    w.flush()?;
    write_json(header_path, &grid.header())
}
