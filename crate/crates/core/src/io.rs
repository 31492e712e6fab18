//! File formats: tick CSVs, matrix CSVs, the truth manifest, panel dumps and
//! the binary matrix blob.
//!
//! Binary blob layout (all little-endian):
//!
//! ```text
//! 8 bytes   magic "SPVMAT01"
//! u32       length L of the JSON echo header
//! L bytes   UTF-8 JSON echo of the inputs that produced the matrix
//! u64       rows
//! u64       cols
//! f64 * rows * cols, row-major
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preavg::FilteredPanel;
use crate::sim::TickSeries;

pub const BLOB_MAGIC: &[u8; 8] = b"SPVMAT01";
pub const TICK_HEADER: [&str; 3] = ["asset_id", "time", "log_price"];

fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        message: message.into(),
    }
}

pub fn write_ticks(path: &Path, series: &[&TickSeries]) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "{}", TICK_HEADER.join(","))?;
    for s in series {
        for (t, y) in s.times.iter().zip(&s.prices) {
            writeln!(w, "{},{},{}", s.asset_id, fmt_f64(*t), fmt_f64(*y))?;
        }
    }
    w.flush()?;
    Ok(())
}

/// One file per asset, `asset_<id>.csv`, inside `dir`. Returns the paths.
pub fn write_tick_dir(dir: &Path, series: &[TickSeries]) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::with_capacity(series.len());
    for s in series {
        let path = dir.join(format!("asset_{:04}.csv", s.asset_id));
        write_ticks(&path, &[s])?;
        paths.push(path);
    }
    Ok(paths)
}

/// Read tick CSVs; a file may hold several assets. Rows of one asset must be
/// in ascending time order. Assets are returned sorted by id.
pub fn read_ticks(paths: &[PathBuf]) -> Result<Vec<TickSeries>> {
    let mut by_asset: BTreeMap<usize, (Vec<f64>, Vec<f64>, PathBuf)> = BTreeMap::new();
    for path in paths {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_path(path)?;
        let headers = rdr.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != TICK_HEADER {
            return Err(parse_err(
                path,
                1,
                format!(
                    "expected header `{}`, found `{}`",
                    TICK_HEADER.join(","),
                    headers.iter().collect::<Vec<_>>().join(",")
                ),
            ));
        }
        for record in rdr.records() {
            let record = record?;
            let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
            if record.len() != 3 {
                return Err(parse_err(
                    path,
                    line,
                    format!("expected 3 fields, found {}", record.len()),
                ));
            }
            let id: usize = record[0]
                .parse()
                .map_err(|_| parse_err(path, line, format!("bad asset_id `{}`", &record[0])))?;
            let num = |field: &str, name: &str| -> Result<f64> {
                let v: f64 = field
                    .parse()
                    .map_err(|_| parse_err(path, line, format!("bad {name} `{field}`")))?;
                if !v.is_finite() {
                    return Err(parse_err(path, line, format!("{name} is not finite")));
                }
                Ok(v)
            };
            let t = num(&record[1], "time")?;
            let y = num(&record[2], "log_price")?;
            let entry = by_asset
                .entry(id)
                .or_insert_with(|| (Vec::new(), Vec::new(), path.clone()));
            if let Some(&last) = entry.0.last() {
                if t <= last {
                    return Err(parse_err(
                        path,
                        line,
                        format!("asset {id}: time {t} does not increase (previous {last})"),
                    ));
                }
            }
            if t < 0.0 {
                return Err(parse_err(path, line, format!("negative time {t}")));
            }
            entry.0.push(t);
            entry.1.push(y);
        }
    }
    if by_asset.is_empty() {
        return Err(Error::InvalidSeries("no tick rows found".into()));
    }
    by_asset
        .into_iter()
        .map(|(id, (times, prices, _))| TickSeries::new(id, times, prices))
        .collect()
}

/// Tick files inside a directory (`*.csv`, sorted by name).
pub fn list_csv(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    out.sort();
    Ok(out)
}

/// Headerless CSV, one matrix row per line.
pub fn write_matrix_csv(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let mut w = create(path)?;
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| fmt_f64(m[(i, j)])).collect();
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_matrix_csv(path: &Path) -> Result<DMatrix<f64>> {
    let text = std::fs::read_to_string(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|f| {
                f.trim()
                    .parse::<f64>()
                    .map_err(|_| parse_err(path, line_no, format!("bad number `{}`", f.trim())))
            })
            .collect::<Result<Vec<f64>>>()?;
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(parse_err(
                    path,
                    line_no,
                    format!("expected {} columns, found {}", first.len(), row.len()),
                ));
            }
        }
        rows.push(row);
    }
    let ncols = rows.first().map_or(0, Vec::len);
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

pub fn write_blob<E: Serialize>(path: &Path, m: &DMatrix<f64>, echo: &E) -> Result<()> {
    let header = serde_json::to_vec(echo)?;
    let len = u32::try_from(header.len()).map_err(|_| Error::InvalidConfig("echo header too large".into()))?;
    let mut w = create(path)?;
    w.write_all(BLOB_MAGIC)?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(&header)?;
    w.write_all(&(m.nrows() as u64).to_le_bytes())?;
    w.write_all(&(m.ncols() as u64).to_le_bytes())?;
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            w.write_all(&m[(i, j)].to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn slice_at(bytes: &[u8], pos: usize, n: usize) -> Option<&[u8]> {
    bytes.get(pos..pos.checked_add(n)?)
}

/// Returns the matrix and the raw JSON echo.
pub fn read_blob(path: &Path) -> Result<(DMatrix<f64>, serde_json::Value)> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    let bad = |m: &str| parse_err(path, 0, m.to_string());
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = slice_at(&bytes, pos, n).ok_or_else(|| bad("truncated blob"))?;
        pos += n;
        Ok(s)
    };
    if take(8)? != BLOB_MAGIC {
        return Err(bad("bad magic"));
    }
    let len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let echo: serde_json::Value = serde_json::from_slice(take(len)?)?;
    let rows = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
    let cols = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
    let count = rows.checked_mul(cols).ok_or_else(|| bad("matrix too large"))?;
    let data = take(count * 8)?;
    let vals: Vec<f64> = data
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((DMatrix::from_row_slice(rows, cols, &vals), echo))
}

/// Index of the ground-truth matrices written by `simulate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthManifest {
    pub p: usize,
    pub k: usize,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub seed: u64,
    pub tau_list: Vec<f64>,
    /// File names relative to the manifest, one per tau.
    pub sigma_x: Vec<String>,
    pub sigma_u: Vec<String>,
}

pub fn truth_file_names(j: usize) -> (String, String) {
    (format!("sigma_x_tau_{j:03}.csv"), format!("sigma_u_tau_{j:03}.csv"))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| parse_err(path, e.line(), e.to_string()))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PanelSidecar {
    pub asset_ids: Vec<usize>,
    pub bandwidths: Vec<f64>,
    pub delta0: f64,
    pub horizon: f64,
    pub degenerate_points: usize,
}

/// `time,asset_<id>,...` CSV plus a JSON sidecar next to it.
pub fn write_panel(csv_path: &Path, sidecar_path: &Path, panel: &FilteredPanel) -> Result<()> {
    let mut w = create(csv_path)?;
    let header: Vec<String> = std::iter::once("time".to_string())
        .chain(panel.asset_ids.iter().map(|id| format!("asset_{id}")))
        .collect();
    writeln!(w, "{}", header.join(","))?;
    for (j, t) in panel.grid.iter().enumerate() {
        let row: Vec<String> = std::iter::once(fmt_f64(*t))
            .chain((0..panel.p()).map(|i| fmt_f64(panel.values[(i, j)])))
            .collect();
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()?;
    write_json(
        sidecar_path,
        &PanelSidecar {
            asset_ids: panel.asset_ids.clone(),
            bandwidths: panel.bandwidths.clone(),
            delta0: panel.delta0,
            horizon: panel.horizon,
            degenerate_points: panel.degenerate_points,
        },
    )
}
