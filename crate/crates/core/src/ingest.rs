//! Point-based displacement CSV ingestion and time-window selection.
//!
//! The input layout mirrors the EGMS vector product: one row per measurement
//! point, a few metadata columns, then one displacement column (mm) per
//! acquisition epoch. Column indices are 0-based throughout.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("missing column: {0}")]
    MissingColumn(String),
    #[error("row {row}: expected {expected} fields, found {found}")]
    RaggedRow {
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("row {row}, column {column}: cannot parse {value:?} as a number")]
    NonNumeric {
        row: usize,
        column: usize,
        value: String,
    },
    #[error("row {row}: non-finite coordinate")]
    NonFiniteCoordinate { row: usize },
    #[error("duplicate coordinate ({easting}, {northing}) at row {row}")]
    DuplicateCoordinate {
        row: usize,
        easting: f64,
        northing: f64,
    },
    #[error("point set needs at least 3 non-collinear points")]
    TooFewPoints,
    #[error("window out of range: {0}")]
    WindowOutOfRange(String),
}

/// A single measurement point and its displacement series (mm).
#[derive(Debug, Clone, PartialEq)]
pub struct PointRecord {
    pub point_id: String,
    pub easting: f64,
    pub northing: f64,
    pub series: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointSet {
    pub records: Vec<PointRecord>,
    pub epoch_labels: Vec<String>,
}

/// Which CSV columns hold what. Displacement columns run from
/// `first_displacement` to the end of the row, or to `last_displacement`
/// (inclusive) when set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CsvSchema {
    /// Column holding the point identifier; row number is used when absent.
    pub id_column: Option<String>,
    pub easting_column: String,
    pub northing_column: String,
    pub first_displacement: usize,
    pub last_displacement: Option<usize>,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            id_column: Some("pid".into()),
            easting_column: "easting".into(),
            northing_column: "northing".into(),
            first_displacement: 3,
            last_displacement: None,
        }
    }
}

/// Input window and forecast target, as column offsets into each series.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSelection {
    pub input_start: usize,
    pub input_len: usize,
    pub target_index: usize,
}

impl WindowSelection {
    pub fn validate(&self, series_len: usize) -> Result<(), IngestError> {
        if self.input_len == 0 {
            return Err(IngestError::WindowOutOfRange("input_len must be positive".into()));
        }
        let input_end = self.input_start + self.input_len;
        if input_end > self.target_index {
            return Err(IngestError::WindowOutOfRange(format!(
                "target index {} falls inside the input window {}..{}",
                self.target_index, self.input_start, input_end
            )));
        }
        if self.target_index >= series_len {
            return Err(IngestError::WindowOutOfRange(format!(
                "target index {} beyond series length {}",
                self.target_index, series_len
            )));
        }
        Ok(())
    }
}

impl PointSet {
    /// Checks equal series lengths, finite unique coordinates and at least
    /// three non-collinear points.
    pub fn validate(&self) -> Result<(), IngestError> {
        let t = self.epoch_labels.len();
        let mut seen = HashSet::with_capacity(self.records.len());
        for (i, r) in self.records.iter().enumerate() {
            let row = i + 1;
            if r.series.len() != t {
                return Err(IngestError::RaggedRow {
                    row,
                    expected: t,
                    found: r.series.len(),
                });
            }
            if !r.easting.is_finite() || !r.northing.is_finite() {
                return Err(IngestError::NonFiniteCoordinate { row });
            }
            if !seen.insert((r.easting.to_bits(), r.northing.to_bits())) {
                return Err(IngestError::DuplicateCoordinate {
                    row,
                    easting: r.easting,
                    northing: r.northing,
                });
            }
        }
        if !has_non_collinear_triple(&self.records) {
            return Err(IngestError::TooFewPoints);
        }
        Ok(())
    }

    pub fn series_len(&self) -> usize {
        self.epoch_labels.len()
    }

    pub fn coordinates(&self) -> Vec<(f64, f64)> {
        self.records.iter().map(|r| (r.easting, r.northing)).collect()
    }

    /// Displacement of every point at one epoch, in record order.
    pub fn values_at(&self, epoch: usize) -> Vec<f64> {
        self.records.iter().map(|r| r.series[epoch]).collect()
    }

    /// Writes the set back out as CSV (`pid,easting,northing,<epochs...>`),
    /// six decimals for every number.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), IngestError> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["pid".to_string(), "easting".into(), "northing".into()];
        header.extend(self.epoch_labels.iter().cloned());
        w.write_record(&header)?;
        let mut buf = String::new();
        for r in &self.records {
            let mut row = Vec::with_capacity(3 + r.series.len());
            row.push(r.point_id.clone());
            for v in [r.easting, r.northing].iter().chain(&r.series) {
                buf.clear();
                write!(buf, "{v:.6}").expect("writing to a String");
                row.push(buf.clone());
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<(), IngestError> {
        self.write_csv(File::create(path)?)
    }
}

fn has_non_collinear_triple(records: &[PointRecord]) -> bool {
    let Some(a) = records.first() else {
        return false;
    };
    // farthest point from a, then any point off the a-b line
    let Some(b) = records.iter().max_by(|p, q| {
        let dp = (p.easting - a.easting).hypot(p.northing - a.northing);
        let dq = (q.easting - a.easting).hypot(q.northing - a.northing);
        dp.total_cmp(&dq)
    }) else {
        return false;
    };
    let (dx, dy) = (b.easting - a.easting, b.northing - a.northing);
    let len = dx.hypot(dy);
    if len == 0.0 {
        return false;
    }
    records.iter().any(|c| {
        let cross = dx * (c.northing - a.northing) - dy * (c.easting - a.easting);
        (cross / len).abs() > 1e-9 * len.max(1.0)
    })
}

fn parse_number(cell: &str, row: usize, column: usize) -> Result<f64, IngestError> {
    cell.trim().parse::<f64>().map_err(|_| IngestError::NonNumeric {
        row,
        column,
        value: cell.to_string(),
    })
}

/// Parses a displacement CSV from any reader. Row numbers in errors are
/// 1-based data rows (the header is row 0).
pub fn read_csv<R: Read>(input: R, schema: &CsvSchema) -> Result<PointSet, IngestError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(input);
    let header = reader.headers()?.clone();
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| IngestError::MissingColumn(name.to_string()))
    };
    let e_col = find(&schema.easting_column)?;
    let n_col = find(&schema.northing_column)?;
    let id_col = schema.id_column.as_deref().map(find).transpose()?;

    let width = header.len();
    let last = schema.last_displacement.unwrap_or(width.saturating_sub(1));
    if schema.first_displacement >= width || last >= width || last < schema.first_displacement {
        return Err(IngestError::MissingColumn(format!(
            "displacement columns {}..={} in a {}-column header",
            schema.first_displacement, last, width
        )));
    }
    let disp = schema.first_displacement..=last;
    let epoch_labels: Vec<String> = header
        .iter()
        .skip(schema.first_displacement)
        .take(disp.clone().count())
        .map(|s| s.trim().to_string())
        .collect();

    let mut records = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let row = i + 1;
        let rec = rec?;
        if rec.len() != width {
            return Err(IngestError::RaggedRow {
                row,
                expected: width,
                found: rec.len(),
            });
        }
        let easting = parse_number(&rec[e_col], row, e_col)?;
        let northing = parse_number(&rec[n_col], row, n_col)?;
        let series = disp
            .clone()
            .map(|c| parse_number(&rec[c], row, c))
            .collect::<Result<Vec<_>, _>>()?;
        let point_id = match id_col {
            Some(c) => rec[c].trim().to_string(),
            None => row.to_string(),
        };
        records.push(PointRecord {
            point_id,
            easting,
            northing,
            series,
        });
    }
    let ps = PointSet {
        records,
        epoch_labels,
    };
    ps.validate()?;
    Ok(ps)
}

pub fn parse_csv(path: &Path, schema: &CsvSchema) -> Result<PointSet, IngestError> {
    read_csv(File::open(path)?, schema)
}

/// Per-point input windows and scalar targets, in record order.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowedSeries {
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<f64>,
}

pub fn select_window(ps: &PointSet, w: &WindowSelection) -> Result<WindowedSeries, IngestError> {
    w.validate(ps.series_len())?;
    let range = w.input_start..w.input_start + w.input_len;
    let inputs = ps
        .records
        .iter()
        .map(|r| r.series[range.clone()].to_vec())
        .collect();
    let targets = ps.records.iter().map(|r| r.series[w.target_index]).collect();
    Ok(WindowedSeries { inputs, targets })
}
