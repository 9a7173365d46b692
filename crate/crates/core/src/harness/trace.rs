//! CSV trace persistence. Floats are written in shortest round-trip form so
//! that identical runs give identical bytes; absent values are empty cells.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::methods::TraceRecord;

pub const TRACE_COLUMNS: [&str; 10] = [
    "k",
    "F",
    "gap",
    "delta_requested",
    "delta_certified",
    "H_used",
    "inner_iters",
    "hvp_count",
    "grad_count",
    "time_s",
];

/// A trace row as read back from disk.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub k: usize,
    pub objective: f64,
    pub gap: Option<f64>,
    pub delta_requested: Option<f64>,
    pub delta_certified: Option<f64>,
    pub h_used: Option<f64>,
    pub inner_iterations: usize,
    pub hvp_count: u64,
    pub grad_count: u64,
    pub time_s: Option<f64>,
}

fn float(x: f64) -> String {
    format!("{x:e}")
}

fn opt(x: Option<f64>) -> String {
    x.map(float).unwrap_or_default()
}

/// The trace as CSV text, header included.
pub fn trace_csv(records: &[TraceRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(TRACE_COLUMNS)?;
    for r in records {
        w.write_record([
            r.k.to_string(),
            float(r.objective),
            opt(r.gap),
            opt(r.delta_requested),
            opt(r.delta_certified),
            opt(r.h_used),
            r.inner_iterations.to_string(),
            r.hvp_count.to_string(),
            r.grad_count.to_string(),
            opt(r.time_s),
        ])?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Numerical(format!("csv buffer: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::Numerical(format!("csv encoding: {e}")))
}

pub fn write_trace(path: &Path, records: &[TraceRecord]) -> Result<()> {
    fs::write(path, trace_csv(records)?).map_err(|e| Error::io(path, e))
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceRow>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::Reader::from_reader(file);
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if header != TRACE_COLUMNS {
        return Err(Error::Parse {
            path: path.into(),
            line: 1,
            msg: format!("unexpected columns {header:?}, expected {TRACE_COLUMNS:?}"),
        });
    }
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let line = i + 2;
        let bad = |col: &str, cell: &str| Error::Parse {
            path: path.into(),
            line,
            msg: format!("column {col}: cannot parse '{cell}'"),
        };
        let cell = |j: usize| record.get(j).unwrap_or("");
        let real = |j: usize| -> Result<Option<f64>> {
            match cell(j) {
                "" => Ok(None),
                s => s
                    .parse::<f64>()
                    .map(Some)
                    .map_err(|_| bad(TRACE_COLUMNS[j], s)),
            }
        };
        let int = |j: usize| -> Result<u64> {
            cell(j)
                .parse::<u64>()
                .map_err(|_| bad(TRACE_COLUMNS[j], cell(j)))
        };
        rows.push(TraceRow {
            k: int(0)? as usize,
            objective: real(1)?.ok_or_else(|| bad("F", ""))?,
            gap: real(2)?,
            delta_requested: real(3)?,
            delta_certified: real(4)?,
            h_used: real(5)?,
            inner_iterations: int(6)? as usize,
            hvp_count: int(7)?,
            grad_count: int(8)?,
            time_s: real(9)?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(k: usize, gap: Option<f64>) -> TraceRecord {
        TraceRecord {
            k,
            objective: 1.0 + 1e-17 * k as f64 + 0.1,
            gap,
            delta_requested: if k == 0 { None } else { Some(1.0 / 3.0) },
            delta_certified: None,
            h_used: Some(2.0),
            inner_iterations: 3,
            grad_norm: 0.5,
            hvp_count: 10 * k as u64,
            grad_count: k as u64,
            dist_to_opt: None,
            accepted: true,
            time_s: None,
        }
    }

    #[test]
    fn header_and_empty_cells() {
        let text = trace_csv(&[record(0, None), record(1, Some(1e-300))]).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), TRACE_COLUMNS.join(","));
        assert_eq!(lines.next().unwrap(), "0,1.1e0,,,,2e0,3,0,0,");
        assert!(lines.next().unwrap().contains("1e-300"));
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let recs = vec![
            record(0, Some(0.25)),
            record(1, Some(std::f64::consts::PI * 1e-9)),
        ];
        write_trace(&path, &recs).unwrap();
        let rows = read_trace(&path).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1].gap, recs[1].gap);
        assert_eq!(rows[1].delta_requested, Some(1.0 / 3.0));
        assert_eq!(rows[0].delta_requested, None);
        assert_eq!(rows[1].objective, recs[1].objective);
    }

    #[test]
    fn rejects_foreign_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        fs::write(&path, "k,F\n1,2\n").unwrap();
        assert!(matches!(read_trace(&path), Err(Error::Parse { .. })));
    }
}
