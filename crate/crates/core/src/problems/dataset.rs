use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Sparse row-major (CSR) feature matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseRows {
    n_cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseRows {
    pub fn from_rows(n_cols: usize, rows: Vec<Vec<(usize, f64)>>) -> Result<Self> {
        let mut indptr = Vec::with_capacity(rows.len() + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        for (r, row) in rows.into_iter().enumerate() {
            for (c, v) in row {
                if c >= n_cols {
                    return Err(Error::contract(format!(
                        "row {r}: column {c} out of range for {n_cols} columns"
                    )));
                }
                if !v.is_finite() {
                    return Err(Error::contract(format!("row {r}: non-finite entry {v}")));
                }
                indices.push(c);
                values.push(v);
            }
            indptr.push(indices.len());
        }
        Ok(SparseRows {
            n_cols,
            indptr,
            indices,
            values,
        })
    }

    pub fn from_dense(rows: &[DVector<f64>]) -> Result<Self> {
        let n_cols = rows.first().map_or(0, |r| r.len());
        let sparse = rows
            .iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .filter(|(_, v)| **v != 0.0)
                    .map(|(i, v)| (i, *v))
                    .collect()
            })
            .collect();
        Self::from_rows(n_cols, sparse)
    }

    pub fn n_rows(&self) -> usize {
        self.indptr.len() - 1
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.indptr[i]..self.indptr[i + 1];
        self.indices[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn row_dot(&self, i: usize, x: &DVector<f64>) -> f64 {
        self.row(i).map(|(c, v)| v * x[c]).sum()
    }

    pub fn row_norm_squared(&self, i: usize) -> f64 {
        self.row(i).map(|(_, v)| v * v).sum()
    }

    /// `out += alpha · a_i`.
    pub fn row_axpy(&self, i: usize, alpha: f64, out: &mut DVector<f64>) {
        for (c, v) in self.row(i) {
            out[c] += alpha * v;
        }
    }
}

/// Binary classification data with labels in `{−1, +1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: SparseRows,
    pub labels: Vec<f64>,
    pub source: String,
}

impl Dataset {
    pub fn new(features: SparseRows, labels: Vec<f64>, source: impl Into<String>) -> Result<Self> {
        if features.n_rows() != labels.len() {
            return Err(Error::contract(format!(
                "{} feature rows but {} labels",
                features.n_rows(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|y| **y != 1.0 && **y != -1.0) {
            return Err(Error::contract(format!("label {bad} is not in {{-1, +1}}")));
        }
        Ok(Dataset {
            features,
            labels,
            source: source.into(),
        })
    }

    pub fn m(&self) -> usize {
        self.labels.len()
    }

    pub fn n(&self) -> usize {
        self.features.n_cols()
    }
}

/// Reads a LIBSVM sparse text file: `label idx:val idx:val …` per line with
/// 1-based, strictly ascending indices.
pub fn parse_libsvm(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_libsvm_str(&text, path)
}

pub fn parse_libsvm_str(text: &str, origin: impl Into<PathBuf>) -> Result<Dataset> {
    let origin = origin.into();
    let fail = |line: usize, msg: String| Error::Parse {
        path: origin.clone(),
        line,
        msg,
    };

    let mut raw_labels = Vec::new();
    let mut rows = Vec::new();
    let mut n_cols = 0usize;
    for (lineno, line) in text.lines().enumerate().map(|(i, l)| (i + 1, l)) {
        let mut tokens = line.split_whitespace();
        let Some(label) = tokens.next() else {
            continue;
        };
        let label: f64 = label
            .parse()
            .map_err(|_| fail(lineno, format!("bad label {label:?}")))?;
        let mut row = Vec::new();
        let mut last = 0usize;
        for tok in tokens {
            let (idx, val) = tok
                .split_once(':')
                .ok_or_else(|| fail(lineno, format!("expected index:value, got {tok:?}")))?;
            let idx: usize = idx
                .parse()
                .map_err(|_| fail(lineno, format!("bad index {idx:?}")))?;
            let val: f64 = val
                .parse()
                .map_err(|_| fail(lineno, format!("bad value {val:?}")))?;
            if idx == 0 {
                return Err(fail(lineno, "indices are 1-based".into()));
            }
            if idx <= last {
                return Err(fail(
                    lineno,
                    format!("index {idx} does not follow {last} in ascending order"),
                ));
            }
            if !val.is_finite() {
                return Err(fail(lineno, format!("non-finite value {val}")));
            }
            last = idx;
            n_cols = n_cols.max(idx);
            row.push((idx - 1, val));
        }
        raw_labels.push(label);
        rows.push(row);
    }

    let labels = map_labels(&raw_labels).map_err(|msg| fail(0, msg))?;
    let features = SparseRows::from_rows(n_cols, rows)?;
    Dataset::new(features, labels, origin.display().to_string())
}

/// Two distinct raw labels map to `{−1, +1}` by order (so `{0,1}`, `{1,2}`
/// and `{−1,+1}` all work); a single class maps by sign.
fn map_labels(raw: &[f64]) -> std::result::Result<Vec<f64>, String> {
    let distinct: BTreeSet<u64> = raw.iter().map(|v| v.to_bits()).collect();
    match distinct.len() {
        0 => Ok(Vec::new()),
        1 => Ok(raw
            .iter()
            .map(|v| if *v > 0.0 { 1.0 } else { -1.0 })
            .collect()),
        2 => {
            let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            Ok(raw
                .iter()
                .map(|v| if *v == hi { 1.0 } else { -1.0 })
                .collect())
        }
        k => Err(format!("expected two classes, found {k} distinct labels")),
    }
}

/// Dense synthetic classification data: features uniform on `[−1, 1]`,
/// labels from a random linear separator with 10% label noise.
pub fn synthetic_classification(n: usize, m: usize, seed: u64) -> Result<Dataset> {
    if n == 0 || m == 0 {
        return Err(Error::contract("synthetic dataset needs n, m >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: DVector<f64> = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..=1.0));
    let mut rows = Vec::with_capacity(m);
    let mut labels = Vec::with_capacity(m);
    for _ in 0..m {
        let a = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..=1.0));
        let mut y = if a.dot(&w) >= 0.0 { 1.0 } else { -1.0 };
        if rng.gen_bool(0.1) {
            y = -y;
        }
        labels.push(y);
        rows.push(a);
    }
    Dataset::new(
        SparseRows::from_dense(&rows)?,
        labels,
        format!("synthetic(n={n},m={m},seed={seed})"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_format_examples() {
        let d = parse_libsvm_str("1 3:0.5 7:1\n-1\n", "mem").unwrap();
        assert_eq!(d.m(), 2);
        assert_eq!(d.n(), 7);
        assert_eq!(d.labels, vec![1.0, -1.0]);
        assert_eq!(
            d.features.row(0).collect::<Vec<_>>(),
            vec![(2, 0.5), (6, 1.0)]
        );
        assert_eq!(d.features.row(1).count(), 0);
    }

    #[test]
    fn maps_one_two_labels() {
        let d = parse_libsvm_str("2 1:1\n1 2:1\n2 1:3\n", "mem").unwrap();
        assert_eq!(d.labels, vec![1.0, -1.0, 1.0]);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let err = parse_libsvm_str("1 1:1\n1 2-3\n", "f.txt").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_non_ascending_indices() {
        let err = parse_libsvm_str("1 4:1 2:1\n", "f.txt").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
        let err = parse_libsvm_str("1 2:1 2:1\n", "f.txt").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn rejects_zero_index_and_three_classes() {
        assert!(parse_libsvm_str("1 0:1\n", "f").is_err());
        assert!(parse_libsvm_str("1 1:1\n2 1:1\n3 1:1\n", "f").is_err());
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(
            parse_libsvm("/nonexistent/really/not/here"),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn mushrooms_shape_when_available() {
        // Set TENSORSTEP_MUSHROOMS to the LIBSVM `mushrooms` file to run this.
        let Ok(path) = std::env::var("TENSORSTEP_MUSHROOMS") else {
            return;
        };
        let d = parse_libsvm(path).unwrap();
        assert_eq!((d.m(), d.n()), (8124, 112));
    }
}
