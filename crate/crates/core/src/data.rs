//! Data ingestion, column hygiene and standardization.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{KobtError, Result};

/// Dense real matrix stored column-major, with one name per column.
///
/// All entries are finite, `n >= 2`, `p >= 1`, and column names are unique.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataMatrix {
    n: usize,
    p: usize,
    values: Vec<f64>,
    column_names: Vec<String>,
}

impl DataMatrix {
    /// Builds a matrix from column-major values.
    pub fn new(n: usize, p: usize, values: Vec<f64>, column_names: Vec<String>) -> Result<Self> {
        if n < 2 {
            return Err(KobtError::invalid("n", format!("need at least 2 rows, got {n}")));
        }
        if p < 1 {
            return Err(KobtError::invalid("p", "need at least 1 column"));
        }
        if values.len() != n * p {
            return Err(KobtError::Shape(format!(
                "{} values for a {n}x{p} matrix",
                values.len()
            )));
        }
        if column_names.len() != p {
            return Err(KobtError::Shape(format!(
                "{} column names for {p} columns",
                column_names.len()
            )));
        }
        let mut seen = HashSet::with_capacity(p);
        for name in &column_names {
            if !seen.insert(name.as_str()) {
                return Err(KobtError::invalid("column_names", format!("duplicate column '{name}'")));
            }
        }
        if let Some(idx) = values.iter().position(|v| !v.is_finite()) {
            return Err(KobtError::invalid(
                "values",
                format!(
                    "non-finite entry at row {}, column '{}'",
                    idx % n,
                    column_names[idx / n]
                ),
            ));
        }
        Ok(Self {
            n,
            p,
            values,
            column_names,
        })
    }

    pub fn from_columns(columns: Vec<Vec<f64>>, column_names: Vec<String>) -> Result<Self> {
        let p = columns.len();
        let n = columns.first().map_or(0, Vec::len);
        if columns.iter().any(|c| c.len() != n) {
            return Err(KobtError::Shape("columns have unequal lengths".into()));
        }
        let values = columns.into_iter().flatten().collect();
        Self::new(n, p, values, column_names)
    }

    /// Builds a matrix from row vectors with generated names `x0, x1, ...`.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let p = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != p) {
            return Err(KobtError::Shape("rows have unequal lengths".into()));
        }
        let mut values = vec![0.0; n * p];
        for (i, row) in rows.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                values[j * n + i] = v;
            }
        }
        Self::new(n, p, values, default_names("x", p))
    }

    /// Converts from an nalgebra matrix (also column-major).
    pub fn from_dmatrix(m: &DMatrix<f64>, column_names: Vec<String>) -> Result<Self> {
        Self::new(m.nrows(), m.ncols(), m.as_slice().to_vec(), column_names)
    }

    pub fn to_dmatrix(&self) -> DMatrix<f64> {
        DMatrix::from_column_slice(self.n, self.p, &self.values)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn column_names(&self) -> &[String] {
        &self.column_names
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn col(&self, j: usize) -> &[f64] {
        &self.values[j * self.n..(j + 1) * self.n]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[j * self.n + i]
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        (0..self.p).map(|j| self.get(i, j)).collect()
    }

    pub fn columns(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.n)
    }

    /// Keeps the listed columns, in the given order.
    pub fn select_columns(&self, idx: &[usize]) -> Result<Self> {
        let mut values = Vec::with_capacity(idx.len() * self.n);
        let mut names = Vec::with_capacity(idx.len());
        for &j in idx {
            if j >= self.p {
                return Err(KobtError::Shape(format!("column {j} out of range for p={}", self.p)));
            }
            values.extend_from_slice(self.col(j));
            names.push(self.column_names[j].clone());
        }
        Self::new(self.n, idx.len(), values, names)
    }

    /// Keeps the listed rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        let mut values = Vec::with_capacity(rows.len() * self.p);
        for col in self.columns() {
            values.extend(rows.iter().map(|&i| col[i]));
        }
        Self::new(rows.len(), self.p, values, self.column_names.clone())
    }

    /// Column-wise concatenation `[self, other]`.
    pub fn hconcat(&self, other: &DataMatrix) -> Result<Self> {
        if other.n != self.n {
            return Err(KobtError::Shape(format!(
                "cannot concatenate {} rows with {} rows",
                self.n, other.n
            )));
        }
        let mut values = Vec::with_capacity(self.values.len() + other.values.len());
        values.extend_from_slice(&self.values);
        values.extend_from_slice(&other.values);
        let mut names = self.column_names.clone();
        names.extend(other.column_names.iter().cloned());
        Self::new(self.n, self.p + other.p, values, names)
    }

    pub fn with_column_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.p {
            return Err(KobtError::Shape("column name count mismatch".into()));
        }
        let values = std::mem::take(&mut self.values);
        Self::new(self.n, self.p, values, names)
    }
}

pub(crate) fn default_names(prefix: &str, p: usize) -> Vec<String> {
    (0..p).map(|j| format!("{prefix}{j}")).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub enum Task {
    #[default]
    Regression,
    BinaryClassification,
}

/// Design matrix, response and optional covariates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub x: DataMatrix,
    pub y: Vec<f64>,
    pub w: Option<DataMatrix>,
    pub task: Task,
}

impl Dataset {
    pub fn new(x: DataMatrix, y: Vec<f64>, w: Option<DataMatrix>, task: Task) -> Result<Self> {
        if y.len() != x.n() {
            return Err(KobtError::Shape(format!(
                "response has {} entries but X has {} rows",
                y.len(),
                x.n()
            )));
        }
        if let Some(i) = y.iter().position(|v| !v.is_finite()) {
            return Err(KobtError::invalid("y", format!("non-finite response at row {i}")));
        }
        if let Some(w) = &w {
            if w.n() != x.n() {
                return Err(KobtError::Shape(format!(
                    "covariates have {} rows but X has {}",
                    w.n(),
                    x.n()
                )));
            }
        }
        if task == Task::BinaryClassification {
            if let Some(i) = y.iter().position(|&v| v != 0.0 && v != 1.0) {
                return Err(KobtError::invalid(
                    "y",
                    format!("binary task needs y in {{0,1}}, row {i} has {}", y[i]),
                ));
            }
        }
        Ok(Self { x, y, w, task })
    }

    pub fn n(&self) -> usize {
        self.x.n()
    }

    /// Row subset of every component.
    pub fn subset_rows(&self, rows: &[usize]) -> Result<Self> {
        let x = self.x.select_rows(rows)?;
        let y = rows.iter().map(|&i| self.y[i]).collect();
        let w = match &self.w {
            Some(w) => Some(w.select_rows(rows)?),
            None => None,
        };
        Self::new(x, y, w, self.task)
    }
}

/// Column reference by header name or zero-based index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub enum ColumnRef {
    Index(usize),
    Name(String),
}

impl ColumnRef {
    fn resolve(&self, header: &[String]) -> Result<usize> {
        match self {
            ColumnRef::Index(i) if *i < header.len() => Ok(*i),
            ColumnRef::Index(i) => Err(KobtError::invalid(
                "column",
                format!("index {i} out of range ({} columns)", header.len()),
            )),
            ColumnRef::Name(name) => header
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| KobtError::invalid("column", format!("no column named '{name}'"))),
        }
    }
}

/// Accepts `[+-]digits[.digits][(e|E)[+-]digits]` and `[+-].digits[...]`.
fn is_numeric_literal(s: &str) -> bool {
    let b = s.as_bytes();
    let mut i = 0;
    if i < b.len() && (b[i] == b'+' || b[i] == b'-') {
        i += 1;
    }
    let int_start = i;
    while i < b.len() && b[i].is_ascii_digit() {
        i += 1;
    }
    let int_digits = i - int_start;
    let mut frac_digits = 0;
    if i < b.len() && b[i] == b'.' {
        i += 1;
        let frac_start = i;
        while i < b.len() && b[i].is_ascii_digit() {
            i += 1;
        }
        frac_digits = i - frac_start;
    }
    if int_digits + frac_digits == 0 {
        return false;
    }
    if i < b.len() && (b[i] == b'e' || b[i] == b'E') {
        i += 1;
        if i < b.len() && (b[i] == b'+' || b[i] == b'-') {
            i += 1;
        }
        let exp_start = i;
        while i < b.len() && b[i].is_ascii_digit() {
            i += 1;
        }
        if i == exp_start {
            return false;
        }
    }
    i == b.len()
}

pub(crate) fn parse_number(cell: &str, row: usize, column: &str) -> Result<f64> {
    let trimmed = cell.trim();
    if !is_numeric_literal(trimmed) {
        return Err(KobtError::Parse {
            row,
            column: column.to_string(),
            reason: format!("'{trimmed}' is not a decimal number"),
        });
    }
    let v: f64 = trimmed.parse().map_err(|_| KobtError::Parse {
        row,
        column: column.to_string(),
        reason: format!("'{trimmed}' is not a decimal number"),
    })?;
    if !v.is_finite() {
        return Err(KobtError::Parse {
            row,
            column: column.to_string(),
            reason: format!("'{trimmed}' overflows to a non-finite value"),
        });
    }
    Ok(v)
}

/// Options for [`load_csv`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CsvOptions {
    #[serde(default = "default_true")]
    pub has_header: bool,
    pub response_column: ColumnRef,
    #[serde(default)]
    pub covariate_columns: Option<Vec<ColumnRef>>,
    #[serde(default)]
    pub task: Task,
}

fn default_true() -> bool {
    true
}

/// Reads a comma-separated file into a [`Dataset`].
///
/// Row numbers in errors are 1-based data rows (the header is not counted).
pub fn load_csv(path: impl AsRef<Path>, options: &CsvOptions) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| KobtError::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(file);

    let mut records = reader.records();
    let mut header: Option<Vec<String>> = None;
    if options.has_header {
        match records.next() {
            Some(Ok(rec)) => header = Some(rec.iter().map(|s| s.trim().to_string()).collect()),
            Some(Err(e)) => return Err(KobtError::invalid("csv", e.to_string())),
            None => return Err(KobtError::invalid("csv", "empty file")),
        }
    }

    let mut raw_rows: Vec<Vec<f64>> = Vec::new();
    let mut width = header.as_ref().map(Vec::len);
    for (r, rec) in records.enumerate() {
        let rec = rec.map_err(|e| KobtError::invalid("csv", e.to_string()))?;
        let row_no = r + 1;
        if rec.len() == 1 && rec.get(0).is_some_and(|s| s.trim().is_empty()) {
            continue;
        }
        let w = *width.get_or_insert(rec.len());
        if rec.len() != w {
            return Err(KobtError::Parse {
                row: row_no,
                column: "*".into(),
                reason: format!("ragged row: {} fields, expected {w}", rec.len()),
            });
        }
        let header_ref = &header;
        let row = rec
            .iter()
            .enumerate()
            .map(|(c, cell)| {
                let cname = header_ref
                    .as_ref()
                    .map_or_else(|| c.to_string(), |h| h[c].clone());
                parse_number(cell, row_no, &cname)
            })
            .collect::<Result<Vec<f64>>>()?;
        raw_rows.push(row);
    }
    let width = width.ok_or_else(|| KobtError::invalid("csv", "no data rows"))?;
    let header = header.unwrap_or_else(|| default_names("c", width));

    let response = options.response_column.resolve(&header)?;
    let covariates: Vec<usize> = match &options.covariate_columns {
        Some(cols) => cols.iter().map(|c| c.resolve(&header)).collect::<Result<_>>()?,
        None => Vec::new(),
    };
    if covariates.contains(&response) {
        return Err(KobtError::invalid("covariate_columns", "response listed as a covariate"));
    }
    let features: Vec<usize> = (0..width)
        .filter(|c| *c != response && !covariates.contains(c))
        .collect();
    if features.is_empty() {
        return Err(KobtError::invalid("csv", "no feature columns left"));
    }

    let n = raw_rows.len();
    let column = |c: usize| raw_rows.iter().map(|r| r[c]).collect::<Vec<f64>>();
    let x = DataMatrix::from_columns(
        features.iter().map(|&c| column(c)).collect(),
        features.iter().map(|&c| header[c].clone()).collect(),
    )?;
    let w = if covariates.is_empty() {
        None
    } else {
        Some(DataMatrix::from_columns(
            covariates.iter().map(|&c| column(c)).collect(),
            covariates.iter().map(|&c| header[c].clone()).collect(),
        )?)
    };
    let y = column(response);
    debug_assert_eq!(y.len(), n);
    Dataset::new(x, y, w, options.task)
}

/// Formats a value with 17 significant digits, enough for exact round-trip.
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes a dataset as CSV: feature columns, then covariates, then the response
/// column named `response_name`. Reading it back with that response name and
/// the covariate names reproduces the dataset bit for bit.
pub fn write_csv(dataset: &Dataset, path: impl AsRef<Path>, response_name: &str) -> Result<()> {
    let path = path.as_ref();
    let mut mats: Vec<&DataMatrix> = vec![&dataset.x];
    if let Some(w) = &dataset.w {
        mats.push(w);
    }
    let mut header: Vec<&str> = mats
        .iter()
        .flat_map(|m| m.column_names().iter().map(String::as_str))
        .collect();
    header.push(response_name);
    let mut out = String::new();
    out.push_str(&header.join(","));
    out.push('\n');
    for i in 0..dataset.n() {
        let mut cells: Vec<String> = mats
            .iter()
            .flat_map(|m| (0..m.p()).map(move |j| format_f64(m.get(i, j))))
            .collect();
        cells.push(format_f64(dataset.y[i]));
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    let file = File::create(path).map_err(|e| KobtError::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(out.as_bytes()).map_err(|e| KobtError::io(path, e))?;
    w.flush().map_err(|e| KobtError::io(path, e))
}

fn mean_var(col: &[f64]) -> (f64, f64) {
    let n = col.len() as f64;
    let mean = col.iter().sum::<f64>() / n;
    let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Drops columns that contain non-finite values or have zero sample variance.
///
/// Works on raw columns because a [`DataMatrix`] cannot hold non-finite values.
pub fn clean_raw_columns(
    columns: &[Vec<f64>],
    names: &[String],
) -> Result<(DataMatrix, Vec<String>)> {
    if columns.len() != names.len() {
        return Err(KobtError::Shape("column name count mismatch".into()));
    }
    let mut kept = Vec::new();
    let mut kept_names = Vec::new();
    let mut dropped = Vec::new();
    for (col, name) in columns.iter().zip(names) {
        let ok = col.len() >= 2 && col.iter().all(|v| v.is_finite()) && mean_var(col).1 > 0.0;
        if ok {
            kept.push(col.clone());
            kept_names.push(name.clone());
        } else {
            dropped.push(name.clone());
        }
    }
    if kept.is_empty() {
        return Err(KobtError::invalid("x", "every column was dropped by cleaning"));
    }
    Ok((DataMatrix::from_columns(kept, kept_names)?, dropped))
}

/// Removes zero-variance columns, returning the cleaned matrix and the names dropped.
pub fn clean_columns(x: &DataMatrix) -> Result<(DataMatrix, Vec<String>)> {
    let cols: Vec<Vec<f64>> = x.columns().map(<[f64]>::to_vec).collect();
    clean_raw_columns(&cols, x.column_names())
}

/// Column means and sample standard deviations used by [`standardize_columns`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
}

impl Standardization {
    /// Maps a standardized matrix back to the original scale.
    pub fn invert(&self, z: &DataMatrix) -> Result<DataMatrix> {
        if z.p() != self.means.len() {
            return Err(KobtError::Shape("standardization width mismatch".into()));
        }
        let n = z.n();
        let mut values = Vec::with_capacity(z.values().len());
        for (j, col) in z.columns().enumerate() {
            let (m, s) = (self.means[j], self.sds[j]);
            values.extend(col.iter().map(|v| v * s + m));
        }
        DataMatrix::new(n, z.p(), values, z.column_names().to_vec())
    }
}

/// Centers every column to mean 0 and scales to sample sd 1.
pub fn standardize_columns(x: &DataMatrix) -> Result<(DataMatrix, Standardization)> {
    let n = x.n();
    let mut values = Vec::with_capacity(x.values().len());
    let mut means = Vec::with_capacity(x.p());
    let mut sds = Vec::with_capacity(x.p());
    for (j, col) in x.columns().enumerate() {
        let (mean, var) = mean_var(col);
        if var <= 0.0 {
            return Err(KobtError::invalid(
                "x",
                format!("column '{}' has zero variance; run clean_columns first", x.column_names()[j]),
            ));
        }
        let sd = var.sqrt();
        values.extend(col.iter().map(|v| (v - mean) / sd));
        means.push(mean);
        sds.push(sd);
    }
    let z = DataMatrix::new(n, x.p(), values, x.column_names().to_vec())?;
    Ok((z, Standardization { means, sds }))
}
