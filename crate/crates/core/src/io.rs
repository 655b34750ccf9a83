//! CSV input and output.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::data::Dataset;
use crate::error::{Error, Result};

/// A parsed numeric CSV file.
#[derive(Debug, Clone)]
pub struct Table {
    pub headers: Option<Vec<String>>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn ncols(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    /// Resolves a column given either as a header name or a 0-based index.
    pub fn column_index(&self, key: &str) -> Result<usize> {
        if let Some(h) = &self.headers {
            if let Some(i) = h.iter().position(|c| c == key) {
                return Ok(i);
            }
        }
        match key.parse::<usize>() {
            Ok(i) if i < self.ncols() => Ok(i),
            _ => Err(Error::InvalidConfig(format!("unknown column {key:?}"))),
        }
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.rows.iter().map(|r| r[j]).collect()
    }

    /// Splits the table into covariates and an optional response, dropping
    /// any further listed columns (treatment indicators and the like).
    pub fn into_dataset(&self, response_col: Option<usize>, drop: &[usize]) -> Result<Dataset> {
        let keep: Vec<usize> = (0..self.ncols())
            .filter(|j| Some(*j) != response_col && !drop.contains(j))
            .collect();
        if keep.is_empty() {
            return Err(Error::InvalidData("no covariate columns left".into()));
        }
        let rows: Vec<Vec<f64>> = self
            .rows
            .iter()
            .map(|r| keep.iter().map(|&j| r[j]).collect())
            .collect();
        let y = response_col.map(|c| self.column(c));
        Dataset::from_rows(&rows, y)
    }
}

pub fn read_table(path: impl AsRef<Path>, has_header: bool) -> Result<Table> {
    let path = path.as_ref();
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|source| Error::Csv {
            path: path.to_path_buf(),
            source,
        })?;
    let headers = if has_header {
        let h = rdr.headers().map_err(|source| Error::Csv {
            path: path.to_path_buf(),
            source,
        })?;
        Some(h.iter().map(str::to_owned).collect::<Vec<_>>())
    } else {
        None
    };
    let mut expected = headers.as_ref().map(Vec::len);
    let mut rows = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|source| Error::Csv {
            path: path.to_path_buf(),
            source,
        })?;
        // 1-based file line numbers, counting the header.
        let line = r + 1 + usize::from(has_header);
        let width = *expected.get_or_insert(rec.len());
        if rec.len() != width {
            return Err(Error::RaggedRow {
                path: path.to_path_buf(),
                row: line,
                expected: width,
                found: rec.len(),
            });
        }
        let row = rec
            .iter()
            .enumerate()
            .map(|(c, cell)| match cell.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(Error::ParseCell {
                    path: path.to_path_buf(),
                    row: line,
                    col: c + 1,
                    cell: cell.to_owned(),
                }),
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::InvalidData(format!("{}: no data rows", path.display())));
    }
    Ok(Table { headers, rows })
}

/// Reads a numeric CSV into a [`Dataset`], taking the response from
/// `response_col` (0-based) when given.
pub fn read_csv(path: impl AsRef<Path>, has_header: bool, response_col: Option<usize>) -> Result<Dataset> {
    let t = read_table(path, has_header)?;
    if let Some(c) = response_col {
        if c >= t.ncols() {
            return Err(Error::InvalidConfig(format!(
                "response column {c} out of range for {} columns",
                t.ncols()
            )));
        }
    }
    t.into_dataset(response_col, &[])
}

/// Writes named columns. Reals use the shortest representation that
/// parses back to the identical bits.
pub fn write_csv(path: impl AsRef<Path>, columns: &[(&str, &[f64])]) -> Result<()> {
    let path = path.as_ref();
    if columns.is_empty() {
        return Err(Error::NoColumns);
    }
    let len = columns[0].1.len();
    if let Some((name, c)) = columns.iter().find(|(_, c)| c.len() != len) {
        return Err(Error::DimensionMismatch(format!(
            "column {name:?} has {} values, expected {len}",
            c.len()
        )));
    }
    let io_err = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = File::create(path).map_err(io_err)?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    w.write_record(columns.iter().map(|(n, _)| *n)).map_err(csv_err)?;
    for i in 0..len {
        w.write_record(columns.iter().map(|(_, c)| format!("{}", c[i])))
            .map_err(csv_err)?;
    }
    let mut inner = w.into_inner().map_err(|e| io_err(e.into_error()))?;
    inner.flush().map_err(io_err)
}
