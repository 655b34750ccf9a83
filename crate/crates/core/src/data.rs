//! Column-major feature matrices with per-column sort orders.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// How a covariate column should be interpreted. All kinds are split with
/// ordinary `x <= cut` rules; categorical levels are stored as 1, 2, 3, ...
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColKind {
    Continuous,
    Binary,
    Categorical,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    n: usize,
    p: usize,
    // cols[j * n + i] holds feature j of row i.
    cols: Vec<f64>,
    y: Option<Vec<f64>>,
    kinds: Vec<ColKind>,
    sorted_idx: Vec<Vec<usize>>,
}

impl Dataset {
    /// Builds a dataset from row-major rows.
    pub fn from_rows(rows: &[Vec<f64>], y: Option<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(Error::InvalidData("dataset has no rows".into()));
        }
        let p = rows[0].len();
        let mut cols = vec![0.0; n * p];
        for (i, row) in rows.iter().enumerate() {
            if row.len() != p {
                return Err(Error::DimensionMismatch(format!(
                    "row {i} has {} columns, expected {p}",
                    row.len()
                )));
            }
            for (j, &v) in row.iter().enumerate() {
                cols[j * n + i] = v;
            }
        }
        Self::from_columns(n, p, cols, y)
    }

    /// Builds a dataset from a column-major buffer of length `n * p`.
    pub fn from_columns(n: usize, p: usize, cols: Vec<f64>, y: Option<Vec<f64>>) -> Result<Self> {
        if n == 0 || p == 0 {
            return Err(Error::InvalidData(format!("need n >= 1 and p >= 1, got n={n}, p={p}")));
        }
        if cols.len() != n * p {
            return Err(Error::DimensionMismatch(format!(
                "buffer has {} values, expected {}",
                cols.len(),
                n * p
            )));
        }
        if let Some(idx) = cols.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidData(format!(
                "non-finite covariate at row {}, column {}",
                idx % n,
                idx / n
            )));
        }
        if let Some(y) = &y {
            if y.len() != n {
                return Err(Error::DimensionMismatch(format!(
                    "response has {} values, expected {n}",
                    y.len()
                )));
            }
            if let Some(i) = y.iter().position(|v| !v.is_finite()) {
                return Err(Error::InvalidData(format!("non-finite response at row {i}")));
            }
        }
        let kinds = (0..p).map(|j| infer_kind(&cols[j * n..(j + 1) * n])).collect();
        let sorted_idx = (0..p)
            .map(|j| {
                let col = &cols[j * n..(j + 1) * n];
                let mut idx: Vec<usize> = (0..n).collect();
                idx.sort_by(|&a, &b| col[a].total_cmp(&col[b]));
                idx
            })
            .collect();
        Ok(Self {
            n,
            p,
            cols,
            y,
            kinds,
            sorted_idx,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.p
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.cols[j * self.n + i]
    }

    pub fn column(&self, j: usize) -> &[f64] {
        &self.cols[j * self.n..(j + 1) * self.n]
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        (0..self.p).map(|j| self.get(i, j)).collect()
    }

    pub fn y(&self) -> Option<&[f64]> {
        self.y.as_deref()
    }

    pub fn require_y(&self) -> Result<&[f64]> {
        self.y
            .as_deref()
            .ok_or_else(|| Error::InvalidData("dataset has no response column".into()))
    }

    pub fn kinds(&self) -> &[ColKind] {
        &self.kinds
    }

    pub fn sorted_idx(&self, j: usize) -> &[usize] {
        &self.sorted_idx[j]
    }

    /// Returns a copy with the response replaced.
    pub fn with_y(&self, y: Vec<f64>) -> Result<Self> {
        Self::from_columns(self.n, self.p, self.cols.clone(), Some(y))
    }

    /// Returns a copy without the response (for use as a test set).
    pub fn without_y(&self) -> Self {
        let mut d = self.clone();
        d.y = None;
        d
    }

    /// Selects a subset of rows (in the given order).
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        let m = rows.len();
        let mut cols = Vec::with_capacity(m * self.p);
        for j in 0..self.p {
            let col = self.column(j);
            cols.extend(rows.iter().map(|&i| col[i]));
        }
        let y = self.y.as_ref().map(|y| rows.iter().map(|&i| y[i]).collect());
        Self::from_columns(m, self.p, cols, y)
    }

    /// Rows of `self` followed by rows of `other`, without a response.
    pub fn stack(&self, other: &Dataset) -> Result<Self> {
        if self.p != other.p {
            return Err(Error::DimensionMismatch(format!(
                "cannot stack {} columns onto {}",
                other.p, self.p
            )));
        }
        let n = self.n + other.n;
        let mut cols = Vec::with_capacity(n * self.p);
        for j in 0..self.p {
            cols.extend_from_slice(self.column(j));
            cols.extend_from_slice(other.column(j));
        }
        Self::from_columns(n, self.p, cols, None)
    }

    /// Appends one column to the right (e.g. an estimated propensity).
    pub fn with_extra_column(&self, extra: &[f64]) -> Result<Self> {
        if extra.len() != self.n {
            return Err(Error::DimensionMismatch(format!(
                "extra column has {} values, expected {}",
                extra.len(),
                self.n
            )));
        }
        let mut cols = self.cols.clone();
        cols.extend_from_slice(extra);
        Self::from_columns(self.n, self.p + 1, cols, self.y.clone())
    }

    /// Per-column (min, max) ranges.
    pub fn ranges(&self) -> Vec<(f64, f64)> {
        (0..self.p)
            .map(|j| {
                let idx = &self.sorted_idx[j];
                (self.get(idx[0], j), self.get(idx[self.n - 1], j))
            })
            .collect()
    }

    /// Hex SHA-256 over the shape, covariates and response bits.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.n as u64).to_le_bytes());
        h.update((self.p as u64).to_le_bytes());
        for v in &self.cols {
            h.update(v.to_bits().to_le_bytes());
        }
        if let Some(y) = &self.y {
            h.update([1u8]);
            for v in y {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn infer_kind(col: &[f64]) -> ColKind {
    let integral = col.iter().all(|v| v.fract() == 0.0);
    if integral && col.iter().all(|&v| v == 0.0 || v == 1.0) {
        ColKind::Binary
    } else if integral && col.iter().all(|&v| v >= 1.0 && v <= 64.0) {
        ColKind::Categorical
    } else {
        ColKind::Continuous
    }
}

/// Sample mean and (population) variance.
pub fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}
