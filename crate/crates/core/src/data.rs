//! Data matrices with optional per-entry observation masks.

use crate::error::{Error, Result};

/// `N × D` data matrix stored row-major, with an optional mask
/// (`true` = observed).
///
/// Rows whose mask is entirely `true` are stored as fully observed, so the
/// unmasked code paths are used for them.
#[derive(Clone, Debug, PartialEq)]
pub struct DataSet {
    n: usize,
    d: usize,
    values: Vec<f64>,
    mask: Option<Vec<bool>>,
    row_masked: Vec<bool>,
}

/// A single datapoint and its mask (`None` when fully observed).
#[derive(Clone, Copy, Debug)]
pub struct DataRow<'a> {
    pub y: &'a [f64],
    pub mask: Option<&'a [bool]>,
}

impl<'a> DataRow<'a> {
    pub fn full(y: &'a [f64]) -> Self {
        DataRow { y, mask: None }
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.y.len()
    }

    #[inline]
    pub fn is_observed(&self, d: usize) -> bool {
        self.mask.is_none_or(|m| m[d])
    }

    pub fn observed_count(&self) -> usize {
        match self.mask {
            None => self.y.len(),
            Some(m) => m.iter().filter(|&&b| b).count(),
        }
    }

    /// Observed coordinate indices.
    pub fn observed(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.y.len()).filter(move |&d| self.is_observed(d))
    }
}

impl DataSet {
    pub fn new(n: usize, d: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n * d {
            return Err(Error::Dimension(format!(
                "data buffer has {} values, expected {}x{}",
                values.len(),
                n,
                d
            )));
        }
        Ok(DataSet {
            n,
            d,
            values,
            mask: None,
            row_masked: vec![false; n],
        })
    }

    pub fn with_mask(n: usize, d: usize, values: Vec<f64>, mask: Vec<bool>) -> Result<Self> {
        let mut ds = Self::new(n, d, values)?;
        ds.set_mask(Some(mask))?;
        Ok(ds)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Dimension("rows of unequal length".into()));
        }
        Self::new(rows.len(), d, rows.concat())
    }

    pub fn set_mask(&mut self, mask: Option<Vec<bool>>) -> Result<()> {
        let Some(mask) = mask else {
            self.mask = None;
            self.row_masked = vec![false; self.n];
            return Ok(());
        };
        if mask.len() != self.n * self.d {
            return Err(Error::Dimension(format!(
                "mask has {} entries, expected {}",
                mask.len(),
                self.n * self.d
            )));
        }
        let mut row_masked = vec![false; self.n];
        for (n, row) in mask.chunks(self.d.max(1)).enumerate().take(self.n) {
            if self.d > 0 && !row.iter().any(|&b| b) {
                return Err(Error::InvalidParam(format!("datapoint {n} has no observed entries")));
            }
            row_masked[n] = row.iter().any(|&b| !b);
        }
        if row_masked.iter().any(|&m| m) {
            self.mask = Some(mask);
        } else {
            self.mask = None;
        }
        self.row_masked = row_masked;
        Ok(())
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mask(&self) -> Option<&[bool]> {
        self.mask.as_deref()
    }

    pub fn has_missing(&self) -> bool {
        self.mask.is_some()
    }

    #[inline]
    pub fn row(&self, n: usize) -> DataRow<'_> {
        let range = n * self.d..(n + 1) * self.d;
        let mask = match &self.mask {
            Some(m) if self.row_masked[n] => Some(&m[range.clone()]),
            _ => None,
        };
        DataRow {
            y: &self.values[range],
            mask,
        }
    }

    pub fn total_observed(&self) -> usize {
        match &self.mask {
            None => self.n * self.d,
            Some(m) => m.iter().filter(|&&b| b).count(),
        }
    }

    /// Parse comma-separated rows. A first line that is not numeric is a
    /// header; empty and `nan` fields are missing entries.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut values = Vec::new();
        let mut mask = Vec::new();
        let mut d = None;
        let mut n = 0;
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            let parsed: std::result::Result<Vec<Option<f64>>, _> = fields
                .iter()
                .map(|f| {
                    if f.is_empty() || f.eq_ignore_ascii_case("nan") {
                        Ok(None)
                    } else {
                        f.parse::<f64>().map(Some)
                    }
                })
                .collect();
            let row = match parsed {
                Ok(r) => r,
                Err(_) if n == 0 && d.is_none() => {
                    d = Some(fields.len());
                    continue;
                }
                Err(_) => {
                    return Err(Error::Format {
                        what: "CSV data",
                        detail: format!("line {}: non-numeric field", i + 1),
                    })
                }
            };
            if *d.get_or_insert(row.len()) != row.len() {
                return Err(Error::Dimension(format!(
                    "line {}: {} fields, expected {}",
                    i + 1,
                    row.len(),
                    d.unwrap_or(0)
                )));
            }
            for v in row {
                if v.is_some_and(|x| !x.is_finite()) {
                    return Err(Error::Format {
                        what: "CSV data",
                        detail: format!("line {}: non-finite value", i + 1),
                    });
                }
                values.push(v.unwrap_or(0.0));
                mask.push(v.is_some());
            }
            n += 1;
        }
        let d = d.unwrap_or(0);
        if n == 0 {
            return Err(Error::EmptySelection("CSV data has no rows".into()));
        }
        Self::with_mask(n, d, values, mask)
    }

    /// Header `y0,...` then one row per datapoint; missing entries are empty.
    pub fn to_csv(&self) -> String {
        let mut out = (0..self.d).map(|k| format!("y{k}")).collect::<Vec<_>>().join(",");
        out.push('\n');
        for n in 0..self.n {
            let row = self.row(n);
            let fields: Vec<String> = (0..self.d)
                .map(|k| if row.is_observed(k) { format!("{:?}", row.y[k]) } else { String::new() })
                .collect();
            out.push_str(&fields.join(","));
            out.push('\n');
        }
        out
    }

    /// Per-dimension mean and variance over observed entries.
    pub fn observed_moments(&self) -> (Vec<f64>, Vec<f64>) {
        let mut count = vec![0usize; self.d];
        let mut sum = vec![0.0; self.d];
        for n in 0..self.n {
            let row = self.row(n);
            for d in row.observed() {
                count[d] += 1;
                sum[d] += row.y[d];
            }
        }
        let mean: Vec<f64> = sum
            .iter()
            .zip(&count)
            .map(|(&s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
            .collect();
        let mut sq = vec![0.0; self.d];
        for n in 0..self.n {
            let row = self.row(n);
            for d in row.observed() {
                let r = row.y[d] - mean[d];
                sq[d] += r * r;
            }
        }
        let var = sq
            .iter()
            .zip(&count)
            .map(|(&s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
            .collect();
        (mean, var)
    }
}
