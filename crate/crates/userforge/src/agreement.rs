//! Inter-annotator agreement: Krippendorff's α over a units × raters
//! matrix with missing entries, at the interval or ordinal level.
//!
//! The implementation uses the standard coincidence-matrix formulation,
//! α = 1 − D_observed / D_expected. Units with fewer than two ratings
//! cannot be paired and are excluded. When every pairable rating is
//! identical the expected disagreement is zero and α is defined as 1.0
//! by convention.

use std::path::Path;

use crate::error::{Error, Result};

/// Difference function applied to rating values.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Level {
    /// δ²(c, k) = (c − k)² on the raw values.
    Interval,
    /// δ² from cumulative marginal counts over the ordered categories.
    Ordinal,
}

impl Level {
    pub fn as_str(&self) -> &'static str {
        match self {
            Level::Interval => "interval",
            Level::Ordinal => "ordinal",
        }
    }

    pub fn parse(s: &str) -> Option<Level> {
        match s {
            "interval" => Some(Level::Interval),
            "ordinal" => Some(Level::Ordinal),
            _ => None,
        }
    }
}

/// Units × raters ratings; `None` marks a missing rating.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RatingsMatrix {
    pub rows: Vec<Vec<Option<f64>>>,
}

impl RatingsMatrix {
    pub fn from_rows(rows: Vec<Vec<Option<f64>>>) -> RatingsMatrix {
        RatingsMatrix { rows }
    }

    /// Parses comma-separated rows, one unit per line. Empty cells, `NA`,
    /// and `-` mark missing ratings; blank lines are skipped.
    pub fn from_csv_str(text: &str) -> Result<RatingsMatrix> {
        let mut rows = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut row = Vec::new();
            for (col, cell) in line.split(',').enumerate() {
                let cell = cell.trim();
                if cell.is_empty() || cell.eq_ignore_ascii_case("na") || cell == "-" {
                    row.push(None);
                    continue;
                }
                let value: f64 = cell.parse().map_err(|_| {
                    Error::data(format!(
                        "ratings line {} column {}: {cell:?} is not a number",
                        lineno + 1,
                        col + 1
                    ))
                })?;
                row.push(Some(value));
            }
            rows.push(row);
        }
        Ok(RatingsMatrix { rows })
    }

    pub fn read_csv(path: &Path) -> Result<RatingsMatrix> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        RatingsMatrix::from_csv_str(&text)
    }

    /// Units that contribute to α: at least two ratings each.
    fn pairable_units(&self) -> Vec<Vec<f64>> {
        self.rows
            .iter()
            .map(|row| row.iter().flatten().copied().collect::<Vec<f64>>())
            .filter(|vals| vals.len() >= 2)
            .collect()
    }
}

fn ordinal_delta2(counts: &[f64], values_lo: usize, values_hi: usize) -> f64 {
    let (lo, hi) = if values_lo <= values_hi {
        (values_lo, values_hi)
    } else {
        (values_hi, values_lo)
    };
    let between: f64 = counts[lo..=hi].iter().sum();
    let d = between - (counts[lo] + counts[hi]) / 2.0;
    d * d
}

/// Krippendorff's α for the given difference level.
pub fn krippendorff_alpha(ratings: &RatingsMatrix, level: Level) -> Result<f64> {
    let units = ratings.pairable_units();
    if units.len() < 2 {
        return Err(Error::data(format!(
            "alpha needs at least 2 units with at least 2 ratings, got {}",
            units.len()
        )));
    }
    if units.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::data("alpha: ratings must be finite numbers"));
    }

    // Ordered distinct categories of the pairable values.
    let mut values: Vec<f64> = units.iter().flatten().copied().collect();
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    values.dedup();
    let k = values.len();
    if k == 1 {
        return Ok(1.0);
    }
    let index_of = |v: f64| -> usize {
        values
            .binary_search_by(|probe| probe.partial_cmp(&v).expect("finite"))
            .expect("value is a category")
    };

    // Coincidence matrix: each within-unit ordered pair contributes
    // 1/(m_u − 1).
    let mut coincidence = vec![vec![0.0f64; k]; k];
    for unit in &units {
        let weight = 1.0 / (unit.len() as f64 - 1.0);
        for (i, &a) in unit.iter().enumerate() {
            for (j, &b) in unit.iter().enumerate() {
                if i != j {
                    coincidence[index_of(a)][index_of(b)] += weight;
                }
            }
        }
    }
    let marginals: Vec<f64> = (0..k).map(|c| coincidence[c].iter().sum()).collect();
    let n: f64 = marginals.iter().sum();

    let delta2 = |c: usize, kk: usize| -> f64 {
        match level {
            Level::Interval => {
                let d = values[c] - values[kk];
                d * d
            }
            Level::Ordinal => ordinal_delta2(&marginals, c, kk),
        }
    };

    let mut observed = 0.0;
    let mut expected = 0.0;
    for c in 0..k {
        for kk in 0..k {
            let d2 = delta2(c, kk);
            observed += coincidence[c][kk] * d2;
            expected += marginals[c] * marginals[kk] * d2;
        }
    }
    if expected == 0.0 {
        return Ok(1.0);
    }
    Ok(1.0 - (n - 1.0) * observed / expected)
}
