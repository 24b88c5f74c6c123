use serde::{Deserialize, Serialize};

use super::DataError;

/// Per-dimension min-max bounds shared by every household.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationParams {
    pub mins: Vec<f64>,
    pub maxs: Vec<f64>,
    /// Dimensions with `max == min`; they normalise to 0.
    pub degenerate: Vec<usize>,
}

/// Fits bounds over the given rows (training rows of all households).
pub fn fit_normalizer<'a, I>(rows: I) -> Result<NormalizationParams, DataError>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let mut iter = rows.into_iter();
    let first = iter
        .next()
        .ok_or_else(|| DataError::InvalidParameter("cannot fit a normalizer on zero rows".into()))?;
    let mut mins = first.to_vec();
    let mut maxs = first.to_vec();
    for row in iter {
        if row.len() != mins.len() {
            return Err(DataError::InvalidParameter(format!(
                "row width {} differs from {}",
                row.len(),
                mins.len()
            )));
        }
        for (d, &v) in row.iter().enumerate() {
            if v < mins[d] {
                mins[d] = v;
            }
            if v > maxs[d] {
                maxs[d] = v;
            }
        }
    }
    let degenerate: Vec<usize> = (0..mins.len()).filter(|&d| maxs[d] == mins[d]).collect();
    for d in &degenerate {
        log::warn!("normalizer: dimension {d} is constant ({}); mapping to 0", mins[*d]);
    }
    Ok(NormalizationParams { mins, maxs, degenerate })
}

impl NormalizationParams {
    pub fn dim(&self) -> usize {
        self.mins.len()
    }

    pub fn normalize(&self, dim: usize, value: f64) -> f64 {
        let span = self.maxs[dim] - self.mins[dim];
        if span == 0.0 {
            0.0
        } else {
            (value - self.mins[dim]) / span
        }
    }

    pub fn denormalize(&self, dim: usize, value: f64) -> f64 {
        let span = self.maxs[dim] - self.mins[dim];
        if span == 0.0 {
            self.mins[dim]
        } else {
            value * span + self.mins[dim]
        }
    }

    pub fn normalize_row(&self, row: &[f64]) -> Vec<f64> {
        row.iter().enumerate().map(|(d, &v)| self.normalize(d, v)).collect()
    }

    /// Width of the energy range, converting normalised errors to kWh.
    pub fn energy_span(&self) -> f64 {
        self.maxs[0] - self.mins[0]
    }
}
