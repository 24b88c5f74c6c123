use std::ops::{Deref, DerefMut};

use serde::{Deserialize, Serialize};

/// All model weights in flattening order (see [`ForecastModel::flatten`]).
///
/// [`ForecastModel::flatten`]: super::ForecastModel::flatten
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParameterVector(pub Vec<f64>);

impl ParameterVector {
    pub fn zeros(len: usize) -> Self {
        ParameterVector(vec![0.0; len])
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// Index of the first non-finite entry, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.0.iter().position(|v| !v.is_finite())
    }

    /// Element-wise `self - other`.
    pub fn sub(&self, other: &ParameterVector) -> ParameterVector {
        assert_eq!(self.len(), other.len(), "parameter vector length mismatch");
        ParameterVector(self.iter().zip(other.iter()).map(|(a, b)| a - b).collect())
    }

    /// Little-endian f64 bytes, used for model files and digests.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.0.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    pub fn from_le_bytes(bytes: &[u8]) -> Option<ParameterVector> {
        if bytes.len() % 8 != 0 {
            return None;
        }
        Some(ParameterVector(
            bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect(),
        ))
    }
}

impl Deref for ParameterVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ParameterVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for ParameterVector {
    fn from(v: Vec<f64>) -> Self {
        ParameterVector(v)
    }
}

impl AsRef<[f64]> for ParameterVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}
