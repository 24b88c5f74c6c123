use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::DataError;

/// A window of `steps` consecutive normalised feature rows and the
/// normalised energy of the hour that follows it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceSample {
    window: Vec<f64>,
    steps: usize,
    dim: usize,
    pub label: f64,
    /// Row index of the label within the household's hourly timeline.
    pub time_index: usize,
}

impl SequenceSample {
    /// `window` is row-major, `steps × dim`.
    pub fn new(window: Vec<f64>, steps: usize, dim: usize, label: f64, time_index: usize) -> Self {
        assert_eq!(window.len(), steps * dim, "window size must equal steps × dim");
        SequenceSample {
            window,
            steps,
            dim,
            label,
            time_index,
        }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn step(&self, t: usize) -> &[f64] {
        &self.window[t * self.dim..(t + 1) * self.dim]
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }
}

/// Windows `rows` into `rows.len() - k` samples. `offset` is the timeline
/// index of `rows[0]`; the label is column 0 of the row after each window.
pub fn make_sequences(rows: &[Vec<f64>], k: usize, offset: usize) -> Result<Vec<SequenceSample>, DataError> {
    if k == 0 || rows.len() <= k {
        return Err(DataError::InsufficientRows {
            rows: rows.len(),
            k,
            reason: "need more rows than the sequence length".into(),
        });
    }
    let dim = rows[0].len();
    Ok((k..rows.len())
        .map(|t| {
            let window: Vec<f64> = rows[t - k..t].iter().flat_map(|r| r.iter().copied()).collect();
            SequenceSample::new(window, k, dim, rows[t][0], offset + t)
        })
        .collect())
}

/// Contiguous chronological row ranges.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitRanges {
    pub train: Range<usize>,
    pub validation: Range<usize>,
    pub test: Range<usize>,
}

impl SplitRanges {
    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.validation.len(), self.test.len())
    }
}

/// 70/20/10 split: validation and test sizes by floor division, the
/// remainder goes to training. Every split must hold more than `k` rows.
pub fn split_chronological(rows: usize, k: usize) -> Result<SplitRanges, DataError> {
    if rows < 3 * (k + 1) {
        return Err(DataError::InsufficientRows {
            rows,
            k,
            reason: format!("fewer than 3·(K+1) = {} rows", 3 * (k + 1)),
        });
    }
    let validation = rows * 2 / 10;
    let test = rows / 10;
    let train = rows - validation - test;
    let ranges = SplitRanges {
        train: 0..train,
        validation: train..train + validation,
        test: train + validation..rows,
    };
    let (a, b, c) = ranges.sizes();
    if a.min(b).min(c) <= k {
        return Err(DataError::InsufficientRows {
            rows,
            k,
            reason: format!("split sizes {a}/{b}/{c} leave no sequences in some split"),
        });
    }
    Ok(ranges)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(n: usize) -> Vec<Vec<f64>> {
        (0..n).map(|i| vec![i as f64, 0.5]).collect()
    }

    #[test]
    fn sequence_counts_and_order() {
        let s = make_sequences(&rows(10), 6, 0).unwrap();
        assert_eq!(s.len(), 4);
        assert_eq!(s[0].steps(), 6);
        assert_eq!(s[0].step(0), &[0.0, 0.5]);
        assert_eq!(s[0].step(5), &[5.0, 0.5]);
        assert_eq!(s[0].label, 6.0);
        assert_eq!(s[0].time_index, 6);
        assert_eq!(s[3].label, 9.0);
    }

    #[test]
    fn per_split_windowing() {
        let s = make_sequences(&rows(100), 24, 500).unwrap();
        assert_eq!(s.len(), 76);
        assert_eq!(s[0].time_index, 524);
        assert!(make_sequences(&rows(6), 6, 0).is_err());
    }

    #[test]
    fn split_sizes() {
        assert_eq!(split_chronological(100, 6).unwrap().sizes(), (70, 20, 10));
        assert_eq!(split_chronological(101, 6).unwrap().sizes(), (71, 20, 10));
        let s = split_chronological(4320, 24).unwrap();
        assert_eq!(s.sizes(), (3024, 864, 432));
        assert_eq!(s.validation.start, 3024);
        assert_eq!(s.test.start, 3888);
    }

    #[test]
    fn split_rejects_short_series() {
        assert!(split_chronological(20, 6).is_err());
        // 3·(K+1) satisfied, but the 10% test split is still too short
        assert!(split_chronological(60, 12).is_err());
    }
}
