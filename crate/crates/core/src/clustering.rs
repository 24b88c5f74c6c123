//! Agglomerative clustering of client parameter updates.
//!
//! Distances are Euclidean. Linkage distances are maintained with the
//! Lance–Williams recurrences; for Ward the working matrix holds squared
//! costs and the reported merge distance is their square root, so a single
//! threshold scale applies to every linkage (for two singletons every
//! linkage distance equals their Euclidean distance).

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ClusterError {
    #[error("need at least {needed} vectors, got {got}")]
    TooFew { needed: usize, got: usize },
    #[error("vector {index} has length {actual}, expected {expected}")]
    LengthMismatch {
        index: usize,
        expected: usize,
        actual: usize,
    },
    #[error("non-finite distance between {0} and {1}")]
    NonFinite(usize, usize),
    #[error("threshold must be positive, got {0}")]
    BadThreshold(f64),
    #[error("unknown linkage {0:?}")]
    UnknownLinkage(String),
    #[error("partitions cover {0} and {1} clients")]
    SizeMismatch(usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Linkage {
    Ward,
    Average,
    Complete,
    Single,
}

impl Linkage {
    pub const ALL: [Linkage; 4] = [Linkage::Ward, Linkage::Average, Linkage::Complete, Linkage::Single];

    pub fn as_str(&self) -> &'static str {
        match self {
            Linkage::Ward => "ward",
            Linkage::Average => "average",
            Linkage::Complete => "complete",
            Linkage::Single => "single",
        }
    }
}

impl fmt::Display for Linkage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Linkage {
    type Err = ClusterError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Linkage::ALL
            .into_iter()
            .find(|l| l.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| ClusterError::UnknownLinkage(s.to_string()))
    }
}

/// Dense symmetric distance matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    data: Vec<f64>,
}

impl DistanceMatrix {
    /// Builds from a full row-major `n × n` matrix.
    pub fn from_full(n: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), n * n, "distance matrix must be n × n");
        DistanceMatrix { n, data }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn min_off_diagonal(&self) -> Option<f64> {
        let mut best: Option<f64> = None;
        for i in 0..self.n {
            for j in i + 1..self.n {
                let d = self.get(i, j);
                best = Some(best.map_or(d, |b| b.min(d)));
            }
        }
        best
    }
}

/// `d_ij = ‖u_i − u_j‖₂` for every pair.
pub fn pairwise_euclidean<S: AsRef<[f64]> + Sync>(updates: &[S]) -> Result<DistanceMatrix, ClusterError> {
    let n = updates.len();
    if n < 2 {
        return Err(ClusterError::TooFew { needed: 2, got: n });
    }
    let len = updates[0].as_ref().len();
    for (index, u) in updates.iter().enumerate() {
        if u.as_ref().len() != len {
            return Err(ClusterError::LengthMismatch {
                index,
                expected: len,
                actual: u.as_ref().len(),
            });
        }
    }
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let a = updates[i].as_ref();
            (0..n)
                .map(|j| {
                    if i == j {
                        return 0.0;
                    }
                    // identical summation order for (i, j) and (j, i)
                    let (x, y) = if i < j { (a, updates[j].as_ref()) } else { (updates[j].as_ref(), a) };
                    x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt()
                })
                .collect()
        })
        .collect();
    Ok(DistanceMatrix::from_full(n, rows.concat()))
}

/// One agglomeration step. `left` holds the cluster with the smaller
/// minimum member id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeStep {
    pub left: Vec<usize>,
    pub right: Vec<usize>,
    pub distance: f64,
}

/// Cluster label per client. Labels are `0..n_clusters`, numbered by the
/// smallest client id in each cluster.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub labels: Vec<usize>,
    pub n_clusters: usize,
}

impl ClusterAssignment {
    /// Relabels an arbitrary labelling into canonical form.
    pub fn from_labels(raw: &[usize]) -> Self {
        let mut map = std::collections::HashMap::new();
        let mut labels = Vec::with_capacity(raw.len());
        for r in raw {
            let next = map.len();
            labels.push(*map.entry(*r).or_insert(next));
        }
        ClusterAssignment {
            n_clusters: map.len(),
            labels,
        }
    }

    /// Member client ids per cluster, ascending.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_clusters];
        for (client, &c) in self.labels.iter().enumerate() {
            out[c].push(client);
        }
        out
    }
}

/// Agglomerates clusters while the closest pair is within `threshold`.
pub fn agglomerate(
    matrix: &DistanceMatrix,
    linkage: Linkage,
    threshold: f64,
) -> Result<ClusterAssignment, ClusterError> {
    agglomerate_with_merges(matrix, linkage, threshold).map(|(a, _)| a)
}

/// As [`agglomerate`], also returning the merge steps performed.
///
/// Ties on merge distance go to the pair whose (left, right) minimum member
/// ids are lexicographically smallest.
pub fn agglomerate_with_merges(
    matrix: &DistanceMatrix,
    linkage: Linkage,
    threshold: f64,
) -> Result<(ClusterAssignment, Vec<MergeStep>), ClusterError> {
    if threshold.is_nan() || threshold <= 0.0 {
        return Err(ClusterError::BadThreshold(threshold));
    }
    let n = matrix.len();
    if n == 0 {
        return Err(ClusterError::TooFew { needed: 1, got: 0 });
    }
    for i in 0..n {
        for j in 0..n {
            let d = matrix.get(i, j);
            if !d.is_finite() || d < 0.0 {
                return Err(ClusterError::NonFinite(i, j));
            }
        }
    }

    // working[i][j]: linkage distance (squared cost for ward) between the
    // clusters whose smallest member ids are i and j
    let mut work: Vec<f64> = (0..n * n)
        .map(|k| {
            let d = matrix.data[k];
            if linkage == Linkage::Ward {
                d * d
            } else {
                d
            }
        })
        .collect();
    let mut active: Vec<bool> = vec![true; n];
    let mut members: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    let mut merges = Vec::new();

    loop {
        let mut best: Option<(usize, usize, f64)> = None;
        for i in (0..n).filter(|&i| active[i]) {
            for j in (i + 1..n).filter(|&j| active[j]) {
                let d = work[i * n + j];
                if best.map_or(true, |(_, _, b)| d < b) {
                    best = Some((i, j, d));
                }
            }
        }
        let Some((i, j, raw)) = best else { break };
        let distance = if linkage == Linkage::Ward { raw.max(0.0).sqrt() } else { raw };
        if distance > threshold {
            break;
        }

        let (ni, nj) = (members[i].len() as f64, members[j].len() as f64);
        let dij = work[i * n + j];
        for k in (0..n).filter(|&k| active[k] && k != i && k != j) {
            let (dik, djk) = (work[i * n + k], work[j * n + k]);
            let nk = members[k].len() as f64;
            let updated = match linkage {
                Linkage::Single => dik.min(djk),
                Linkage::Complete => dik.max(djk),
                Linkage::Average => (ni * dik + nj * djk) / (ni + nj),
                Linkage::Ward => ((ni + nk) * dik + (nj + nk) * djk - nk * dij) / (ni + nj + nk),
            };
            work[i * n + k] = updated;
            work[k * n + i] = updated;
        }
        active[j] = false;
        let right = std::mem::take(&mut members[j]);
        merges.push(MergeStep {
            left: members[i].clone(),
            right: right.clone(),
            distance,
        });
        members[i].extend(right);
        members[i].sort_unstable();
    }

    let mut labels = vec![0; n];
    for (label, root) in (0..n).filter(|&i| active[i]).enumerate() {
        for &m in &members[root] {
            labels[m] = label;
        }
    }
    let n_clusters = active.iter().filter(|a| **a).count();
    Ok((ClusterAssignment { labels, n_clusters }, merges))
}

fn choose2(x: usize) -> f64 {
    (x * x.saturating_sub(1)) as f64 / 2.0
}

/// Adjusted Rand index between a clustering and ground-truth labels.
///
/// Returns 1.0 for identical partitions. When the index is undefined (both
/// partitions trivial and different) it returns 0.0.
pub fn cluster_quality(assignment: &ClusterAssignment, ground_truth: &[usize]) -> Result<f64, ClusterError> {
    let n = assignment.labels.len();
    if ground_truth.len() != n {
        return Err(ClusterError::SizeMismatch(n, ground_truth.len()));
    }
    let truth = ClusterAssignment::from_labels(ground_truth);
    let ours = ClusterAssignment::from_labels(&assignment.labels);
    if ours == truth {
        return Ok(1.0);
    }
    let mut table = vec![vec![0usize; truth.n_clusters]; ours.n_clusters];
    for (a, b) in ours.labels.iter().zip(&truth.labels) {
        table[*a][*b] += 1;
    }
    let index: f64 = table.iter().flatten().map(|&c| choose2(c)).sum();
    let rows: f64 = table.iter().map(|r| choose2(r.iter().sum())).sum();
    let cols: f64 = (0..truth.n_clusters)
        .map(|j| choose2(table.iter().map(|r| r[j]).sum()))
        .sum();
    let expected = rows * cols / choose2(n);
    let max = 0.5 * (rows + cols);
    if max == expected {
        return Ok(0.0);
    }
    Ok((index - expected) / (max - expected))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn euclidean_examples() {
        let m = pairwise_euclidean(&[vec![0.0, 0.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(m.get(0, 1), 5.0);
        assert_eq!(m.get(1, 0), 5.0);
        assert_eq!(m.get(0, 0), 0.0);
        let same = pairwise_euclidean(&vec![vec![1.0, 2.0]; 3]).unwrap();
        assert!(same.data.iter().all(|d| *d == 0.0));
        assert!(matches!(
            pairwise_euclidean(&[vec![1.0], vec![1.0, 2.0]]),
            Err(ClusterError::LengthMismatch { index: 1, .. })
        ));
        assert!(pairwise_euclidean(&[vec![1.0]]).is_err());
    }

    #[test]
    fn euclidean_matches_direct_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts: Vec<Vec<f64>> = (0..4).map(|_| (0..10).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let m = pairwise_euclidean(&pts).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let mut acc = 0.0;
                for k in 0..10 {
                    acc += (pts[i][k] - pts[j][k]).powi(2);
                }
                assert!((m.get(i, j) - acc.sqrt()).abs() < 1e-14);
                assert_eq!(m.get(i, j), m.get(j, i));
            }
        }
    }

    #[test]
    fn identical_updates_form_one_cluster() {
        let m = pairwise_euclidean(&vec![vec![0.5, 0.5]; 5]).unwrap();
        for l in Linkage::ALL {
            assert_eq!(agglomerate(&m, l, 1e-9).unwrap().n_clusters, 1);
        }
    }

    #[test]
    fn threshold_extremes() {
        let pts = vec![vec![0.0], vec![1.0], vec![3.0], vec![7.0]];
        let m = pairwise_euclidean(&pts).unwrap();
        for l in Linkage::ALL {
            assert_eq!(agglomerate(&m, l, 0.5).unwrap().n_clusters, 4);
            assert_eq!(agglomerate(&m, l, f64::INFINITY).unwrap().n_clusters, 1);
        }
        assert!(agglomerate(&m, Linkage::Single, 0.0).is_err());
        assert!(agglomerate(&m, Linkage::Single, f64::NAN).is_err());
    }

    #[test]
    fn two_tight_groups() {
        let pts = vec![
            vec![0.0, 0.0],
            vec![5.0, 5.0],
            vec![0.1, 0.0],
            vec![5.1, 5.0],
            vec![0.0, 0.1],
            vec![5.0, 5.1],
        ];
        let m = pairwise_euclidean(&pts).unwrap();
        for l in Linkage::ALL {
            let a = agglomerate(&m, l, 1.0).unwrap();
            assert_eq!(a.labels, vec![0, 1, 0, 1, 0, 1], "{l}");
        }
    }

    #[test]
    fn ward_cost_for_singletons_is_euclidean() {
        let m = pairwise_euclidean(&[vec![0.0], vec![2.0], vec![10.0]]).unwrap();
        let (_, merges) = agglomerate_with_merges(&m, Linkage::Ward, f64::INFINITY).unwrap();
        assert_eq!(merges[0].distance, 2.0);
        // centroids 1 and 10, sizes 2 and 1: sqrt(2·2·1/3)·9
        let expected = (2.0 * 2.0 / 3.0f64).sqrt() * 9.0;
        assert!((merges[1].distance - expected).abs() < 1e-12);
    }

    #[test]
    fn ties_break_on_smallest_ids() {
        // 0-1 and 2-3 both at distance 1
        let pts = vec![vec![0.0], vec![1.0], vec![10.0], vec![11.0]];
        let m = pairwise_euclidean(&pts).unwrap();
        let (_, merges) = agglomerate_with_merges(&m, Linkage::Single, 1.5).unwrap();
        assert_eq!(merges[0].left, vec![0]);
        assert_eq!(merges[0].right, vec![1]);
        assert_eq!(merges[1].left, vec![2]);
    }

    #[test]
    fn merge_distances_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pts: Vec<Vec<f64>> = (0..12).map(|_| (0..3).map(|_| rng.gen_range(0.0..1.0)).collect()).collect();
        let m = pairwise_euclidean(&pts).unwrap();
        for l in Linkage::ALL {
            let (_, merges) = agglomerate_with_merges(&m, l, f64::INFINITY).unwrap();
            assert_eq!(merges.len(), 11);
            assert!(merges.windows(2).all(|w| w[0].distance <= w[1].distance + 1e-12), "{l}");
        }
    }

    fn components(m: &DistanceMatrix, threshold: f64) -> Vec<usize> {
        let n = m.len();
        let mut label: Vec<usize> = (0..n).collect();
        loop {
            let mut changed = false;
            for i in 0..n {
                for j in 0..n {
                    if m.get(i, j) <= threshold && label[j] < label[i] {
                        label[i] = label[j];
                        changed = true;
                    }
                }
            }
            if !changed {
                return label;
            }
        }
    }

    proptest! {
        #[test]
        fn single_linkage_is_threshold_graph_components(
            seed in any::<u64>(), n in 2usize..12, threshold in 0.05f64..1.0
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts: Vec<Vec<f64>> = (0..n).map(|_| (0..2).map(|_| rng.gen_range(0.0..1.0)).collect()).collect();
            let m = pairwise_euclidean(&pts).unwrap();
            let a = agglomerate(&m, Linkage::Single, threshold).unwrap();
            prop_assert_eq!(a, ClusterAssignment::from_labels(&components(&m, threshold)));
        }

        #[test]
        fn permutation_invariance(seed in any::<u64>(), n in 2usize..10, threshold in 0.1f64..1.5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts: Vec<Vec<f64>> = (0..n).map(|_| (0..3).map(|_| rng.gen_range(0.0..1.0)).collect()).collect();
            let mut perm: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                perm.swap(i, rng.gen_range(0..=i));
            }
            let shuffled: Vec<Vec<f64>> = perm.iter().map(|&p| pts[p].clone()).collect();
            for l in Linkage::ALL {
                let a = agglomerate(&pairwise_euclidean(&pts).unwrap(), l, threshold).unwrap();
                let b = agglomerate(&pairwise_euclidean(&shuffled).unwrap(), l, threshold).unwrap();
                // map b back to original client order
                let mut back = vec![0; n];
                for (pos, &orig) in perm.iter().enumerate() {
                    back[orig] = b.labels[pos];
                }
                prop_assert_eq!(&a, &ClusterAssignment::from_labels(&back));
            }
        }
    }

    #[test]
    fn quality_identical_and_opposite() {
        let a = ClusterAssignment::from_labels(&[0, 0, 1, 1, 2]);
        assert_eq!(cluster_quality(&a, &[5, 5, 3, 3, 9]).unwrap(), 1.0);
        let singletons = ClusterAssignment::from_labels(&[0, 1, 2, 3]);
        assert!(cluster_quality(&singletons, &[0, 0, 0, 0]).unwrap() <= 0.0);
        assert!(cluster_quality(&singletons, &[0, 0]).is_err());
    }

    #[test]
    fn quality_hand_enumerated_pairs() {
        let ours = [0, 0, 0, 1, 1, 1];
        let truth = [0, 0, 1, 1, 2, 2];
        // enumerate the 15 pairs
        let (mut both, mut only_ours, mut only_truth, mut neither) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..6 {
            for j in i + 1..6 {
                match (ours[i] == ours[j], truth[i] == truth[j]) {
                    (true, true) => both += 1.0,
                    (true, false) => only_ours += 1.0,
                    (false, true) => only_truth += 1.0,
                    (false, false) => neither += 1.0,
                }
            }
        }
        assert_eq!((both, only_ours, only_truth, neither), (2.0, 4.0, 1.0, 8.0));
        let pairs = 15.0;
        let same_ours = both + only_ours;
        let same_truth = both + only_truth;
        let expected = same_ours * same_truth / pairs;
        let ari = (both - expected) / (0.5 * (same_ours + same_truth) - expected);
        let got = cluster_quality(&ClusterAssignment::from_labels(&ours), &truth).unwrap();
        assert!((got - ari).abs() < 1e-15);
        assert!((got - 0.8 / 3.3).abs() < 1e-12);
    }

    #[test]
    fn linkage_parsing() {
        assert_eq!("Ward".parse::<Linkage>().unwrap(), Linkage::Ward);
        assert!("centroid".parse::<Linkage>().is_err());
        assert_eq!(serde_json::to_string(&Linkage::Complete).unwrap(), "\"complete\"");
    }
}
