//! Brute-force reference implementations.

use fedcast::clustering::Linkage;

/// Per-coordinate `Σ n_k w_k / Σ n_k` with compensated summation.
pub fn weighted_mean(updates: &[(u64, Vec<f64>)]) -> Vec<f64> {
    let total: f64 = updates.iter().map(|(n, _)| *n as f64).sum();
    let len = updates[0].1.len();
    (0..len)
        .map(|j| {
            let (mut sum, mut carry) = (0.0f64, 0.0f64);
            for (n, w) in updates {
                let y = *n as f64 * w[j] - carry;
                let t = sum + y;
                carry = (t - sum) - y;
                sum = t;
            }
            sum / total
        })
        .collect()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn centroid(points: &[Vec<f64>], members: &[usize]) -> Vec<f64> {
    let mut c = vec![0.0; points[0].len()];
    for &m in members {
        for (ci, x) in c.iter_mut().zip(&points[m]) {
            *ci += x;
        }
    }
    c.iter().map(|x| x / members.len() as f64).collect()
}

/// Linkage distance from the definition, recomputed from scratch.
fn linkage_distance(points: &[Vec<f64>], a: &[usize], b: &[usize], linkage: Linkage) -> f64 {
    let pairs = || a.iter().flat_map(|&i| b.iter().map(move |&j| (i, j)));
    match linkage {
        Linkage::Single => pairs().map(|(i, j)| dist(&points[i], &points[j])).fold(f64::INFINITY, f64::min),
        Linkage::Complete => pairs().map(|(i, j)| dist(&points[i], &points[j])).fold(0.0, f64::max),
        Linkage::Average => {
            pairs().map(|(i, j)| dist(&points[i], &points[j])).sum::<f64>() / (a.len() * b.len()) as f64
        }
        Linkage::Ward => {
            let (na, nb) = (a.len() as f64, b.len() as f64);
            (2.0 * na * nb / (na + nb)).sqrt() * dist(&centroid(points, a), &centroid(points, b))
        }
    }
}

/// Merges the closest pair of clusters while it lies within `threshold`.
/// Returns one label per point.
pub fn agglomerate(points: &[Vec<f64>], linkage: Linkage, threshold: f64) -> Vec<usize> {
    let mut clusters: Vec<Vec<usize>> = (0..points.len()).map(|i| vec![i]).collect();
    loop {
        let mut best: Option<(usize, usize, f64)> = None;
        for i in 0..clusters.len() {
            for j in i + 1..clusters.len() {
                let d = linkage_distance(points, &clusters[i], &clusters[j], linkage);
                if best.map_or(true, |(_, _, b)| d < b) {
                    best = Some((i, j, d));
                }
            }
        }
        match best {
            Some((i, j, d)) if d <= threshold => {
                let merged = clusters.remove(j);
                clusters[i].extend(merged);
            }
            _ => break,
        }
    }
    let mut labels = vec![0; points.len()];
    for (c, members) in clusters.iter().enumerate() {
        for &m in members {
            labels[m] = c;
        }
    }
    labels
}
