//! Normalized spectral clustering of attention rows.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::linalg::{dot, norm2};

/// Number of leading eigenvalues scanned for the eigengap.
pub const MAX_EIGEN_SCAN: usize = 6;
const KMEANS_SEED: u64 = 0x5eed;
const KMEANS_ITERS: usize = 100;

/// Cosine affinity with a unit diagonal; zero rows are similar to nothing.
pub fn cosine_affinity(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let n = rows.len();
    let norms: Vec<f64> = rows.iter().map(|r| norm2(r)).collect();
    DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            1.0
        } else if norms[i] == 0.0 || norms[j] == 0.0 {
            0.0
        } else {
            (dot(&rows[i], &rows[j]) / (norms[i] * norms[j])).max(0.0)
        }
    })
}

/// `I − D^{-1/2} W D^{-1/2}`.
pub fn normalized_laplacian(w: &DMatrix<f64>) -> DMatrix<f64> {
    let n = w.nrows();
    let inv_sqrt: Vec<f64> = (0..n).map(|i| 1.0 / w.row(i).sum().sqrt()).collect();
    DMatrix::from_fn(n, n, |i, j| {
        let v = -w[(i, j)] * inv_sqrt[i] * inv_sqrt[j];
        if i == j {
            1.0 + v
        } else {
            v
        }
    })
}

/// Index `k` (1-based count) of the largest gap among the first
/// `min(6, n)` ascending eigenvalues. When every eigenvalue is scanned a
/// sentinel `1` closes the list, so `k = n` wins only when the whole
/// spectrum sits near zero. Ties go to the smaller `k`.
pub fn eigengap_k(eigenvalues: &[f64]) -> usize {
    let n = eigenvalues.len();
    let m = n.min(MAX_EIGEN_SCAN);
    let mut scan: Vec<f64> = eigenvalues[..m].to_vec();
    if m == n {
        scan.push(1.0);
    }
    let mut best_k = 1;
    let mut best_gap = f64::NEG_INFINITY;
    for k in 1..scan.len() {
        let gap = scan[k] - scan[k - 1];
        if gap > best_gap + 1e-12 {
            best_gap = gap;
            best_k = k;
        }
    }
    best_k
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd iterations from a seeded k-means++ start. Returns a label per point.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Vec<usize> {
    let n = points.len();
    if n == 0 || k <= 1 {
        return vec![0; n];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = vec![points[rng.random_range(0..n)].clone()];
    while centers.len() < k {
        let d: Vec<f64> = points
            .iter()
            .map(|p| centers.iter().map(|c| sq_dist(p, c)).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = d.iter().sum();
        if total == 0.0 {
            break;
        }
        let mut u = rng.random::<f64>() * total;
        let mut pick = n - 1;
        for (i, &di) in d.iter().enumerate() {
            if u < di {
                pick = i;
                break;
            }
            u -= di;
        }
        centers.push(points[pick].clone());
    }
    let nearest = |p: &[f64], centers: &[Vec<f64>]| {
        let mut best = 0;
        let mut bd = f64::INFINITY;
        for (c, ctr) in centers.iter().enumerate() {
            let d = sq_dist(p, ctr);
            if d < bd {
                bd = d;
                best = c;
            }
        }
        best
    };
    let mut labels: Vec<usize> = points.iter().map(|p| nearest(p, &centers)).collect();
    for _ in 0..KMEANS_ITERS {
        let dim = points[0].len();
        let mut sums = vec![vec![0.0; dim]; centers.len()];
        let mut counts = vec![0usize; centers.len()];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            sums[l].iter_mut().zip(p).for_each(|(s, v)| *s += v);
        }
        for (c, ctr) in centers.iter_mut().enumerate() {
            if counts[c] > 0 {
                *ctr = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centers)).collect();
        if next == labels {
            break;
        }
        labels = next;
    }
    labels
}

/// Clusters rows by co-attention. Returns index groups into `rows`, largest
/// first (ties: smallest leading index first). Fewer than two rows form a
/// single cluster.
pub fn spectral_clusters(rows: &[Vec<f64>]) -> Vec<Vec<usize>> {
    let n = rows.len();
    if n < 2 {
        return if n == 0 { Vec::new() } else { vec![vec![0]] };
    }
    let lap = normalized_laplacian(&cosine_affinity(rows));
    let eig = SymmetricEigen::new(lap);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]).then(a.cmp(&b)));
    let sorted: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let k = eigengap_k(&sorted);
    if k == 1 {
        return vec![(0..n).collect()];
    }
    let embedding: Vec<Vec<f64>> = (0..n)
        .map(|r| {
            let v: Vec<f64> = order[..k].iter().map(|&c| eig.eigenvectors[(r, c)]).collect();
            let norm = norm2(&v);
            if norm > 0.0 {
                v.iter().map(|x| x / norm).collect()
            } else {
                v
            }
        })
        .collect();
    let labels = kmeans(&embedding, k, KMEANS_SEED);
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &l) in labels.iter().enumerate() {
        groups[l].push(i);
    }
    groups.retain(|g| !g.is_empty());
    groups.sort_by(|a, b| b.len().cmp(&a.len()).then(a[0].cmp(&b[0])));
    groups
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn planted_groups_are_recovered() {
        let mut rows = Vec::new();
        for i in 0..5 {
            let mut r = vec![0.0; 10];
            r[i % 3] = 0.5;
            r[3] = 0.5;
            rows.push(r);
        }
        for i in 0..3 {
            let mut r = vec![0.0; 10];
            r[6 + i % 2] = 0.6;
            r[9] = 0.4;
            rows.push(r);
        }
        let c = spectral_clusters(&rows);
        assert_eq!(c, vec![vec![0, 1, 2, 3, 4], vec![5, 6, 7]]);
    }

    #[test]
    fn identical_rows_form_one_cluster() {
        let rows = vec![vec![0.25; 4]; 7];
        assert_eq!(spectral_clusters(&rows), vec![(0..7).collect::<Vec<_>>()]);
    }

    #[test]
    fn two_dissimilar_rows_split() {
        let rows = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert_eq!(spectral_clusters(&rows), vec![vec![0], vec![1]]);
        assert_eq!(spectral_clusters(&rows[..1]), vec![vec![0]]);
    }

    #[test]
    fn near_identical_rows_stay_together() {
        let rows: Vec<Vec<f64>> = (0..4)
            .map(|i| {
                let mut r = vec![0.01; 8];
                r[1] = 0.24 + 0.005 * i as f64;
                r[3] = 0.25;
                r[4] = 0.24;
                r[5] = 0.25 - 0.005 * i as f64;
                r
            })
            .collect();
        assert_eq!(spectral_clusters(&rows), vec![vec![0, 1, 2, 3]]);
    }

    #[test]
    fn eigengap_examples() {
        assert_eq!(eigengap_k(&[0.0, 1.0, 1.0]), 1);
        assert_eq!(eigengap_k(&[0.0, 0.0, 0.0, 1.0]), 3);
        assert_eq!(eigengap_k(&[0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 1.9, 2.0]), 1);
    }

    #[test]
    fn laplacian_has_zero_eigenvalue() {
        let rows = vec![vec![0.2, 0.8, 0.0], vec![0.5, 0.5, 0.0], vec![0.0, 0.3, 0.7]];
        let lap = normalized_laplacian(&cosine_affinity(&rows));
        let eig = SymmetricEigen::new(lap);
        let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
        assert!(min.abs() < 1e-12);
        assert!(eig.eigenvalues.iter().all(|&v| v <= 2.0 + 1e-12));
    }
}
