use rayon::prelude::*;

use crate::camera::GaussianPoint3;
use crate::geometry::Vec3;
use crate::occupancy::PointIndex;

/// Default neighbor count for statistical outlier removal.
pub const DEFAULT_OUTLIER_NEIGHBORS: usize = 20;
/// Default standard-deviation ratio for statistical outlier removal.
pub const DEFAULT_STD_RATIO: f64 = 0.01;

/// Mean Euclidean distance from each point to its `k` nearest other points.
pub fn knn_mean_distances(points: &[Vec3], k: usize) -> Vec<f64> {
    let index = PointIndex::new(points);
    points
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let hits = index.nearest_k(p, k + 1);
            // drop the point itself, or the farthest hit if duplicates hid it
            let self_pos = hits
                .iter()
                .position(|&(j, _)| j == i)
                .unwrap_or(hits.len() - 1);
            let total: f64 = hits
                .iter()
                .enumerate()
                .filter(|&(pos, _)| pos != self_pos)
                .map(|(_, &(_, d2))| d2.sqrt())
                .sum();
            total / k as f64
        })
        .collect()
}

/// Statistical outlier removal: drops every point whose mean distance to its
/// `k_neighbors` nearest neighbors exceeds `mean + std_ratio * std` of that
/// statistic over the whole cloud. Order is preserved.
pub fn filter_outliers(
    points: &[GaussianPoint3],
    k_neighbors: usize,
    std_ratio: f64,
) -> Vec<GaussianPoint3> {
    assert!(k_neighbors >= 1, "k_neighbors must be at least 1");
    assert!(std_ratio > 0.0, "std_ratio must be positive");
    if points.len() < k_neighbors + 1 {
        log::warn!(
            "outlier filter skipped: {} points, need more than {k_neighbors}",
            points.len()
        );
        return points.to_vec();
    }
    let means: Vec<Vec3> = points.iter().map(|p| p.mean).collect();
    let dists = knn_mean_distances(&means, k_neighbors);
    let n = dists.len() as f64;
    let mean = dists.iter().sum::<f64>() / n;
    let std = (dists.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n).sqrt();
    // rounding slack so clouds with uniform spacing are a fixed point
    let threshold = mean + std_ratio * std + 1e-12 * mean;
    points
        .iter()
        .zip(&dists)
        .filter(|(_, &d)| d <= threshold)
        .map(|(p, _)| *p)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Mat3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn pt(x: f64, y: f64, z: f64) -> GaussianPoint3 {
        GaussianPoint3::new(Vec3::new(x, y, z), Mat3::zeros(), 0)
    }

    #[test]
    fn displaced_grid_point_is_removed() {
        let mut pts = Vec::new();
        for i in 0..10 {
            for j in 0..10 {
                pts.push(pt(i as f64 * 0.01, j as f64 * 0.01, 0.0));
            }
        }
        pts[55].mean.z += 100.0 * 0.01;
        let kept = filter_outliers(&pts, 8, 1.0);
        assert!(kept.len() < pts.len());
        assert!(kept.iter().all(|p| p.mean.z == 0.0));
    }

    #[test]
    fn identical_points_are_kept() {
        let pts = vec![pt(1.0, 2.0, 3.0); 50];
        assert_eq!(filter_outliers(&pts, 20, 0.01).len(), 50);
    }

    #[test]
    fn too_few_points_returns_input() {
        let pts = vec![pt(0.0, 0.0, 0.0), pt(1.0, 0.0, 0.0), pt(50.0, 0.0, 0.0)];
        assert_eq!(filter_outliers(&pts, 20, 0.01), pts);
    }

    #[test]
    fn blob_with_far_outliers() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut pts: Vec<GaussianPoint3> = (0..500)
            .map(|_| {
                let s: [f64; 3] = [
                    StandardNormal.sample(&mut rng),
                    StandardNormal.sample(&mut rng),
                    StandardNormal.sample(&mut rng),
                ];
                pt(0.05 * s[0], 0.05 * s[1], 0.05 * s[2])
            })
            .collect();
        for i in 0..10 {
            let a = i as f64 * 0.628;
            pts.push(pt(2.0 * a.cos(), 2.0 * a.sin(), 1.5));
        }
        let kept = filter_outliers(&pts, 20, 0.01);
        assert!(pts.len() - kept.len() >= 10);
        assert!(kept.iter().all(|p| p.mean.z < 1.0));
    }

    #[test]
    fn uniform_ring_is_a_fixed_point() {
        let mut pts: Vec<GaussianPoint3> = (0..64)
            .map(|i| {
                let a = i as f64 * std::f64::consts::TAU / 64.0;
                pt(a.cos(), a.sin(), 0.0)
            })
            .collect();
        pts.push(pt(0.0, 0.0, 30.0));
        let once = filter_outliers(&pts, 4, 0.5);
        assert_eq!(once.len(), 64);
        assert_eq!(filter_outliers(&once, 4, 0.5), once);
    }
}
