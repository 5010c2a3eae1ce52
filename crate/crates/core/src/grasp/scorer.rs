//! Geometric antipodal grasp scorer and point-normal estimation.

use nalgebra::SymmetricEigen;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::GraspCandidate;
use crate::geometry::{any_orthogonal, Mat3, Vec3};
use crate::occupancy::PointIndex;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StubScorerConfig {
    /// Maximum gripper opening, meters.
    pub max_width: f64,
    /// Pairs closer than this are ignored, meters.
    pub min_width: f64,
    /// Number of anchor points sampled from the cloud.
    pub anchors: usize,
    /// Weight on normal-to-closing-axis misalignment in the exponent.
    pub alignment_penalty: f64,
    pub seed: u64,
}

impl Default for StubScorerConfig {
    fn default() -> Self {
        Self {
            max_width: 0.08,
            min_width: 0.005,
            anchors: 256,
            alignment_penalty: 4.0,
            seed: 0,
        }
    }
}

/// Confidence of closing on `p1`, `p2` with outward normals `n1`, `n2`:
/// `max(0, -n1·n2) · exp(-penalty · misalignment)`, where misalignment sums
/// `1 - |n·d|` over both contacts for the unit closing direction `d`.
pub fn pair_confidence(p1: &Vec3, n1: &Vec3, p2: &Vec3, n2: &Vec3, penalty: f64) -> f64 {
    let gap = p2 - p1;
    let len = gap.norm();
    if len == 0.0 {
        return 0.0;
    }
    let d = gap / len;
    let opposing = (-n1.dot(n2)).max(0.0);
    let misalignment = (1.0 - n1.dot(&d).abs()) + (1.0 - n2.dot(&d).abs());
    opposing * (-penalty * misalignment).exp()
}

/// Gripper pose for a contact pair. The closing axis is the pair direction;
/// the approach points from outside the object (away from `centroid`) towards
/// the pair midpoint.
fn pair_pose(p1: &Vec3, p2: &Vec3, centroid: &Vec3) -> (Mat3, Vec3) {
    let mid = 0.5 * (p1 + p2);
    let x = (p2 - p1).normalize();
    let outward = mid - centroid;
    let lateral = outward - x * x.dot(&outward);
    let z = if lateral.norm() > 1e-9 {
        -lateral.normalize()
    } else {
        any_orthogonal(&x)
    };
    let y = z.cross(&x);
    (Mat3::from_columns(&[x, y, z]), mid)
}

/// Antipodal-pair grasp candidates. Seeded anchors are drawn from the cloud;
/// each keeps its best-scoring partner within `[min_width, max_width]`.
/// Duplicate pairs and zero-confidence pairs are dropped. Output order follows
/// the anchor draw.
pub fn stub_scorer(
    points: &[Vec3],
    normals: &[Vec3],
    cfg: &StubScorerConfig,
) -> Vec<GraspCandidate> {
    assert_eq!(points.len(), normals.len(), "points and normals must align");
    if points.len() < 2 {
        return Vec::new();
    }
    let index = PointIndex::new(points);
    let centroid = points.iter().sum::<Vec3>() / points.len() as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let anchors = sample(&mut rng, points.len(), cfg.anchors.min(points.len())).into_vec();
    let best: Vec<Option<(usize, usize, f64)>> = anchors
        .par_iter()
        .map(|&a| {
            let mut best: Option<(usize, f64)> = None;
            for (b, d2) in index.within(&points[a], cfg.max_width) {
                if b == a || d2 < cfg.min_width * cfg.min_width {
                    continue;
                }
                let conf = pair_confidence(
                    &points[a],
                    &normals[a],
                    &points[b],
                    &normals[b],
                    cfg.alignment_penalty,
                );
                if conf > 0.0 && best.map_or(true, |(_, c)| conf > c) {
                    best = Some((b, conf));
                }
            }
            best.map(|(b, c)| (a.min(b), a.max(b), c))
        })
        .collect();
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::new();
    for (i, j, conf) in best.into_iter().flatten() {
        if !seen.insert((i, j)) {
            continue;
        }
        let (rotation, position) = pair_pose(&points[i], &points[j], &centroid);
        out.push(GraspCandidate::new(
            rotation,
            position,
            (points[j] - points[i]).norm(),
            conf,
        ));
    }
    out
}

/// Unit normals from the `k` nearest neighbours' covariance (smallest
/// eigenvector), flipped to face `viewpoints[i]`.
pub fn estimate_normals(points: &[Vec3], viewpoints: &[Vec3], k: usize) -> Vec<Vec3> {
    assert_eq!(
        points.len(),
        viewpoints.len(),
        "points and viewpoints must align"
    );
    let index = PointIndex::new(points);
    points
        .par_iter()
        .zip(viewpoints)
        .map(|(p, view)| {
            let nbrs = index.nearest_k(p, k.max(3));
            let mean = nbrs.iter().map(|&(i, _)| points[i]).sum::<Vec3>() / nbrs.len() as f64;
            let mut cov = Mat3::zeros();
            for &(i, _) in &nbrs {
                let d = points[i] - mean;
                cov += d * d.transpose();
            }
            let eig = SymmetricEigen::new(cov);
            let imin = eig.eigenvalues.imin();
            let mut n: Vec3 = eig.eigenvectors.column(imin).into_owned();
            if n.norm() == 0.0 || !n.iter().all(|v| v.is_finite()) {
                n = (view - p).normalize();
            }
            if n.dot(&(view - p)) < 0.0 {
                n = -n;
            }
            n.normalize()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::is_rotation;

    fn sphere(n: usize, r: f64) -> (Vec<Vec3>, Vec<Vec3>) {
        // Fibonacci lattice
        let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
        let normals: Vec<Vec3> = (0..n)
            .map(|i| {
                let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
                let rho = (1.0 - z * z).sqrt();
                let t = golden * i as f64;
                Vec3::new(rho * t.cos(), rho * t.sin(), z)
            })
            .collect();
        (normals.iter().map(|n| n * r).collect(), normals)
    }

    #[test]
    fn perfect_and_parallel_pairs() {
        let p1 = Vec3::new(-0.025, 0.0, 0.0);
        let p2 = Vec3::new(0.025, 0.0, 0.0);
        assert!((pair_confidence(&p1, &-Vec3::x(), &p2, &Vec3::x(), 4.0) - 1.0).abs() < 1e-15);
        assert_eq!(pair_confidence(&p1, &Vec3::x(), &p2, &Vec3::x(), 4.0), 0.0);
        let cfg = StubScorerConfig {
            anchors: 2,
            ..Default::default()
        };
        let out = stub_scorer(&[p1, p2], &[-Vec3::x(), Vec3::x()], &cfg);
        assert_eq!(out.len(), 1);
        assert!((out[0].raw_confidence - 1.0).abs() < 1e-15);
        assert!((out[0].gripper_width - 0.05).abs() < 1e-15);
        assert!(is_rotation(&out[0].rotation, 1e-12));
        assert!(stub_scorer(&[p1, p2], &[Vec3::x(), Vec3::x()], &cfg).is_empty());
    }

    #[test]
    fn sphere_top_candidate_passes_through_center() {
        let r = 0.03;
        let (pts, normals) = sphere(800, r);
        let cfg = StubScorerConfig {
            max_width: 0.08,
            ..Default::default()
        };
        let out = stub_scorer(&pts, &normals, &cfg);
        let top = out
            .iter()
            .max_by(|a, b| a.raw_confidence.total_cmp(&b.raw_confidence))
            .unwrap();
        // distance from the center to the closing line
        let axis = top.rotation.column(0).into_owned();
        let off = top.position - axis * axis.dot(&top.position);
        assert!(off.norm() < 0.1 * r, "offset {}", off.norm());
        // exhaustive pair search: the sampled best cannot beat it, and its best
        // pair also passes through the center
        let mut best = (0.0, 0, 0);
        for i in 0..pts.len() {
            for j in i + 1..pts.len() {
                let c = pair_confidence(
                    &pts[i],
                    &normals[i],
                    &pts[j],
                    &normals[j],
                    cfg.alignment_penalty,
                );
                if c > best.0 {
                    best = (c, i, j);
                }
            }
        }
        assert!(top.raw_confidence <= best.0 + 1e-15);
        let mid = 0.5 * (pts[best.1] + pts[best.2]);
        assert!(mid.norm() < 0.1 * r);
    }

    #[test]
    fn deterministic_for_seed() {
        let (pts, normals) = sphere(300, 0.03);
        let cfg = StubScorerConfig::default();
        assert_eq!(
            stub_scorer(&pts, &normals, &cfg),
            stub_scorer(&pts, &normals, &cfg)
        );
    }

    #[test]
    fn normals_face_viewpoint() {
        let (pts, truth) = sphere(500, 0.05);
        let views: Vec<Vec3> = pts.iter().map(|p| p * 10.0).collect();
        let est = estimate_normals(&pts, &views, 10);
        for (e, t) in est.iter().zip(&truth) {
            assert!(e.dot(t) > 0.95);
        }
    }
}
