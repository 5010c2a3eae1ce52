//! Grasp candidates and variance-weighted ranking.
//!
//! A candidate's raw confidence is divided by its median-normalized occupancy
//! variance raised to `nu`, so grasps touching poorly supported geometry drop
//! in the ranking.

pub mod io;
mod scorer;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Mat3, Vec3};
use crate::occupancy::PointIndex;

pub use scorer::{estimate_normals, stub_scorer, StubScorerConfig};

pub const DEFAULT_NU: f64 = 5.0;

#[derive(Debug, Error, PartialEq)]
pub enum GraspError {
    #[error("occupancy variance {value} of candidate {index} must be positive and finite")]
    InvalidVariance { index: usize, value: f64 },
    #[error("{candidates} candidates but {variances} variances")]
    LengthMismatch { candidates: usize, variances: usize },
    #[error("invalid weight exponent {0}")]
    InvalidExponent(f64),
    #[error("cannot assign contact points from an empty cloud")]
    EmptyCloud,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraspCandidate {
    /// Gripper frame: x is the closing axis, z the approach direction.
    pub rotation: Mat3,
    pub position: Vec3,
    /// Point whose occupancy variance weights this grasp.
    pub contact_point: Vec3,
    pub gripper_width: f64,
    pub raw_confidence: f64,
    /// Zero until [`reweight`] fills it in.
    pub occupancy_variance: f64,
    pub weighted_confidence: f64,
}

impl GraspCandidate {
    pub fn new(rotation: Mat3, position: Vec3, gripper_width: f64, raw_confidence: f64) -> Self {
        Self {
            rotation,
            position,
            contact_point: position,
            gripper_width,
            raw_confidence,
            occupancy_variance: 0.0,
            weighted_confidence: 0.0,
        }
    }
}

/// Which point stands in for the grasp when looking up occupancy variance.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContactMode {
    /// Cloud point nearest the grasp position.
    #[default]
    Nearest,
    /// Mean of cloud points within half the gripper width of the grasp
    /// position; falls back to the nearest point when none are inside.
    Region,
}

/// Sets `contact_point` on every candidate from the reconstructed cloud.
pub fn assign_contacts(
    candidates: &mut [GraspCandidate],
    cloud: &[Vec3],
    index: &PointIndex,
    mode: ContactMode,
) -> Result<(), GraspError> {
    if cloud.is_empty() {
        return Err(GraspError::EmptyCloud);
    }
    for c in candidates.iter_mut() {
        let nearest = cloud[index.nearest(&c.position).expect("non-empty index").0];
        c.contact_point = match mode {
            ContactMode::Nearest => nearest,
            ContactMode::Region => {
                let hits = index.within(&c.position, 0.5 * c.gripper_width);
                if hits.is_empty() {
                    nearest
                } else {
                    hits.iter().map(|&(i, _)| cloud[i]).sum::<Vec3>() / hits.len() as f64
                }
            }
        };
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedGrasps {
    /// Sorted by weighted confidence, descending.
    pub candidates: Vec<GraspCandidate>,
    /// Input position of each ranked candidate.
    pub source_indices: Vec<usize>,
    pub nu: f64,
    /// Median variance the raw variances were divided by.
    pub variance_normalization: f64,
}

impl RankedGrasps {
    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn top(&self) -> Option<&GraspCandidate> {
        self.candidates.first()
    }
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Weighted confidence `raw / (variance / median)^nu`, sorted descending.
/// Ties go to the lower variance, then to the earlier candidate.
pub fn reweight(
    candidates: &[GraspCandidate],
    variances: &[f64],
    nu: f64,
) -> Result<RankedGrasps, GraspError> {
    if candidates.len() != variances.len() {
        return Err(GraspError::LengthMismatch {
            candidates: candidates.len(),
            variances: variances.len(),
        });
    }
    if !(nu >= 0.0 && nu.is_finite()) {
        return Err(GraspError::InvalidExponent(nu));
    }
    if let Some((index, &value)) = variances
        .iter()
        .enumerate()
        .find(|(_, v)| !(**v > 0.0 && v.is_finite()))
    {
        return Err(GraspError::InvalidVariance { index, value });
    }
    if candidates.is_empty() {
        return Ok(RankedGrasps {
            candidates: Vec::new(),
            source_indices: Vec::new(),
            nu,
            variance_normalization: 1.0,
        });
    }
    let norm = median(variances);
    let mut scored: Vec<(usize, GraspCandidate)> = candidates
        .iter()
        .zip(variances)
        .enumerate()
        .map(|(i, (c, &v))| {
            let mut c = c.clone();
            c.occupancy_variance = v;
            c.weighted_confidence = c.raw_confidence / (v / norm).powf(nu);
            (i, c)
        })
        .collect();
    scored.sort_by(|(ia, a), (ib, b)| {
        b.weighted_confidence
            .total_cmp(&a.weighted_confidence)
            .then(a.occupancy_variance.total_cmp(&b.occupancy_variance))
            .then(ia.cmp(ib))
    });
    let (source_indices, candidates) = scored.into_iter().unzip();
    Ok(RankedGrasps {
        candidates,
        source_indices,
        nu,
        variance_normalization: norm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cand(conf: f64) -> GraspCandidate {
        GraspCandidate::new(Mat3::identity(), Vec3::zeros(), 0.05, conf)
    }

    #[test]
    fn unit_and_doubled_variance() {
        let r = reweight(&[cand(0.9)], &[1.0], 5.0).unwrap();
        assert!((r.candidates[0].weighted_confidence - 0.9).abs() < 1e-15);
        // median of {2, 2} normalizes to 1, so use a reference candidate
        let r = reweight(&[cand(0.9), cand(0.0), cand(0.0)], &[2.0, 1.0, 1.0], 5.0).unwrap();
        let hi = r
            .candidates
            .iter()
            .find(|c| c.raw_confidence == 0.9)
            .unwrap();
        assert!((hi.weighted_confidence - 0.028125).abs() < 1e-15);
    }

    #[test]
    fn uncertainty_overrides_raw_confidence() {
        let r = reweight(&[cand(0.9), cand(0.5)], &[2.0, 1.0], 5.0).unwrap();
        assert_eq!(r.source_indices, vec![1, 0]);
    }

    #[test]
    fn errors_and_empty() {
        assert!(reweight(&[], &[], 5.0).unwrap().is_empty());
        assert_eq!(
            reweight(&[cand(1.0), cand(1.0)], &[1.0, 0.0], 5.0),
            Err(GraspError::InvalidVariance {
                index: 1,
                value: 0.0
            })
        );
        assert!(matches!(
            reweight(&[cand(1.0)], &[1.0, 2.0], 5.0),
            Err(GraspError::LengthMismatch { .. })
        ));
        assert!(reweight(&[cand(1.0)], &[-1.0], 5.0).is_err());
        assert!(reweight(&[cand(1.0)], &[1.0], -1.0).is_err());
    }

    #[test]
    fn ties_prefer_low_variance_then_index() {
        let cs = [cand(0.0), cand(0.0), cand(0.0)];
        let r = reweight(&cs, &[2.0, 1.0, 1.0], 5.0).unwrap();
        assert_eq!(r.source_indices, vec![1, 2, 0]);
    }

    #[test]
    fn contact_modes() {
        let cloud = vec![
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(0.02, 0.0, 0.0),
            Vec3::new(1.0, 0.0, 0.0),
        ];
        let index = PointIndex::new(&cloud);
        let mut cs = vec![GraspCandidate::new(
            Mat3::identity(),
            Vec3::new(0.004, 0.0, 0.0),
            0.05,
            1.0,
        )];
        assign_contacts(&mut cs, &cloud, &index, ContactMode::Nearest).unwrap();
        assert_eq!(cs[0].contact_point, cloud[0]);
        assign_contacts(&mut cs, &cloud, &index, ContactMode::Region).unwrap();
        assert!((cs[0].contact_point - Vec3::new(0.01, 0.0, 0.0)).norm() < 1e-15);
        assert_eq!(
            assign_contacts(&mut cs, &[], &index, ContactMode::Nearest),
            Err(GraspError::EmptyCloud)
        );
    }

    fn ranking_case() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (1usize..30).prop_flat_map(|n| {
            (
                proptest::collection::vec(0.0f64..1.0, n),
                proptest::collection::vec(1e-6f64..1e-2, n),
            )
        })
    }

    proptest! {
        #[test]
        fn scaling_variances_keeps_ranking((confs, vars) in ranking_case(), scale in 1e-3f64..1e3) {
            let cs: Vec<_> = confs.iter().map(|c| cand(*c)).collect();
            let scaled: Vec<f64> = vars.iter().map(|v| v * scale).collect();
            let a = reweight(&cs, &vars, 5.0).unwrap();
            let b = reweight(&cs, &scaled, 5.0).unwrap();
            prop_assert_eq!(a.source_indices, b.source_indices);
        }

        #[test]
        fn zero_exponent_is_raw_order((confs, vars) in ranking_case()) {
            let cs: Vec<_> = confs.iter().map(|c| cand(*c)).collect();
            let r = reweight(&cs, &vars, 0.0).unwrap();
            for w in r.candidates.windows(2) {
                prop_assert!(w[0].raw_confidence >= w[1].raw_confidence);
            }
        }

        #[test]
        fn weighted_matches_normalized_formula((confs, vars) in ranking_case(), nu in 0.0f64..6.0) {
            let cs: Vec<_> = confs.iter().map(|c| cand(*c)).collect();
            let r = reweight(&cs, &vars, nu).unwrap();
            for c in &r.candidates {
                let want = c.raw_confidence / (c.occupancy_variance / r.variance_normalization).powf(nu);
                prop_assert!((c.weighted_confidence - want).abs() <= 1e-12 * want.abs().max(1e-300));
            }
        }

        #[test]
        fn monotone_in_confidence_and_variance(confs in proptest::collection::vec(0.0f64..1.0, 2..20), v in 1e-5f64..1.0) {
            let cs: Vec<_> = confs.iter().map(|c| cand(*c)).collect();
            let r = reweight(&cs, &vec![v; cs.len()], 5.0).unwrap();
            for w in r.candidates.windows(2) {
                prop_assert!(w[0].raw_confidence >= w[1].raw_confidence);
            }
            let vars: Vec<f64> = confs.iter().map(|c| 1e-4 * (1.0 + c)).collect();
            let same: Vec<_> = cs.iter().map(|_| cand(0.5)).collect();
            let r = reweight(&same, &vars, 5.0).unwrap();
            for w in r.candidates.windows(2) {
                prop_assert!(w[0].occupancy_variance <= w[1].occupancy_variance);
            }
        }
    }
}
