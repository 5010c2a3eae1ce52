//! Fused occupancy field: a uniform-weight Gaussian mixture over world-frame
//! measurement points, with responsibility-weighted precision fusion for
//! query points.
//!
//! Backprojected covariances are rank one, so every component is diagonally
//! loaded with a small regularization before it enters the mixture. Densities
//! are evaluated in log space; [`FusedOccupancyField::density`] may underflow to
//! zero far from the data.

pub mod index;
pub mod io;
mod outliers;

use nalgebra::Cholesky;
use thiserror::Error;

use crate::camera::GaussianPoint3;
use crate::geometry::{symmetrize, Mat3, Vec3};

pub use index::PointIndex;
pub use outliers::{
    filter_outliers, knn_mean_distances, DEFAULT_OUTLIER_NEIGHBORS, DEFAULT_STD_RATIO,
};

/// Diagonal loading applied to component covariances by default (m²).
pub const DEFAULT_REGULARIZATION: f64 = 1e-6;
/// Neighbors used for responsibilities and fusion by default.
pub const DEFAULT_NEIGHBORS: usize = 8;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Error, PartialEq)]
pub enum FieldError {
    #[error("cannot build an occupancy field from zero points")]
    EmptyField,
    #[error("component {index} is not positive definite after regularization")]
    DegenerateComponent { index: usize },
    #[error("regularization must be finite and non-negative, got {0}")]
    InvalidRegularization(f64),
    #[error("neighbor count must be at least 1")]
    InvalidNeighborCount,
    #[error("weighted precision sum is singular")]
    SingularFusion,
}

#[derive(Debug, Clone)]
struct Component {
    point: GaussianPoint3,
    chol_inv: Mat3,
    precision: Mat3,
    log_norm: f64,
}

impl Component {
    fn log_pdf(&self, p: &Vec3) -> f64 {
        let z = self.chol_inv * (p - self.point.mean);
        self.log_norm - 0.5 * z.norm_squared()
    }
}

/// Responsibilities of the `k` nearest components for one query point.
#[derive(Debug, Clone, PartialEq)]
pub struct Responsibilities {
    pub neighbor_indices: Vec<usize>,
    pub responsibilities: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionResult {
    pub fused_covariance: Mat3,
    pub neighbor_indices: Vec<usize>,
    pub responsibilities: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct FusedOccupancyField {
    components: Vec<Component>,
    regularization: f64,
    index: PointIndex,
    truncation_radius: Option<f64>,
}

/// Builds the field from world-frame points, adding `regularization * I` to every covariance.
pub fn build_field(
    points: &[GaussianPoint3],
    regularization: f64,
) -> Result<FusedOccupancyField, FieldError> {
    if points.is_empty() {
        return Err(FieldError::EmptyField);
    }
    if !(regularization.is_finite() && regularization >= 0.0) {
        return Err(FieldError::InvalidRegularization(regularization));
    }
    let components = points
        .iter()
        .enumerate()
        .map(|(index, p)| {
            let cov = symmetrize(&p.covariance) + Mat3::identity() * regularization;
            if !cov.iter().all(|v| v.is_finite()) || !p.mean.iter().all(|v| v.is_finite()) {
                return Err(FieldError::DegenerateComponent { index });
            }
            let chol = Cholesky::new(cov).ok_or(FieldError::DegenerateComponent { index })?;
            let l = chol.l();
            let chol_inv = l
                .solve_lower_triangular(&Mat3::identity())
                .ok_or(FieldError::DegenerateComponent { index })?;
            let log_det_half: f64 = l.diagonal().iter().map(|d| d.ln()).sum();
            if !log_det_half.is_finite() {
                return Err(FieldError::DegenerateComponent { index });
            }
            Ok(Component {
                point: GaussianPoint3::new(p.mean, cov, p.source_frame),
                precision: chol_inv.transpose() * chol_inv,
                chol_inv,
                log_norm: -1.5 * LN_2PI - log_det_half,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let means: Vec<Vec3> = components.iter().map(|c| c.point.mean).collect();
    Ok(FusedOccupancyField {
        components,
        regularization,
        index: PointIndex::new(&means),
        truncation_radius: None,
    })
}

impl FusedOccupancyField {
    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn regularization(&self) -> f64 {
        self.regularization
    }

    /// Regularized component `i`.
    pub fn component(&self, i: usize) -> &GaussianPoint3 {
        &self.components[i].point
    }

    pub fn components(&self) -> impl ExactSizeIterator<Item = &GaussianPoint3> + '_ {
        self.components.iter().map(|c| &c.point)
    }

    pub fn precision(&self, i: usize) -> &Mat3 {
        &self.components[i].precision
    }

    pub fn index(&self) -> &PointIndex {
        &self.index
    }

    /// Restricts density sums to components whose mean lies within `radius`
    /// of the query. `None` sums over every component.
    pub fn with_truncation(mut self, radius: Option<f64>) -> Self {
        self.truncation_radius = radius;
        self
    }

    pub fn log_pdf(&self, component: usize, p: &Vec3) -> f64 {
        self.components[component].log_pdf(p)
    }

    /// `ln((1/N) * sum_j N(p | mu_j, Sigma_j))`.
    pub fn log_density(&self, p: &Vec3) -> f64 {
        let logs: Vec<f64> = match self.truncation_radius {
            None => self.components.iter().map(|c| c.log_pdf(p)).collect(),
            Some(r) => self
                .index
                .within(p, r)
                .into_iter()
                .map(|(i, _)| self.components[i].log_pdf(p))
                .collect(),
        };
        log_sum_exp(&logs) - (self.components.len() as f64).ln()
    }

    pub fn density(&self, p: &Vec3) -> f64 {
        self.log_density(p).exp()
    }

    fn clamp_k(&self, k: usize) -> Result<usize, FieldError> {
        if k == 0 {
            return Err(FieldError::InvalidNeighborCount);
        }
        if k > self.len() {
            log::debug!(
                "neighbor count {k} clamped to component count {}",
                self.len()
            );
        }
        Ok(k.min(self.len()))
    }

    /// Responsibilities of the `k` components nearest to `p` (by mean
    /// distance) under uniform priors.
    pub fn responsibilities(&self, p: &Vec3, k: usize) -> Result<Responsibilities, FieldError> {
        let k = self.clamp_k(k)?;
        let neighbor_indices: Vec<usize> = self
            .index
            .nearest_k(p, k)
            .into_iter()
            .map(|(i, _)| i)
            .collect();
        let logs: Vec<f64> = neighbor_indices
            .iter()
            .map(|&i| self.components[i].log_pdf(p))
            .collect();
        let norm = log_sum_exp(&logs);
        let responsibilities = if norm.is_finite() {
            logs.iter().map(|l| (l - norm).exp()).collect()
        } else {
            // every neighbor underflowed; fall back to the prior
            vec![1.0 / k as f64; k]
        };
        Ok(Responsibilities {
            neighbor_indices,
            responsibilities,
        })
    }

    /// Covariance of `p` from responsibility-weighted fusion of its `k` nearest
    /// components: `(sum_k gamma_k Sigma_k^-1)^-1`.
    pub fn bayesian_fuse(&self, p: &Vec3, k: usize) -> Result<FusionResult, FieldError> {
        let Responsibilities {
            neighbor_indices,
            responsibilities,
        } = self.responsibilities(p, k)?;
        let precision = neighbor_indices
            .iter()
            .zip(&responsibilities)
            .fold(Mat3::zeros(), |acc, (&i, &g)| {
                acc + self.components[i].precision * g
            });
        let fused_covariance = Cholesky::new(symmetrize(&precision))
            .map(|c| symmetrize(&c.inverse()))
            .filter(|m| m.iter().all(|v| v.is_finite()))
            .ok_or(FieldError::SingularFusion)?;
        Ok(FusionResult {
            fused_covariance,
            neighbor_indices,
            responsibilities,
        })
    }
}

pub(crate) fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}
