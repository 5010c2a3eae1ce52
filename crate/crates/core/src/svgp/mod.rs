//! Sparse variational Gaussian process regression of occupancy density.
//!
//! The model uses an isotropic squared-exponential kernel, a Gaussian
//! likelihood, a constant mean fixed at the training-target mean, and a
//! whitened variational posterior `q(v) = N(m, S)` over `v = L^-1 u`, where `L`
//! is the Cholesky factor of the inducing covariance. Inputs are shifted to
//! the training centroid and divided by a single scale (the bounding-box
//! diagonal), so the kernel stays isotropic in metric units; the stored
//! lengthscale is in normalized units.
//!
//! Predicted variances are latent-function variances (no observation noise).
//! [`PredictiveUncertainty`] additionally carries the density-scaled variance
//! `raw / (1 + |mean|)`.

pub mod io;
mod train;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::GaussianPoint3;
use crate::geometry::Vec3;
use crate::occupancy::FusedOccupancyField;

pub use train::{train, ElboGradient, TrainConfig, TrainingReport};

/// Relative diagonal jitter on the inducing covariance.
pub(crate) const INDUCING_JITTER: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum SvgpError {
    #[error("training needs at least one sample")]
    EmptyTrainingSet,
    #[error("inputs and targets differ in length ({inputs} vs {targets})")]
    LengthMismatch { inputs: usize, targets: usize },
    #[error("non-finite training data at sample {0}")]
    NonFiniteData(usize),
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("training diverged at epoch {epoch}: ELBO is not finite")]
    DivergedTraining { epoch: usize },
    #[error("inducing covariance is not positive definite")]
    SingularInducing,
    #[error("invalid model: {0}")]
    InvalidModel(String),
}

/// Isotropic squared-exponential kernel on normalized inputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Kernel {
    pub signal_variance: f64,
    pub lengthscale: f64,
}

impl Kernel {
    pub fn eval(&self, a: &Vec3, b: &Vec3) -> f64 {
        self.signal_variance
            * (-0.5 * (a - b).norm_squared() / (self.lengthscale * self.lengthscale)).exp()
    }

    pub(crate) fn cross(&self, xs: &[Vec3], zs: &[Vec3]) -> DMatrix<f64> {
        DMatrix::from_fn(xs.len(), zs.len(), |i, j| self.eval(&xs[i], &zs[j]))
    }
}

/// Maps metric inputs to the model's normalized coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InputNormalizer {
    pub shift: Vec3,
    pub scale: Vec3,
}

impl InputNormalizer {
    pub fn identity() -> Self {
        Self {
            shift: Vec3::zeros(),
            scale: Vec3::repeat(1.0),
        }
    }

    /// Centroid shift and a common scale equal to the bounding-box diagonal.
    pub fn fit(inputs: &[Vec3]) -> Self {
        let n = inputs.len().max(1) as f64;
        let shift = inputs.iter().fold(Vec3::zeros(), |a, p| a + p) / n;
        let (lo, hi) = bounding_box(inputs);
        let diag = (hi - lo).norm();
        let s = if diag > 1e-12 { diag } else { 1.0 };
        Self {
            shift,
            scale: Vec3::repeat(s),
        }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        (p - self.shift).component_div(&self.scale)
    }

    pub fn invert(&self, p: &Vec3) -> Vec3 {
        p.component_mul(&self.scale) + self.shift
    }
}

pub(crate) fn bounding_box(points: &[Vec3]) -> (Vec3, Vec3) {
    let mut lo = Vec3::repeat(f64::INFINITY);
    let mut hi = Vec3::repeat(f64::NEG_INFINITY);
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    if points.is_empty() {
        (Vec3::zeros(), Vec3::zeros())
    } else {
        (lo, hi)
    }
}

/// SVGP output at one query point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictiveUncertainty {
    pub occupancy_mean: f64,
    pub raw_variance: f64,
    pub scaled_variance: f64,
}

impl PredictiveUncertainty {
    /// Applies the density scaling `raw / (1 + |mean|)`; negative variances clamp to zero.
    pub fn from_moments(occupancy_mean: f64, raw_variance: f64) -> Self {
        let raw_variance = raw_variance.max(0.0);
        Self {
            occupancy_mean,
            raw_variance,
            scaled_variance: raw_variance / (1.0 + occupancy_mean.abs()),
        }
    }
}

/// Anything that maps a 3D point to occupancy mean and predictive variance.
pub trait OccupancyRegressor: Sync {
    fn predict_point(&self, x: &Vec3) -> PredictiveUncertainty;
}

/// Training inputs (point means) and max-normalized field densities.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pub inputs: Vec<Vec3>,
    pub targets: Vec<f64>,
    /// Maximum raw density; `target * density_scale` recovers the field density.
    pub density_scale: f64,
}

/// Evaluates the field at every point mean and normalizes by the maximum.
pub fn make_training_set(field: &FusedOccupancyField, points: &[GaussianPoint3]) -> TrainingSet {
    let inputs: Vec<Vec3> = points.iter().map(|p| p.mean).collect();
    let log_d: Vec<f64> = inputs.par_iter().map(|p| field.log_density(p)).collect();
    let max = log_d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let targets = log_d.iter().map(|l| (l - max).exp()).collect();
    TrainingSet {
        inputs,
        targets,
        density_scale: max.exp(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SvgpModel {
    pub(crate) inducing: Vec<Vec3>,
    pub(crate) kernel: Kernel,
    pub(crate) noise_variance: f64,
    pub(crate) variational_mean: DVector<f64>,
    pub(crate) variational_cov_factor: DMatrix<f64>,
    pub(crate) normalizer: InputNormalizer,
    pub(crate) mean_offset: f64,
    pub(crate) density_scale: f64,
    cache: PredictCache,
}

#[derive(Debug, Clone, PartialEq)]
struct PredictCache {
    chol: DMatrix<f64>,
}

pub(crate) fn inducing_cholesky(kernel: &Kernel, inducing: &[Vec3]) -> Option<DMatrix<f64>> {
    let m = inducing.len();
    let mut k = kernel.cross(inducing, inducing);
    for i in 0..m {
        k[(i, i)] += INDUCING_JITTER * kernel.signal_variance;
    }
    nalgebra::Cholesky::new(k).map(|c| c.l())
}

impl SvgpModel {
    /// Assembles a model from its parameters. `inducing_points` are metric;
    /// the kernel lengthscale is in normalized units.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        inducing_points: &[Vec3],
        kernel: Kernel,
        noise_variance: f64,
        variational_mean: DVector<f64>,
        variational_cov_factor: DMatrix<f64>,
        normalizer: InputNormalizer,
        mean_offset: f64,
        density_scale: f64,
    ) -> Result<Self, SvgpError> {
        let inducing: Vec<Vec3> = inducing_points
            .iter()
            .map(|p| normalizer.apply(p))
            .collect();
        Self::from_normalized(
            inducing,
            kernel,
            noise_variance,
            variational_mean,
            variational_cov_factor,
            normalizer,
            mean_offset,
            density_scale,
        )
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn from_normalized(
        inducing: Vec<Vec3>,
        kernel: Kernel,
        noise_variance: f64,
        variational_mean: DVector<f64>,
        variational_cov_factor: DMatrix<f64>,
        normalizer: InputNormalizer,
        mean_offset: f64,
        density_scale: f64,
    ) -> Result<Self, SvgpError> {
        let m = inducing.len();
        let bad = |msg: &str| Err(SvgpError::InvalidModel(msg.to_string()));
        if m == 0 {
            return bad("no inducing points");
        }
        if !(kernel.signal_variance > 0.0 && kernel.signal_variance.is_finite()) {
            return bad("signal variance must be positive");
        }
        if !(kernel.lengthscale > 0.0 && kernel.lengthscale.is_finite()) {
            return bad("lengthscale must be positive");
        }
        if !(noise_variance > 0.0 && noise_variance.is_finite()) {
            return bad("noise variance must be positive");
        }
        if variational_mean.len() != m || variational_cov_factor.shape() != (m, m) {
            return bad("variational parameters do not match the inducing count");
        }
        if !(normalizer.scale.iter().all(|s| *s > 0.0 && s.is_finite())
            && normalizer.shift.iter().all(|s| s.is_finite()))
        {
            return bad("normalizer must have finite shift and positive scale");
        }
        if !inducing.iter().all(|p| p.iter().all(|v| v.is_finite()))
            || !variational_mean.iter().all(|v| v.is_finite())
            || !variational_cov_factor.iter().all(|v| v.is_finite())
            || !mean_offset.is_finite()
            || !density_scale.is_finite()
        {
            return bad("non-finite parameter");
        }
        let variational_cov_factor = variational_cov_factor.lower_triangle();
        let chol = inducing_cholesky(&kernel, &inducing).ok_or(SvgpError::SingularInducing)?;
        Ok(Self {
            inducing,
            kernel,
            noise_variance,
            variational_mean,
            variational_cov_factor,
            normalizer,
            mean_offset,
            density_scale,
            cache: PredictCache { chol },
        })
    }

    pub fn kernel(&self) -> Kernel {
        self.kernel
    }

    pub fn noise_variance(&self) -> f64 {
        self.noise_variance
    }

    /// Kernel lengthscale in meters.
    pub fn lengthscale_meters(&self) -> f64 {
        self.kernel.lengthscale * self.normalizer.scale.x
    }

    pub fn normalizer(&self) -> &InputNormalizer {
        &self.normalizer
    }

    pub fn mean_offset(&self) -> f64 {
        self.mean_offset
    }

    pub fn density_scale(&self) -> f64 {
        self.density_scale
    }

    /// Records the raw density that a normalized target of 1 corresponds to.
    pub fn with_density_scale(mut self, scale: f64) -> Self {
        self.density_scale = scale;
        self
    }

    /// Inducing locations in metric coordinates.
    pub fn inducing_points(&self) -> Vec<Vec3> {
        self.inducing
            .iter()
            .map(|p| self.normalizer.invert(p))
            .collect()
    }

    pub fn num_inducing(&self) -> usize {
        self.inducing.len()
    }

    pub fn variational_mean(&self) -> &DVector<f64> {
        &self.variational_mean
    }

    pub fn variational_cov_factor(&self) -> &DMatrix<f64> {
        &self.variational_cov_factor
    }

    /// Latent mean and variance at a metric point.
    pub fn latent_moments(&self, x: &Vec3) -> (f64, f64) {
        let xn = self.normalizer.apply(x);
        let kx = DVector::from_iterator(
            self.inducing.len(),
            self.inducing.iter().map(|z| self.kernel.eval(&xn, z)),
        );
        let a = self
            .cache
            .chol
            .solve_lower_triangular(&kx)
            .expect("inducing Cholesky factor has a positive diagonal");
        let mean = self.mean_offset + a.dot(&self.variational_mean);
        let sa = self.variational_cov_factor.tr_mul(&a);
        let var = self.kernel.signal_variance - a.norm_squared() + sa.norm_squared();
        (mean, var.max(0.0))
    }

    pub fn predict(&self, queries: &[Vec3]) -> Vec<PredictiveUncertainty> {
        queries.par_iter().map(|q| self.predict_point(q)).collect()
    }
}

impl OccupancyRegressor for SvgpModel {
    fn predict_point(&self, x: &Vec3) -> PredictiveUncertainty {
        let (mean, var) = self.latent_moments(x);
        PredictiveUncertainty::from_moments(mean, var)
    }
}
