//! Sigma-point fusion of positional and predictive occupancy uncertainty.
//!
//! For each query the Bayesian-fused covariance of nearby field components
//! spreads `2d + 1` sigma points around the query; the regressor is evaluated
//! at each and the weighted sums give the occupancy mean and variance.

use log::warn;
use nalgebra::{SMatrix, SVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::format::{parse_floats, FormatError};
use crate::geometry::{Mat3, Vec3};
use crate::occupancy::{FieldError, FusedOccupancyField};
use crate::svgp::OccupancyRegressor;

pub const DIM: usize = 3;
pub const NUM_POINTS: usize = 2 * DIM + 1;

#[derive(Debug, Error, PartialEq)]
pub enum CubatureError {
    #[error("invalid spread parameters: d + lambda = {0} must be positive")]
    InvalidSpread(f64),
    #[error("covariance is not positive semi-definite even after jitter")]
    DegenerateCovariance,
    #[error(transparent)]
    Field(#[from] FieldError),
}

/// Spread parameters as read from configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CubatureParams {
    pub alpha: f64,
    pub beta: f64,
    pub kappa: f64,
    /// Use `lambda / (2(d + lambda))` for the off-center weights. These do not
    /// sum to one; only for comparison runs.
    pub paper_verbatim_weights: bool,
}

impl Default for CubatureParams {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 2.0,
            kappa: 2.0,
            paper_verbatim_weights: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CubatureRule {
    pub alpha: f64,
    pub beta: f64,
    pub kappa: f64,
    pub lambda: f64,
    /// Row 0 is the origin; rows `2i+1`, `2i+2` are `+e_i`, `-e_i`.
    pub unit_points: SMatrix<f64, NUM_POINTS, DIM>,
    pub mean_weights: SVector<f64, NUM_POINTS>,
    pub var_weights: SVector<f64, NUM_POINTS>,
}

impl CubatureRule {
    pub fn new(alpha: f64, beta: f64, kappa: f64) -> Result<Self, CubatureError> {
        Self::build(alpha, beta, kappa, false)
    }

    /// Defaults `alpha = 1, beta = 2, kappa = 2`.
    pub fn default_rule() -> Self {
        Self::from_params(&CubatureParams::default()).expect("default spread is valid")
    }

    pub fn from_params(p: &CubatureParams) -> Result<Self, CubatureError> {
        Self::build(p.alpha, p.beta, p.kappa, p.paper_verbatim_weights)
    }

    fn build(alpha: f64, beta: f64, kappa: f64, verbatim: bool) -> Result<Self, CubatureError> {
        let d = DIM as f64;
        let lambda = alpha * alpha * (d + kappa) - d;
        let spread = d + lambda;
        if !(spread > 0.0 && spread.is_finite()) || !beta.is_finite() {
            return Err(CubatureError::InvalidSpread(spread));
        }
        let mut unit_points = SMatrix::<f64, NUM_POINTS, DIM>::zeros();
        for i in 0..DIM {
            unit_points[(2 * i + 1, i)] = 1.0;
            unit_points[(2 * i + 2, i)] = -1.0;
        }
        let side = if verbatim {
            lambda / (2.0 * spread)
        } else {
            1.0 / (2.0 * spread)
        };
        let mut mean_weights = SVector::<f64, NUM_POINTS>::repeat(side);
        mean_weights[0] = lambda / spread;
        let mut var_weights = mean_weights;
        var_weights[0] += 1.0 - alpha * alpha + beta;
        Ok(Self {
            alpha,
            beta,
            kappa,
            lambda,
            unit_points,
            mean_weights,
            var_weights,
        })
    }

    /// `sqrt(d + lambda)`.
    pub fn scale(&self) -> f64 {
        (DIM as f64 + self.lambda).sqrt()
    }

    /// Sigma points `mean + sqrt(d + lambda) L u_i` with `L L^T = cov`.
    pub fn sigma_points(
        &self,
        mean: &Vec3,
        cov: &Mat3,
    ) -> Result<[Vec3; NUM_POINTS], CubatureError> {
        if !cov.iter().all(|v| v.is_finite()) {
            return Err(CubatureError::DegenerateCovariance);
        }
        let jitter = 1e-12 * cov.trace().abs() / 3.0;
        let sym = (cov + cov.transpose()) * 0.5 + Mat3::identity() * jitter;
        let l = match sym.cholesky() {
            Some(c) => c.l(),
            None if sym.iter().all(|v| *v == 0.0) => Mat3::zeros(),
            None => return Err(CubatureError::DegenerateCovariance),
        };
        let s = self.scale();
        let mut out = [*mean; NUM_POINTS];
        for (i, p) in out.iter_mut().enumerate() {
            let u: Vec3 = self.unit_points.row(i).transpose();
            *p = mean + s * (l * u);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OccupancyUncertainty {
    pub query_point: Vec3,
    pub occupancy_mean: f64,
    pub occupancy_variance: f64,
}

/// Occupancy mean and variance at `query`, integrating the regressor over the
/// positional uncertainty fused from the `k` nearest field components.
pub fn fuse<R: OccupancyRegressor + ?Sized>(
    query: &Vec3,
    field: &FusedOccupancyField,
    model: &R,
    rule: &CubatureRule,
    k: usize,
) -> Result<OccupancyUncertainty, CubatureError> {
    let fused = field.bayesian_fuse(query, k)?;
    let points = rule.sigma_points(query, &fused.fused_covariance)?;
    let mut mean = 0.0;
    let mut var = 0.0;
    for (i, p) in points.iter().enumerate() {
        let pred = model.predict_point(p);
        mean += rule.mean_weights[i] * pred.occupancy_mean;
        var += rule.var_weights[i] * pred.scaled_variance;
    }
    if var < 0.0 {
        warn!("negative fused occupancy variance {var:e} at {query:?}; clamping to 0");
        var = 0.0;
    }
    Ok(OccupancyUncertainty {
        query_point: *query,
        occupancy_mean: mean,
        occupancy_variance: var,
    })
}

/// Order-preserving parallel [`fuse`]; each query keeps its own result.
pub fn fuse_batch<R: OccupancyRegressor + ?Sized>(
    queries: &[Vec3],
    field: &FusedOccupancyField,
    model: &R,
    rule: &CubatureRule,
    k: usize,
) -> Vec<Result<OccupancyUncertainty, CubatureError>> {
    queries
        .par_iter()
        .map(|q| fuse(q, field, model, rule, k))
        .collect()
}

pub const OCCUPANCY_CSV_HEADER: &str = "x,y,z,occ_mean,occ_variance";

pub fn write_occupancy_csv<W: std::io::Write>(
    mut out: W,
    rows: &[OccupancyUncertainty],
) -> std::io::Result<()> {
    writeln!(out, "{OCCUPANCY_CSV_HEADER}")?;
    for r in rows {
        let q = r.query_point;
        writeln!(
            out,
            "{:e},{:e},{:e},{:e},{:e}",
            q.x, q.y, q.z, r.occupancy_mean, r.occupancy_variance
        )?;
    }
    Ok(())
}

/// Reads rows written by [`write_occupancy_csv`]. NaN moments (failed
/// queries) are kept; the query point must be finite.
pub fn parse_occupancy_csv(text: &str) -> Result<Vec<OccupancyUncertainty>, FormatError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == OCCUPANCY_CSV_HEADER => {}
        _ => {
            return Err(FormatError::line(
                1,
                format!("expected header {OCCUPANCY_CSV_HEADER:?}"),
            ))
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let v = parse_floats(line, 5, i + 1)?;
        let q = Vec3::new(v[0], v[1], v[2]);
        if !q.iter().all(|c| c.is_finite()) {
            return Err(FormatError::row(i + 1, "non-finite query point"));
        }
        rows.push(OccupancyUncertainty {
            query_point: q,
            occupancy_mean: v[3],
            occupancy_variance: v[4],
        });
    }
    Ok(rows)
}
