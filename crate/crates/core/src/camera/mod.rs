//! Backprojection of uncertain depth pixels into camera and world frames.
//!
//! A depth pixel `d ~ N(mu, var)` at `(u, v)` maps to the camera-frame point
//! `d * ((u - cx) / fx, (v - cy) / fy, 1)`. The map is linear in `d`, so its
//! covariance is `J var J^T` with `J` the ray direction above; the result is
//! rank one. Placing the point in the world frame adds the pose translation
//! covariance. By default the camera-frame covariance is *not* rotated into
//! the world frame (see [`WorldTransform::rotate_camera_covariance`]).

pub mod io;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{is_rotation, is_symmetric_psd, Mat3, Vec3};

/// Depth variance used when a frame carries no per-pixel variance map.
pub const DEFAULT_DEPTH_VARIANCE: f64 = 0.001;

const POSE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum CameraError {
    #[error("depth must be finite and positive, got {0}")]
    InvalidDepth(f64),
    #[error("depth variance must be finite and non-negative, got {0}")]
    InvalidVariance(f64),
    #[error("pixel ({u}, {v}) outside {width}x{height} image")]
    OutOfBounds {
        u: i64,
        v: i64,
        width: usize,
        height: usize,
    },
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("invalid pose for frame {frame_id}: {reason}")]
    InvalidPose { frame_id: u32, reason: String },
    #[error("depth image grids disagree: {0}")]
    DimensionMismatch(String),
    #[error("stride must be at least 1")]
    InvalidStride,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PinholeIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl PinholeIntrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self, CameraError> {
        let intr = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        intr.validate()?;
        Ok(intr)
    }

    pub fn validate(&self) -> Result<(), CameraError> {
        let bad = |msg: String| Err(CameraError::InvalidIntrinsics(msg));
        if !(self.fx.is_finite() && self.fx > 0.0 && self.fy.is_finite() && self.fy > 0.0) {
            return bad(format!(
                "focal lengths must be positive ({}, {})",
                self.fx, self.fy
            ));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64) {
            return bad(format!("cx = {} outside [0, {})", self.cx, self.width));
        }
        if !(self.cy >= 0.0 && self.cy < self.height as f64) {
            return bad(format!("cy = {} outside [0, {})", self.cy, self.height));
        }
        Ok(())
    }

    /// Unnormalized ray `((u - cx) / fx, (v - cy) / fy, 1)`; also the depth Jacobian.
    pub fn ray(&self, u: f64, v: f64) -> Vec3 {
        Vec3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }
}

/// Row-major depth, variance and mask grids for one frame. Invalid depths are NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    pub width: usize,
    pub height: usize,
    pub depths: Vec<f64>,
    pub variances: Vec<f64>,
    pub mask: Vec<bool>,
    pub frame_id: u32,
}

impl DepthImage {
    pub fn new(
        width: usize,
        height: usize,
        depths: Vec<f64>,
        variances: Vec<f64>,
        mask: Vec<bool>,
        frame_id: u32,
    ) -> Result<Self, CameraError> {
        let img = Self {
            width,
            height,
            depths,
            variances,
            mask,
            frame_id,
        };
        img.validate()?;
        Ok(img)
    }

    /// Builds an image whose every pixel carries the same depth variance.
    pub fn with_uniform_variance(
        width: usize,
        height: usize,
        depths: Vec<f64>,
        mask: Vec<bool>,
        variance: f64,
        frame_id: u32,
    ) -> Result<Self, CameraError> {
        let n = depths.len();
        Self::new(width, height, depths, vec![variance; n], mask, frame_id)
    }

    pub fn validate(&self) -> Result<(), CameraError> {
        let n = self.width * self.height;
        for (name, len) in [
            ("depths", self.depths.len()),
            ("variances", self.variances.len()),
            ("mask", self.mask.len()),
        ] {
            if len != n {
                return Err(CameraError::DimensionMismatch(format!(
                    "{name} has {len} entries, expected {}x{} = {n}",
                    self.width, self.height
                )));
            }
        }
        if let Some(&d) = self
            .depths
            .iter()
            .find(|d| !d.is_nan() && !(d.is_finite() && **d > 0.0))
        {
            return Err(CameraError::InvalidDepth(d));
        }
        if let Some(&v) = self
            .variances
            .iter()
            .find(|v| !(v.is_finite() && **v >= 0.0))
        {
            return Err(CameraError::InvalidVariance(v));
        }
        Ok(())
    }

    pub fn index(&self, u: usize, v: usize) -> usize {
        v * self.width + u
    }
}

/// Camera-to-world pose with translation covariance. Rotation uncertainty is not modeled.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseEstimate {
    pub rotation: Mat3,
    pub translation: Vec3,
    pub translation_covariance: Mat3,
    pub frame_id: u32,
}

impl PoseEstimate {
    pub fn new(
        rotation: Mat3,
        translation: Vec3,
        translation_covariance: Mat3,
        frame_id: u32,
    ) -> Result<Self, CameraError> {
        let pose = Self {
            rotation,
            translation,
            translation_covariance,
            frame_id,
        };
        pose.validate()?;
        Ok(pose)
    }

    pub fn identity(frame_id: u32) -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
            translation_covariance: Mat3::zeros(),
            frame_id,
        }
    }

    pub fn validate(&self) -> Result<(), CameraError> {
        let fail = |reason: &str| {
            Err(CameraError::InvalidPose {
                frame_id: self.frame_id,
                reason: reason.to_string(),
            })
        };
        if !is_rotation(&self.rotation, POSE_TOLERANCE) {
            return fail("rotation is not orthonormal with unit determinant");
        }
        if !self.translation.iter().all(|v| v.is_finite()) {
            return fail("translation is not finite");
        }
        if !is_symmetric_psd(&self.translation_covariance, POSE_TOLERANCE) {
            return fail("translation covariance is not symmetric PSD");
        }
        Ok(())
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vec3 {
        self.translation
    }
}

/// A 3D position with Gaussian uncertainty.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianPoint3 {
    pub mean: Vec3,
    pub covariance: Mat3,
    pub source_frame: u32,
}

impl GaussianPoint3 {
    pub fn new(mean: Vec3, covariance: Mat3, source_frame: u32) -> Self {
        Self {
            mean,
            covariance,
            source_frame,
        }
    }
}

/// How camera-frame covariance is carried into the world frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct WorldTransform {
    /// Apply `R * cov * R^T` to the camera-frame covariance before adding the
    /// pose covariance. Off by default: the covariance is added unrotated.
    pub rotate_camera_covariance: bool,
}

/// Backprojects pixel `(u, v)` with depth `N(depth_mean, depth_var)` into the camera frame.
pub fn backproject(
    pixel: (i64, i64),
    depth_mean: f64,
    depth_var: f64,
    intr: &PinholeIntrinsics,
) -> Result<GaussianPoint3, CameraError> {
    let (u, v) = pixel;
    if u < 0 || v < 0 || u as usize >= intr.width || v as usize >= intr.height {
        return Err(CameraError::OutOfBounds {
            u,
            v,
            width: intr.width,
            height: intr.height,
        });
    }
    if !(depth_mean.is_finite() && depth_mean > 0.0) {
        return Err(CameraError::InvalidDepth(depth_mean));
    }
    if !(depth_var.is_finite() && depth_var >= 0.0) {
        return Err(CameraError::InvalidVariance(depth_var));
    }
    let jac = intr.ray(u as f64, v as f64);
    Ok(GaussianPoint3 {
        mean: jac * depth_mean,
        covariance: jac * jac.transpose() * depth_var,
        source_frame: 0,
    })
}

/// Moves a camera-frame point into the world frame.
pub fn to_world(pt_cam: &GaussianPoint3, pose: &PoseEstimate) -> GaussianPoint3 {
    to_world_with(pt_cam, pose, WorldTransform::default())
}

pub fn to_world_with(
    pt_cam: &GaussianPoint3,
    pose: &PoseEstimate,
    mode: WorldTransform,
) -> GaussianPoint3 {
    let cam_cov = if mode.rotate_camera_covariance {
        pose.rotation * pt_cam.covariance * pose.rotation.transpose()
    } else {
        pt_cam.covariance
    };
    GaussianPoint3 {
        mean: pose.rotation * pt_cam.mean + pose.translation,
        covariance: cam_cov + pose.translation_covariance,
        source_frame: pose.frame_id,
    }
}

/// Backprojects every masked, valid pixel on the `stride` grid, in row-major order.
pub fn backproject_frame(
    depth: &DepthImage,
    pose: &PoseEstimate,
    intr: &PinholeIntrinsics,
    stride: usize,
) -> Result<Vec<GaussianPoint3>, CameraError> {
    backproject_frame_with(depth, pose, intr, stride, WorldTransform::default())
}

pub fn backproject_frame_with(
    depth: &DepthImage,
    pose: &PoseEstimate,
    intr: &PinholeIntrinsics,
    stride: usize,
    mode: WorldTransform,
) -> Result<Vec<GaussianPoint3>, CameraError> {
    if stride == 0 {
        return Err(CameraError::InvalidStride);
    }
    if depth.width != intr.width || depth.height != intr.height {
        return Err(CameraError::DimensionMismatch(format!(
            "frame {} is {}x{}, intrinsics are {}x{}",
            depth.frame_id, depth.width, depth.height, intr.width, intr.height
        )));
    }
    let rows: Vec<usize> = (0..depth.height).step_by(stride).collect();
    let per_row: Result<Vec<Vec<GaussianPoint3>>, CameraError> = rows
        .par_iter()
        .map(|&v| {
            let mut out = Vec::new();
            for u in (0..depth.width).step_by(stride) {
                let i = depth.index(u, v);
                let d = depth.depths[i];
                if !depth.mask[i] || !d.is_finite() || d <= 0.0 {
                    continue;
                }
                let cam = backproject((u as i64, v as i64), d, depth.variances[i], intr)?;
                out.push(to_world_with(&cam, pose, mode));
            }
            Ok(out)
        })
        .collect();
    Ok(per_row?.into_iter().flatten().collect())
}
