//! Synthetic multi-view depth datasets of analytic shapes.
//!
//! Frames are rendered by sphere tracing the shape's signed distance function
//! from cameras on an orbit around the object. All randomness comes from
//! ChaCha streams keyed by `(seed, frame, row)`, so parallel rendering is
//! reproducible.

mod dataset;
mod shape;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{
    CameraError, DepthImage, PinholeIntrinsics, PoseEstimate, DEFAULT_DEPTH_VARIANCE,
};
use crate::format::FormatError;
use crate::geometry::{axis_angle, cholesky_jittered, look_at, Mat3, Vec3};

pub use dataset::{generate_dataset, Manifest, ManifestFrame, MANIFEST_FILE, TRUE_POSES_FILE};
pub use shape::Shape;

/// Depth variance of the noisy regime, m².
pub const NOISY_DEPTH_VARIANCE: f64 = 0.01;

const TRACE_EPSILON: f64 = 1e-7;
const TRACE_MAX_STEPS: usize = 1024;
const NORMAL_STEP: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("invalid scene: {0}")]
    InvalidSpec(String),
    #[error("camera of frame {frame} is inside the geometry")]
    CameraInsideGeometry { frame: u32 },
    #[error(transparent)]
    Camera(#[from] CameraError),
    #[error(transparent)]
    Format(#[from] FormatError),
}

/// Object placement: rotation vector (axis times angle, radians) and translation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectPose {
    pub rotation_vector: [f64; 3],
    pub translation: [f64; 3],
}

impl Default for ObjectPose {
    fn default() -> Self {
        Self {
            rotation_vector: [0.0; 3],
            translation: [0.0; 3],
        }
    }
}

impl ObjectPose {
    pub fn rotation(&self) -> Mat3 {
        let v = Vec3::from(self.rotation_vector);
        let angle = v.norm();
        if angle == 0.0 {
            Mat3::identity()
        } else {
            axis_angle(&v, angle)
        }
    }

    pub fn translation(&self) -> Vec3 {
        Vec3::from(self.translation)
    }
}

/// Cameras on a circle of `radius` around the object, looking at its center.
/// Frame `i` sits at azimuth `azimuth_start + azimuth_span * i / frames`;
/// elevation sweeps linearly from `elevation_min` to `elevation_max`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Trajectory {
    pub radius: f64,
    pub elevation_min: f64,
    pub elevation_max: f64,
    pub azimuth_start: f64,
    pub azimuth_span: f64,
    pub frames: u32,
}

impl Default for Trajectory {
    fn default() -> Self {
        Self {
            radius: 0.5,
            elevation_min: 0.3,
            elevation_max: 0.5,
            azimuth_start: 0.0,
            azimuth_span: std::f64::consts::TAU,
            frames: 12,
        }
    }
}

impl Trajectory {
    pub fn azimuth(&self, i: u32) -> f64 {
        self.azimuth_start + self.azimuth_span * i as f64 / self.frames as f64
    }

    pub fn elevation(&self, i: u32) -> f64 {
        if self.frames <= 1 {
            self.elevation_min
        } else {
            let s = i as f64 / (self.frames - 1) as f64;
            self.elevation_min + (self.elevation_max - self.elevation_min) * s
        }
    }
}

/// A compact cloud of false returns injected into a single frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpuriousCluster {
    /// Trajectory index of the frame that observes the cluster.
    pub frame: u32,
    pub points: usize,
    /// World-frame center and radius of the ball the returns are drawn from.
    pub center: [f64; 3],
    pub radius: f64,
    /// Pixel grid the returns snap to; match the backprojection stride so
    /// every return is sampled.
    #[serde(default = "default_pixel_grid")]
    pub pixel_grid: usize,
}

fn default_pixel_grid() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub seed: u64,
    /// Fraction of frames removed as one contiguous azimuth arc.
    pub dropout: f64,
    /// Depth noise variance, m²; also written as the per-pixel variance.
    pub depth_noise_var: f64,
    /// Camera translation noise covariance, m², row-major.
    pub pose_noise_cov: [[f64; 3]; 3],
    pub shape: Shape,
    pub object_pose: ObjectPose,
    pub trajectory: Trajectory,
    pub intrinsics: PinholeIntrinsics,
    pub spurious: Option<SpuriousCluster>,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            dropout: 0.0,
            depth_noise_var: DEFAULT_DEPTH_VARIANCE,
            pose_noise_cov: [[0.0; 3]; 3],
            shape: Shape::kettlebell(),
            object_pose: ObjectPose::default(),
            trajectory: Trajectory::default(),
            intrinsics: PinholeIntrinsics {
                fx: 200.0,
                fy: 200.0,
                cx: 79.5,
                cy: 59.5,
                width: 160,
                height: 120,
            },
            spurious: None,
        }
    }
}

/// One rendered view. `pose` carries the sampled translation error;
/// `true_pose` is the noise-free camera.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneFrame {
    pub depth: DepthImage,
    pub pose: PoseEstimate,
    pub true_pose: PoseEstimate,
    pub intrinsics: PinholeIntrinsics,
}

fn rng_for(seed: u64, frame: u32, stream: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((frame as u64) << 32) | stream as u64);
    rng
}

const POSE_STREAM: u32 = u32::MAX;
const SPURIOUS_STREAM: u32 = u32::MAX - 1;

impl SceneSpec {
    pub fn validate(&self) -> Result<(), SceneError> {
        let bad = |m: String| Err(SceneError::InvalidSpec(m));
        self.shape.validate().map_err(SceneError::InvalidSpec)?;
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} must lie in [0, 1)", self.dropout));
        }
        if self.trajectory.frames == 0 {
            return bad("trajectory needs at least one frame".into());
        }
        if !(self.trajectory.radius > 0.0 && self.trajectory.radius.is_finite()) {
            return bad("orbit radius must be positive".into());
        }
        if !(self.depth_noise_var >= 0.0 && self.depth_noise_var.is_finite()) {
            return bad("depth noise variance must be non-negative".into());
        }
        let cov = self.pose_noise_matrix();
        if !crate::geometry::is_symmetric_psd(&cov, 1e-12) {
            return bad("pose noise covariance must be symmetric PSD".into());
        }
        self.intrinsics.validate()?;
        if let Some(s) = &self.spurious {
            if s.frame >= self.trajectory.frames || s.radius < 0.0 || s.pixel_grid == 0 {
                return bad(
                    "spurious cluster needs a valid frame, radius >= 0 and grid > 0".into(),
                );
            }
        }
        Ok(())
    }

    pub fn pose_noise_matrix(&self) -> Mat3 {
        let c = &self.pose_noise_cov;
        Mat3::new(
            c[0][0], c[0][1], c[0][2], c[1][0], c[1][1], c[1][2], c[2][0], c[2][1], c[2][2],
        )
    }

    /// Signed distance in world coordinates.
    pub fn sdf(&self, p: &Vec3) -> f64 {
        let local = self.object_pose.rotation().transpose() * (p - self.object_pose.translation());
        self.shape.sdf(&local)
    }

    /// Unit outward normal by central differences of the SDF.
    pub fn normal(&self, p: &Vec3) -> Vec3 {
        let h = NORMAL_STEP;
        let g = Vec3::new(
            self.sdf(&(p + Vec3::x() * h)) - self.sdf(&(p - Vec3::x() * h)),
            self.sdf(&(p + Vec3::y() * h)) - self.sdf(&(p - Vec3::y() * h)),
            self.sdf(&(p + Vec3::z() * h)) - self.sdf(&(p - Vec3::z() * h)),
        );
        g.normalize()
    }

    /// Sphere-traced distance along unit `dir` to the first surface hit.
    pub fn trace(&self, origin: &Vec3, dir: &Vec3) -> Option<f64> {
        let far =
            (origin - self.object_pose.translation()).norm() + 2.0 * self.shape.bounding_radius();
        let mut t = 0.0;
        for _ in 0..TRACE_MAX_STEPS {
            let d = self.sdf(&(origin + dir * t));
            if d < TRACE_EPSILON {
                return Some(t);
            }
            t += d;
            if t > far {
                return None;
            }
        }
        None
    }

    /// Frame indices kept after removing the dropout arc (the last
    /// `round(dropout * frames)` frames of the sweep).
    pub fn kept_frames(&self) -> Vec<u32> {
        let n = self.trajectory.frames;
        let removed = ((self.dropout * n as f64).round() as u32).min(n - 1);
        (0..n - removed).collect()
    }

    pub fn regime(&self) -> &'static str {
        let noisy = self.depth_noise_var > DEFAULT_DEPTH_VARIANCE;
        match (self.dropout > 0.0, noisy) {
            (false, false) => "complete",
            (true, false) => "partial",
            (true, true) => "noisy_partial",
            (false, true) => "noisy",
        }
    }

    /// Noise-free camera pose of trajectory frame `i`.
    pub fn camera_pose(&self, i: u32) -> PoseEstimate {
        let tr = &self.trajectory;
        let (az, el) = (tr.azimuth(i), tr.elevation(i));
        let target = self.object_pose.translation();
        let eye =
            target + tr.radius * Vec3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin());
        let rotation = look_at(&eye, &target, &Vec3::z());
        PoseEstimate {
            rotation,
            translation: eye,
            translation_covariance: Mat3::zeros(),
            frame_id: i,
        }
    }

    /// Whether the surface point `p` is seen unoccluded from `camera` within
    /// the image bounds.
    pub fn visible_from(&self, p: &Vec3, camera: &PoseEstimate) -> bool {
        let cam = camera.rotation.transpose() * (p - camera.translation);
        if cam.z <= 0.0 {
            return false;
        }
        let intr = &self.intrinsics;
        let u = intr.fx * cam.x / cam.z + intr.cx;
        let v = intr.fy * cam.y / cam.z + intr.cy;
        if !(u >= -0.5 && v >= -0.5 && u < intr.width as f64 - 0.5 && v < intr.height as f64 - 0.5)
        {
            return false;
        }
        let to = p - camera.translation;
        let dist = to.norm();
        match self.trace(&camera.translation, &(to / dist)) {
            Some(t) => t >= dist - 1e-3,
            None => true,
        }
    }

    /// Renders trajectory frame `i`.
    pub fn render_frame(&self, i: u32) -> Result<SceneFrame, SceneError> {
        let true_pose = self.camera_pose(i);
        if self.sdf(&true_pose.translation) <= 0.0 {
            return Err(SceneError::CameraInsideGeometry { frame: i });
        }
        let intr = &self.intrinsics;
        let (w, h) = (intr.width, intr.height);
        let sigma = self.depth_noise_var.sqrt();
        let rows: Vec<Vec<f64>> = (0..h)
            .into_par_iter()
            .map(|v| {
                let mut rng = rng_for(self.seed, i, v as u32);
                (0..w)
                    .map(|u| {
                        let ray = intr.ray(u as f64, v as f64);
                        let dir = true_pose.rotation * ray / ray.norm();
                        match self.trace(&true_pose.translation, &dir) {
                            Some(t) => {
                                let z: f64 = StandardNormal.sample(&mut rng);
                                t / ray.norm() + sigma * z
                            }
                            None => f64::NAN,
                        }
                    })
                    .collect()
            })
            .collect();
        let mut depths: Vec<f64> = rows.into_iter().flatten().collect();
        if let Some(s) = self.spurious.as_ref().filter(|s| s.frame == i) {
            self.inject_spurious(s, &true_pose, &mut depths);
        }
        // a noise draw can push a return behind the camera
        for d in depths.iter_mut() {
            if *d <= 0.0 {
                *d = f64::NAN;
            }
        }
        let mask = depths.iter().map(|d| d.is_finite()).collect();
        let depth = DepthImage::with_uniform_variance(w, h, depths, mask, self.depth_noise_var, i)?;

        let cov = self.pose_noise_matrix();
        let mut rng = rng_for(self.seed, i, POSE_STREAM);
        let z = Vec3::from_fn(|_, _| StandardNormal.sample(&mut rng));
        let l = cholesky_jittered(&cov, 0.0).unwrap_or_else(Mat3::zeros);
        let pose = PoseEstimate::new(true_pose.rotation, true_pose.translation + l * z, cov, i)?;
        Ok(SceneFrame {
            depth,
            pose,
            true_pose,
            intrinsics: intr.clone(),
        })
    }

    /// Overwrites the `points` grid-aligned pixels nearest the cluster
    /// center's projection with returns at the center's depth plus a seeded
    /// offset in `[-radius, radius]`. A return only replaces a farther (or
    /// missing) depth.
    fn inject_spurious(&self, s: &SpuriousCluster, camera: &PoseEstimate, depths: &mut [f64]) {
        let intr = &self.intrinsics;
        let cam = camera.rotation.transpose() * (Vec3::from(s.center) - camera.translation);
        if cam.z <= s.radius {
            log::warn!("spurious cluster is not in front of frame {}", s.frame);
            return;
        }
        let (uc, vc) = (
            intr.fx * cam.x / cam.z + intr.cx,
            intr.fy * cam.y / cam.z + intr.cy,
        );
        let mut grid: Vec<(f64, usize, usize)> = (0..intr.height)
            .step_by(s.pixel_grid)
            .flat_map(|v| (0..intr.width).step_by(s.pixel_grid).map(move |u| (u, v)))
            .map(|(u, v)| ((u as f64 - uc).powi(2) + (v as f64 - vc).powi(2), v, u))
            .collect();
        grid.sort_by(|a, b| a.0.total_cmp(&b.0).then((a.1, a.2).cmp(&(b.1, b.2))));
        let mut rng = rng_for(self.seed, s.frame, SPURIOUS_STREAM);
        let mut placed = 0;
        for (_, v, u) in grid {
            if placed == s.points {
                break;
            }
            let z = cam.z + s.radius * rng.gen_range(-1.0..=1.0);
            let idx = v * intr.width + u;
            if depths[idx] <= z {
                continue;
            }
            depths[idx] = z;
            placed += 1;
        }
        if placed < s.points {
            log::warn!("spurious cluster placed {placed} of {} returns", s.points);
        }
    }

    /// Renders every kept frame.
    pub fn render_all(&self) -> Result<Vec<SceneFrame>, SceneError> {
        self.validate()?;
        self.kept_frames()
            .into_par_iter()
            .map(|i| self.render_frame(i))
            .collect()
    }
}
