//! Writing rendered scenes as frame directories.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{SceneError, SceneSpec};
use crate::camera::io::{
    write_frame_files, write_intrinsics, write_poses_csv, INTRINSICS_FILE, POSES_FILE,
};
use crate::format::{write_atomic, FormatError};

pub const MANIFEST_FILE: &str = "manifest.toml";
/// Noise-free camera poses, same schema as the pose file.
pub const TRUE_POSES_FILE: &str = "true_poses.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestFrame {
    pub id: u32,
    pub azimuth: f64,
    pub elevation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub seed: u64,
    pub regime: String,
    /// Trajectory indices removed by dropout.
    pub dropped_frames: Vec<u32>,
    pub spec: SceneSpec,
    pub frames: Vec<ManifestFrame>,
}

impl Manifest {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self, FormatError> {
        toml::from_str(text).map_err(|e| FormatError::invalid(e.to_string()))
    }

    /// Azimuth range covered by the kept frames, radians.
    pub fn azimuth_coverage(&self) -> f64 {
        let tr = &self.spec.trajectory;
        tr.azimuth_span * self.frames.len() as f64 / tr.frames as f64
    }
}

/// Renders the kept frames of `spec` into `out_dir` (created if missing):
/// per-frame depth/variance/mask files, noisy and true pose files,
/// intrinsics and the manifest.
pub fn generate_dataset(spec: &SceneSpec, out_dir: &Path) -> Result<Manifest, SceneError> {
    spec.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| FormatError::io(out_dir, e))?;
    let frames = spec.render_all()?;
    for f in &frames {
        write_frame_files(out_dir, &f.depth)?;
    }
    let poses: Vec<_> = frames.iter().map(|f| f.pose.clone()).collect();
    let truth: Vec<_> = frames.iter().map(|f| f.true_pose.clone()).collect();
    write_atomic(
        &out_dir.join(POSES_FILE),
        write_poses_csv(&poses).as_bytes(),
    )?;
    write_atomic(
        &out_dir.join(TRUE_POSES_FILE),
        write_poses_csv(&truth).as_bytes(),
    )?;
    write_atomic(
        &out_dir.join(INTRINSICS_FILE),
        write_intrinsics(&spec.intrinsics).as_bytes(),
    )?;

    let kept = spec.kept_frames();
    let manifest = Manifest {
        seed: spec.seed,
        regime: spec.regime().to_string(),
        dropped_frames: (0..spec.trajectory.frames)
            .filter(|i| !kept.contains(i))
            .collect(),
        spec: spec.clone(),
        frames: kept
            .iter()
            .map(|&i| ManifestFrame {
                id: i,
                azimuth: spec.trajectory.azimuth(i),
                elevation: spec.trajectory.elevation(i),
            })
            .collect(),
    };
    write_atomic(&out_dir.join(MANIFEST_FILE), manifest.to_toml().as_bytes())?;
    Ok(manifest)
}
