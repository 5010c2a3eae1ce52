//! Pipeline configuration: one TOML file, per-key overrides, defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::camera::{PinholeIntrinsics, DEFAULT_DEPTH_VARIANCE};
use crate::cubature::{CubatureParams, CubatureRule};
use crate::grasp::{ContactMode, StubScorerConfig, DEFAULT_NU};
use crate::occupancy::{
    DEFAULT_NEIGHBORS, DEFAULT_OUTLIER_NEIGHBORS, DEFAULT_REGULARIZATION, DEFAULT_STD_RATIO,
};
use crate::scenes::SceneSpec;
use crate::svgp::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Frame directory read by reconstruction and written by generation.
    pub input_dir: PathBuf,
    pub output_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            input_dir: PathBuf::from("data"),
            output_dir: PathBuf::from("out"),
            checkpoint_dir: PathBuf::from("out/checkpoints"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraConfig {
    /// Overrides the dataset's intrinsics file when set.
    pub intrinsics: Option<PinholeIntrinsics>,
    /// Backproject every `stride`-th pixel in each direction.
    pub stride: usize,
    /// Per-pixel depth variance used when a frame has no variance file, m².
    pub depth_variance: f64,
    /// Rotate the camera-frame covariance into the world frame.
    pub rotate_camera_covariance: bool,
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self {
            intrinsics: None,
            stride: 4,
            depth_variance: DEFAULT_DEPTH_VARIANCE,
            rotate_camera_covariance: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FieldConfig {
    pub regularization: f64,
    /// Neighbours used for responsibilities and covariance fusion.
    pub neighbors: usize,
    pub filter_outliers: bool,
    pub outlier_neighbors: usize,
    pub outlier_std_ratio: f64,
    /// Ignore components farther than this when evaluating density, m.
    pub truncation_radius: Option<f64>,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            regularization: DEFAULT_REGULARIZATION,
            neighbors: DEFAULT_NEIGHBORS,
            filter_outliers: true,
            outlier_neighbors: DEFAULT_OUTLIER_NEIGHBORS,
            outlier_std_ratio: DEFAULT_STD_RATIO,
            truncation_radius: None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerKind {
    #[default]
    Stub,
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraspConfig {
    pub nu: f64,
    pub scorer: ScorerKind,
    /// Grasp CSV read when `scorer = "file"`.
    pub candidates: Option<PathBuf>,
    pub contact_mode: ContactMode,
    /// Neighbours for point-normal estimation.
    pub normal_neighbors: usize,
    /// Grasps listed in the run report.
    pub top_k: usize,
    pub stub: StubScorerConfig,
}

impl Default for GraspConfig {
    fn default() -> Self {
        Self {
            nu: DEFAULT_NU,
            scorer: ScorerKind::Stub,
            candidates: None,
            contact_mode: ContactMode::Nearest,
            normal_neighbors: 16,
            top_k: 10,
            stub: StubScorerConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// When set, replaces the scene, training and scorer seeds.
    pub seed: Option<u64>,
    pub paths: PathsConfig,
    pub camera: CameraConfig,
    pub field: FieldConfig,
    pub svgp: TrainConfig,
    pub cubature: CubatureParams,
    pub grasp: GraspConfig,
    /// Synthetic scene for the generate stage.
    pub scene: Option<SceneSpec>,
}

impl PipelineConfig {
    /// Defaults, then `file`, then `overrides` (`dotted.key=value`, value in
    /// TOML syntax or a bare string), then `seed`.
    pub fn load(
        file: Option<&Path>,
        overrides: &[String],
        seed: Option<u64>,
    ) -> Result<Self, PipelineError> {
        let mut table = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| {
                    PipelineError::Config(format!("cannot read {}: {e}", p.display()))
                })?;
                text.parse::<toml::Table>()
                    .map_err(|e| PipelineError::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut cfg: PipelineConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| PipelineError::Config(e.to_string()))?;
        if seed.is_some() {
            cfg.seed = seed;
        }
        cfg.apply_seed();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        let mut cfg: PipelineConfig =
            toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.apply_seed();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn apply_seed(&mut self) {
        if let Some(s) = self.seed {
            self.svgp.seed = s;
            self.grasp.stub.seed = s;
            if let Some(scene) = self.scene.as_mut() {
                scene.seed = s;
            }
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::Config(m.to_string()));
        if self.camera.stride == 0 {
            return bad("camera.stride must be at least 1");
        }
        if !(self.camera.depth_variance >= 0.0 && self.camera.depth_variance.is_finite()) {
            return bad("camera.depth_variance must be non-negative");
        }
        if let Some(i) = &self.camera.intrinsics {
            i.validate()
                .map_err(|e| PipelineError::Config(format!("camera.intrinsics: {e}")))?;
        }
        if !(self.field.regularization >= 0.0 && self.field.regularization.is_finite()) {
            return bad("field.regularization must be non-negative");
        }
        if self.field.neighbors == 0 || self.field.outlier_neighbors == 0 {
            return bad("field neighbour counts must be at least 1");
        }
        if !(self.field.outlier_std_ratio > 0.0 && self.field.outlier_std_ratio.is_finite()) {
            return bad("field.outlier_std_ratio must be positive");
        }
        if matches!(self.field.truncation_radius, Some(r) if !(r > 0.0)) {
            return bad("field.truncation_radius must be positive");
        }
        self.svgp
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        CubatureRule::from_params(&self.cubature)
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        if !(self.grasp.nu >= 0.0 && self.grasp.nu.is_finite()) {
            return bad("grasp.nu must be non-negative");
        }
        if self.grasp.scorer == ScorerKind::File && self.grasp.candidates.is_none() {
            return bad("grasp.scorer = \"file\" needs grasp.candidates");
        }
        let s = &self.grasp.stub;
        if !(s.max_width > s.min_width && s.min_width >= 0.0) || s.anchors == 0 {
            return bad("grasp.stub needs 0 <= min_width < max_width and anchors >= 1");
        }
        if self.grasp.normal_neighbors < 3 {
            return bad("grasp.normal_neighbors must be at least 3");
        }
        if let Some(scene) = &self.scene {
            scene
                .validate()
                .map_err(|e| PipelineError::Config(e.to_string()))?;
        }
        Ok(())
    }
}

fn apply_override(table: &mut toml::Table, item: &str) -> Result<(), PipelineError> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| PipelineError::Config(format!("override {item:?} is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(PipelineError::Config(format!("bad override key {key:?}")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| {
            PipelineError::Config(format!("override {key:?}: {p} is not a table"))
        })?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_dump_carries_reference_constants() {
        let cfg = PipelineConfig::default();
        let dump: toml::Table = cfg.to_toml().parse().unwrap();
        let get = |s: &str, k: &str| dump[s][k].clone();
        assert_eq!(get("camera", "depth_variance").as_float(), Some(0.001));
        assert_eq!(get("camera", "stride").as_integer(), Some(4));
        assert_eq!(get("svgp", "inducing").as_integer(), Some(500));
        assert_eq!(get("svgp", "learning_rate").as_float(), Some(1e-3));
        assert_eq!(get("svgp", "epochs").as_integer(), Some(100));
        assert_eq!(get("grasp", "nu").as_float(), Some(5.0));
        assert_eq!(get("field", "outlier_std_ratio").as_float(), Some(0.01));
        assert_eq!(get("field", "outlier_neighbors").as_integer(), Some(20));
        assert_eq!(get("field", "neighbors").as_integer(), Some(8));
        assert_eq!(get("cubature", "alpha").as_float(), Some(1.0));
        assert_eq!(get("cubature", "beta").as_float(), Some(2.0));
        assert_eq!(get("cubature", "kappa").as_float(), Some(2.0));
        assert_eq!(
            get("cubature", "paper_verbatim_weights").as_bool(),
            Some(false)
        );
        assert_eq!(PipelineConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(PipelineConfig::from_toml("[svgp]\nepochz = 3\n").is_err());
        assert!(PipelineConfig::from_toml("bogus = 1\n").is_err());
        assert!(PipelineConfig::from_toml("[camera]\nstride = 0\n").is_err());
    }

    #[test]
    fn precedence_flag_over_file_over_default() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(
            &path,
            "[svgp]\nepochs = 7\ninducing = 30\n[scene]\nseed = 3\n",
        )
        .unwrap();
        let cfg = PipelineConfig::load(
            Some(&path),
            &[
                "svgp.epochs=9".into(),
                "paths.output_dir=elsewhere".into(),
                "grasp.contact_mode=region".into(),
            ],
            Some(42),
        )
        .unwrap();
        assert_eq!(cfg.svgp.epochs, 9);
        assert_eq!(cfg.svgp.inducing, 30);
        assert_eq!(cfg.svgp.learning_rate, 1e-3);
        assert_eq!(cfg.paths.output_dir, PathBuf::from("elsewhere"));
        assert_eq!(cfg.grasp.contact_mode, ContactMode::Region);
        assert_eq!(cfg.svgp.seed, 42);
        assert_eq!(cfg.grasp.stub.seed, 42);
        assert_eq!(cfg.scene.unwrap().seed, 42);
        assert!(PipelineConfig::load(None, &["noequals".into()], None).is_err());
        assert!(PipelineConfig::load(None, &["svgp.nope=1".into()], None).is_err());
    }
}
