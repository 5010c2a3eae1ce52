//! Stage implementations and the `cmd_*` entry points.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{PipelineConfig, ScorerKind};
use super::{files, run_stage, InputHasher, PipelineError, StageOutcome, StageReport, StageStatus};
use crate::camera::io::{load_frame_dir, parse_poses_csv, POSES_FILE};
use crate::camera::{backproject_frame_with, GaussianPoint3, WorldTransform};
use crate::cubature::{
    fuse_batch, parse_occupancy_csv, write_occupancy_csv, CubatureRule, OccupancyUncertainty,
};
use crate::format::{parse_floats, read_bytes, read_string, write_atomic, FormatError};
use crate::geometry::Vec3;
use crate::grasp::io::{load_candidates, parse_candidates, write_candidates, write_ranked};
use crate::grasp::{assign_contacts, estimate_normals, reweight, stub_scorer, GraspCandidate};
use crate::occupancy::io::{decode_field, encode_field, parse_ply, write_ply};
use crate::occupancy::{build_field, filter_outliers, FusedOccupancyField, PointIndex};
use crate::scenes::{generate_dataset, Manifest};
use crate::svgp::io::{decode_model, encode_model};
use crate::svgp::{make_training_set, train, SvgpModel};

/// Stage names in execution order.
pub const STAGES: [&str; 7] = [
    "generate",
    "backproject",
    "filter",
    "field",
    "train",
    "fuse",
    "rank",
];

type StageResult<T> = Result<T, PipelineError>;

fn out(cfg: &PipelineConfig, name: &str) -> PathBuf {
    cfg.paths.output_dir.join(name)
}

fn ckpt(cfg: &PipelineConfig, name: &str) -> PathBuf {
    cfg.paths.checkpoint_dir.join(name)
}

fn ensure_dir(stage: &'static str, dir: &Path) -> StageResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| PipelineError::stage(stage, FormatError::io(dir, e)))
}

fn metrics<const N: usize>(pairs: [(&str, f64); N]) -> BTreeMap<String, f64> {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

/// Sorted regular files directly inside `dir`.
fn dir_files(dir: &Path) -> Result<Vec<PathBuf>, FormatError> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| FormatError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && !p
                    .file_name()
                    .is_some_and(|n| n.to_string_lossy().ends_with(".tmp"))
        })
        .collect();
    files.sort();
    Ok(files)
}

fn load_cloud(stage: &'static str, path: &Path) -> StageResult<Vec<GaussianPoint3>> {
    read_string(path)
        .and_then(|t| parse_ply(&t))
        .map_err(|e| PipelineError::stage(stage, e))
}

fn load_field(stage: &'static str, cfg: &PipelineConfig) -> StageResult<FusedOccupancyField> {
    let bytes = read_bytes(&ckpt(cfg, files::FIELD)).map_err(|e| PipelineError::stage(stage, e))?;
    let field = decode_field(&bytes).map_err(|e| PipelineError::stage(stage, e))?;
    Ok(field.with_truncation(cfg.field.truncation_radius))
}

fn load_model(stage: &'static str, cfg: &PipelineConfig) -> StageResult<SvgpModel> {
    let bytes = read_bytes(&ckpt(cfg, files::MODEL)).map_err(|e| PipelineError::stage(stage, e))?;
    decode_model(&bytes).map_err(|e| PipelineError::stage(stage, e))
}

// ---- generate

fn stage_generate(cfg: &PipelineConfig, resume: bool) -> StageResult<StageReport> {
    const S: &str = "generate";
    let Some(scene) = cfg.scene.as_ref() else {
        return Ok(StageReport {
            name: S.into(),
            status: StageStatus::Skipped,
            seconds: 0.0,
            metrics: BTreeMap::new(),
        });
    };
    let hash = InputHasher::new(S).config("scene", scene).finish();
    run_stage(S, &cfg.paths.checkpoint_dir, hash, resume, || {
        let manifest = generate_dataset(scene, &cfg.paths.input_dir)
            .map_err(|e| PipelineError::stage(S, e))?;
        let outputs = dir_files(&cfg.paths.input_dir).map_err(|e| PipelineError::stage(S, e))?;
        Ok(StageOutcome {
            outputs,
            metrics: metrics([("frames", manifest.frames.len() as f64)]),
        })
    })
}

/// Renders the configured synthetic scene into the input directory.
pub fn cmd_generate(cfg: &PipelineConfig) -> StageResult<Manifest> {
    if cfg.scene.is_none() {
        return Err(PipelineError::Config(
            "generate needs a [scene] section".into(),
        ));
    }
    stage_generate(cfg, false)?;
    let text = read_string(&cfg.paths.input_dir.join(crate::scenes::MANIFEST_FILE))
        .map_err(|e| PipelineError::stage("generate", e))?;
    Manifest::from_toml(&text).map_err(|e| PipelineError::stage("generate", e))
}

// ---- backproject / filter

fn stage_backproject(cfg: &PipelineConfig, resume: bool) -> StageResult<StageReport> {
    const S: &str = "backproject";
    let mut h = InputHasher::new(S).config("camera", &cfg.camera);
    for f in dir_files(&cfg.paths.input_dir).map_err(|e| PipelineError::stage(S, e))? {
        h = h.file(&f).map_err(|e| PipelineError::stage(S, e))?;
    }
    run_stage(S, &cfg.paths.checkpoint_dir, h.finish(), resume, || {
        let (intr, frames) = load_frame_dir(&cfg.paths.input_dir, cfg.camera.depth_variance)
            .map_err(|e| PipelineError::stage(S, e))?;
        let intr = cfg.camera.intrinsics.clone().unwrap_or(intr);
        let mode = WorldTransform {
            rotate_camera_covariance: cfg.camera.rotate_camera_covariance,
        };
        let mut cloud = Vec::new();
        for f in &frames {
            let pts = backproject_frame_with(&f.depth, &f.pose, &intr, cfg.camera.stride, mode)
                .map_err(|e| PipelineError::stage(S, e))?;
            cloud.extend(pts);
        }
        if cloud.is_empty() {
            return Err(PipelineError::stage(
                S,
                "no valid depth pixels in any frame",
            ));
        }
        ensure_dir(S, &cfg.paths.output_dir)?;
        let path = out(cfg, files::RAW_CLOUD);
        write_atomic(&path, write_ply(&cloud).as_bytes())
            .map_err(|e| PipelineError::stage(S, e))?;
        Ok(StageOutcome {
            outputs: vec![path],
            metrics: metrics([
                ("frames", frames.len() as f64),
                ("points", cloud.len() as f64),
            ]),
        })
    })
}

fn stage_filter(cfg: &PipelineConfig, resume: bool) -> StageResult<StageReport> {
    const S: &str = "filter";
    let raw = out(cfg, files::RAW_CLOUD);
    let hash = InputHasher::new(S)
        .file(&raw)
        .map_err(|e| PipelineError::stage(S, e))?
        .config("field", &cfg.field)
        .finish();
    run_stage(S, &cfg.paths.checkpoint_dir, hash, resume, || {
        let cloud = load_cloud(S, &raw)?;
        let kept = if cfg.field.filter_outliers {
            filter_outliers(
                &cloud,
                cfg.field.outlier_neighbors,
                cfg.field.outlier_std_ratio,
            )
        } else {
            cloud.clone()
        };
        let path = out(cfg, files::CLOUD);
        write_atomic(&path, write_ply(&kept).as_bytes()).map_err(|e| PipelineError::stage(S, e))?;
        Ok(StageOutcome {
            outputs: vec![path],
            metrics: metrics([
                ("points_before", cloud.len() as f64),
                ("points_after", kept.len() as f64),
            ]),
        })
    })
}

/// Backprojects every frame and removes outliers; returns both stage reports.
pub fn cmd_reconstruct(cfg: &PipelineConfig) -> StageResult<Vec<StageReport>> {
    Ok(vec![
        stage_backproject(cfg, false)?,
        stage_filter(cfg, false)?,
    ])
}

// ---- field

fn stage_field(cfg: &PipelineConfig, resume: bool) -> StageResult<StageReport> {
    const S: &str = "field";
    let cloud_path = out(cfg, files::CLOUD);
    let hash = InputHasher::new(S)
        .file(&cloud_path)
        .map_err(|e| PipelineError::stage(S, e))?
        .bytes("regularization", &cfg.field.regularization.to_le_bytes())
        .finish();
    run_stage(S, &cfg.paths.checkpoint_dir, hash, resume, || {
        let cloud = load_cloud(S, &cloud_path)?;
        let field = build_field(&cloud, cfg.field.regularization)
            .map_err(|e| PipelineError::stage(S, e))?;
        ensure_dir(S, &cfg.paths.checkpoint_dir)?;
        let path = ckpt(cfg, files::FIELD);
        write_atomic(&path, &encode_field(&field)).map_err(|e| PipelineError::stage(S, e))?;
        Ok(StageOutcome {
            outputs: vec![path],
            metrics: metrics([("components", field.len() as f64)]),
        })
    })
}

pub fn cmd_field(cfg: &PipelineConfig) -> StageResult<StageReport> {
    stage_field(cfg, false)
}

// ---- train

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub points: usize,
    pub inducing: usize,
    pub epochs: usize,
    pub signal_variance: f64,
    /// Lengthscale in normalized input units.
    pub lengthscale: f64,
    pub lengthscale_meters: f64,
    pub noise_variance: f64,
    pub density_scale: f64,
    pub elbo_trace: Vec<f64>,
}

fn stage_train(cfg: &PipelineConfig, resume: bool) -> StageResult<StageReport> {
    const S: &str = "train";
    let cloud_path = out(cfg, files::CLOUD);
    let hash = InputHasher::new(S)
        .file(&cloud_path)
        .and_then(|h| h.file(&ckpt(cfg, files::FIELD)))
        .map_err(|e| PipelineError::stage(S, e))?
        .config("svgp", &cfg.svgp)
        .bytes(
            "truncation",
            format!("{:?}", cfg.field.truncation_radius).as_bytes(),
        )
        .finish();
    run_stage(S, &cfg.paths.checkpoint_dir, hash, resume, || {
        let cloud = load_cloud(S, &cloud_path)?;
        let field = load_field(S, cfg)?;
        let set = make_training_set(&field, &cloud);
        let (model, report) =
            train(&set.inputs, &set.targets, &cfg.svgp).map_err(|e| PipelineError::stage(S, e))?;
        let model = model.with_density_scale(set.density_scale);
        let model_path = ckpt(cfg, files::MODEL);
        write_atomic(&model_path, &encode_model(&model)).map_err(|e| PipelineError::stage(S, e))?;
        let summary = TrainingSummary {
            points: set.inputs.len(),
            inducing: model.num_inducing(),
            epochs: report.epochs,
            signal_variance: report.final_kernel.signal_variance,
            lengthscale: report.final_kernel.lengthscale,
            lengthscale_meters: model.lengthscale_meters(),
            noise_variance: report.final_noise_variance,
            density_scale: set.density_scale,
            elbo_trace: report.elbo_trace.clone(),
        };
        let report_path = out(cfg, files::TRAINING_REPORT);
        let text = toml::to_string(&summary).expect("summary serializes");
        write_atomic(&report_path, text.as_bytes()).map_err(|e| PipelineError::stage(S, e))?;
        let last = report.elbo_trace.last().copied().unwrap_or(f64::NAN);
        Ok(StageOutcome {
            outputs: vec![model_path, report_path],
            metrics: metrics([("epochs", report.epochs as f64), ("final_elbo", last)]),
        })
    })
}

pub fn cmd_train(cfg: &PipelineConfig) -> StageResult<StageReport> {
    stage_train(cfg, false)
}

// ---- fuse

/// Where [`cmd_fuse`] takes its query points from.
#[derive(Debug, Clone, PartialEq)]
pub enum QuerySource {
    /// Contact points of the configured grasp candidates (the fuse stage).
    Contacts,
    /// A CSV of `x,y,z` rows.
    File(PathBuf),
    /// A regular grid with `steps` points per axis between two corners.
    Grid { min: Vec3, max: Vec3, steps: usize },
}

pub fn parse_query_csv(text: &str) -> Result<Vec<Vec3>, FormatError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (i == 0 && line.replace(' ', "") == "x,y,z") {
            continue;
        }
        let v = parse_floats(line, 3, i + 1)?;
        if !v.iter().all(|x| x.is_finite()) {
            return Err(FormatError::row(i + 1, "non-finite coordinate"));
        }
        out.push(Vec3::new(v[0], v[1], v[2]));
    }
    Ok(out)
}

fn grid_points(min: &Vec3, max: &Vec3, steps: usize) -> Vec<Vec3> {
    let at = |i: usize, a: f64, b: f64| {
        if steps <= 1 {
            0.5 * (a + b)
        } else {
            a + (b - a) * i as f64 / (steps - 1) as f64
        }
    };
    let mut pts = Vec::with_capacity(steps.pow(3));
    for i in 0..steps {
        for j in 0..steps {
            for k in 0..steps {
                pts.push(Vec3::new(
                    at(i, min.x, max.x),
                    at(j, min.y, max.y),
                    at(k, min.z, max.z),
                ));
            }
        }
    }
    pts
}

/// Fused occupancy rows in query order; failed queries carry NaN moments.
fn fuse_queries(
    stage: &'static str,
    cfg: &PipelineConfig,
    queries: &[Vec3],
) -> StageResult<(Vec<OccupancyUncertainty>, usize)> {
    let field = load_field(stage, cfg)?;
    let model = load_model(stage, cfg)?;
    let rule =
        CubatureRule::from_params(&cfg.cubature).map_err(|e| PipelineError::stage(stage, e))?;
    let results = fuse_batch(queries, &field, &model, &rule, cfg.field.neighbors);
    let mut failed = 0;
    let rows = queries
        .iter()
        .zip(results)
        .map(|(q, r)| {
            r.unwrap_or_else(|e| {
                log::warn!("fusion failed at {q:?}: {e}");
                failed += 1;
                OccupancyUncertainty {
                    query_point: *q,
                    occupancy_mean: f64::NAN,
                    occupancy_variance: f64::NAN,
                }
            })
        })
        .collect();
    Ok((rows, failed))
}

fn make_candidates(
    stage: &'static str,
    cfg: &PipelineConfig,
    cloud: &[GaussianPoint3],
) -> StageResult<Vec<GraspCandidate>> {
    match cfg.grasp.scorer {
        ScorerKind::File => {
            let path = cfg.grasp.candidates.as_ref().expect("validated");
            load_candidates(path).map_err(|e| PipelineError::stage(stage, e))
        }
        ScorerKind::Stub => {
            let poses = read_string(&cfg.paths.input_dir.join(POSES_FILE))
                .and_then(|t| parse_poses_csv(&t))
                .map_err(|e| PipelineError::stage(stage, e))?;
            let centers: BTreeMap<u32, Vec3> =
                poses.iter().map(|p| (p.frame_id, p.center())).collect();
            let means: Vec<Vec3> = cloud.iter().map(|p| p.mean).collect();
            let views = cloud
                .iter()
                .map(|p| {
                    centers.get(&p.source_frame).copied().ok_or_else(|| {
                        PipelineError::stage(
                            stage,
                            format!("point from unknown frame {}", p.source_frame),
                        )
                    })
                })
                .collect::<StageResult<Vec<Vec3>>>()?;
            let normals = estimate_normals(&means, &views, cfg.grasp.normal_neighbors);
            Ok(stub_scorer(&means, &normals, &cfg.grasp.stub))
        }
    }
}

fn stage_fuse(cfg: &PipelineConfig, resume: bool) -> StageResult<StageReport> {
    const S: &str = "fuse";
    let cloud_path = out(cfg, files::CLOUD);
    let mut h = InputHasher::new(S)
        .file(&cloud_path)
        .and_then(|h| h.file(&ckpt(cfg, files::FIELD)))
        .and_then(|h| h.file(&ckpt(cfg, files::MODEL)))
        .map_err(|e| PipelineError::stage(S, e))?
        .config("grasp", &cfg.grasp)
        .config("cubature", &cfg.cubature)
        .config("field", &cfg.field);
    h = match cfg.grasp.scorer {
        ScorerKind::Stub => h.file(&cfg.paths.input_dir.join(POSES_FILE)),
        ScorerKind::File => h.file(cfg.grasp.candidates.as_ref().expect("validated")),
    }
    .map_err(|e| PipelineError::stage(S, e))?;
    run_stage(S, &cfg.paths.checkpoint_dir, h.finish(), resume, || {
        let cloud = load_cloud(S, &cloud_path)?;
        let mut candidates = make_candidates(S, cfg, &cloud)?;
        let means: Vec<Vec3> = cloud.iter().map(|p| p.mean).collect();
        let index = PointIndex::new(&means);
        assign_contacts(&mut candidates, &means, &index, cfg.grasp.contact_mode)
            .map_err(|e| PipelineError::stage(S, e))?;
        let contacts: Vec<Vec3> = candidates.iter().map(|c| c.contact_point).collect();
        let (rows, failed) = fuse_queries(S, cfg, &contacts)?;
        let cand_path = out(cfg, files::CANDIDATES);
        let occ_path = out(cfg, files::OCCUPANCY);
        write_atomic(&cand_path, write_candidates(&candidates).as_bytes())
            .map_err(|e| PipelineError::stage(S, e))?;
        let mut buf = Vec::new();
        write_occupancy_csv(&mut buf, &rows).expect("writing to memory");
        write_atomic(&occ_path, &buf).map_err(|e| PipelineError::stage(S, e))?;
        Ok(StageOutcome {
            outputs: vec![cand_path, occ_path],
            metrics: metrics([
                ("candidates", candidates.len() as f64),
                ("failed_queries", failed as f64),
            ]),
        })
    })
}

/// Fuses uncertainty at the given queries. Grasp contacts run the fuse stage;
/// other sources write a separate query occupancy table.
pub fn cmd_fuse(cfg: &PipelineConfig, source: &QuerySource) -> StageResult<StageReport> {
    const S: &str = "fuse";
    let queries = match source {
        QuerySource::Contacts => return stage_fuse(cfg, false),
        QuerySource::File(p) => read_string(p)
            .and_then(|t| parse_query_csv(&t))
            .map_err(|e| PipelineError::stage(S, e))?,
        QuerySource::Grid { min, max, steps } => grid_points(min, max, *steps),
    };
    let start = std::time::Instant::now();
    let (rows, failed) = fuse_queries(S, cfg, &queries)?;
    ensure_dir(S, &cfg.paths.output_dir)?;
    let mut buf = Vec::new();
    write_occupancy_csv(&mut buf, &rows).expect("writing to memory");
    write_atomic(&out(cfg, files::QUERY_OCCUPANCY), &buf)
        .map_err(|e| PipelineError::stage(S, e))?;
    Ok(StageReport {
        name: S.into(),
        status: StageStatus::Ran,
        seconds: start.elapsed().as_secs_f64(),
        metrics: metrics([
            ("queries", queries.len() as f64),
            ("failed_queries", failed as f64),
        ]),
    })
}

// ---- rank

fn stage_rank(cfg: &PipelineConfig, resume: bool) -> StageResult<StageReport> {
    const S: &str = "rank";
    let cand_path = out(cfg, files::CANDIDATES);
    let occ_path = out(cfg, files::OCCUPANCY);
    let hash = InputHasher::new(S)
        .file(&cand_path)
        .and_then(|h| h.file(&occ_path))
        .map_err(|e| PipelineError::stage(S, e))?
        .bytes("nu", &cfg.grasp.nu.to_le_bytes())
        .finish();
    run_stage(S, &cfg.paths.checkpoint_dir, hash, resume, || {
        let candidates = read_string(&cand_path)
            .and_then(|t| parse_candidates(&t))
            .map_err(|e| PipelineError::stage(S, e))?;
        let occ = read_string(&occ_path)
            .and_then(|t| parse_occupancy_csv(&t))
            .map_err(|e| PipelineError::stage(S, e))?;
        if occ.len() != candidates.len() {
            return Err(PipelineError::stage(
                S,
                format!(
                    "{} candidates but {} occupancy rows",
                    candidates.len(),
                    occ.len()
                ),
            ));
        }
        let mut kept = Vec::with_capacity(candidates.len());
        let mut variances = Vec::with_capacity(candidates.len());
        for (mut c, row) in candidates.into_iter().zip(occ) {
            let (contact, var) = (row.query_point, row.occupancy_variance);
            if var > 0.0 && var.is_finite() {
                c.contact_point = contact;
                kept.push(c);
                variances.push(var);
            } else {
                log::warn!(
                    "dropping grasp at {:?}: occupancy variance {var}",
                    c.position
                );
            }
        }
        let ranked =
            reweight(&kept, &variances, cfg.grasp.nu).map_err(|e| PipelineError::stage(S, e))?;
        let path = out(cfg, files::RANKED);
        write_atomic(&path, write_ranked(&ranked).as_bytes())
            .map_err(|e| PipelineError::stage(S, e))?;
        Ok(StageOutcome {
            outputs: vec![path],
            metrics: metrics([("ranked", ranked.len() as f64)]),
        })
    })
}

pub fn cmd_rank(cfg: &PipelineConfig) -> StageResult<StageReport> {
    stage_rank(cfg, false)
}

// ---- run

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopGrasp {
    pub rank: usize,
    pub position: [f64; 3],
    pub width: f64,
    pub raw_confidence: f64,
    pub occupancy_variance: f64,
    pub weighted_confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub points_before_filter: usize,
    pub points_after_filter: usize,
    pub epochs: usize,
    pub elbo_first: f64,
    pub elbo_last: f64,
    pub elbo_best: f64,
    pub stages: Vec<StageReport>,
    pub top_grasps: Vec<TopGrasp>,
}

impl RunReport {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("report serializes")
    }
}

fn read_top_grasps(path: &Path, k: usize) -> Result<Vec<TopGrasp>, FormatError> {
    let text = read_string(path)?;
    let mut top = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1).take(k) {
        let v = parse_floats(line, 11, i + 1)?;
        top.push(TopGrasp {
            rank: i,
            position: [v[4], v[5], v[6]],
            width: v[7],
            raw_confidence: v[8],
            occupancy_variance: v[9],
            weighted_confidence: v[10],
        });
    }
    Ok(top)
}

/// Runs every stage, reusing valid checkpoints, and writes the run report.
pub fn cmd_run(cfg: &PipelineConfig) -> StageResult<RunReport> {
    let stages: [fn(&PipelineConfig, bool) -> StageResult<StageReport>; 7] = [
        stage_generate,
        stage_backproject,
        stage_filter,
        stage_field,
        stage_train,
        stage_fuse,
        stage_rank,
    ];
    let mut reports = Vec::with_capacity(stages.len());
    for stage in stages {
        let r = stage(cfg, true)?;
        log::info!("{}: {:?} in {:.2}s", r.name, r.status, r.seconds);
        reports.push(r);
    }
    let count =
        |stage: usize, key: &str| reports[stage].metrics.get(key).copied().unwrap_or(0.0) as usize;
    let summary: TrainingSummary = read_string(&out(cfg, files::TRAINING_REPORT))
        .and_then(|t| toml::from_str(&t).map_err(|e| FormatError::invalid(e.to_string())))
        .map_err(|e| PipelineError::stage("train", e))?;
    let trace = &summary.elbo_trace;
    let report = RunReport {
        points_before_filter: count(2, "points_before"),
        points_after_filter: count(2, "points_after"),
        epochs: summary.epochs,
        elbo_first: trace.first().copied().unwrap_or(f64::NAN),
        elbo_last: trace.last().copied().unwrap_or(f64::NAN),
        elbo_best: trace.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        top_grasps: read_top_grasps(&out(cfg, files::RANKED), cfg.grasp.top_k)
            .map_err(|e| PipelineError::stage("rank", e))?,
        stages: reports,
    };
    write_atomic(&out(cfg, files::RUN_REPORT), report.to_toml().as_bytes())
        .map_err(|e| PipelineError::stage("rank", e))?;
    Ok(report)
}
