//! End-to-end pipeline: generate, backproject, filter, field, train, fuse, rank.
//!
//! Every stage reads its inputs from files and writes its outputs atomically.
//! After a stage succeeds, a record in the checkpoint directory stores the
//! SHA-256 of its inputs (upstream files plus the relevant config section) and
//! of each output. [`cmd_run`] skips a stage whose record matches both; a
//! missing, stale or corrupt record or output reruns the stage.

mod config;
mod stages;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::format::{write_atomic, FormatError};

pub use config::{CameraConfig, FieldConfig, GraspConfig, PathsConfig, PipelineConfig, ScorerKind};
pub use stages::{
    cmd_field, cmd_fuse, cmd_generate, cmd_rank, cmd_reconstruct, cmd_run, cmd_train,
    parse_query_csv, QuerySource, RunReport, TopGrasp, TrainingSummary, STAGES,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("stage `{stage}` failed: {message}")]
    Stage {
        stage: &'static str,
        message: String,
    },
}

impl PipelineError {
    pub(crate) fn stage(stage: &'static str, e: impl std::fmt::Display) -> Self {
        PipelineError::Stage {
            stage,
            message: e.to_string(),
        }
    }
}

/// Output file names.
pub mod files {
    pub const RAW_CLOUD: &str = "raw_cloud.ply";
    pub const CLOUD: &str = "cloud.ply";
    pub const FIELD: &str = "field.bin";
    pub const MODEL: &str = "model.bin";
    pub const TRAINING_REPORT: &str = "training_report.toml";
    pub const CANDIDATES: &str = "candidates.csv";
    pub const OCCUPANCY: &str = "occupancy.csv";
    pub const QUERY_OCCUPANCY: &str = "query_occupancy.csv";
    pub const RANKED: &str = "ranked_grasps.csv";
    pub const RUN_REPORT: &str = "run_report.toml";
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Ran,
    Resumed,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub name: String,
    pub status: StageStatus,
    pub seconds: f64,
    /// Stage-specific counters, e.g. point counts.
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct OutputRecord {
    path: PathBuf,
    sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StageRecord {
    stage: String,
    input_hash: String,
    outputs: Vec<OutputRecord>,
    metrics: BTreeMap<String, f64>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Hash of labelled byte strings; labels and lengths are mixed in so that
/// different splits cannot collide.
pub(crate) struct InputHasher(Sha256);

impl InputHasher {
    pub fn new(stage: &str) -> Self {
        let mut h = Sha256::new();
        h.update(stage.as_bytes());
        Self(h)
    }

    pub fn bytes(mut self, label: &str, data: &[u8]) -> Self {
        self.0.update((label.len() as u64).to_le_bytes());
        self.0.update(label.as_bytes());
        self.0.update((data.len() as u64).to_le_bytes());
        self.0.update(data);
        self
    }

    pub fn file(self, path: &Path) -> Result<Self, FormatError> {
        let data = std::fs::read(path).map_err(|e| FormatError::io(path, e))?;
        Ok(self.bytes(&path.to_string_lossy(), &data))
    }

    pub fn config<T: Serialize>(self, label: &str, value: &T) -> Self {
        let text = toml::to_string(value).expect("config section serializes");
        self.bytes(label, text.as_bytes())
    }

    pub fn finish(self) -> String {
        self.0
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

pub(crate) struct StageOutcome {
    pub outputs: Vec<PathBuf>,
    pub metrics: BTreeMap<String, f64>,
}

fn record_path(checkpoint_dir: &Path, stage: &str) -> PathBuf {
    checkpoint_dir.join(format!("{stage}.stage.toml"))
}

/// Metrics of a still-valid record for `stage`, if any.
fn valid_record(checkpoint_dir: &Path, stage: &str, input_hash: &str) -> Option<StageRecord> {
    let text = std::fs::read_to_string(record_path(checkpoint_dir, stage)).ok()?;
    let record: StageRecord = match toml::from_str(&text) {
        Ok(r) => r,
        Err(e) => {
            log::warn!("ignoring corrupt checkpoint record for {stage}: {e}");
            return None;
        }
    };
    if record.stage != stage || record.input_hash != input_hash {
        return None;
    }
    for out in &record.outputs {
        match std::fs::read(&out.path) {
            Ok(bytes) if sha256_hex(&bytes) == out.sha256 => {}
            _ => {
                log::warn!(
                    "checkpoint output {} is missing or modified; rerunning {stage}",
                    out.path.display()
                );
                return None;
            }
        }
    }
    Some(record)
}

/// Runs `compute` unless `resume` is set and a valid record exists.
pub(crate) fn run_stage(
    stage: &'static str,
    checkpoint_dir: &Path,
    input_hash: String,
    resume: bool,
    compute: impl FnOnce() -> Result<StageOutcome, PipelineError>,
) -> Result<StageReport, PipelineError> {
    let start = Instant::now();
    if resume {
        if let Some(record) = valid_record(checkpoint_dir, stage, &input_hash) {
            log::info!("{stage}: resumed from checkpoint");
            return Ok(StageReport {
                name: stage.to_string(),
                status: StageStatus::Resumed,
                seconds: start.elapsed().as_secs_f64(),
                metrics: record.metrics,
            });
        }
    }
    log::info!("{stage}: running");
    let outcome = compute()?;
    let mut outputs = Vec::with_capacity(outcome.outputs.len());
    for path in &outcome.outputs {
        let bytes = std::fs::read(path)
            .map_err(|e| PipelineError::stage(stage, FormatError::io(path, e)))?;
        outputs.push(OutputRecord {
            path: path.clone(),
            sha256: sha256_hex(&bytes),
        });
    }
    let record = StageRecord {
        stage: stage.to_string(),
        input_hash,
        outputs,
        metrics: outcome.metrics.clone(),
    };
    std::fs::create_dir_all(checkpoint_dir)
        .map_err(|e| PipelineError::stage(stage, FormatError::io(checkpoint_dir, e)))?;
    let text = toml::to_string(&record).expect("record serializes");
    write_atomic(&record_path(checkpoint_dir, stage), text.as_bytes())
        .map_err(|e| PipelineError::stage(stage, e))?;
    Ok(StageReport {
        name: stage.to_string(),
        status: StageStatus::Ran,
        seconds: start.elapsed().as_secs_f64(),
        metrics: outcome.metrics,
    })
}
