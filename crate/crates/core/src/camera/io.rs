//! Frame directory formats.
//!
//! A frame directory holds:
//!
//! * `intrinsics.toml` with `fx, fy, cx, cy, width, height`;
//! * `poses.csv` with `frame_id`, nine row-major rotation entries, three
//!   translation entries and nine row-major translation-covariance entries;
//! * per frame `frame_NNNNNN.depth`: a text header (`DEPTHF32`, `width`,
//!   `height`, `frame_id`, `end_header`) followed by `width * height`
//!   little-endian `f32` values in row-major order, NaN marking invalid pixels;
//! * optionally `frame_NNNNNN.var`, the same layout holding per-pixel depth
//!   variances, and `frame_NNNNNN.pgm`, the object mask (any nonzero value is
//!   inside the object).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::camera::{CameraError, DepthImage, PinholeIntrinsics, PoseEstimate};
use crate::format::{parse_floats, read_bytes, read_string, write_atomic, FormatError};
use crate::geometry::{Mat3, Vec3};

const DEPTH_MAGIC: &str = "DEPTHF32";
const MAX_HEADER_BYTES: usize = 4096;

pub const POSES_FILE: &str = "poses.csv";
pub const INTRINSICS_FILE: &str = "intrinsics.toml";

pub const POSE_CSV_HEADER: &str = "frame_id,r00,r01,r02,r10,r11,r12,r20,r21,r22,tx,ty,tz,\
c00,c01,c02,c10,c11,c12,c20,c21,c22";

/// A row-major float grid as stored in `.depth` / `.var` files.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatGrid {
    pub width: usize,
    pub height: usize,
    pub frame_id: u32,
    pub values: Vec<f64>,
}

pub fn depth_path(dir: &Path, frame_id: u32) -> PathBuf {
    dir.join(format!("frame_{frame_id:06}.depth"))
}

pub fn variance_path(dir: &Path, frame_id: u32) -> PathBuf {
    dir.join(format!("frame_{frame_id:06}.var"))
}

pub fn mask_path(dir: &Path, frame_id: u32) -> PathBuf {
    dir.join(format!("frame_{frame_id:06}.pgm"))
}

pub fn parse_float_grid(bytes: &[u8]) -> Result<FloatGrid, FormatError> {
    let end_marker = b"end_header\n";
    let header_end = bytes
        .windows(end_marker.len())
        .take(MAX_HEADER_BYTES)
        .position(|w| w == end_marker)
        .ok_or_else(|| FormatError::invalid("missing end_header line"))?;
    let header = std::str::from_utf8(&bytes[..header_end])
        .map_err(|_| FormatError::invalid("header is not UTF-8"))?;
    let mut lines = header.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l.trim() == DEPTH_MAGIC => {}
        _ => {
            return Err(FormatError::line(
                1,
                format!("expected magic {DEPTH_MAGIC}"),
            ))
        }
    }
    let (mut width, mut height, mut frame_id) = (None, None, None);
    for (i, line) in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once(char::is_whitespace)
            .ok_or_else(|| FormatError::line(i + 1, "expected `key value`"))?;
        let parse = |v: &str| {
            v.trim()
                .parse::<u64>()
                .map_err(|_| FormatError::line(i + 1, format!("bad integer {:?}", v.trim())))
        };
        match key {
            "width" => width = Some(parse(value)?),
            "height" => height = Some(parse(value)?),
            "frame_id" => frame_id = Some(parse(value)?),
            other => {
                return Err(FormatError::line(
                    i + 1,
                    format!("unknown header key {other:?}"),
                ))
            }
        }
    }
    let (width, height, frame_id) = match (width, height, frame_id) {
        (Some(w), Some(h), Some(f)) => (w, h, f),
        _ => {
            return Err(FormatError::invalid(
                "header needs width, height and frame_id",
            ))
        }
    };
    let frame_id =
        u32::try_from(frame_id).map_err(|_| FormatError::invalid("frame_id too large"))?;
    let body = &bytes[header_end + end_marker.len()..];
    let count = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| FormatError::invalid("grid size overflows"))?;
    if body.len() as u64 != count {
        return Err(FormatError::invalid(format!(
            "expected {count} payload bytes for {width}x{height}, found {}",
            body.len()
        )));
    }
    let values = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok(FloatGrid {
        width: width as usize,
        height: height as usize,
        frame_id,
        values,
    })
}

pub fn write_float_grid(grid: &FloatGrid) -> Vec<u8> {
    let mut out = format!(
        "{DEPTH_MAGIC}\nwidth {}\nheight {}\nframe_id {}\nend_header\n",
        grid.width, grid.height, grid.frame_id
    )
    .into_bytes();
    out.reserve(grid.values.len() * 4);
    for &v in &grid.values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

struct PgmTokens<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl PgmTokens<'_> {
    fn next(&mut self) -> Result<&str, FormatError> {
        let b = self.bytes;
        loop {
            while self.pos < b.len() && b[self.pos].is_ascii_whitespace() {
                self.pos += 1;
            }
            if self.pos < b.len() && b[self.pos] == b'#' {
                while self.pos < b.len() && b[self.pos] != b'\n' {
                    self.pos += 1;
                }
                continue;
            }
            break;
        }
        let start = self.pos;
        while self.pos < b.len() && !b[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(FormatError::invalid("truncated PGM"));
        }
        std::str::from_utf8(&b[start..self.pos])
            .map_err(|_| FormatError::invalid("PGM token is not UTF-8"))
    }

    fn number(&mut self) -> Result<usize, FormatError> {
        let t = self.next()?;
        t.parse::<usize>()
            .map_err(|_| FormatError::invalid(format!("bad PGM number {t:?}")))
    }
}

/// Parses a binary (P5) or ASCII (P2) PGM into a boolean mask.
pub fn parse_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<bool>), FormatError> {
    let mut tokens = PgmTokens { bytes, pos: 0 };
    let magic = tokens.next()?.to_string();
    let width = tokens.number()?;
    let height = tokens.number()?;
    let maxval = tokens.number()?;
    if maxval == 0 || maxval > 65535 {
        return Err(FormatError::invalid(format!(
            "PGM maxval {maxval} out of range"
        )));
    }
    let n = width
        .checked_mul(height)
        .ok_or_else(|| FormatError::invalid("PGM size overflows"))?;
    match magic.as_str() {
        "P5" => {
            // exactly one whitespace byte separates the header from the raster
            let start = tokens.pos + 1;
            let bpp = if maxval < 256 { 1 } else { 2 };
            let need = n
                .checked_mul(bpp)
                .ok_or_else(|| FormatError::invalid("PGM size overflows"))?;
            let raster = bytes
                .get(start..)
                .filter(|r| r.len() >= need)
                .ok_or_else(|| FormatError::invalid("truncated PGM raster"))?;
            let mask = raster[..need]
                .chunks_exact(bpp)
                .map(|c| c.iter().any(|&b| b != 0))
                .collect();
            Ok((width, height, mask))
        }
        "P2" => {
            // every sample needs at least two bytes
            if bytes.len().saturating_sub(tokens.pos) / 2 + 1 < n {
                return Err(FormatError::invalid("truncated PGM raster"));
            }
            let mut mask = Vec::with_capacity(n);
            for _ in 0..n {
                mask.push(tokens.number()? != 0);
            }
            Ok((width, height, mask))
        }
        other => Err(FormatError::invalid(format!(
            "unsupported PGM magic {other:?}"
        ))),
    }
}

pub fn write_pgm(width: usize, height: usize, mask: &[bool]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(mask.iter().map(|&m| if m { 255u8 } else { 0 }));
    out
}

pub fn parse_poses_csv(text: &str) -> Result<Vec<PoseEstimate>, FormatError> {
    let mut poses = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let row = i + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with("frame_id") || line.starts_with('#') {
            continue;
        }
        let vals = parse_floats(line, 22, row)?;
        let id = vals[0];
        if !(id >= 0.0 && id <= u32::MAX as f64 && id.fract() == 0.0) {
            return Err(FormatError::row(
                row,
                format!("frame_id {id} is not a valid integer"),
            ));
        }
        let rotation = Mat3::from_row_slice(&vals[1..10]);
        let translation = Vec3::from_row_slice(&vals[10..13]);
        let covariance = Mat3::from_row_slice(&vals[13..22]);
        let pose = PoseEstimate::new(rotation, translation, covariance, id as u32)
            .map_err(|e| FormatError::row(row, e.to_string()))?;
        poses.push(pose);
    }
    Ok(poses)
}

pub fn write_poses_csv(poses: &[PoseEstimate]) -> String {
    let mut out = String::from(POSE_CSV_HEADER);
    out.push('\n');
    for p in poses {
        let _ = write!(out, "{}", p.frame_id);
        let r = p.rotation.transpose(); // column-major storage; transpose to emit rows
        let c = p.translation_covariance.transpose();
        for v in r.iter().chain(p.translation.iter()).chain(c.iter()) {
            let _ = write!(out, ",{v:e}");
        }
        out.push('\n');
    }
    out
}

pub fn parse_intrinsics(text: &str) -> Result<PinholeIntrinsics, FormatError> {
    let intr: PinholeIntrinsics =
        toml::from_str(text).map_err(|e| FormatError::invalid(format!("intrinsics: {e}")))?;
    intr.validate()
        .map_err(|e| FormatError::invalid(e.to_string()))?;
    Ok(intr)
}

pub fn write_intrinsics(intr: &PinholeIntrinsics) -> String {
    toml::to_string(intr).expect("intrinsics serialize")
}

/// A frame as loaded from disk.
#[derive(Debug, Clone)]
pub struct LoadedFrame {
    pub depth: DepthImage,
    pub pose: PoseEstimate,
}

/// Loads every frame listed in `poses.csv`, in file order.
///
/// Frames without a `.var` file use `default_variance`; frames without a mask
/// treat every pixel as part of the object.
pub fn load_frame_dir(
    dir: &Path,
    default_variance: f64,
) -> Result<(PinholeIntrinsics, Vec<LoadedFrame>), FormatError> {
    let intr = parse_intrinsics(&read_string(&dir.join(INTRINSICS_FILE))?)?;
    let poses = parse_poses_csv(&read_string(&dir.join(POSES_FILE))?)?;
    let mut frames = Vec::with_capacity(poses.len());
    for pose in poses {
        let id = pose.frame_id;
        let grid = parse_float_grid(&read_bytes(&depth_path(dir, id))?)?;
        if grid.frame_id != id || grid.width != intr.width || grid.height != intr.height {
            return Err(FormatError::invalid(format!(
                "frame {id}: depth file header does not match pose id / intrinsics"
            )));
        }
        let n = grid.values.len();
        let var_file = variance_path(dir, id);
        let variances = if var_file.exists() {
            let v = parse_float_grid(&read_bytes(&var_file)?)?;
            if v.values.len() != n {
                return Err(FormatError::invalid(format!(
                    "frame {id}: variance grid size mismatch"
                )));
            }
            v.values
        } else {
            vec![default_variance; n]
        };
        let mask_file = mask_path(dir, id);
        let mask = if mask_file.exists() {
            let (w, h, m) = parse_pgm(&read_bytes(&mask_file)?)?;
            if w != grid.width || h != grid.height {
                return Err(FormatError::invalid(format!(
                    "frame {id}: mask size mismatch"
                )));
            }
            m
        } else {
            vec![true; n]
        };
        let depth = DepthImage::new(grid.width, grid.height, grid.values, variances, mask, id)
            .map_err(|e: CameraError| FormatError::invalid(format!("frame {id}: {e}")))?;
        frames.push(LoadedFrame { depth, pose });
    }
    Ok((intr, frames))
}

/// Writes one frame's depth, variance and mask files.
pub fn write_frame_files(dir: &Path, depth: &DepthImage) -> Result<(), FormatError> {
    let grid = |values: &[f64]| FloatGrid {
        width: depth.width,
        height: depth.height,
        frame_id: depth.frame_id,
        values: values.to_vec(),
    };
    write_atomic(
        &depth_path(dir, depth.frame_id),
        &write_float_grid(&grid(&depth.depths)),
    )?;
    write_atomic(
        &variance_path(dir, depth.frame_id),
        &write_float_grid(&grid(&depth.variances)),
    )?;
    write_atomic(
        &mask_path(dir, depth.frame_id),
        &write_pgm(depth.width, depth.height, &depth.mask),
    )
}
