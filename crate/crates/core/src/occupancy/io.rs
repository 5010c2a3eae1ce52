//! Point-cloud and field serialization.
//!
//! Field checkpoints are a little-endian `u64` component count followed by,
//! per component, the mean (3 × `f64`) and the row-major covariance (9 × `f64`).
//! Point clouds are ASCII PLY with `x y z` and the covariance upper triangle
//! `cxx cxy cxz cyy cyz czz`, plus an optional integer `frame` property.

use std::fmt::Write as _;

use crate::camera::GaussianPoint3;
use crate::format::{FormatError, LeReader};
use crate::geometry::{from_upper_triangle, upper_triangle, Mat3, Vec3};
use crate::occupancy::{build_field, FusedOccupancyField};

const COMPONENT_BYTES: usize = 12 * 8;

pub fn encode_field(field: &FusedOccupancyField) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + field.len() * COMPONENT_BYTES);
    out.extend_from_slice(&(field.len() as u64).to_le_bytes());
    for c in field.components() {
        for v in c.mean.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in c.covariance.transpose().iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Decodes the stored components (already regularized) without rebuilding a field.
pub fn decode_components(bytes: &[u8]) -> Result<Vec<GaussianPoint3>, FormatError> {
    let mut r = LeReader::new(bytes);
    let count = r.u64()?;
    let expected = (count as u128) * COMPONENT_BYTES as u128;
    if expected != r.remaining() as u128 {
        return Err(FormatError::invalid(format!(
            "field header declares {count} components but payload has {} bytes",
            r.remaining()
        )));
    }
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let mut vals = [0.0; 12];
        for v in vals.iter_mut() {
            *v = r.f64()?;
        }
        out.push(GaussianPoint3::new(
            Vec3::from_row_slice(&vals[..3]),
            Mat3::from_row_slice(&vals[3..]),
            0,
        ));
    }
    Ok(out)
}

pub fn decode_field(bytes: &[u8]) -> Result<FusedOccupancyField, FormatError> {
    let comps = decode_components(bytes)?;
    build_field(&comps, 0.0).map_err(|e| FormatError::invalid(e.to_string()))
}

pub fn write_ply(points: &[GaussianPoint3]) -> String {
    let mut out = String::new();
    let _ = write!(
        out,
        "ply\nformat ascii 1.0\nelement vertex {}\n\
         property double x\nproperty double y\nproperty double z\n\
         property double cxx\nproperty double cxy\nproperty double cxz\n\
         property double cyy\nproperty double cyz\nproperty double czz\n\
         property int frame\nend_header\n",
        points.len()
    );
    for p in points {
        let u = upper_triangle(&p.covariance);
        let _ = writeln!(
            out,
            "{:e} {:e} {:e} {:e} {:e} {:e} {:e} {:e} {:e} {}",
            p.mean.x, p.mean.y, p.mean.z, u[0], u[1], u[2], u[3], u[4], u[5], p.source_frame
        );
    }
    out
}

const SCALAR_TYPES: &[&str] = &[
    "char", "uchar", "short", "ushort", "int", "uint", "float", "double", "int8", "uint8", "int16",
    "uint16", "int32", "uint32", "float32", "float64",
];

/// Parses an ASCII PLY vertex element. `x y z` are required; covariance
/// properties default to zero and `frame` to 0 when absent. Other vertex
/// properties are ignored; elements after the vertices are not read.
pub fn parse_ply(text: &str) -> Result<Vec<GaussianPoint3>, FormatError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l.trim() == "ply" => {}
        _ => return Err(FormatError::line(1, "missing `ply` magic")),
    }
    let mut vertex_count: Option<usize> = None;
    let mut in_vertex = false;
    let mut seen_vertex = false;
    let mut props: Vec<String> = Vec::new();
    let mut header_done = false;
    for (i, line) in lines.by_ref() {
        let ln = i + 1;
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            [] => {}
            ["format", "ascii", _] => {}
            ["format", other, ..] => {
                return Err(FormatError::line(
                    ln,
                    format!("only ascii PLY is supported, got {other}"),
                ))
            }
            ["comment", ..] | ["obj_info", ..] => {}
            ["element", name, count] => {
                let count: usize = count
                    .parse()
                    .map_err(|_| FormatError::line(ln, format!("bad element count {count:?}")))?;
                in_vertex = *name == "vertex";
                if in_vertex {
                    if seen_vertex {
                        return Err(FormatError::line(ln, "duplicate vertex element"));
                    }
                    seen_vertex = true;
                    vertex_count = Some(count);
                } else if !seen_vertex {
                    return Err(FormatError::line(ln, "vertex element must come first"));
                }
            }
            ["property", "list", ..] if in_vertex => {
                return Err(FormatError::line(
                    ln,
                    "list properties on vertices are not supported",
                ))
            }
            ["property", ty, name] => {
                if !SCALAR_TYPES.contains(ty) {
                    return Err(FormatError::line(
                        ln,
                        format!("unknown property type {ty:?}"),
                    ));
                }
                if in_vertex {
                    props.push(name.to_string());
                }
            }
            ["property", "list", _, _, _] => {}
            ["end_header"] => {
                header_done = true;
                break;
            }
            _ => {
                return Err(FormatError::line(
                    ln,
                    format!("unexpected header line {line:?}"),
                ))
            }
        }
    }
    if !header_done {
        return Err(FormatError::invalid("missing end_header"));
    }
    let count = vertex_count.ok_or_else(|| FormatError::invalid("no vertex element"))?;
    let col = |name: &str| props.iter().position(|p| p == name);
    let (xi, yi, zi) = match (col("x"), col("y"), col("z")) {
        (Some(x), Some(y), Some(z)) => (x, y, z),
        _ => return Err(FormatError::invalid("vertex element needs x, y and z")),
    };
    let cov_cols: Vec<Option<usize>> = ["cxx", "cxy", "cxz", "cyy", "cyz", "czz"]
        .iter()
        .map(|n| col(n))
        .collect();
    let frame_col = col("frame");

    let mut out = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let (i, line) = lines.next().ok_or_else(|| {
            FormatError::invalid(format!("expected {count} vertices, found {}", out.len()))
        })?;
        let ln = i + 1;
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| FormatError::line(ln, format!("bad number {t:?}")))
            })
            .collect::<Result<_, _>>()?;
        if vals.len() != props.len() {
            return Err(FormatError::line(
                ln,
                format!("expected {} values, found {}", props.len(), vals.len()),
            ));
        }
        let mut upper = [0.0; 6];
        for (u, c) in upper.iter_mut().zip(&cov_cols) {
            if let Some(c) = c {
                *u = vals[*c];
            }
        }
        let frame = match frame_col {
            Some(c) => {
                let f = vals[c];
                if !(f >= 0.0 && f <= u32::MAX as f64 && f.fract() == 0.0) {
                    return Err(FormatError::line(ln, format!("bad frame index {f}")));
                }
                f as u32
            }
            None => 0,
        };
        let mean = Vec3::new(vals[xi], vals[yi], vals[zi]);
        if !mean.iter().chain(upper.iter()).all(|v| v.is_finite()) {
            return Err(FormatError::line(ln, "non-finite vertex value"));
        }
        out.push(GaussianPoint3::new(
            mean,
            from_upper_triangle(&upper),
            frame,
        ));
    }
    Ok(out)
}
