//! Grasp CSV files.
//!
//! Input rows are `qw,qx,qy,qz,px,py,pz,width,confidence` with a unit
//! quaternion for the gripper orientation. Ranked output appends
//! `occ_variance,weighted_confidence`.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Quaternion, UnitQuaternion};

use super::{GraspCandidate, RankedGrasps};
use crate::format::{parse_floats, read_string, FormatError};
use crate::geometry::{Mat3, Vec3};

pub const GRASP_CSV_HEADER: &str = "qw,qx,qy,qz,px,py,pz,width,confidence";
pub const RANKED_CSV_HEADER: &str =
    "qw,qx,qy,qz,px,py,pz,width,confidence,occ_variance,weighted_confidence";

const QUATERNION_TOLERANCE: f64 = 1e-6;

pub fn parse_candidates(text: &str) -> Result<Vec<GraspCandidate>, FormatError> {
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    let columns = match lines.next() {
        None => return Ok(Vec::new()),
        Some((_, h)) if h.trim() == GRASP_CSV_HEADER => 9,
        Some((_, h)) if h.trim() == RANKED_CSV_HEADER => 11,
        Some((i, h)) => {
            return Err(FormatError::row(
                i + 1,
                format!("unexpected grasp CSV header {:?}", h.trim()),
            ))
        }
    };
    let mut out = Vec::new();
    for (i, line) in lines {
        let row = i + 1;
        let v = parse_floats(line, columns, row)?;
        if !v.iter().all(|x| x.is_finite()) {
            return Err(FormatError::row(row, "non-finite value"));
        }
        let q = Quaternion::new(v[0], v[1], v[2], v[3]);
        if (q.norm() - 1.0).abs() > QUATERNION_TOLERANCE {
            return Err(FormatError::row(
                row,
                format!("quaternion norm {} is not 1", q.norm()),
            ));
        }
        let rotation: Mat3 = UnitQuaternion::from_quaternion(q)
            .to_rotation_matrix()
            .into_inner();
        let width = v[7];
        if width <= 0.0 {
            return Err(FormatError::row(
                row,
                format!("gripper width {width} must be positive"),
            ));
        }
        let confidence = v[8];
        if confidence < 0.0 {
            return Err(FormatError::row(
                row,
                format!("confidence {confidence} is negative"),
            ));
        }
        out.push(GraspCandidate::new(
            rotation,
            Vec3::new(v[4], v[5], v[6]),
            width,
            confidence,
        ));
    }
    Ok(out)
}

pub fn load_candidates(path: &Path) -> Result<Vec<GraspCandidate>, FormatError> {
    parse_candidates(&read_string(path)?)
}

fn write_pose(out: &mut String, c: &GraspCandidate) {
    let q = UnitQuaternion::from_matrix(&c.rotation);
    // canonical sign so that round trips are stable
    let q = if q.w < 0.0 {
        UnitQuaternion::new_unchecked(-q.into_inner())
    } else {
        q
    };
    let _ = write!(
        out,
        "{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
        q.w,
        q.i,
        q.j,
        q.k,
        c.position.x,
        c.position.y,
        c.position.z,
        c.gripper_width,
        c.raw_confidence
    );
}

pub fn write_candidates(candidates: &[GraspCandidate]) -> String {
    let mut out = format!("{GRASP_CSV_HEADER}\n");
    for c in candidates {
        write_pose(&mut out, c);
        out.push('\n');
    }
    out
}

pub fn write_ranked(ranked: &RankedGrasps) -> String {
    let mut out = format!("{RANKED_CSV_HEADER}\n");
    for c in &ranked.candidates {
        write_pose(&mut out, c);
        let _ = writeln!(
            out,
            ",{:e},{:e}",
            c.occupancy_variance, c.weighted_confidence
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::axis_angle;
    use crate::grasp::reweight;

    fn sample() -> Vec<GraspCandidate> {
        vec![
            GraspCandidate::new(
                axis_angle(&Vec3::new(1.0, 2.0, 3.0).normalize(), 0.7),
                Vec3::new(0.1, 0.2, 0.3),
                0.04,
                0.8,
            ),
            GraspCandidate::new(Mat3::identity(), Vec3::new(-1.0, 0.0, 2.5), 0.07, 0.0),
        ]
    }

    #[test]
    fn header_only_is_empty() {
        assert!(parse_candidates(&format!("{GRASP_CSV_HEADER}\n"))
            .unwrap()
            .is_empty());
        assert!(parse_candidates("").unwrap().is_empty());
    }

    #[test]
    fn round_trip() {
        let cs = sample();
        let text = write_candidates(&cs);
        let back = parse_candidates(&text).unwrap();
        assert_eq!(back.len(), cs.len());
        for (a, b) in cs.iter().zip(&back) {
            assert!((a.rotation - b.rotation).abs().max() < 1e-14);
            assert_eq!(a.position, b.position);
            assert_eq!(a.gripper_width, b.gripper_width);
            assert_eq!(a.raw_confidence, b.raw_confidence);
        }
    }

    #[test]
    fn ranked_output_reloads() {
        let ranked = reweight(&sample(), &[1e-3, 2e-3], 5.0).unwrap();
        let text = write_ranked(&ranked);
        assert!(text.starts_with(RANKED_CSV_HEADER));
        assert_eq!(parse_candidates(&text).unwrap().len(), 2);
    }

    #[test]
    fn row_errors_are_numbered() {
        let neg = format!("{GRASP_CSV_HEADER}\n1,0,0,0,0,0,0,0.05,0.5\n1,0,0,0,0,0,0,0.05,-0.1\n");
        let err = parse_candidates(&neg).unwrap_err();
        assert!(matches!(err, FormatError::Row { row: 3, .. }), "{err}");
        let quat = format!("{GRASP_CSV_HEADER}\n2,0,0,0,0,0,0,0.05,0.5\n");
        assert!(parse_candidates(&quat).is_err());
        let short = format!("{GRASP_CSV_HEADER}\n1,0,0,0,0,0,0\n");
        assert!(parse_candidates(&short).is_err());
        assert!(parse_candidates("a,b,c\n").is_err());
    }
}
