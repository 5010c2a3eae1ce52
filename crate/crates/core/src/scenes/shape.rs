//! Signed distance functions for the analytic test objects (object frame, z up).

use serde::{Deserialize, Serialize};

use crate::geometry::Vec3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Shape {
    Sphere {
        radius: f64,
    },
    /// Axis-aligned box with full side lengths.
    Box {
        extents: [f64; 3],
    },
    /// Solid cylinder along z, centered at the origin.
    Cylinder {
        radius: f64,
        height: f64,
    },
    /// Spherical body with a vertical ring handle on top.
    Kettlebell {
        body_radius: f64,
        handle_major: f64,
        handle_minor: f64,
        /// Height of the handle ring's center above the body center.
        handle_offset: f64,
    },
    /// Solid capped cylinder with a vertical ring handle on the +x side.
    Mug {
        radius: f64,
        height: f64,
        handle_major: f64,
        handle_minor: f64,
    },
}

impl Shape {
    pub fn kettlebell() -> Self {
        Shape::Kettlebell {
            body_radius: 0.08,
            handle_major: 0.05,
            handle_minor: 0.012,
            handle_offset: 0.1,
        }
    }

    pub fn mug() -> Self {
        Shape::Mug {
            radius: 0.04,
            height: 0.1,
            handle_major: 0.03,
            handle_minor: 0.008,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let positive: Vec<f64> = match self {
            Shape::Sphere { radius } => vec![*radius],
            Shape::Box { extents } => extents.to_vec(),
            Shape::Cylinder { radius, height } => vec![*radius, *height],
            Shape::Kettlebell {
                body_radius,
                handle_major,
                handle_minor,
                handle_offset,
            } => {
                if !handle_offset.is_finite() {
                    return Err("handle offset must be finite".into());
                }
                vec![*body_radius, *handle_major, *handle_minor]
            }
            Shape::Mug {
                radius,
                height,
                handle_major,
                handle_minor,
            } => {
                vec![*radius, *height, *handle_major, *handle_minor]
            }
        };
        if positive.iter().all(|v| *v > 0.0 && v.is_finite()) {
            Ok(())
        } else {
            Err(format!("shape dimensions must be positive: {self:?}"))
        }
    }

    /// Signed distance; negative inside.
    pub fn sdf(&self, p: &Vec3) -> f64 {
        match self {
            Shape::Sphere { radius } => p.norm() - radius,
            Shape::Box { extents } => sd_box(p, &Vec3::from(*extents)),
            Shape::Cylinder { radius, height } => sd_cylinder(p, *radius, *height),
            Shape::Kettlebell {
                body_radius,
                handle_major,
                handle_minor,
                handle_offset,
            } => {
                let body = p.norm() - body_radius;
                let handle = sd_ring_xz(
                    &(p - Vec3::new(0.0, 0.0, *handle_offset)),
                    *handle_major,
                    *handle_minor,
                );
                body.min(handle)
            }
            Shape::Mug {
                radius,
                height,
                handle_major,
                handle_minor,
            } => {
                let cup = sd_cylinder(p, *radius, *height);
                let handle = sd_ring_xz(
                    &(p - Vec3::new(*radius, 0.0, 0.0)),
                    *handle_major,
                    *handle_minor,
                );
                cup.min(handle)
            }
        }
    }

    /// Radius of a sphere about the origin containing the shape.
    pub fn bounding_radius(&self) -> f64 {
        match self {
            Shape::Sphere { radius } => *radius,
            Shape::Box { extents } => 0.5 * Vec3::from(*extents).norm(),
            Shape::Cylinder { radius, height } => radius.hypot(0.5 * height),
            Shape::Kettlebell {
                body_radius,
                handle_major,
                handle_minor,
                handle_offset,
            } => body_radius.max(handle_offset.abs() + handle_major + handle_minor),
            Shape::Mug {
                radius,
                height,
                handle_major,
                handle_minor,
            } => radius
                .hypot(0.5 * height)
                .max(radius + handle_major + handle_minor),
        }
    }
}

fn sd_box(p: &Vec3, extents: &Vec3) -> f64 {
    let q = p.abs() - extents * 0.5;
    q.sup(&Vec3::zeros()).norm() + q.max().min(0.0)
}

fn sd_cylinder(p: &Vec3, radius: f64, height: f64) -> f64 {
    let dx = p.xy().norm() - radius;
    let dz = p.z.abs() - 0.5 * height;
    dx.max(dz).min(0.0) + dx.max(0.0).hypot(dz.max(0.0))
}

/// Torus whose ring lies in the x-z plane (axis along y).
fn sd_ring_xz(p: &Vec3, major: f64, minor: f64) -> f64 {
    let q = p.x.hypot(p.z) - major;
    q.hypot(p.y) - minor
}
