//! Small linear-algebra helpers shared by the pipeline stages.

use nalgebra::{Cholesky, Matrix3, SymmetricEigen, Vector3};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Largest absolute difference between `m` and its transpose.
pub fn asymmetry(m: &Mat3) -> f64 {
    (m - m.transpose()).amax()
}

pub fn symmetrize(m: &Mat3) -> Mat3 {
    (m + m.transpose()) * 0.5
}

/// Symmetric within `tol` and no eigenvalue below `-tol`.
pub fn is_symmetric_psd(m: &Mat3, tol: f64) -> bool {
    if !m.iter().all(|v| v.is_finite()) || asymmetry(m) > tol {
        return false;
    }
    SymmetricEigen::new(symmetrize(m))
        .eigenvalues
        .iter()
        .all(|&e| e >= -tol)
}

pub fn min_eigenvalue(m: &Mat3) -> f64 {
    SymmetricEigen::new(symmetrize(m)).eigenvalues.min()
}

/// Cholesky factor of `m + jitter * I`, if it exists.
pub fn cholesky_jittered(m: &Mat3, jitter: f64) -> Option<Mat3> {
    Cholesky::new(symmetrize(m) + Mat3::identity() * jitter).map(|c| c.l())
}

/// Checks `R^T R = I` and `det R = 1` within `tol`.
pub fn is_rotation(r: &Mat3, tol: f64) -> bool {
    r.iter().all(|v| v.is_finite())
        && (r.transpose() * r - Mat3::identity()).amax() <= tol
        && (r.determinant() - 1.0).abs() <= tol
}

/// Rotation whose columns are the camera axes (x right, y down, z forward) for
/// a camera at `eye` looking at `target`. `up` is the world up direction.
pub fn look_at(eye: &Vec3, target: &Vec3, up: &Vec3) -> Mat3 {
    let z = (target - eye).normalize();
    let mut x = z.cross(up);
    if x.norm() < 1e-9 {
        // looking straight along `up`
        x = z.cross(&Vec3::x());
        if x.norm() < 1e-9 {
            x = z.cross(&Vec3::y());
        }
    }
    let x = x.normalize();
    let y = z.cross(&x);
    Mat3::from_columns(&[x, y, z])
}

/// Rotation by `angle` radians about the unit `axis`.
pub fn axis_angle(axis: &Vec3, angle: f64) -> Mat3 {
    *nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(*axis), angle).matrix()
}

/// Any unit vector orthogonal to `v` (deterministic).
pub fn any_orthogonal(v: &Vec3) -> Vec3 {
    let pick = if v.x.abs() <= v.y.abs() && v.x.abs() <= v.z.abs() {
        Vec3::x()
    } else if v.y.abs() <= v.z.abs() {
        Vec3::y()
    } else {
        Vec3::z()
    };
    v.cross(&pick).normalize()
}

/// Upper triangle `[xx, xy, xz, yy, yz, zz]` of a symmetric matrix.
pub fn upper_triangle(m: &Mat3) -> [f64; 6] {
    [
        m[(0, 0)],
        m[(0, 1)],
        m[(0, 2)],
        m[(1, 1)],
        m[(1, 2)],
        m[(2, 2)],
    ]
}

pub fn from_upper_triangle(u: &[f64; 6]) -> Mat3 {
    Mat3::new(u[0], u[1], u[2], u[1], u[3], u[4], u[2], u[4], u[5])
}
