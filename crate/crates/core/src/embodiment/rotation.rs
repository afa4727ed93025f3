//! 3×3 rotations (row-major `[[f64; 3]; 3]`), the 6D encoding and XYZ Euler angles.

use crate::error::{Error, Result};

pub type Mat3 = [[f64; 3]; 3];
pub type Rot6D = [f64; 6];

pub const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

const DEGENERATE: f64 = 1e-8;

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn norm(a: [f64; 3]) -> f64 {
    dot(a, a).sqrt()
}

pub fn column(r: &Mat3, j: usize) -> [f64; 3] {
    [r[0][j], r[1][j], r[2][j]]
}

fn from_columns(c: [[f64; 3]; 3]) -> Mat3 {
    let mut r = [[0.0; 3]; 3];
    for (j, col) in c.iter().enumerate() {
        for i in 0..3 {
            r[i][j] = col[i];
        }
    }
    r
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    c
}

pub fn mat_vec(r: &Mat3, v: [f64; 3]) -> [f64; 3] {
    [dot(r[0], v), dot(r[1], v), dot(r[2], v)]
}

pub fn transpose(r: &Mat3) -> Mat3 {
    from_columns([r[0], r[1], r[2]])
}

pub fn det(r: &Mat3) -> f64 {
    dot(r[0], cross(r[1], r[2]))
}

/// `‖RᵀR − I‖∞`
pub fn orthonormality_error(r: &Mat3) -> f64 {
    let rtr = mat_mul(&transpose(r), r);
    let mut worst: f64 = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            worst = worst.max((rtr[i][j] - IDENTITY[i][j]).abs());
        }
    }
    worst
}

/// First two columns of `r`.
pub fn rot6d_from_mat(r: &Mat3) -> Result<Rot6D> {
    if orthonormality_error(r) > 1e-5 || (det(r) - 1.0).abs() > 1e-5 {
        return Err(Error::Precondition(
            "matrix is not a proper rotation".into(),
        ));
    }
    let (a, b) = (column(r, 0), column(r, 1));
    Ok([a[0], a[1], a[2], b[0], b[1], b[2]])
}

/// Gram–Schmidt decode of the two stored columns.
pub fn rot6d_to_mat(v: &Rot6D) -> Result<Mat3> {
    let a = [v[0], v[1], v[2]];
    let b = [v[3], v[4], v[5]];
    let na = norm(a);
    if na < DEGENERATE {
        return Err(Error::DegenerateRotation(na));
    }
    let c1 = a.map(|x| x / na);
    let proj = dot(c1, b);
    let resid = [
        b[0] - proj * c1[0],
        b[1] - proj * c1[1],
        b[2] - proj * c1[2],
    ];
    let nr = norm(resid);
    if nr < DEGENERATE {
        return Err(Error::DegenerateRotation(nr));
    }
    let c2 = resid.map(|x| x / nr);
    Ok(from_columns([c1, c2, cross(c1, c2)]))
}

/// Rodrigues rotation about `axis` (need not be unit length) by `angle` radians.
pub fn axis_angle(axis: [f64; 3], angle: f64) -> Mat3 {
    let n = norm(axis);
    let [x, y, z] = axis.map(|v| v / n);
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ]
}

/// Extrinsic rotations about X, then Y, then Z: `R = Rz(c)·Ry(b)·Rx(a)`.
pub fn euler_xyz_to_mat(e: [f64; 3]) -> Mat3 {
    let rx = axis_angle([1.0, 0.0, 0.0], e[0]);
    let ry = axis_angle([0.0, 1.0, 0.0], e[1]);
    let rz = axis_angle([0.0, 0.0, 1.0], e[2]);
    mat_mul(&rz, &mat_mul(&ry, &rx))
}

/// Inverse of [`euler_xyz_to_mat`] with the middle angle in `[−π/2, π/2]`.
pub fn mat_to_euler_xyz(r: &Mat3) -> [f64; 3] {
    let b = (-r[2][0]).clamp(-1.0, 1.0).asin();
    if r[2][0].abs() < 1.0 - 1e-12 {
        [r[2][1].atan2(r[2][2]), b, r[1][0].atan2(r[0][0])]
    } else {
        // gimbal lock: fold everything into the first angle
        [(-r[1][2]).atan2(r[1][1]), b, 0.0]
    }
}
