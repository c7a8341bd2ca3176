//! Rotations in SO(3), stored as sign-canonical unit quaternions.
//!
//! The quaternion is the storage format; matrix, axis-angle and Euler
//! views are materialized on demand. Canonical sign is `w >= 0`, with the
//! first nonzero component positive when `w == 0`, so that every rotation
//! has exactly one stored form.

use std::f64::consts::PI;
use std::fmt;
use std::ops::Mul;

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Serialized size of one rotation: four little-endian f64.
pub const ROTATION_BYTES: usize = 32;

#[derive(Clone, Copy, PartialEq)]
pub struct Rotation {
    w: f64,
    x: f64,
    y: f64,
    z: f64,
}

impl fmt::Debug for Rotation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Rotation(w={:.9}, x={:.9}, y={:.9}, z={:.9})",
            self.w, self.x, self.y, self.z
        )
    }
}

impl Default for Rotation {
    fn default() -> Self {
        Self::identity()
    }
}

impl Rotation {
    pub const fn identity() -> Self {
        Self {
            w: 1.0,
            x: 0.0,
            y: 0.0,
            z: 0.0,
        }
    }

    /// Normalizes and canonicalizes `(w, x, y, z)`.
    ///
    /// Panics on a zero or non-finite quaternion; use
    /// [`Rotation::try_from_quaternion`] for untrusted input.
    pub fn from_quaternion(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self::try_from_quaternion([w, x, y, z]).expect("quaternion must be finite and nonzero")
    }

    pub fn try_from_quaternion(q: [f64; 4]) -> Result<Self> {
        let norm = q.iter().map(|c| c * c).sum::<f64>().sqrt();
        if !norm.is_finite() || norm < 1e-300 {
            return Err(Error::InvalidConfig(format!(
                "quaternion {q:?} cannot be normalized"
            )));
        }
        Ok(Self::canonical(q[0] / norm, q[1] / norm, q[2] / norm, q[3] / norm))
    }

    fn canonical(w: f64, x: f64, y: f64, z: f64) -> Self {
        let flip = if w != 0.0 {
            w < 0.0
        } else if x != 0.0 {
            x < 0.0
        } else if y != 0.0 {
            y < 0.0
        } else {
            z < 0.0
        };
        if flip {
            Self {
                w: -w,
                x: -x,
                y: -y,
                z: -z,
            }
        } else {
            Self { w, x, y, z }
        }
    }

    /// Rotation by `angle` radians about `axis` (need not be unit length).
    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64) -> Self {
        let n = axis.norm();
        if n == 0.0 || angle == 0.0 {
            return Self::identity();
        }
        let (s, c) = (angle / 2.0).sin_cos();
        let a = axis / n;
        Self::from_quaternion(c, s * a.x, s * a.y, s * a.z)
    }

    pub fn about_x(angle: f64) -> Self {
        Self::from_axis_angle(Vector3::x(), angle)
    }

    pub fn about_y(angle: f64) -> Self {
        Self::from_axis_angle(Vector3::y(), angle)
    }

    pub fn about_z(angle: f64) -> Self {
        Self::from_axis_angle(Vector3::z(), angle)
    }

    /// Converts an orthonormal matrix with determinant +1 (Shepperd's method).
    ///
    /// No projection is performed; see [`project_to_so3`] for matrices that
    /// are only approximately rotations.
    pub fn from_matrix(m: &Matrix3<f64>) -> Self {
        let tr = m[(0, 0)] + m[(1, 1)] + m[(2, 2)];
        let (w, x, y, z);
        if tr > 0.0 {
            let s = (tr + 1.0).sqrt() * 2.0;
            w = 0.25 * s;
            x = (m[(2, 1)] - m[(1, 2)]) / s;
            y = (m[(0, 2)] - m[(2, 0)]) / s;
            z = (m[(1, 0)] - m[(0, 1)]) / s;
        } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
            let s = (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt() * 2.0;
            w = (m[(2, 1)] - m[(1, 2)]) / s;
            x = 0.25 * s;
            y = (m[(0, 1)] + m[(1, 0)]) / s;
            z = (m[(0, 2)] + m[(2, 0)]) / s;
        } else if m[(1, 1)] > m[(2, 2)] {
            let s = (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt() * 2.0;
            w = (m[(0, 2)] - m[(2, 0)]) / s;
            x = (m[(0, 1)] + m[(1, 0)]) / s;
            y = 0.25 * s;
            z = (m[(1, 2)] + m[(2, 1)]) / s;
        } else {
            let s = (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt() * 2.0;
            w = (m[(1, 0)] - m[(0, 1)]) / s;
            x = (m[(0, 2)] + m[(2, 0)]) / s;
            y = (m[(1, 2)] + m[(2, 1)]) / s;
            z = 0.25 * s;
        }
        Self::from_quaternion(w, x, y, z)
    }

    /// Canonical `[w, x, y, z]`.
    pub fn quaternion(&self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn to_matrix(&self) -> Matrix3<f64> {
        let Self { w, x, y, z } = *self;
        let (xx, yy, zz) = (x * x, y * y, z * z);
        let (xy, xz, yz) = (x * y, x * z, y * z);
        let (wx, wy, wz) = (w * x, w * y, w * z);
        Matrix3::new(
            1.0 - 2.0 * (yy + zz),
            2.0 * (xy - wz),
            2.0 * (xz + wy),
            2.0 * (xy + wz),
            1.0 - 2.0 * (xx + zz),
            2.0 * (yz - wx),
            2.0 * (xz - wy),
            2.0 * (yz + wx),
            1.0 - 2.0 * (xx + yy),
        )
    }

    /// Row-major entries of the matrix view.
    pub fn to_matrix_row_major(&self) -> [f64; 9] {
        let m = self.to_matrix();
        [
            m[(0, 0)],
            m[(0, 1)],
            m[(0, 2)],
            m[(1, 0)],
            m[(1, 1)],
            m[(1, 2)],
            m[(2, 0)],
            m[(2, 1)],
            m[(2, 2)],
        ]
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Rotation) -> Rotation {
        let (a, b) = (self, other);
        Self::from_quaternion(
            a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
        )
    }

    pub fn inverse(&self) -> Rotation {
        Self::canonical(self.w, -self.x, -self.y, -self.z)
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.to_matrix() * v
    }

    /// Absolute quaternion inner product; monotone decreasing in geodesic distance.
    #[inline]
    pub fn abs_dot(&self, other: &Rotation) -> f64 {
        (self.w * other.w + self.x * other.x + self.y * other.y + self.z * other.z).abs()
    }

    /// Rotation angle in `[0, π]`.
    pub fn angle(&self) -> f64 {
        let v = (self.x * self.x + self.y * self.y + self.z * self.z).sqrt();
        2.0 * v.atan2(self.w.abs())
    }

    pub fn distance_to(&self, other: &Rotation) -> f64 {
        geodesic_distance(self, other)
    }

    /// Componentwise equality up to sign, within `tol`.
    pub fn approx_eq(&self, other: &Rotation, tol: f64) -> bool {
        let a = self.quaternion();
        let b = other.quaternion();
        let same = a.iter().zip(&b).all(|(p, q)| (p - q).abs() <= tol);
        same || a.iter().zip(&b).all(|(p, q)| (p + q).abs() <= tol)
    }

    pub fn to_axis_angle(&self) -> AxisAngle {
        let v = Vector3::new(self.x, self.y, self.z);
        let n = v.norm();
        if n < 1e-300 {
            return AxisAngle {
                axis: Vector3::x(),
                angle: 0.0,
            };
        }
        AxisAngle {
            axis: v / n,
            angle: 2.0 * n.atan2(self.w),
        }
    }

    pub fn from_euler_zyx(e: EulerZyx) -> Rotation {
        Rotation::about_z(e.yaw)
            .compose(&Rotation::about_y(e.pitch))
            .compose(&Rotation::about_x(e.roll))
    }

    /// Decomposes into `Rz(yaw)·Ry(pitch)·Rx(roll)`. At `|pitch| = π/2` the
    /// decomposition is many-to-one; yaw is then reported as zero.
    pub fn to_euler_zyx(&self) -> EulerZyx {
        let m = self.to_matrix();
        let sp = (-m[(2, 0)]).clamp(-1.0, 1.0);
        let pitch = sp.asin();
        let cp = (m[(0, 0)].powi(2) + m[(1, 0)].powi(2)).sqrt();
        if cp < 1e-12 {
            EulerZyx {
                yaw: 0.0,
                pitch,
                roll: (-m[(1, 2)]).atan2(m[(1, 1)]),
            }
        } else {
            EulerZyx {
                yaw: m[(1, 0)].atan2(m[(0, 0)]),
                pitch,
                roll: m[(2, 1)].atan2(m[(2, 2)]),
            }
        }
    }

    /// Haar-uniform random rotation from a caller-owned generator.
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Rotation {
        loop {
            let q: [f64; 4] = [
                rng.sample(StandardNormal),
                rng.sample(StandardNormal),
                rng.sample(StandardNormal),
                rng.sample(StandardNormal),
            ];
            if let Ok(r) = Self::try_from_quaternion(q) {
                return r;
            }
        }
    }

    pub fn to_le_bytes(&self) -> [u8; ROTATION_BYTES] {
        let mut out = [0u8; ROTATION_BYTES];
        for (chunk, c) in out.chunks_exact_mut(8).zip(self.quaternion()) {
            chunk.copy_from_slice(&c.to_le_bytes());
        }
        out
    }

    pub fn from_le_bytes(bytes: &[u8; ROTATION_BYTES]) -> Result<Rotation> {
        let mut q = [0.0; 4];
        for (c, chunk) in q.iter_mut().zip(bytes.chunks_exact(8)) {
            *c = f64::from_le_bytes(chunk.try_into().unwrap());
        }
        let n2: f64 = q.iter().map(|c| c * c).sum();
        if (n2 - 1.0).abs() < 1e-12 {
            // already unit: keep the stored bits so files round-trip exactly
            return Ok(Self::canonical(q[0], q[1], q[2], q[3]));
        }
        Self::try_from_quaternion(q)
    }
}

impl Mul for Rotation {
    type Output = Rotation;

    fn mul(self, rhs: Rotation) -> Rotation {
        self.compose(&rhs)
    }
}

impl Mul<&Rotation> for &Rotation {
    type Output = Rotation;

    fn mul(self, rhs: &Rotation) -> Rotation {
        self.compose(rhs)
    }
}

/// Geodesic distance: the angle of `a⁻¹b`, in `[0, π]`.
///
/// Evaluated as `2·atan2(|v|, |w|)` of the relative quaternion, which equals
/// `2·arccos(|⟨a, b⟩|)` but stays accurate for nearly equal rotations.
pub fn geodesic_distance(a: &Rotation, b: &Rotation) -> f64 {
    if a == b {
        return 0.0;
    }
    // vector and scalar parts of conj(a) * b
    let w = a.w * b.w + a.x * b.x + a.y * b.y + a.z * b.z;
    let x = a.w * b.x - a.x * b.w - a.y * b.z + a.z * b.y;
    let y = a.w * b.y + a.x * b.z - a.y * b.w - a.z * b.x;
    let z = a.w * b.z - a.x * b.y + a.y * b.x - a.z * b.w;
    2.0 * (x * x + y * y + z * z).sqrt().atan2(w.abs())
}

/// `n` Haar-uniform rotations, deterministic in `seed`.
pub fn sample_uniform(seed: u64, n: usize) -> Vec<Rotation> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| Rotation::random(&mut rng)).collect()
}

/// Nearest rotation in Frobenius norm (orthogonal Procrustes).
pub fn project_to_so3(m: &Matrix3<f64>) -> Result<Rotation> {
    let svd = m.svd(true, true);
    let mut u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested V^T");
    let sigma = svd.singular_values;
    let (k_min, s_min) = sigma
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, s)| if s < acc.1 { (i, s) } else { acc });
    if !(s_min >= 1e-12) {
        return Err(Error::DegenerateMatrix(s_min));
    }
    if (u * v_t).determinant() < 0.0 {
        let mut col = u.column_mut(k_min);
        col *= -1.0;
    }
    Ok(Rotation::from_matrix(&(u * v_t)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxisAngle {
    pub axis: Vector3<f64>,
    pub angle: f64,
}

impl AxisAngle {
    pub fn to_rotation(&self) -> Rotation {
        Rotation::from_axis_angle(self.axis, self.angle)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EulerZyx {
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RotationFormat {
    #[default]
    Matrix,
    Quaternion,
    AxisAngle,
    EulerZyx,
}

impl RotationFormat {
    /// Number of scalars in the flattened representation.
    pub fn width(self) -> usize {
        match self {
            RotationFormat::Matrix => 9,
            RotationFormat::Quaternion => 4,
            RotationFormat::AxisAngle => 4,
            RotationFormat::EulerZyx => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            RotationFormat::Matrix => "matrix",
            RotationFormat::Quaternion => "quaternion",
            RotationFormat::AxisAngle => "axis_angle",
            RotationFormat::EulerZyx => "euler_zyx",
        }
    }
}

impl std::str::FromStr for RotationFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "matrix" => Ok(Self::Matrix),
            "quaternion" => Ok(Self::Quaternion),
            "axis_angle" => Ok(Self::AxisAngle),
            "euler_zyx" => Ok(Self::EulerZyx),
            _ => Err(Error::InvalidConfig(format!("unknown rotation format {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Representation {
    Matrix(Matrix3<f64>),
    Quaternion([f64; 4]),
    AxisAngle(AxisAngle),
    EulerZyx(EulerZyx),
}

impl Representation {
    pub fn to_rotation(&self) -> Rotation {
        match self {
            Representation::Matrix(m) => Rotation::from_matrix(m),
            Representation::Quaternion(q) => Rotation::from_quaternion(q[0], q[1], q[2], q[3]),
            Representation::AxisAngle(aa) => aa.to_rotation(),
            Representation::EulerZyx(e) => Rotation::from_euler_zyx(*e),
        }
    }

    /// Flattened scalars; matrices are row-major, axis-angle is `(axis, angle)`.
    pub fn components(&self) -> Vec<f64> {
        match self {
            Representation::Matrix(m) => m.transpose().iter().copied().collect(),
            Representation::Quaternion(q) => q.to_vec(),
            Representation::AxisAngle(aa) => vec![aa.axis.x, aa.axis.y, aa.axis.z, aa.angle],
            Representation::EulerZyx(e) => vec![e.yaw, e.pitch, e.roll],
        }
    }
}

pub fn convert(r: &Rotation, format: RotationFormat) -> Representation {
    match format {
        RotationFormat::Matrix => Representation::Matrix(r.to_matrix()),
        RotationFormat::Quaternion => Representation::Quaternion(r.quaternion()),
        RotationFormat::AxisAngle => Representation::AxisAngle(r.to_axis_angle()),
        RotationFormat::EulerZyx => Representation::EulerZyx(r.to_euler_zyx()),
    }
}

/// Mean angle of a Haar-uniform rotation, `π/2 + 2/π`.
pub const HAAR_MEAN_ANGLE: f64 = PI / 2.0 + 2.0 / PI;

/// CDF of the rotation angle of a Haar-uniform rotation.
pub fn haar_angle_cdf(theta: f64) -> f64 {
    let t = theta.clamp(0.0, PI);
    (t - t.sin()) / PI
}
