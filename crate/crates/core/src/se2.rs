//! SE(2) group operations, Gaussian covariance algebra, and the Jacobians
//! consumed by the SLAM back end, the virtual map, and the planners.
//!
//! All angles are kept normalized to [-pi, pi); covariances are symmetrized
//! after every update to suppress floating-point drift.

use nalgebra::{DMatrix, Matrix2, Matrix3, Vector2, Vector3};

use crate::error::{Error, Result};

/// Floor returned by [`log_det`] for singular input, roughly
/// log det of diag(1e-10, 1e-10). Keeps utility sums finite.
pub const LOG_DET_FLOOR: f64 = -46.0;

/// Wrap an angle to [-pi, pi).
pub fn normalize_angle(theta: f64) -> f64 {
    let tau = std::f64::consts::TAU;
    let mut a = (theta + std::f64::consts::PI) % tau;
    if a < 0.0 {
        a += tau;
    }
    a - std::f64::consts::PI
}

/// Wrap-aware angle difference a - b, in [-pi, pi).
pub fn angle_diff(a: f64, b: f64) -> f64 {
    normalize_angle(a - b)
}

/// A rigid pose in the plane: translation in meters, heading in radians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SE2Pose {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl SE2Pose {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self {
            x,
            y,
            theta: normalize_angle(theta),
        }
    }

    pub fn identity() -> Self {
        Self {
            x: 0.0,
            y: 0.0,
            theta: 0.0,
        }
    }

    pub fn translation(&self) -> Vector2<f64> {
        Vector2::new(self.x, self.y)
    }

    pub fn rotation(&self) -> Matrix2<f64> {
        let (s, c) = self.theta.sin_cos();
        Matrix2::new(c, -s, s, c)
    }

    /// Group composition a o b.
    pub fn compose(&self, b: &SE2Pose) -> SE2Pose {
        let (s, c) = self.theta.sin_cos();
        SE2Pose::new(
            self.x + c * b.x - s * b.y,
            self.y + s * b.x + c * b.y,
            self.theta + b.theta,
        )
    }

    pub fn inverse(&self) -> SE2Pose {
        let (s, c) = self.theta.sin_cos();
        SE2Pose::new(-c * self.x - s * self.y, s * self.x - c * self.y, -self.theta)
    }

    /// Relative transform a^-1 o b, so that a.compose(&a.between(&b)) == b.
    pub fn between(&self, b: &SE2Pose) -> SE2Pose {
        let (s, c) = self.theta.sin_cos();
        let dx = b.x - self.x;
        let dy = b.y - self.y;
        SE2Pose::new(c * dx + s * dy, -s * dx + c * dy, b.theta - self.theta)
    }

    /// Map a point from this pose's local frame into the world frame.
    pub fn transform_point(&self, p: &Vector2<f64>) -> Vector2<f64> {
        self.translation() + self.rotation() * p
    }

    /// Map a world point into this pose's local frame.
    pub fn inverse_transform_point(&self, p: &Vector2<f64>) -> Vector2<f64> {
        self.rotation().transpose() * (p - self.translation())
    }

    pub fn to_vector(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.theta)
    }

    pub fn from_vector(v: &Vector3<f64>) -> Self {
        SE2Pose::new(v.x, v.y, v.z)
    }
}

/// Derivative of the 2x2 rotation matrix with respect to theta.
pub fn rotation_derivative(theta: f64) -> Matrix2<f64> {
    let (s, c) = theta.sin_cos();
    Matrix2::new(-s, -c, c, -s)
}

/// Jacobians of the composition c = a o delta with respect to a and delta.
pub fn motion_jacobians(a: &SE2Pose, delta: &SE2Pose) -> (Matrix3<f64>, Matrix3<f64>) {
    let (s, c) = a.theta.sin_cos();
    let j_a = Matrix3::new(
        1.0,
        0.0,
        -s * delta.x - c * delta.y,
        0.0,
        1.0,
        c * delta.x - s * delta.y,
        0.0,
        0.0,
        1.0,
    );
    let j_d = Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0);
    (j_a, j_d)
}

pub fn symmetrize2(m: &Matrix2<f64>) -> Matrix2<f64> {
    (m + m.transpose()) * 0.5
}

pub fn symmetrize3(m: &Matrix3<f64>) -> Matrix3<f64> {
    (m + m.transpose()) * 0.5
}

fn check_symmetric(m: &DMatrix<f64>) -> Result<()> {
    let scale = 1.0 + m.amax();
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            if (m[(i, j)] - m[(j, i)]).abs() > 1e-9 * scale {
                return Err(Error::Asymmetric);
            }
        }
    }
    Ok(())
}

fn check_psd(m: &DMatrix<f64>) -> Result<()> {
    check_symmetric(m)?;
    let eig = m.clone().symmetric_eigenvalues();
    if eig.iter().any(|&l| l < -1e-10) {
        return Err(Error::NotPsd);
    }
    Ok(())
}

/// A 2D point with a 2x2 covariance, the currency of the virtual map.
#[derive(Debug, Clone, Copy)]
pub struct Gaussian2 {
    pub mean: Vector2<f64>,
    pub cov: Matrix2<f64>,
}

impl Gaussian2 {
    pub fn new(mean: Vector2<f64>, cov: Matrix2<f64>) -> Result<Self> {
        let cov = symmetrize2(&cov);
        check_psd(&DMatrix::from_iterator(2, 2, cov.iter().cloned()))?;
        Ok(Self { mean, cov })
    }
}

/// A pose belief: SE(2) mean and a 3x3 covariance (m^2, m^2, rad^2 diagonal).
#[derive(Debug, Clone, Copy)]
pub struct Gaussian3 {
    pub mean: SE2Pose,
    pub cov: Matrix3<f64>,
}

impl Gaussian3 {
    pub fn new(mean: SE2Pose, cov: Matrix3<f64>) -> Result<Self> {
        let cov = symmetrize3(&cov);
        check_psd(&DMatrix::from_iterator(3, 3, cov.iter().cloned()))?;
        Ok(Self { mean, cov })
    }
}

/// Propagate a pose belief through a body-frame increment with process
/// noise q: covariance becomes J_a S J_a' + J_d Q J_d'.
pub fn propagate_cov(belief: &Gaussian3, delta: &SE2Pose, q: &Matrix3<f64>) -> Result<Gaussian3> {
    check_psd(&DMatrix::from_iterator(3, 3, q.iter().cloned()))?;
    let (j_a, j_d) = motion_jacobians(&belief.mean, delta);
    let cov = symmetrize3(&(j_a * belief.cov * j_a.transpose() + j_d * q * j_d.transpose()));
    Ok(Gaussian3 {
        mean: belief.mean.compose(delta),
        cov,
    })
}

/// Log-determinant of a symmetric PSD matrix via Cholesky. Singular input
/// (or anything below the floor) returns [`LOG_DET_FLOOR`].
pub fn log_det(m: &DMatrix<f64>) -> Result<f64> {
    check_symmetric(m)?;
    match m.clone().cholesky() {
        Some(chol) => {
            let ld: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
            if ld.is_finite() {
                Ok(ld.max(LOG_DET_FLOOR))
            } else {
                Ok(LOG_DET_FLOOR)
            }
        }
        None => Ok(LOG_DET_FLOOR),
    }
}

pub fn log_det2(m: &Matrix2<f64>) -> Result<f64> {
    log_det(&DMatrix::from_iterator(2, 2, m.iter().cloned()))
}

pub fn log_det3(m: &Matrix3<f64>) -> Result<f64> {
    log_det(&DMatrix::from_iterator(3, 3, m.iter().cloned()))
}
