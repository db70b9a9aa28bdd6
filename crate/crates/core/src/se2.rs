//! Planar rigid-body primitives on SE(2): poses, twists and the frame map
//! between body and world velocities.

use thiserror::Error;

use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("non-finite argument `{name}` = {value}")]
    NonFinite { name: &'static str, value: f64 },
    #[error("twist expressed in {found:?} frame, expected {expected:?}")]
    FrameMismatch { expected: Frame, found: Frame },
    #[error("matrix is not an SE(2) element: {0}")]
    NotRigid(&'static str),
}

fn check_finite<T: Real>(name: &'static str, value: T) -> Result<(), GeometryError> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(GeometryError::NonFinite { name, value: value.as_f64() })
    }
}

/// Frame a [`Twist`] is expressed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Frame {
    Body,
    World,
}

/// Planar pose: position `p` in meters and heading `alpha` in radians.
///
/// Heading is stored as given (not wrapped); trajectories keep it
/// continuous and errors wrap it where needed.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Pose<T> {
    pub p: [T; 2],
    pub alpha: T,
}

impl<T: Real> Pose<T> {
    pub fn new(x: T, y: T, alpha: T) -> Self {
        Self { p: [x, y], alpha }
    }

    pub fn identity() -> Self {
        Self::new(T::zero(), T::zero(), T::zero())
    }

    pub fn x(&self) -> T {
        self.p[0]
    }

    pub fn y(&self) -> T {
        self.p[1]
    }

    /// Vector form `[x, y, alpha]`.
    pub fn to_vector(&self) -> [T; 3] {
        [self.p[0], self.p[1], self.alpha]
    }

    pub fn from_vector(v: [T; 3]) -> Self {
        Self::new(v[0], v[1], v[2])
    }

    /// Homogeneous matrix form `[[R, p], [0, 1]]`.
    pub fn to_matrix(&self) -> [[T; 3]; 3] {
        let (s, c) = self.alpha.sin_cos();
        let z = T::zero();
        [[c, -s, self.p[0]], [s, c, self.p[1]], [z, z, T::one()]]
    }

    /// Recovers a pose from its homogeneous matrix. The heading comes back
    /// wrapped to `(-pi, pi]`.
    pub fn from_matrix(m: &[[T; 3]; 3]) -> Result<Self, GeometryError> {
        let tol = T::lit(1e3) * T::eps();
        let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        if (det - T::one()).abs() > tol {
            return Err(GeometryError::NotRigid("rotation block determinant is not 1"));
        }
        if (m[0][0] - m[1][1]).abs() > tol || (m[0][1] + m[1][0]).abs() > tol {
            return Err(GeometryError::NotRigid("rotation block is not a planar rotation"));
        }
        if m[2][0] != T::zero() || m[2][1] != T::zero() || m[2][2] != T::one() {
            return Err(GeometryError::NotRigid("last row must be [0, 0, 1]"));
        }
        let alpha = wrap_angle(m[1][0].atan2(m[0][0]))?;
        Ok(Self::new(m[0][2], m[1][2], alpha))
    }

    pub fn rotation(&self) -> Result<[[T; 2]; 2], GeometryError> {
        rotation_matrix(self.alpha)
    }

    pub fn is_finite(&self) -> bool {
        self.p[0].is_finite() && self.p[1].is_finite() && self.alpha.is_finite()
    }

    pub fn cast<U: Real>(&self) -> Pose<U> {
        Pose::new(U::lit(self.p[0].as_f64()), U::lit(self.p[1].as_f64()), U::lit(self.alpha.as_f64()))
    }
}

/// Planar twist `(v_x, v_y, omega)` tagged with the frame it is expressed in.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Twist<T> {
    pub v: [T; 2],
    pub omega: T,
    frame: Frame,
}

impl<T: Real> Twist<T> {
    pub fn body(vx: T, vy: T, omega: T) -> Self {
        Self { v: [vx, vy], omega, frame: Frame::Body }
    }

    pub fn world(vx: T, vy: T, omega: T) -> Self {
        Self { v: [vx, vy], omega, frame: Frame::World }
    }

    pub fn frame(&self) -> Frame {
        self.frame
    }

    pub fn to_vector(&self) -> [T; 3] {
        [self.v[0], self.v[1], self.omega]
    }
}

/// `[[cos a, -sin a], [sin a, cos a]]`.
pub fn rotation_matrix<T: Real>(alpha: T) -> Result<[[T; 2]; 2], GeometryError> {
    check_finite("alpha", alpha)?;
    let (s, c) = alpha.sin_cos();
    Ok([[c, -s], [s, c]])
}

/// Maps a body twist to the world-frame pose rate `xdot = [R(alpha) v; omega]`.
///
/// The twist is taken at the body origin and read as the time derivative of
/// the pose vector, so the translation/rotation coupling of the general
/// adjoint matrix does not appear.
pub fn adjoint_transform<T: Real>(pose: &Pose<T>, body: &Twist<T>) -> Result<Twist<T>, GeometryError> {
    if body.frame != Frame::Body {
        return Err(GeometryError::FrameMismatch { expected: Frame::Body, found: body.frame });
    }
    let r = rotation_matrix(pose.alpha)?;
    Ok(Twist::world(
        r[0][0] * body.v[0] + r[0][1] * body.v[1],
        r[1][0] * body.v[0] + r[1][1] * body.v[1],
        body.omega,
    ))
}

/// Wraps an angle to `(-pi, pi]`.
pub fn wrap_angle<T: Real>(alpha: T) -> Result<T, GeometryError> {
    check_finite("alpha", alpha)?;
    let pi = T::lit(std::f64::consts::PI);
    let two_pi = pi + pi;
    let mut a = alpha - two_pi * ((alpha + pi) / two_pi).floor();
    // `a` is now in [-pi, pi); move the lower boundary to +pi.
    if a <= -pi {
        a += two_pi;
    }
    if a > pi {
        a -= two_pi;
    }
    Ok(a)
}

/// Shifts `alpha` by a multiple of 2*pi so it lies within pi of `anchor`.
pub fn unwrap_near<T: Real>(alpha: T, anchor: T) -> T {
    let pi = T::lit(std::f64::consts::PI);
    let two_pi = pi + pi;
    alpha - two_pi * ((alpha - anchor + pi) / two_pi).floor()
}
