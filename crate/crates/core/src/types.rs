use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub, SubAssign};

use crate::error::{ensure_finite, Result};

/// A vector in the plane.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    #[inline]
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    #[inline]
    pub fn dot(self, other: Vec2) -> f64 {
        self.x * other.x + self.y * other.y
    }

    #[inline]
    pub fn norm_squared(self) -> f64 {
        self.dot(self)
    }

    #[inline]
    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    #[inline]
    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub(crate) fn checked(self, name: &'static str) -> Result<Self> {
        ensure_finite(name, self.x)?;
        ensure_finite(name, self.y)?;
        Ok(self)
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    #[inline]
    fn add(self, rhs: Vec2) -> Vec2 {
        Vec2::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    #[inline]
    fn sub(self, rhs: Vec2) -> Vec2 {
        Vec2::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    #[inline]
    fn mul(self, rhs: f64) -> Vec2 {
        Vec2::new(self.x * rhs, self.y * rhs)
    }
}

impl Mul<Vec2> for f64 {
    type Output = Vec2;
    #[inline]
    fn mul(self, rhs: Vec2) -> Vec2 {
        rhs * self
    }
}

impl Div<f64> for Vec2 {
    type Output = Vec2;
    #[inline]
    fn div(self, rhs: f64) -> Vec2 {
        Vec2::new(self.x / rhs, self.y / rhs)
    }
}

impl Neg for Vec2 {
    type Output = Vec2;
    #[inline]
    fn neg(self) -> Vec2 {
        Vec2::new(-self.x, -self.y)
    }
}

impl AddAssign for Vec2 {
    #[inline]
    fn add_assign(&mut self, rhs: Vec2) {
        self.x += rhs.x;
        self.y += rhs.y;
    }
}

impl SubAssign for Vec2 {
    #[inline]
    fn sub_assign(&mut self, rhs: Vec2) {
        self.x -= rhs.x;
        self.y -= rhs.y;
    }
}

/// Position and velocity of one plasma characteristic.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhasePoint {
    pub x: Vec2,
    pub v: Vec2,
}

impl PhasePoint {
    pub fn new(x: Vec2, v: Vec2) -> Result<Self> {
        Ok(Self {
            x: x.checked("phase point position")?,
            v: v.checked("phase point velocity")?,
        })
    }
}

/// Position `xi` and velocity `eta` of one point charge.
///
/// A pinned charge has infinite inertia: it exerts its field but never moves.
/// Pinning is a test-harness device for reduced one-body problems.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChargeState {
    pub xi: Vec2,
    pub eta: Vec2,
    pub pinned: bool,
}

impl ChargeState {
    pub fn new(xi: Vec2, eta: Vec2) -> Result<Self> {
        Ok(Self {
            xi: xi.checked("charge position")?,
            eta: eta.checked("charge velocity")?,
            pinned: false,
        })
    }

    /// A charge held fixed at `xi`.
    pub fn pinned_at(xi: Vec2) -> Result<Self> {
        Ok(Self {
            xi: xi.checked("charge position")?,
            eta: Vec2::ZERO,
            pinned: true,
        })
    }
}

/// A weighted plasma characteristic. The weight is the quadrature weight of
/// the initial density and never changes along the motion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Particle {
    pub phase: PhasePoint,
    pub weight: f64,
    pub id: u64,
}

impl Particle {
    pub fn new(phase: PhasePoint, weight: f64, id: u64) -> Result<Self> {
        let weight = ensure_finite("particle weight", weight)?;
        if weight < 0.0 {
            return Err(crate::Error::Domain(format!(
                "particle weight must be nonnegative, got {weight}"
            )));
        }
        Ok(Self { phase, weight, id })
    }

    /// A weight-zero particle: it follows the field but generates none.
    pub fn tracer(x: Vec2, v: Vec2, id: u64) -> Result<Self> {
        Self::new(PhasePoint::new(x, v)?, 0.0, id)
    }

    #[inline]
    pub fn x(&self) -> Vec2 {
        self.phase.x
    }

    #[inline]
    pub fn v(&self) -> Vec2 {
        self.phase.v
    }
}
