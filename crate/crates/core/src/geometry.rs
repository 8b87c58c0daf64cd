//! Small fixed-size vectors and planar rigid motions.

use std::ops::{Add, Mul, Neg, Sub};

use crate::scalar::{wrap_angle, Real};

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Vec2<T> {
    pub x: T,
    pub y: T,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Vec3<T> {
    pub x: T,
    pub y: T,
    pub z: T,
}

impl<T: Real> Vec2<T> {
    pub const fn new(x: T, y: T) -> Self {
        Self { x, y }
    }

    pub fn norm_squared(self) -> T {
        self.x * self.x + self.y * self.y
    }

    pub fn norm(self) -> T {
        self.x.hypot(self.y)
    }

    pub fn dot(self, other: Self) -> T {
        self.x * other.x + self.y * other.y
    }

    pub fn scale(self, s: T) -> Self {
        Self::new(self.x * s, self.y * s)
    }

    pub fn distance(self, other: Self) -> T {
        (self - other).norm()
    }

    pub fn cast<U: Real>(self) -> Vec2<U> {
        Vec2::new(U::of(self.x.f64()), U::of(self.y.f64()))
    }
}

impl<T: Real> Vec3<T> {
    pub const fn new(x: T, y: T, z: T) -> Self {
        Self { x, y, z }
    }

    pub fn norm(self) -> T {
        (self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn scale(self, s: T) -> Self {
        Self::new(self.x * s, self.y * s, self.z * s)
    }

    pub fn xy(self) -> Vec2<T> {
        Vec2::new(self.x, self.y)
    }

    pub fn get(self, axis: usize) -> T {
        match axis {
            0 => self.x,
            1 => self.y,
            _ => self.z,
        }
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn cast<U: Real>(self) -> Vec3<U> {
        Vec3::new(U::of(self.x.f64()), U::of(self.y.f64()), U::of(self.z.f64()))
    }
}

macro_rules! impl_vec_ops {
    ($ty:ident { $($f:ident),+ }) => {
        impl<T: Real> Add for $ty<T> {
            type Output = Self;
            fn add(self, o: Self) -> Self {
                Self { $($f: self.$f + o.$f),+ }
            }
        }
        impl<T: Real> Sub for $ty<T> {
            type Output = Self;
            fn sub(self, o: Self) -> Self {
                Self { $($f: self.$f - o.$f),+ }
            }
        }
        impl<T: Real> Neg for $ty<T> {
            type Output = Self;
            fn neg(self) -> Self {
                Self { $($f: -self.$f),+ }
            }
        }
        impl<T: Real> Mul<T> for $ty<T> {
            type Output = Self;
            fn mul(self, s: T) -> Self {
                Self { $($f: self.$f * s),+ }
            }
        }
    };
}

impl_vec_ops!(Vec2 { x, y });
impl_vec_ops!(Vec3 { x, y, z });

/// Planar rigid motion with heading wrapped to `(-pi, pi]`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Pose2D<T> {
    pub x: T,
    pub y: T,
    pub phi: T,
}

impl<T: Real> Pose2D<T> {
    pub fn new(x: T, y: T, phi: T) -> Self {
        Self {
            x,
            y,
            phi: wrap_angle(phi),
        }
    }

    pub fn identity() -> Self {
        Self::new(T::zero(), T::zero(), T::zero())
    }

    pub fn translation(&self) -> Vec2<T> {
        Vec2::new(self.x, self.y)
    }

    /// `self * other`: `other` expressed in the frame of `self`.
    pub fn compose(&self, other: &Self) -> Self {
        let (s, c) = self.phi.sin_cos();
        Self::new(
            self.x + c * other.x - s * other.y,
            self.y + s * other.x + c * other.y,
            self.phi + other.phi,
        )
    }

    pub fn inverse(&self) -> Self {
        let (s, c) = self.phi.sin_cos();
        Self::new(
            -(c * self.x + s * self.y),
            s * self.x - c * self.y,
            -self.phi,
        )
    }

    /// Relative motion taking `self` to `to`, in the frame of `self`.
    pub fn between(&self, to: &Self) -> Self {
        self.inverse().compose(to)
    }

    pub fn transform_point(&self, p: Vec2<T>) -> Vec2<T> {
        let (s, c) = self.phi.sin_cos();
        Vec2::new(self.x + c * p.x - s * p.y, self.y + s * p.x + c * p.y)
    }

    pub fn transform_point3(&self, p: Vec3<T>) -> Vec3<T> {
        let q = self.transform_point(p.xy());
        Vec3::new(q.x, q.y, p.z)
    }

    /// 3x3 homogeneous matrix, row major.
    pub fn to_matrix(&self) -> [[T; 3]; 3] {
        let (s, c) = self.phi.sin_cos();
        let (o, l) = (T::zero(), T::one());
        [[c, -s, self.x], [s, c, self.y], [o, o, l]]
    }

    pub fn from_matrix(m: &[[T; 3]; 3]) -> Self {
        Self::new(m[0][2], m[1][2], m[1][0].atan2(m[0][0]))
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.phi.is_finite()
    }

    pub fn cast<U: Real>(&self) -> Pose2D<U> {
        Pose2D::new(U::of(self.x.f64()), U::of(self.y.f64()), U::of(self.phi.f64()))
    }
}

/// Pose at a point in time (seconds).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StampedPose<T> {
    pub t: T,
    pub pose: Pose2D<T>,
}

impl<T: Real> StampedPose<T> {
    pub fn new(t: T, pose: Pose2D<T>) -> Self {
        Self { t, pose }
    }
}

/// Interpolates a time-ordered trajectory at `t`: linear in position,
/// shortest arc in heading. Returns `None` outside the covered span.
pub fn interpolate_pose<T: Real>(trajectory: &[StampedPose<T>], t: T) -> Option<Pose2D<T>> {
    let first = trajectory.first()?;
    let last = trajectory.last()?;
    if t < first.t || t > last.t {
        return None;
    }
    let idx = trajectory.partition_point(|p| p.t < t);
    if idx == 0 {
        return Some(first.pose);
    }
    let b = &trajectory[idx];
    if b.t == t {
        return Some(b.pose);
    }
    let a = &trajectory[idx - 1];
    let span = b.t - a.t;
    let s = if span > T::zero() { (t - a.t) / span } else { T::zero() };
    let dphi = wrap_angle(b.pose.phi - a.pose.phi);
    Some(Pose2D::new(
        a.pose.x + (b.pose.x - a.pose.x) * s,
        a.pose.y + (b.pose.y - a.pose.y) * s,
        a.pose.phi + dphi * s,
    ))
}

/// Axis-aligned square footprint overlap test on the ground plane.
pub fn squares_overlap<T: Real>(a: Vec2<T>, width_a: T, b: Vec2<T>, width_b: T) -> bool {
    let half = (width_a + width_b) * T::of(0.5);
    (a.x - b.x).abs() < half && (a.y - b.y).abs() < half
}
