//! Body orientation conventions.
//!
//! Orientations are Euler angles `(rx, ry, rz)` applied as extrinsic
//! rotations about the world Z, then Y, then X axes:
//! `R = Rx(rx) * Ry(ry) * Rz(rz)`. The convention is fixed crate-wide.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::Real;

/// Rigid body pose: position plus Euler angles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose<T: Real> {
    pub position: Vector3<T>,
    pub euler: Vector3<T>,
}

impl<T: Real> Pose<T> {
    pub fn new(position: Vector3<T>, euler: Vector3<T>) -> Self {
        Self { position, euler }
    }

    pub fn identity() -> Self {
        Self { position: Vector3::zeros(), euler: Vector3::zeros() }
    }

    pub fn translation(position: Vector3<T>) -> Self {
        Self { position, euler: Vector3::zeros() }
    }

    pub fn rotation(&self) -> Matrix3<T> {
        euler_rotation(&self.euler)
    }

    /// Maps a body-frame point into the world frame.
    pub fn transform_point(&self, p: &Vector3<T>) -> Vector3<T> {
        self.position + self.rotation() * p
    }
}

fn rot_x<T: Real>(a: T) -> Matrix3<T> {
    let (s, c) = a.sin_cos();
    Matrix3::new(T::one(), T::zero(), T::zero(), T::zero(), c, -s, T::zero(), s, c)
}

fn rot_y<T: Real>(a: T) -> Matrix3<T> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, T::zero(), s, T::zero(), T::one(), T::zero(), -s, T::zero(), c)
}

fn rot_z<T: Real>(a: T) -> Matrix3<T> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, -s, T::zero(), s, c, T::zero(), T::zero(), T::zero(), T::one())
}

fn drot_x<T: Real>(a: T) -> Matrix3<T> {
    let (s, c) = a.sin_cos();
    let z = T::zero();
    Matrix3::new(z, z, z, z, -s, -c, z, c, -s)
}

fn drot_y<T: Real>(a: T) -> Matrix3<T> {
    let (s, c) = a.sin_cos();
    let z = T::zero();
    Matrix3::new(-s, z, c, z, z, z, -c, z, -s)
}

fn drot_z<T: Real>(a: T) -> Matrix3<T> {
    let (s, c) = a.sin_cos();
    let z = T::zero();
    Matrix3::new(-s, -c, z, c, -s, z, z, z, z)
}

/// Rotation about the world z-axis.
pub fn yaw_rotation<T: Real>(a: T) -> Matrix3<T> {
    rot_z(a)
}

pub fn euler_rotation<T: Real>(e: &Vector3<T>) -> Matrix3<T> {
    rot_x(e.x) * rot_y(e.y) * rot_z(e.z)
}

/// Partial derivatives of [`euler_rotation`] with respect to each angle.
pub fn euler_rotation_derivatives<T: Real>(e: &Vector3<T>) -> [Matrix3<T>; 3] {
    let (rx, ry, rz) = (rot_x(e.x), rot_y(e.y), rot_z(e.z));
    [drot_x(e.x) * ry * rz, rx * drot_y(e.y) * rz, rx * ry * drot_z(e.z)]
}

/// Inverse of [`euler_rotation`], valid away from `ry = ±π/2`.
pub fn euler_from_rotation<T: Real>(r: &Matrix3<T>) -> Vector3<T> {
    let sy = r[(0, 2)].max(-T::one()).min(T::one());
    let ry = sy.asin();
    let rz = (-r[(0, 1)]).atan2(r[(0, 0)]);
    let rx = (-r[(1, 2)]).atan2(r[(2, 2)]);
    Vector3::new(rx, ry, rz)
}

/// Rotation about an arbitrary unit axis (Rodrigues).
pub fn axis_angle<T: Real>(axis: &Vector3<T>, angle: T) -> Matrix3<T> {
    let (s, c) = angle.sin_cos();
    let k = skew(axis);
    Matrix3::identity() + k * s + k * k * (T::one() - c)
}

pub fn skew<T: Real>(v: &Vector3<T>) -> Matrix3<T> {
    let z = T::zero();
    Matrix3::new(z, -v.z, v.y, v.z, z, -v.x, -v.y, v.x, z)
}

/// Wraps an angle into `(-π, π]`.
pub fn wrap_angle<T: Real>(a: T) -> T {
    let two_pi = T::two_pi();
    let mut w = a - two_pi * ((a + T::pi()) / two_pi).floor();
    if w <= -T::pi() {
        w += two_pi;
    }
    w
}
