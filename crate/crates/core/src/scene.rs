//! Contact surfaces, their frames and distance fields, and the bundled
//! scenario families.
//!
//! Every surface carries a *free-side* normal field: for planes the stored
//! normal, for cylinders the radial direction pointing into free space. The
//! contact frame z-axis is that normal, so a positive normal force pushes the
//! robot away from the surface. Surfaces marked `solid` must not be
//! penetrated by any toe; open patches (brick tops, inclines, tube walls that
//! end at a rim) only constrain toes that actually press on them.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::skew;
use crate::kinematics::LEG_NAMES;
use crate::{lit, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurfaceKind {
    Plane,
    CylinderInterior,
    CylinderExterior,
}

/// Half-space `normal · p ≤ offset`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HalfSpace<T: Real> {
    pub normal: Vector3<T>,
    pub offset: T,
}

/// Convex contact patch `{p : A p ≤ b}`; no rows means unbounded.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Region<T: Real> {
    pub rows: Vec<HalfSpace<T>>,
}

impl<T: Real> Region<T> {
    pub fn unbounded() -> Self {
        Self { rows: Vec::new() }
    }

    pub fn new(rows: Vec<HalfSpace<T>>) -> Self {
        Self { rows }
    }

    pub fn is_unbounded(&self) -> bool {
        self.rows.is_empty()
    }

    /// Largest row violation `max(A p − b)` (≤ 0 inside).
    pub fn violation(&self, p: &Vector3<T>) -> T {
        self.rows
            .iter()
            .map(|h| h.normal.dot(p) - h.offset)
            .fold(-T::max_value().unwrap_or_else(|| lit(f64::MAX)), |a, b| a.max(b))
    }

    pub fn contains(&self, p: &Vector3<T>, tol: T) -> bool {
        self.rows.is_empty() || self.violation(p) <= tol
    }

    /// Same region with unit-norm rows.
    pub fn normalized(&self) -> Self {
        Self {
            rows: self
                .rows
                .iter()
                .map(|h| {
                    let n = h.normal.norm();
                    HalfSpace { normal: h.normal / n, offset: h.offset / n }
                })
                .collect(),
        }
    }

    /// Euclidean projection onto the region (Dykstra's alternating
    /// projections, finished with a cyclic cleanup pass).
    pub fn project(&self, p: &Vector3<T>) -> Vector3<T> {
        if self.contains(p, T::zero()) {
            return *p;
        }
        let rows = self.normalized().rows;
        let mut x = *p;
        let mut incr = vec![Vector3::zeros(); rows.len()];
        for _ in 0..20_000 {
            let prev = x;
            for (k, h) in rows.iter().enumerate() {
                let y = x + incr[k];
                let excess = h.normal.dot(&y) - h.offset;
                let proj = if excess > T::zero() { y - h.normal * excess } else { y };
                incr[k] = y - proj;
                x = proj;
            }
            if (x - prev).norm() < lit(1e-15) {
                break;
            }
        }
        for _ in 0..100 {
            let mut moved = false;
            for h in &rows {
                let excess = h.normal.dot(&x) - h.offset;
                if excess > T::zero() {
                    x -= h.normal * excess;
                    moved = true;
                }
            }
            if !moved {
                break;
            }
        }
        x
    }

    pub fn is_nonempty(&self) -> bool {
        if self.rows.is_empty() {
            return true;
        }
        let m = self.rows.len();
        let a = DMatrix::from_fn(m, 3, |r, c| self.rows[r].normal[c].to_f64().unwrap_or(f64::NAN));
        let b = DVector::from_fn(m, |r, _| self.rows[r].offset.to_f64().unwrap_or(f64::NAN));
        crate::lp::polyhedron_nonempty(&a, &b)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Surface<T: Real> {
    pub name: String,
    pub kind: SurfaceKind,
    pub origin: Vector3<T>,
    /// Free-side normal for planes, axis direction for cylinders.
    pub direction: Vector3<T>,
    /// Cylinder radius (unused for planes).
    pub radius: T,
    pub friction: T,
    pub region: Region<T>,
    pub solid: bool,
}

impl<T: Real> Surface<T> {
    pub fn plane(name: &str, origin: Vector3<T>, normal: Vector3<T>, friction: T) -> Self {
        Self {
            name: name.to_string(),
            kind: SurfaceKind::Plane,
            origin,
            direction: normal.normalize(),
            radius: T::zero(),
            friction,
            region: Region::unbounded(),
            solid: true,
        }
    }

    pub fn cylinder(name: &str, kind: SurfaceKind, origin: Vector3<T>, axis: Vector3<T>, radius: T, friction: T) -> Self {
        Self {
            name: name.to_string(),
            kind,
            origin,
            direction: axis.normalize(),
            radius,
            friction,
            region: Region::unbounded(),
            solid: true,
        }
    }

    pub fn with_region(mut self, region: Region<T>) -> Self {
        self.region = region;
        self
    }

    pub fn open(mut self) -> Self {
        self.solid = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.friction > T::zero()) {
            return Err(Error::InvalidScene(format!("surface `{}`: friction must be positive", self.name)));
        }
        if (self.direction.norm() - T::one()).abs() > lit(1e-9) {
            return Err(Error::InvalidScene(format!(
                "surface `{}`: normal/axis must have unit norm",
                self.name
            )));
        }
        if self.kind != SurfaceKind::Plane && !(self.radius > T::zero()) {
            return Err(Error::InvalidScene(format!("surface `{}`: cylinder radius must be positive", self.name)));
        }
        if !self.region.is_nonempty() {
            return Err(Error::InvalidScene(format!("surface `{}`: contact region is empty", self.name)));
        }
        Ok(())
    }

    /// Radial vector from the cylinder axis to `p`.
    fn radial(&self, p: &Vector3<T>) -> Vector3<T> {
        let r = p - self.origin;
        r - self.direction * self.direction.dot(&r)
    }

    /// Free-side unit normal at the point of the surface nearest `p`.
    pub fn normal_at(&self, p: &Vector3<T>) -> Result<Vector3<T>> {
        match self.kind {
            SurfaceKind::Plane => Ok(self.direction),
            SurfaceKind::CylinderInterior | SurfaceKind::CylinderExterior => {
                let r = self.radial(p);
                let n = r.norm();
                if n < lit(1e-12) {
                    return Err(Error::DegeneratePoint { surface: self.name.clone() });
                }
                let u = r / n;
                Ok(if self.kind == SurfaceKind::CylinderInterior { -u } else { u })
            }
        }
    }

    /// `∂n/∂p` of the normal field (symmetric; zero for planes).
    pub fn normal_jacobian(&self, p: &Vector3<T>) -> Matrix3<T> {
        match self.kind {
            SurfaceKind::Plane => Matrix3::zeros(),
            SurfaceKind::CylinderInterior | SurfaceKind::CylinderExterior => {
                let r = self.radial(p);
                let n = r.norm();
                if n < lit(1e-12) {
                    return Matrix3::zeros();
                }
                let u = r / n;
                let a = self.direction;
                let m = (Matrix3::identity() - a * a.transpose() - u * u.transpose()) / n;
                if self.kind == SurfaceKind::CylinderInterior {
                    -m
                } else {
                    m
                }
            }
        }
    }
}

/// Distance from the carrier surface: zero on it, positive on the free side.
pub fn signed_distance<T: Real>(surface: &Surface<T>, p: &Vector3<T>) -> T {
    match surface.kind {
        SurfaceKind::Plane => surface.direction.dot(&(p - surface.origin)),
        SurfaceKind::CylinderInterior => surface.radius - surface.radial(p).norm(),
        SurfaceKind::CylinderExterior => surface.radial(p).norm() - surface.radius,
    }
}

/// World-to-contact rotation whose rows are the contact x, y and z axes.
///
/// z is the free-side normal; x is `z × up` (world up = +z), falling back to
/// world x when the normal is vertical; y completes the right-handed frame.
pub fn contact_frame<T: Real>(surface: &Surface<T>, p: &Vector3<T>) -> Result<Matrix3<T>> {
    let z = surface.normal_at(p)?;
    Ok(frame_from_normal(&z))
}

pub fn frame_from_normal<T: Real>(z: &Vector3<T>) -> Matrix3<T> {
    let c = z.cross(&Vector3::z());
    let x = if c.norm() < lit(1e-9) { Vector3::x() } else { c.normalize() };
    let y = z.cross(&x);
    Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()])
}

/// `∂x/∂p`, `∂y/∂p`, `∂z/∂p` of the contact frame axes (all zero on
/// planes).
pub fn contact_frame_jacobians<T: Real>(surface: &Surface<T>, p: &Vector3<T>) -> Result<[Matrix3<T>; 3]> {
    let dz = surface.normal_jacobian(p);
    if surface.kind == SurfaceKind::Plane {
        return Ok([Matrix3::zeros(); 3]);
    }
    let z = surface.normal_at(p)?;
    let c = z.cross(&Vector3::z());
    let cn = c.norm();
    if cn < lit(1e-9) {
        return Ok([Matrix3::zeros(), Matrix3::zeros(), dz]);
    }
    let x = c / cn;
    let dc = -skew(&Vector3::<T>::z()) * dz;
    let dx = (Matrix3::identity() - x * x.transpose()) * dc / cn;
    let dy = -skew(&x) * dz + skew(&z) * dx;
    Ok([dx, dy, dz])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene<T: Real> {
    pub surfaces: Vec<Surface<T>>,
    pub gravity: Vector3<T>,
    /// Per leg, the indices of surfaces the leg may touch.
    pub candidate_map: Vec<Vec<usize>>,
}

impl<T: Real> Scene<T> {
    pub fn validate(&self, n_legs: usize) -> Result<()> {
        if self.surfaces.is_empty() {
            return Err(Error::InvalidScene("scene has no surfaces".into()));
        }
        for s in &self.surfaces {
            s.validate()?;
        }
        if !(self.gravity.norm() > T::zero()) {
            return Err(Error::InvalidScene("gravity must be nonzero".into()));
        }
        if self.candidate_map.len() != n_legs {
            return Err(Error::InvalidScene(format!(
                "candidate map covers {} legs, robot has {n_legs}",
                self.candidate_map.len()
            )));
        }
        for (leg, cands) in self.candidate_map.iter().enumerate() {
            if cands.is_empty() {
                return Err(Error::InvalidScene(format!("leg {leg} has no candidate surface")));
            }
            if let Some(&bad) = cands.iter().find(|&&s| s >= self.surfaces.len()) {
                return Err(Error::InvalidScene(format!("leg {leg} lists unknown surface {bad}")));
            }
            let mut sorted = cands.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != cands.len() {
                return Err(Error::InvalidScene(format!("leg {leg} lists a surface twice")));
            }
        }
        Ok(())
    }

    pub fn pair_count(&self) -> usize {
        self.candidate_map.iter().map(Vec::len).sum()
    }

    /// Index of the first surface with the given name.
    pub fn surface_index(&self, name: &str) -> Option<usize> {
        self.surfaces.iter().position(|s| s.name == name)
    }
}

pub const SCENARIOS: [&str; 5] = ["parallel_wall", "parallel_wall_steps", "parallel_wall_incline", "tube_exit", "flat_ground"];

/// Geometric parameters of the bundled scenarios (SI units).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioParams<T: Real> {
    pub wall_distance: T,
    pub wall_friction: T,
    pub ground_friction: T,
    pub brick_height: T,
    pub brick_length: T,
    pub brick_depth: T,
    pub brick_friction: T,
    pub incline_angle: T,
    pub incline_run: T,
    pub incline_friction: T,
    pub tube_radius: T,
    pub tube_height: T,
    pub tube_friction: T,
    pub platform_friction: T,
}

impl<T: Real> Default for ScenarioParams<T> {
    fn default() -> Self {
        Self {
            wall_distance: lit(1.23),
            wall_friction: lit(1.0),
            ground_friction: lit(0.8),
            brick_height: lit(0.15),
            brick_length: lit(0.2),
            brick_depth: lit(0.15),
            brick_friction: lit(0.4),
            incline_angle: lit(20f64.to_radians()),
            incline_run: lit(0.3),
            incline_friction: lit(0.8),
            tube_radius: lit(0.615),
            tube_height: lit(0.45),
            tube_friction: lit(1.0),
            platform_friction: lit(0.8),
        }
    }
}

impl<T: Real> ScenarioParams<T> {
    pub const KEYS: [&'static str; 14] = [
        "wall_distance",
        "wall_friction",
        "ground_friction",
        "brick_height",
        "brick_length",
        "brick_depth",
        "brick_friction",
        "incline_angle",
        "incline_run",
        "incline_friction",
        "tube_radius",
        "tube_height",
        "tube_friction",
        "platform_friction",
    ];

    pub fn set(&mut self, key: &str, value: T) -> Result<()> {
        let slot = match key {
            "wall_distance" => &mut self.wall_distance,
            "wall_friction" => &mut self.wall_friction,
            "ground_friction" => &mut self.ground_friction,
            "brick_height" => &mut self.brick_height,
            "brick_length" => &mut self.brick_length,
            "brick_depth" => &mut self.brick_depth,
            "brick_friction" => &mut self.brick_friction,
            "incline_angle" => &mut self.incline_angle,
            "incline_run" => &mut self.incline_run,
            "incline_friction" => &mut self.incline_friction,
            "tube_radius" => &mut self.tube_radius,
            "tube_height" => &mut self.tube_height,
            "tube_friction" => &mut self.tube_friction,
            "platform_friction" => &mut self.platform_friction,
            other => return Err(Error::UnknownParameter(other.to_string())),
        };
        *slot = value;
        Ok(())
    }

    pub fn from_map(map: &BTreeMap<String, T>) -> Result<Self> {
        let mut params = Self::default();
        for (k, &v) in map {
            params.set(k, v)?;
        }
        Ok(params)
    }
}

fn is_left_leg(leg: usize) -> bool {
    LEG_NAMES[leg].starts_with('L')
}

fn half_space<T: Real>(normal: [f64; 3], offset: T) -> HalfSpace<T> {
    HalfSpace { normal: Vector3::new(lit(normal[0]), lit(normal[1]), lit(normal[2])), offset }
}

/// Builds one of the bundled scenes for the six-legged layout of
/// [`crate::kinematics::RobotModel::desk_hexapod`] (legs LF, LM, LR, RF, RM,
/// RR; body x forward, left = +y).
pub fn scenario_library<T: Real>(name: &str, params: &ScenarioParams<T>) -> Result<Scene<T>> {
    let gravity = Vector3::new(T::zero(), T::zero(), lit(-9.81));
    let half = params.wall_distance * lit(0.5);
    let ground = Surface::plane("ground", Vector3::zeros(), Vector3::z(), params.ground_friction);
    let left_wall =
        Surface::plane("left_wall", Vector3::new(T::zero(), half, T::zero()), -Vector3::y(), params.wall_friction);
    let right_wall =
        Surface::plane("right_wall", Vector3::new(T::zero(), -half, T::zero()), Vector3::y(), params.wall_friction);
    let per_side = |left: Vec<usize>, right: Vec<usize>| -> Vec<Vec<usize>> {
        (0..LEG_NAMES.len()).map(|l| if is_left_leg(l) { left.clone() } else { right.clone() }).collect()
    };

    let scene = match name {
        "flat_ground" => Scene { surfaces: vec![ground], gravity, candidate_map: vec![vec![0]; LEG_NAMES.len()] },
        "parallel_wall" => Scene {
            surfaces: vec![ground, left_wall, right_wall],
            gravity,
            candidate_map: per_side(vec![0, 1], vec![0, 2]),
        },
        "parallel_wall_steps" => {
            let brick = |label: &str, x: f64| {
                let cx: T = lit(x);
                let hl = params.brick_length * lit(0.5);
                Surface::plane(label, Vector3::new(cx, half, params.brick_height), Vector3::z(), params.brick_friction)
                    .with_region(Region::new(vec![
                        half_space([1.0, 0.0, 0.0], cx + hl),
                        half_space([-1.0, 0.0, 0.0], -(cx - hl)),
                        half_space([0.0, 1.0, 0.0], half),
                        half_space([0.0, -1.0, 0.0], -(half - params.brick_depth)),
                    ]))
                    .open()
            };
            Scene {
                surfaces: vec![ground, left_wall, right_wall, brick("front_brick", 0.2), brick("rear_brick", -0.2)],
                gravity,
                candidate_map: per_side(vec![0, 1, 3, 4], vec![0, 2]),
            }
        }
        "parallel_wall_incline" => {
            let a = params.incline_angle;
            let foot = half - params.incline_run;
            let normal = Vector3::new(T::zero(), -a.sin(), a.cos());
            let incline = Surface::plane("incline", Vector3::new(T::zero(), foot, T::zero()), normal, params.incline_friction)
                .with_region(Region::new(vec![
                    half_space([1.0, 0.0, 0.0], lit(0.35)),
                    half_space([-1.0, 0.0, 0.0], lit(0.35)),
                    half_space([0.0, 1.0, 0.0], half),
                    half_space([0.0, -1.0, 0.0], -foot),
                ]))
                .open();
            Scene {
                surfaces: vec![ground, left_wall, right_wall, incline],
                gravity,
                candidate_map: per_side(vec![0, 1, 3], vec![0, 2]),
            }
        }
        "tube_exit" => {
            let r = params.tube_radius;
            let h = params.tube_height;
            let tube = Surface::cylinder(
                "tube",
                SurfaceKind::CylinderInterior,
                Vector3::zeros(),
                Vector3::z(),
                r,
                params.tube_friction,
            )
            .with_region(Region::new(vec![half_space([0.0, 0.0, 1.0], h)]))
            .open();
            let platform = |label: &str, sign: f64| {
                Surface::plane(label, Vector3::new(T::zero(), r * lit(sign), h), Vector3::z(), params.platform_friction)
                    .with_region(Region::new(vec![half_space([0.0, -sign, 0.0], -r)]))
                    .open()
            };
            Scene {
                surfaces: vec![tube, platform("left_platform", 1.0), platform("right_platform", -1.0)],
                gravity,
                candidate_map: per_side(vec![0, 1], vec![0, 2]),
            }
        }
        other => return Err(Error::UnknownScenario(other.to_string())),
    };
    Ok(scene)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tube() -> Surface<f64> {
        Surface::cylinder("tube", SurfaceKind::CylinderInterior, Vector3::zeros(), Vector3::z(), 1.0, 1.0)
    }

    #[test]
    fn ground_frame_is_identity() {
        let g = Surface::plane("g", Vector3::zeros(), Vector3::z(), 1.0);
        let f = contact_frame(&g, &Vector3::new(0.3, -2.0, 0.1)).unwrap();
        assert_relative_eq!(f, Matrix3::identity(), epsilon = 1e-15);
    }

    #[test]
    fn wall_frame_z_is_plane_normal() {
        let w = Surface::plane("w", Vector3::new(0.6, 0.0, 0.0), Vector3::new(-1.0, 0.0, 0.0), 1.0);
        let f = contact_frame(&w, &Vector3::new(0.6, 0.2, 0.3)).unwrap();
        assert_relative_eq!(f.row(2).transpose(), Vector3::new(-1.0, 0.0, 0.0), epsilon = 1e-15);
        assert_relative_eq!(f.determinant(), 1.0, epsilon = 1e-12);
        assert_relative_eq!(f * f.transpose(), Matrix3::identity(), epsilon = 1e-12);
    }

    fn distance_gradient(s: &Surface<f64>, p: &Vector3<f64>) -> Vector3<f64> {
        let h = 1e-6;
        Vector3::from_fn(|k, _| {
            let mut a = *p;
            let mut b = *p;
            a[k] += h;
            b[k] -= h;
            (signed_distance(s, &a) - signed_distance(s, &b)) / (2.0 * h)
        })
    }

    #[test]
    fn frame_jacobians_match_differences() {
        let s = tube();
        let p = Vector3::new(0.8, -0.5, 0.3);
        let jac = contact_frame_jacobians(&s, &p).unwrap();
        let h = 1e-6;
        for k in 0..3 {
            let mut a = p;
            let mut b = p;
            a[k] += h;
            b[k] -= h;
            let fd = (contact_frame(&s, &a).unwrap() - contact_frame(&s, &b).unwrap()) / (2.0 * h);
            for axis in 0..3 {
                assert_relative_eq!(jac[axis].column(k).into_owned(), fd.row(axis).transpose(), epsilon = 1e-7);
            }
        }
    }

    #[test]
    fn cylinder_frame_points_inward() {
        let s = tube();
        let phi: f64 = 0.7;
        let p = Vector3::new(phi.cos(), phi.sin(), 0.4);
        let f = contact_frame(&s, &p).unwrap();
        let z = f.row(2).transpose();
        assert_relative_eq!(z, Vector3::new(-phi.cos(), -phi.sin(), 0.0), epsilon = 1e-12);
        let g = distance_gradient(&s, &p);
        assert_relative_eq!(z, g.normalize(), epsilon = 1e-8);
        assert!(matches!(contact_frame(&s, &Vector3::new(0.0, 0.0, 2.0)), Err(Error::DegeneratePoint { .. })));
    }

    #[test]
    fn signed_distance_examples() {
        let g = Surface::plane("g", Vector3::zeros(), Vector3::z(), 1.0);
        assert_relative_eq!(signed_distance(&g, &Vector3::new(0.0, 0.0, 0.18)), 0.18);
        assert_eq!(signed_distance(&g, &Vector3::new(3.0, -1.0, 0.0)), 0.0);
        assert_relative_eq!(signed_distance(&tube(), &Vector3::new(0.9, 0.0, 0.0)), 0.1, epsilon = 1e-15);
        let ext = Surface::cylinder("c", SurfaceKind::CylinderExterior, Vector3::zeros(), Vector3::z(), 1.0, 1.0);
        assert_relative_eq!(signed_distance(&ext, &Vector3::new(0.0, 1.5, 7.0)), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn distance_gradient_is_unit_and_matches_frame() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let surfaces = vec![
            Surface::plane("p", Vector3::new(0.1, 0.2, 0.3), Vector3::new(1.0, -2.0, 0.5).normalize(), 1.0),
            tube(),
            Surface::cylinder("c", SurfaceKind::CylinderExterior, Vector3::new(1.0, 0.0, 0.0), Vector3::new(0.0, 1.0, 1.0).normalize(), 0.3, 1.0),
        ];
        for _ in 0..100 {
            let s = &surfaces[rng.random_range(0..surfaces.len())];
            let p = Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            let g = distance_gradient(s, &p);
            assert!((g.norm() - 1.0).abs() < 1e-5);
            assert!((g - s.normal_at(&p).unwrap()).norm() < 1e-5);
        }
    }

    #[test]
    fn normal_jacobian_matches_finite_differences() {
        let s = tube();
        let p = Vector3::new(0.3, -0.5, 0.2);
        let h = 1e-6;
        let j = s.normal_jacobian(&p);
        for k in 0..3 {
            let mut a = p;
            let mut b = p;
            a[k] += h;
            b[k] -= h;
            let fd = (s.normal_at(&a).unwrap() - s.normal_at(&b).unwrap()) / (2.0 * h);
            assert!((j.column(k) - fd).norm() < 1e-8);
        }
    }

    #[test]
    fn projection_lands_in_region() {
        let region = Region::new(vec![
            half_space([1.0, 0.0, 0.0], 0.3),
            half_space([-1.0, 0.0, 0.0], 0.1),
            half_space([1.0, 1.0, 0.0], 0.2),
            half_space([0.0, -1.0, 0.0], 0.5),
        ]);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..200 {
            let p = Vector3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-1.0..1.0));
            let q = region.project(&p);
            assert!(region.violation(&q) <= 1e-9);
        }
        let inside = Vector3::new(0.0, 0.0, 0.0);
        assert_eq!(region.project(&inside), inside);
    }

    #[test]
    fn projection_is_nearest_point_for_box_corner() {
        let region = Region::new(vec![half_space([1.0, 0.0, 0.0], 1.0), half_space([0.0, 1.0, 0.0], 1.0)]);
        let q = region.project(&Vector3::new(3.0, 2.0, 0.5));
        assert_relative_eq!(q, Vector3::new(1.0, 1.0, 0.5), epsilon = 1e-9);
    }

    #[test]
    fn empty_region_rejected() {
        let s = Surface::plane("bad", Vector3::zeros(), Vector3::z(), 1.0)
            .with_region(Region::new(vec![half_space([1.0, 0.0, 0.0], -1.0), half_space([-1.0, 0.0, 0.0], -1.0)]));
        assert!(matches!(s.validate(), Err(Error::InvalidScene(_))));
    }

    #[test]
    fn scenario_library_contents() {
        let p = ScenarioParams::<f64>::default();
        let pw = scenario_library("parallel_wall", &p).unwrap();
        assert_eq!(pw.surfaces.len(), 3);
        let lw = &pw.surfaces[1];
        let rw = &pw.surfaces[2];
        assert_relative_eq!(lw.origin.y - rw.origin.y, 1.23, epsilon = 1e-12);
        assert_eq!(lw.friction, 1.0);
        assert_eq!(lw.direction, -Vector3::y());
        assert_eq!(pw.candidate_map[0], vec![0, 1]);
        assert_eq!(pw.candidate_map[4], vec![0, 2]);

        let steps = scenario_library("parallel_wall_steps", &p).unwrap();
        let bricks: Vec<_> = steps.surfaces.iter().filter(|s| s.name.ends_with("brick")).collect();
        assert_eq!(bricks.len(), 2);
        assert!(bricks.iter().all(|b| b.friction < lw.friction && b.origin.y > 0.0 && !b.solid));

        let flat = scenario_library("flat_ground", &p).unwrap();
        assert_eq!(flat.surfaces.len(), 1);

        for name in SCENARIOS {
            scenario_library(name, &p).unwrap().validate(6).unwrap();
        }
        assert!(matches!(scenario_library::<f64>("moon", &p), Err(Error::UnknownScenario(_))));
    }

    #[test]
    fn incline_passes_through_its_foot() {
        let p = ScenarioParams::<f64>::default();
        let scene = scenario_library("parallel_wall_incline", &p).unwrap();
        let incline = &scene.surfaces[3];
        let top = Vector3::new(0.0, 0.615, 0.3 * 20f64.to_radians().tan());
        assert!(signed_distance(incline, &top).abs() < 1e-12);
        assert!(incline.region.contains(&top, 1e-12));
    }

    #[test]
    fn params_reject_unknown_keys() {
        let mut map = BTreeMap::new();
        map.insert("wall_distance".to_string(), 1.0);
        assert_eq!(ScenarioParams::from_map(&map).unwrap().wall_distance, 1.0);
        map.insert("bogus".to_string(), 1.0);
        assert!(matches!(ScenarioParams::from_map(&map), Err(Error::UnknownParameter(_))));
    }
}
