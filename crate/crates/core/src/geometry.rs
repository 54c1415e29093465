//! Rays, pinhole cameras, the background monitor plane and Snell refraction.
//!
//! Everything here is a pure function of its inputs. The `*_vjp` helpers are
//! the hand-written reverse-mode derivatives used by the differentiable
//! tracer.

use nalgebra::{Isometry3, Point3, Rotation3, Translation3, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;
pub type Vec2 = Vector2<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OpticsError {
    #[error("incident direction is not opposed to the normal (cos = {0})")]
    Domain(f64),
    #[error("pixel ({0}, {1}) lies outside the {2}x{3} image")]
    OutOfBounds(f64, f64, u32, u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
}

impl Ray {
    /// Builds a ray, normalizing `direction`.
    pub fn new(origin: Vec3, direction: Vec3) -> Self {
        Self { origin, direction: direction.normalize() }
    }

    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + t * self.direction
    }

    /// Parameter interval `[t_near, t_far]` where the ray is inside the
    /// axis-aligned box, clipped to `t >= 0`.
    pub fn box_interval(&self, lo: &Vec3, hi: &Vec3) -> Option<(f64, f64)> {
        let mut t0 = 0.0_f64;
        let mut t1 = f64::INFINITY;
        for k in 0..3 {
            let d = self.direction[k];
            let o = self.origin[k];
            if d.abs() < 1e-300 {
                if o < lo[k] || o > hi[k] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / d;
            let (mut a, mut b) = ((lo[k] - o) * inv, (hi[k] - o) * inv);
            if a > b {
                std::mem::swap(&mut a, &mut b);
            }
            t0 = t0.max(a);
            t1 = t1.min(b);
        }
        (t0 < t1).then_some((t0, t1))
    }
}

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

/// Pinhole camera. Camera frame: +z forward, +x right, +y down.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub intrinsics: Intrinsics,
    /// World-from-camera rigid transform.
    pub pose: Isometry3<f64>,
    pub width: u32,
    pub height: u32,
}

impl Camera {
    /// Square-pixel camera with the given horizontal field of view.
    pub fn with_fov(fov_deg: f64, width: u32, height: u32, pose: Isometry3<f64>) -> Self {
        let f = 0.5 * width as f64 / (0.5 * fov_deg.to_radians()).tan();
        Self {
            intrinsics: Intrinsics {
                fx: f,
                fy: f,
                cx: 0.5 * width as f64,
                cy: 0.5 * height as f64,
            },
            pose,
            width,
            height,
        }
    }

    /// Camera at `eye` looking at `target`, with `up` roughly pointing up in the image.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3, fov_deg: f64, width: u32, height: u32) -> Self {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right);
        let rot = Rotation3::from_matrix_unchecked(nalgebra::Matrix3::from_columns(&[right, down, forward]));
        let pose = Isometry3::from_parts(Translation3::from(eye), UnitQuaternion::from_rotation_matrix(&rot));
        Self::with_fov(fov_deg, width, height, pose)
    }

    pub fn center(&self) -> Vec3 {
        self.pose.translation.vector
    }

    /// World-space optical axis.
    pub fn axis(&self) -> Vec3 {
        self.pose.rotation * Vec3::z()
    }

    /// Ray through continuous pixel coordinates `(u, v)`; pixel `(i, j)` has
    /// its center at `(i + 0.5, j + 0.5)`.
    pub fn pixel_ray(&self, pixel: Vec2) -> Result<Ray, OpticsError> {
        let (u, v) = (pixel.x, pixel.y);
        if !(0.0..=self.width as f64).contains(&u) || !(0.0..=self.height as f64).contains(&v) {
            return Err(OpticsError::OutOfBounds(u, v, self.width, self.height));
        }
        let k = &self.intrinsics;
        let local = Vec3::new((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0);
        Ok(Ray::new(self.center(), self.pose.rotation * local))
    }

    /// Ray through the center of integer pixel `(i, j)`.
    pub fn pixel_center_ray(&self, i: u32, j: u32) -> Ray {
        self.pixel_ray(Vec2::new(i as f64 + 0.5, j as f64 + 0.5))
            .expect("integer pixel inside image")
    }

    pub fn rotation_is_proper(&self, tol: f64) -> bool {
        let m = self.pose.rotation.to_rotation_matrix().into_inner();
        ((m.transpose() * m) - nalgebra::Matrix3::identity()).norm() < tol && (m.determinant() - 1.0).abs() < tol
    }

    /// Projects a world point to continuous pixel coordinates.
    pub fn project(&self, p: &Vec3) -> Option<Vec2> {
        let local = self.pose.inverse_transform_point(&Point3::from(*p));
        if local.z <= 0.0 {
            return None;
        }
        let k = &self.intrinsics;
        Some(Vec2::new(k.fx * local.x / local.z + k.cx, k.fy * local.y / local.z + k.cy))
    }
}

/// The background monitor. `u_axis`, `v_axis` and `normal` form an
/// orthonormal frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonitorPlane {
    pub point: Vec3,
    pub normal: Vec3,
    pub u_axis: Vec3,
    pub v_axis: Vec3,
}

impl MonitorPlane {
    /// Plane through `point` with the given normal; the in-plane axes are
    /// derived from `u_hint` by Gram-Schmidt.
    pub fn new(point: Vec3, normal: Vec3, u_hint: Vec3) -> Self {
        let normal = normal.normalize();
        let u_axis = (u_hint - normal * normal.dot(&u_hint)).normalize();
        let v_axis = normal.cross(&u_axis);
        Self { point, normal, u_axis, v_axis }
    }

    pub fn is_orthonormal(&self, tol: f64) -> bool {
        let unit = |v: &Vec3| (v.norm() - 1.0).abs() < tol;
        unit(&self.normal)
            && unit(&self.u_axis)
            && unit(&self.v_axis)
            && self.u_axis.dot(&self.v_axis).abs() < tol
            && self.u_axis.dot(&self.normal).abs() < tol
            && self.v_axis.dot(&self.normal).abs() < tol
    }

    pub fn to_uv(&self, p: &Vec3) -> Vec2 {
        let r = p - self.point;
        Vec2::new(r.dot(&self.u_axis), r.dot(&self.v_axis))
    }

    pub fn from_uv(&self, uv: &Vec2) -> Vec3 {
        self.point + uv.x * self.u_axis + uv.y * self.v_axis
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpticalConstants {
    pub ior_outside: f64,
    pub ior_inside: f64,
}

impl Default for OpticalConstants {
    fn default() -> Self {
        Self { ior_outside: 1.0003, ior_inside: 1.4723 }
    }
}

impl OpticalConstants {
    pub fn is_valid(&self) -> bool {
        self.ior_outside > 1.0 - 1e-6 && self.ior_inside > 1.0 - 1e-6 && self.ior_inside > self.ior_outside
    }

    /// Ratio for a ray entering the solid.
    pub fn eta_in(&self) -> f64 {
        self.ior_outside / self.ior_inside
    }

    /// Ratio for a ray leaving the solid.
    pub fn eta_out(&self) -> f64 {
        self.ior_inside / self.ior_outside
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Refraction {
    Transmitted(Vec3),
    TotalInternalReflection,
}

impl Refraction {
    pub fn direction(self) -> Option<Vec3> {
        match self {
            Refraction::Transmitted(d) => Some(d),
            Refraction::TotalInternalReflection => None,
        }
    }
}

/// Snell refraction of unit `incident` at a surface with unit `normal`
/// facing the incoming ray (`incident . normal < 0`). `eta` is
/// `n_incident / n_transmitted`.
pub fn refract(incident: &Vec3, normal: &Vec3, eta: f64) -> Result<Refraction, OpticsError> {
    let cos_i = -incident.dot(normal);
    if cos_i <= 0.0 {
        return Err(OpticsError::Domain(-cos_i));
    }
    let k = 1.0 - eta * eta * (1.0 - cos_i * cos_i);
    if k < 0.0 {
        return Ok(Refraction::TotalInternalReflection);
    }
    Ok(Refraction::Transmitted(eta * incident + (eta * cos_i - k.sqrt()) * normal))
}

/// Reverse-mode derivative of [`refract`] for a transmitted ray: returns the
/// adjoints of `(incident, normal)` given the adjoint of the output direction.
pub fn refract_vjp(incident: &Vec3, normal: &Vec3, eta: f64, out_bar: &Vec3) -> (Vec3, Vec3) {
    let c = -incident.dot(normal);
    let r = (1.0 - eta * eta * (1.0 - c * c)).sqrt();
    let tn = out_bar.dot(normal);
    let common = -eta + eta * eta * c / r;
    let incident_bar = eta * out_bar + tn * common * normal;
    let normal_bar = (eta * c - r) * out_bar + tn * common * incident;
    (incident_bar, normal_bar)
}

/// Adjoint of `g -> g / |g|`.
pub fn normalize_vjp(g: &Vec3, out_bar: &Vec3) -> Vec3 {
    let len = g.norm();
    let n = g / len;
    (out_bar - n * n.dot(out_bar)) / len
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlaneHit {
    pub t: f64,
    pub point: Vec3,
    pub uv: Vec2,
}

/// Intersection of a ray with the monitor plane, `None` when parallel or behind.
pub fn intersect_plane(ray: &Ray, plane: &MonitorPlane) -> Option<PlaneHit> {
    let denom = ray.direction.dot(&plane.normal);
    if denom.abs() < 1e-12 {
        return None;
    }
    let t = (plane.point - ray.origin).dot(&plane.normal) / denom;
    if t <= 0.0 || !t.is_finite() {
        return None;
    }
    let point = ray.at(t);
    Some(PlaneHit { t, point, uv: plane.to_uv(&point) })
}

/// Adjoint of `intersect_plane(...).point` w.r.t. ray origin and direction.
pub fn intersect_plane_vjp(ray: &Ray, plane: &MonitorPlane, t: f64, point_bar: &Vec3) -> (Vec3, Vec3) {
    let denom = ray.direction.dot(&plane.normal);
    let qd = point_bar.dot(&ray.direction);
    let origin_bar = point_bar - qd * plane.normal / denom;
    let dir_bar = t * point_bar - qd * t * plane.normal / denom;
    (origin_bar, dir_bar)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn at_angle(theta_deg: f64) -> Vec3 {
        let th = theta_deg.to_radians();
        Vec3::new(th.sin(), 0.0, -th.cos())
    }

    #[test]
    fn normal_incidence_is_unchanged() {
        let out = refract(&Vec3::new(0.0, 0.0, -1.0), &Vec3::z(), 0.6795).unwrap();
        let d = out.direction().unwrap();
        assert!((d - Vec3::new(0.0, 0.0, -1.0)).norm() < 1e-15);
    }

    #[test]
    fn sixty_degrees_from_glass_is_tir() {
        let c = OpticalConstants::default();
        // critical angle asin(1.0003 / 1.4723) ~ 42.8 deg
        let crit = (c.ior_outside / c.ior_inside).asin().to_degrees();
        assert!(crit < 60.0 && crit > 42.0);
        let out = refract(&at_angle(60.0), &Vec3::z(), c.eta_out()).unwrap();
        assert_eq!(out, Refraction::TotalInternalReflection);
    }

    #[test]
    fn thirty_degrees_into_glass_obeys_snell() {
        let c = OpticalConstants::default();
        let eta = c.eta_in();
        let inc = at_angle(30.0);
        let t = refract(&inc, &Vec3::z(), eta).unwrap().direction().unwrap();
        let sin_t = t.cross(&Vec3::z()).norm();
        assert!((sin_t - eta * 0.5).abs() < 1e-12);
        // coplanar with incident and normal
        assert!(t.dot(&inc.cross(&Vec3::z())).abs() < 1e-12);
        assert_relative_eq!(t.norm(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn refract_rejects_wrong_orientation() {
        let r = refract(&Vec3::new(0.0, 0.0, 1.0), &Vec3::z(), 0.7);
        assert!(matches!(r, Err(OpticsError::Domain(_))));
    }

    #[test]
    fn plane_hits() {
        let plane = MonitorPlane::new(Vec3::new(0.0, 0.0, 5.0), Vec3::new(0.0, 0.0, -1.0), Vec3::x());
        let hit = intersect_plane(&Ray::new(Vec3::zeros(), Vec3::z()), &plane).unwrap();
        assert!((hit.point - Vec3::new(0.0, 0.0, 5.0)).norm() < 1e-15);
        assert!(intersect_plane(&Ray::new(Vec3::zeros(), Vec3::x()), &plane).is_none());
        assert!(intersect_plane(&Ray::new(Vec3::zeros(), -Vec3::z()), &plane).is_none());

        let oblique = Ray::new(Vec3::new(0.1, -0.2, 0.3), Vec3::new(0.3, 0.2, 1.0));
        let hit = intersect_plane(&oblique, &plane).unwrap();
        assert!((hit.point - plane.point).dot(&plane.normal).abs() < 1e-10);
        let along = hit.point - oblique.origin;
        assert!(along.cross(&oblique.direction).norm() < 1e-10);
        assert!((plane.from_uv(&hit.uv) - hit.point).norm() < 1e-12);
    }

    #[test]
    fn principal_point_ray_is_optical_axis() {
        let cam = Camera::with_fov(40.0, 64, 48, Isometry3::identity());
        let r = cam.pixel_ray(Vec2::new(32.0, 24.0)).unwrap();
        assert!((r.direction - Vec3::z()).norm() < 1e-15);
        assert!(cam.pixel_ray(Vec2::new(-1.0, 3.0)).is_err());
        assert!(cam.pixel_ray(Vec2::new(3.0, 48.5)).is_err());
    }

    #[test]
    fn adjacent_pixels_differ_by_inverse_focal() {
        let cam = Camera::look_at(Vec3::new(0.0, 0.0, 3.0), Vec3::zeros(), Vec3::y(), 40.0, 64, 64);
        let a = cam.pixel_ray(Vec2::new(32.0, 32.0)).unwrap();
        let b = cam.pixel_ray(Vec2::new(33.0, 32.0)).unwrap();
        let angle = a.direction.angle(&b.direction);
        assert!((angle - 1.0 / cam.intrinsics.fx).abs() < 1e-6);
    }

    #[test]
    fn look_at_is_proper_rotation() {
        let cam = Camera::look_at(Vec3::new(1.0, 2.0, 3.0), Vec3::zeros(), Vec3::y(), 40.0, 64, 64);
        assert!(cam.rotation_is_proper(1e-9));
        assert!((cam.axis() + Vec3::new(1.0, 2.0, 3.0).normalize()).norm() < 1e-12);
    }

    #[test]
    fn box_interval_of_unit_cube() {
        let r = Ray::new(Vec3::new(-3.0, 0.0, 0.0), Vec3::x());
        let (a, b) = r.box_interval(&Vec3::repeat(-1.0), &Vec3::repeat(1.0)).unwrap();
        assert!((a - 2.0).abs() < 1e-15 && (b - 4.0).abs() < 1e-15);
        let miss = Ray::new(Vec3::new(-3.0, 2.0, 0.0), Vec3::x());
        assert!(miss.box_interval(&Vec3::repeat(-1.0), &Vec3::repeat(1.0)).is_none());
    }

    fn fd_check<F: Fn(&Vec3, &Vec3) -> Vec3>(f: F, i: Vec3, n: Vec3, w: Vec3) -> (Vec3, Vec3) {
        let h = 1e-6;
        let mut gi = Vec3::zeros();
        let mut gn = Vec3::zeros();
        for k in 0..3 {
            let mut e = Vec3::zeros();
            e[k] = h;
            gi[k] = (w.dot(&f(&(i + e), &n)) - w.dot(&f(&(i - e), &n))) / (2.0 * h);
            gn[k] = (w.dot(&f(&i, &(n + e))) - w.dot(&f(&i, &(n - e)))) / (2.0 * h);
        }
        (gi, gn)
    }

    #[test]
    fn refract_vjp_matches_finite_differences() {
        let i = Vec3::new(0.3, -0.2, -0.9).normalize();
        let n = Vec3::new(0.1, 0.05, 1.0).normalize();
        let w = Vec3::new(0.7, -1.3, 0.4);
        let eta = 1.0 / 1.47;
        let f = |a: &Vec3, b: &Vec3| {
            // unnormalized arguments are fine for the raw formula
            let c = -a.dot(b);
            let k = 1.0 - eta * eta * (1.0 - c * c);
            eta * a + (eta * c - k.sqrt()) * b
        };
        let (gi, gn) = fd_check(f, i, n, w);
        let (ai, an) = refract_vjp(&i, &n, eta, &w);
        assert!((gi - ai).norm() < 1e-7, "{gi} {ai}");
        assert!((gn - an).norm() < 1e-7, "{gn} {an}");
    }

    #[test]
    fn plane_vjp_matches_finite_differences() {
        let plane = MonitorPlane::new(Vec3::new(0.0, 0.0, -2.5), Vec3::z(), Vec3::x());
        let o = Vec3::new(0.1, 0.2, 0.4);
        let d = Vec3::new(0.2, -0.1, -1.0).normalize();
        let w = Vec3::new(0.3, 0.9, -0.2);
        let point = |o: Vec3, d: Vec3| {
            let t = (plane.point - o).dot(&plane.normal) / d.dot(&plane.normal);
            o + t * d
        };
        let t = (plane.point - o).dot(&plane.normal) / d.dot(&plane.normal);
        let (ob, db) = intersect_plane_vjp(&Ray { origin: o, direction: d }, &plane, t, &w);
        let h = 1e-6;
        for k in 0..3 {
            let mut e = Vec3::zeros();
            e[k] = h;
            let fo = (w.dot(&point(o + e, d)) - w.dot(&point(o - e, d))) / (2.0 * h);
            let fd = (w.dot(&point(o, d + e)) - w.dot(&point(o, d - e))) / (2.0 * h);
            assert!((fo - ob[k]).abs() < 1e-7);
            assert!((fd - db[k]).abs() < 1e-7);
        }
    }
}
