//! Closed-form signed distance functions used as ground truth.

use serde::{Deserialize, Serialize};

use super::ScalarField;
use crate::geometry::Vec3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AnalyticShape {
    Sphere { center: [f64; 3], radius: f64 },
    /// Ring in the xz-plane around the y axis.
    Torus { center: [f64; 3], major: f64, minor: f64 },
    RoundedBox { center: [f64; 3], half_extents: [f64; 3], rounding: f64 },
    /// Union of two spheres.
    Barbell { centers: [[f64; 3]; 2], radii: [f64; 2] },
    /// Union of two capped cylinders parallel to the y axis.
    CylinderPair { centers: [[f64; 3]; 2], radius: f64, half_height: f64 },
}

pub const PRESET_NAMES: [&str; 5] = ["sphere", "torus", "box", "barbell", "legs"];

impl AnalyticShape {
    pub fn sphere(radius: f64) -> Self {
        Self::Sphere { center: [0.0; 3], radius }
    }

    pub fn torus(major: f64, minor: f64) -> Self {
        Self::Torus { center: [0.0; 3], major, minor }
    }

    /// Named shapes used by the dataset generator.
    pub fn preset(name: &str) -> Option<Self> {
        Some(match name {
            "sphere" => Self::sphere(0.4),
            "torus" => Self::torus(0.6, 0.2),
            "box" => Self::RoundedBox { center: [0.0; 3], half_extents: [0.4, 0.3, 0.35], rounding: 0.05 },
            "barbell" => Self::Barbell { centers: [[-0.45, 0.0, 0.0], [0.45, 0.0, 0.0]], radii: [0.3, 0.3] },
            "legs" | "cylinders" => {
                Self::CylinderPair { centers: [[-0.3, 0.0, 0.0], [0.3, 0.0, 0.0]], radius: 0.15, half_height: 0.5 }
            }
            _ => return None,
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Sphere { .. } => "sphere",
            Self::Torus { .. } => "torus",
            Self::RoundedBox { .. } => "box",
            Self::Barbell { .. } => "barbell",
            Self::CylinderPair { .. } => "legs",
        }
    }

    /// Whether the SDF is exact everywhere (false for min-combined unions,
    /// which are only a bound inside).
    pub fn is_exact(&self) -> bool {
        !matches!(self, Self::Barbell { .. } | Self::CylinderPair { .. })
    }
}

fn v(a: &[f64; 3]) -> Vec3 {
    Vec3::new(a[0], a[1], a[2])
}

fn sphere(x: &Vec3, c: &Vec3, r: f64) -> (f64, Vec3) {
    let d = x - c;
    let n = d.norm();
    let g = if n > 0.0 { d / n } else { Vec3::x() };
    (n - r, g)
}

fn torus(x: &Vec3, c: &Vec3, major: f64, minor: f64) -> (f64, Vec3) {
    let p = x - c;
    let rho = (p.x * p.x + p.z * p.z).sqrt();
    let qx = rho - major;
    let ql = (qx * qx + p.y * p.y).sqrt();
    let radial = if rho > 0.0 { Vec3::new(p.x / rho, 0.0, p.z / rho) } else { Vec3::x() };
    let g = if ql > 0.0 { radial * (qx / ql) + Vec3::y() * (p.y / ql) } else { Vec3::y() };
    (ql - minor, g)
}

fn rounded_box(x: &Vec3, c: &Vec3, h: &Vec3, rounding: f64) -> (f64, Vec3) {
    let p = x - c;
    let q = p.abs() - (h - Vec3::repeat(rounding));
    let outside = q.map(|e| e.max(0.0));
    let on = outside.norm();
    let sgn = p.map(|e| if e >= 0.0 { 1.0 } else { -1.0 });
    if on > 0.0 {
        (on - rounding, outside.component_mul(&sgn) / on)
    } else {
        let k = q.imax();
        let mut g = Vec3::zeros();
        g[k] = sgn[k];
        (q[k] - rounding, g)
    }
}

fn capped_cylinder(x: &Vec3, c: &Vec3, r: f64, hh: f64) -> (f64, Vec3) {
    let p = x - c;
    let rho = (p.x * p.x + p.z * p.z).sqrt();
    let radial = if rho > 0.0 { Vec3::new(p.x / rho, 0.0, p.z / rho) } else { Vec3::x() };
    let axial = Vec3::y() * if p.y >= 0.0 { 1.0 } else { -1.0 };
    let (d1, d2) = (rho - r, p.y.abs() - hh);
    if d1 > 0.0 || d2 > 0.0 {
        let (a, b) = (d1.max(0.0), d2.max(0.0));
        let len = (a * a + b * b).sqrt();
        (len, (radial * a + axial * b) / len)
    } else if d1 > d2 {
        (d1, radial)
    } else {
        (d2, axial)
    }
}

fn union(a: (f64, Vec3), b: (f64, Vec3)) -> (f64, Vec3) {
    if a.0 <= b.0 {
        a
    } else {
        b
    }
}

impl ScalarField for AnalyticShape {
    fn evaluate(&self, x: &Vec3) -> (f64, Vec3) {
        match self {
            Self::Sphere { center, radius } => sphere(x, &v(center), *radius),
            Self::Torus { center, major, minor } => torus(x, &v(center), *major, *minor),
            Self::RoundedBox { center, half_extents, rounding } => {
                rounded_box(x, &v(center), &v(half_extents), *rounding)
            }
            Self::Barbell { centers, radii } => {
                union(sphere(x, &v(&centers[0]), radii[0]), sphere(x, &v(&centers[1]), radii[1]))
            }
            Self::CylinderPair { centers, radius, half_height } => union(
                capped_cylinder(x, &v(&centers[0]), *radius, *half_height),
                capped_cylinder(x, &v(&centers[1]), *radius, *half_height),
            ),
        }
    }
}
