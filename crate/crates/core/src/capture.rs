//! Synthetic turntable capture: virtual cameras, a monitor plane behind the
//! object, and exact ray-location correspondences traced on analytic shapes.
//!
//! Dataset layout: `manifest.json`, one `view_<k>.csv` per view with header
//! `u,v,mask,tag,qx,qy,qz,quv_u,quv_v`, and the ground-truth mesh `gt.obj`.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::AnalyticShape;
use crate::geometry::{intersect_plane, Camera, MonitorPlane, OpticalConstants, Ray, Vec2, Vec3};
use crate::mesh::{marching_cubes, MeshError};
use crate::tracer::{scene_bound, trace_exact};

pub const DATASET_VERSION: u32 = 1;
pub const CSV_HEADER: &str = "u,v,mask,tag,qx,qy,qz,quv_u,quv_v";

#[derive(Debug, Error)]
pub enum CaptureError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("{file}: {msg}")]
    Format { file: String, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Mesh(#[from] MeshError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigSpec {
    pub n_views: usize,
    /// Camera distance from the origin.
    pub distance: f64,
    /// Camera elevation above the xz-plane, degrees.
    pub elevation_deg: f64,
    /// Horizontal field of view, degrees.
    pub fov_deg: f64,
    pub width: u32,
    pub height: u32,
    /// Distance of the monitor plane behind the origin along the view axis.
    pub monitor_distance: f64,
    /// Fixed monitor half-size; `None` sizes it to 1.5x the exit-ray footprint.
    pub monitor_half_extent: Option<f64>,
    pub constants: OpticalConstants,
    /// Store the real landing point of multi-bounce rays as Q.
    pub corrupt_multibounce_q: bool,
    pub max_bounces: usize,
    /// Marching-cubes resolution of the exported ground-truth mesh.
    pub gt_resolution: usize,
}

impl Default for RigSpec {
    fn default() -> Self {
        Self {
            n_views: 8,
            distance: 3.0,
            elevation_deg: 20.0,
            fov_deg: 40.0,
            width: 64,
            height: 64,
            monitor_distance: 2.5,
            monitor_half_extent: None,
            constants: OpticalConstants::default(),
            corrupt_multibounce_q: false,
            max_bounces: 8,
            gt_resolution: 256,
        }
    }
}

impl RigSpec {
    pub fn validate(&self) -> Result<(), CaptureError> {
        let bad = |m: &str| Err(CaptureError::Config(m.into()));
        if self.n_views == 0 || self.width == 0 || self.height == 0 {
            return bad("views and resolution must be positive");
        }
        if self.distance <= 3f64.sqrt() {
            return bad("cameras must sit outside the scene bound");
        }
        if !(self.fov_deg > 0.0 && self.fov_deg < 180.0) {
            return bad("field of view must lie in (0, 180) degrees");
        }
        if self.monitor_distance <= 3f64.sqrt() {
            return bad("monitor must lie beyond the scene bound");
        }
        if !self.constants.is_valid() {
            return bad("indices of refraction must exceed 1 with the inside denser");
        }
        Ok(())
    }

    pub fn azimuth(&self, view: usize) -> f64 {
        std::f64::consts::TAU * view as f64 / self.n_views as f64
    }

    pub fn camera(&self, view: usize) -> Camera {
        let (az, el) = (self.azimuth(view), self.elevation_deg.to_radians());
        let eye = self.distance * Vec3::new(el.cos() * az.sin(), el.sin(), el.cos() * az.cos());
        Camera::look_at(eye, Vec3::zeros(), Vec3::y(), self.fov_deg, self.width, self.height)
    }

    /// Monitor facing the camera, `monitor_distance` behind the origin.
    pub fn monitor(&self, camera: &Camera) -> MonitorPlane {
        let axis = camera.axis();
        let right = camera.pose.rotation * Vec3::x();
        MonitorPlane::new(axis * self.monitor_distance, -axis, right)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Tag {
    TwoBounce,
    MultiBounce,
    #[serde(rename = "TIR")]
    Tir,
    Background,
}

impl Tag {
    pub fn as_str(&self) -> &'static str {
        match self {
            Tag::TwoBounce => "TwoBounce",
            Tag::MultiBounce => "MultiBounce",
            Tag::Tir => "TIR",
            Tag::Background => "Background",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "TwoBounce" => Tag::TwoBounce,
            "MultiBounce" => Tag::MultiBounce,
            "TIR" => Tag::Tir,
            "Background" => Tag::Background,
            _ => return None,
        })
    }
}

/// One pixel's observation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorrespondenceRecord {
    pub view: usize,
    pub u: u32,
    pub v: u32,
    pub mask: bool,
    pub tag: Tag,
    pub q: Option<Vec3>,
    pub q_uv: Option<Vec2>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagCounts {
    pub two_bounce: usize,
    pub multi_bounce: usize,
    pub tir: usize,
    pub background: usize,
}

impl TagCounts {
    pub fn add(&mut self, tag: Tag) {
        match tag {
            Tag::TwoBounce => self.two_bounce += 1,
            Tag::MultiBounce => self.multi_bounce += 1,
            Tag::Tir => self.tir += 1,
            Tag::Background => self.background += 1,
        }
    }

    pub fn merge(&mut self, o: &TagCounts) {
        self.two_bounce += o.two_bounce;
        self.multi_bounce += o.multi_bounce;
        self.tir += o.tir;
        self.background += o.background;
    }
}

impl std::fmt::Display for TagCounts {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "TwoBounce={} MultiBounce={} TIR={} Background={}",
            self.two_bounce, self.multi_bounce, self.tir, self.background
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewMeta {
    pub id: usize,
    pub azimuth_rad: f64,
    pub camera: Camera,
    pub monitor: MonitorPlane,
    /// Half side length of the square monitor.
    pub monitor_half_extent: f64,
    pub file: String,
    pub counts: TagCounts,
}

impl ViewMeta {
    /// Half diagonal of the monitor, the normalization length for Q.
    pub fn monitor_half_diagonal(&self) -> f64 {
        self.monitor_half_extent * std::f64::consts::SQRT_2
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub shape: AnalyticShape,
    pub rig: RigSpec,
    pub seed: u64,
    pub views: Vec<ViewMeta>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    /// Records per view, row-major over pixels.
    pub records: Vec<Vec<CorrespondenceRecord>>,
}

impl Dataset {
    pub fn ray(&self, r: &CorrespondenceRecord) -> Ray {
        self.manifest.views[r.view].camera.pixel_center_ray(r.u, r.v)
    }

    pub fn counts(&self) -> TagCounts {
        let mut c = TagCounts::default();
        for v in &self.manifest.views {
            c.merge(&v.counts);
        }
        c
    }

    pub fn all_records(&self) -> impl Iterator<Item = &CorrespondenceRecord> {
        self.records.iter().flatten()
    }
}

fn classify(shape: &AnalyticShape, rig: &RigSpec, plane: &MonitorPlane, ray: &Ray) -> (Tag, Option<Vec3>) {
    let path = trace_exact(shape, ray, &rig.constants, rig.max_bounces);
    if path.tir {
        return (Tag::Tir, None);
    }
    match path.refractions {
        0 => (Tag::Background, None),
        // an exit ray leaving away from the monitor carries no decodable Q
        2 if !path.truncated => match intersect_plane(&path.final_ray, plane) {
            Some(h) => (Tag::TwoBounce, Some(h.point)),
            None => (Tag::MultiBounce, None),
        },
        n => {
            let landing = (rig.corrupt_multibounce_q && !path.truncated && n % 2 == 0)
                .then(|| intersect_plane(&path.final_ray, plane).map(|h| h.point))
                .flatten();
            (Tag::MultiBounce, landing)
        }
    }
}

/// Traces every pixel of every view with the exact multi-bounce tracer.
pub fn simulate(shape: &AnalyticShape, rig: &RigSpec, seed: u64) -> Result<Dataset, CaptureError> {
    rig.validate()?;
    let (lo, hi) = scene_bound();
    let probe = crate::mesh::marching_cubes(shape, &lo, &hi, 16);
    if probe.is_ok_and(|m| m.vertices.iter().any(|v| v.amax() > 0.999)) {
        return Err(CaptureError::Config("shape extends to the scene bound".into()));
    }
    let mut views = Vec::with_capacity(rig.n_views);
    let mut records = Vec::with_capacity(rig.n_views);
    for k in 0..rig.n_views {
        let camera = rig.camera(k);
        let monitor = rig.monitor(&camera);
        let w = rig.width;
        let traced: Vec<(Tag, Option<Vec3>)> = (0..rig.width * rig.height)
            .into_par_iter()
            .map(|p| classify(shape, rig, &monitor, &camera.pixel_center_ray(p % w, p / w)))
            .collect();
        let mut footprint = 0.0f64;
        for (tag, q) in &traced {
            match (tag, q) {
                (_, Some(q)) => {
                    let uv = monitor.to_uv(q);
                    footprint = footprint.max(uv.x.abs()).max(uv.y.abs());
                }
                _ => {}
            }
        }
        let half = match rig.monitor_half_extent {
            Some(h) if footprint > h => {
                return Err(CaptureError::Config(format!(
                    "view {k}: exit rays reach {footprint:.4} from the monitor center, beyond its half extent {h}"
                )))
            }
            Some(h) => h,
            None => (1.5 * footprint).max(1e-3),
        };
        let mut counts = TagCounts::default();
        let recs: Vec<CorrespondenceRecord> = traced
            .into_iter()
            .enumerate()
            .map(|(p, (tag, q))| {
                counts.add(tag);
                CorrespondenceRecord {
                    view: k,
                    u: p as u32 % w,
                    v: p as u32 / w,
                    mask: tag != Tag::Background,
                    tag,
                    q,
                    q_uv: q.map(|q| monitor.to_uv(&q)),
                }
            })
            .collect();
        views.push(ViewMeta {
            id: k,
            azimuth_rad: rig.azimuth(k),
            camera,
            monitor,
            monitor_half_extent: half,
            file: format!("view_{k}.csv"),
            counts,
        });
        records.push(recs);
    }
    Ok(Dataset {
        manifest: Manifest { format_version: DATASET_VERSION, shape: shape.clone(), rig: *rig, seed, views },
        records,
    })
}

fn fmt_f(x: f64) -> String {
    format!("{x:.16e}")
}

/// Writes `manifest.json` and the per-view CSV files.
pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<(), CaptureError> {
    fs::create_dir_all(dir)?;
    let manifest = serde_json::to_string_pretty(&ds.manifest).expect("manifest serializes");
    fs::write(dir.join("manifest.json"), manifest)?;
    for (meta, recs) in ds.manifest.views.iter().zip(&ds.records) {
        let mut w = csv::Writer::from_path(dir.join(&meta.file)).map_err(|e| csv_err(&meta.file, e))?;
        w.write_record(CSV_HEADER.split(',')).map_err(|e| csv_err(&meta.file, e))?;
        for r in recs {
            let q = r.q.map_or([String::new(), String::new(), String::new()], |q| [fmt_f(q.x), fmt_f(q.y), fmt_f(q.z)]);
            let uv = r.q_uv.map_or([String::new(), String::new()], |p| [fmt_f(p.x), fmt_f(p.y)]);
            let row = [
                r.u.to_string(),
                r.v.to_string(),
                u8::from(r.mask).to_string(),
                r.tag.as_str().to_string(),
                q[0].clone(),
                q[1].clone(),
                q[2].clone(),
                uv[0].clone(),
                uv[1].clone(),
            ];
            w.write_record(&row).map_err(|e| csv_err(&meta.file, e))?;
        }
        w.flush()?;
    }
    Ok(())
}

fn csv_err(file: &str, e: csv::Error) -> CaptureError {
    CaptureError::Format { file: file.to_string(), msg: e.to_string() }
}

/// Simulates, writes the dataset and exports the ground-truth mesh.
pub fn generate_dataset(shape: &AnalyticShape, rig: &RigSpec, seed: u64, dir: &Path) -> Result<Dataset, CaptureError> {
    let ds = simulate(shape, rig, seed)?;
    write_dataset(&ds, dir)?;
    let (lo, hi) = scene_bound();
    let gt = marching_cubes(shape, &lo, &hi, rig.gt_resolution)?;
    gt.write_obj(&dir.join("gt.obj"))?;
    Ok(ds)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset, CaptureError> {
    let mpath = dir.join("manifest.json");
    let text = fs::read_to_string(&mpath)?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| CaptureError::Format {
        file: "manifest.json".into(),
        msg: format!("line {} column {}: {e}", e.line(), e.column()),
    })?;
    let version = value.get("format_version").and_then(|v| v.as_u64());
    if version != Some(DATASET_VERSION as u64) {
        return Err(CaptureError::Format {
            file: "manifest.json".into(),
            msg: format!(
                "unsupported dataset version {} (this build reads version {DATASET_VERSION})",
                version.map_or("missing".to_string(), |v| v.to_string())
            ),
        });
    }
    let manifest: Manifest = serde_json::from_value(value)
        .map_err(|e| CaptureError::Format { file: "manifest.json".into(), msg: e.to_string() })?;
    let mut records = Vec::with_capacity(manifest.views.len());
    for meta in &manifest.views {
        records.push(read_view(dir, meta, &manifest.rig)?);
    }
    Ok(Dataset { manifest, records })
}

fn read_view(dir: &Path, meta: &ViewMeta, rig: &RigSpec) -> Result<Vec<CorrespondenceRecord>, CaptureError> {
    let file = meta.file.clone();
    let ferr = |msg: String| CaptureError::Format { file: file.clone(), msg };
    let mut rd = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(dir.join(&meta.file))
        .map_err(|e| ferr(e.to_string()))?;
    let header = rd.headers().map_err(|e| ferr(e.to_string()))?.iter().collect::<Vec<_>>().join(",");
    if header != CSV_HEADER {
        return Err(ferr(format!("line 1: header '{header}', expected '{CSV_HEADER}'")));
    }
    let expected = (rig.width * rig.height) as usize;
    let mut out = Vec::with_capacity(expected);
    for row in rd.records() {
        let row = row.map_err(|e| ferr(e.to_string()))?;
        let line = row.position().map_or(0, |p| p.line());
        let at = |msg: String| ferr(format!("line {line}: {msg}"));
        if row.len() != 9 {
            return Err(at(format!("expected 9 fields, found {}", row.len())));
        }
        let int = |i: usize| row[i].parse::<u32>().map_err(|_| at(format!("bad integer '{}'", &row[i])));
        let opt = |i: usize| -> Result<Option<f64>, CaptureError> {
            if row[i].is_empty() {
                Ok(None)
            } else {
                row[i].parse::<f64>().map(Some).map_err(|_| at(format!("bad number '{}'", &row[i])))
            }
        };
        let tag = Tag::parse(&row[3]).ok_or_else(|| at(format!("unknown tag '{}'", &row[3])))?;
        let mask = match &row[2] {
            "0" => false,
            "1" => true,
            m => return Err(at(format!("bad mask '{m}'"))),
        };
        let q = match (opt(4)?, opt(5)?, opt(6)?) {
            (Some(x), Some(y), Some(z)) => Some(Vec3::new(x, y, z)),
            (None, None, None) => None,
            _ => return Err(at("partial Q".into())),
        };
        let q_uv = match (opt(7)?, opt(8)?) {
            (Some(a), Some(b)) => Some(Vec2::new(a, b)),
            (None, None) => None,
            _ => return Err(at("partial Q uv".into())),
        };
        let (u, v) = (int(0)?, int(1)?);
        if u >= rig.width || v >= rig.height {
            return Err(at(format!("pixel ({u}, {v}) outside the image")));
        }
        out.push(CorrespondenceRecord { view: meta.id, u, v, mask, tag, q, q_uv });
    }
    if out.len() != expected {
        return Err(ferr(format!("truncated: {} records, expected {expected}", out.len())));
    }
    Ok(out)
}

/// Largest distance between stored Q and an independent re-trace, over all
/// two-bounce records.
pub fn retrace_error(ds: &Dataset) -> f64 {
    let shape = &ds.manifest.shape;
    let rig = &ds.manifest.rig;
    ds.all_records()
        .filter(|r| r.tag == Tag::TwoBounce)
        .map(|r| {
            let plane = &ds.manifest.views[r.view].monitor;
            let path = trace_exact(shape, &ds.ray(r), &rig.constants, rig.max_bounces);
            match (intersect_plane(&path.final_ray, plane), r.q) {
                (Some(h), Some(q)) if path.refractions == 2 => (h.point - q).norm(),
                _ => f64::INFINITY,
            }
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_rig() -> RigSpec {
        RigSpec { width: 32, height: 32, n_views: 4, gt_resolution: 32, ..Default::default() }
    }

    #[test]
    fn sphere_has_no_multibounce() {
        let ds = simulate(&AnalyticShape::sphere(0.4), &small_rig(), 1).unwrap();
        let c = ds.counts();
        assert_eq!(c.multi_bounce, 0);
        assert_eq!(c.tir, 0);
        assert!(c.two_bounce > 0);
        for r in ds.all_records() {
            assert_eq!(r.mask, r.tag != Tag::Background);
            assert_eq!(r.q.is_some(), r.tag == Tag::TwoBounce);
            if let Some(q) = r.q {
                let m = &ds.manifest.views[r.view].monitor;
                assert!((q - m.point).dot(&m.normal).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn mask_fraction_matches_silhouette_area() {
        let rig = RigSpec { width: 128, height: 128, n_views: 1, ..Default::default() };
        let ds = simulate(&AnalyticShape::sphere(0.5), &rig, 1).unwrap();
        let frac = ds.records[0].iter().filter(|r| r.mask).count() as f64 / (128.0 * 128.0);
        // silhouette cone half-angle asin(r/d); image-plane disc radius f tan(angle)
        let f = 64.0 / (20f64.to_radians()).tan();
        let rad = f * (0.5f64 / 3.0).asin().tan();
        let want = std::f64::consts::PI * rad * rad / (128.0 * 128.0);
        assert!((frac - want).abs() < 0.02 * want, "{frac} vs {want}");
    }

    #[test]
    fn barbell_has_multibounce_band() {
        let ds = simulate(&AnalyticShape::preset("barbell").unwrap(), &small_rig(), 1).unwrap();
        assert!(ds.counts().multi_bounce > 0);
        assert!(ds.all_records().all(|r| r.tag != Tag::MultiBounce || r.q.is_none()));
        let rig = RigSpec { corrupt_multibounce_q: true, ..small_rig() };
        let bad = simulate(&AnalyticShape::preset("barbell").unwrap(), &rig, 1).unwrap();
        assert!(bad.all_records().any(|r| r.tag == Tag::MultiBounce && r.q.is_some()));
    }

    #[test]
    fn azimuths_are_uniform() {
        let rig = RigSpec { n_views: 7, ..Default::default() };
        for k in 0..7 {
            let c = rig.camera(k).center();
            let az = c.x.atan2(c.z).rem_euclid(std::f64::consts::TAU);
            let diff = (az - rig.azimuth(k)).abs();
            assert!(diff < 1e-9 || (diff - std::f64::consts::TAU).abs() < 1e-9);
            assert!(rig.camera(k).rotation_is_proper(1e-9));
        }
    }

    #[test]
    fn write_load_roundtrip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let rig = small_rig();
        let ds = generate_dataset(&AnalyticShape::preset("barbell").unwrap(), &rig, 3, dir.path()).unwrap();
        assert!(dir.path().join("gt.obj").exists());
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back, ds);
        assert!(retrace_error(&back) < 1e-7);

        let view = dir.path().join("view_2.csv");
        let text = fs::read_to_string(&view).unwrap();
        fs::write(&view, &text[..text.len() / 2]).unwrap();
        let e = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(e.contains("view_2.csv"), "{e}");

        let m = dir.path().join("manifest.json");
        let text = fs::read_to_string(&m).unwrap().replace("\"format_version\": 1", "\"format_version\": 7");
        fs::write(&m, text).unwrap();
        let e = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(e.contains("version 7") && e.contains("version 1"), "{e}");
    }
}
