//! Ray/surface intersection by SDF volume rendering, the two-refraction light
//! path through a field, and the reversed-ray self-occlusion test.
//!
//! Everything is batched over rays: each sampling round gathers the new sample
//! points of every ray into one field query.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::field::{AnalyticShape, ScalarField, SCENE_HALF_EXTENT};
use crate::geometry::{intersect_plane, refract, MonitorPlane, OpticalConstants, Ray, Refraction, Vec3};

/// How the surface point along a ray is estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntersectMode {
    /// Opacity-normalized expected depth of the rendering weights.
    #[default]
    Volume,
    /// First sign change of the samples, refined by root finding.
    Surface,
}

impl std::str::FromStr for IntersectMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "volume" => Ok(Self::Volume),
            "surface" => Ok(Self::Surface),
            _ => Err(format!("unknown intersection mode '{s}' (expected volume or surface)")),
        }
    }
}

impl std::fmt::Display for IntersectMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Volume => "volume",
            Self::Surface => "surface",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub n_coarse: usize,
    pub n_importance_rounds: usize,
    pub n_importance_per_round: usize,
    /// Distance the interior ray starts past the entry point.
    pub interior_step_offset: f64,
    /// Minimum accumulated opacity for a surface to count.
    pub opacity_threshold: f64,
    pub mode: IntersectMode,
    /// Points tested on the reversed-ray segment.
    pub occlusion_samples: usize,
    /// SDF value above which a segment point counts as outside the solid.
    pub occlusion_threshold: f64,
    /// Lower bound on the sharpness of the reversed-ray render. The test is
    /// not differentiated, so it can afford a crisper surface than training.
    pub occlusion_sharpness: f64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            n_coarse: 64,
            n_importance_rounds: 4,
            n_importance_per_round: 16,
            interior_step_offset: 5e-3,
            opacity_threshold: 0.5,
            mode: IntersectMode::Volume,
            occlusion_samples: 32,
            occlusion_threshold: 1e-3,
            occlusion_sharpness: 1024.0,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.n_coarse < 2 {
            return Err("n_coarse must be at least 2".into());
        }
        if self.n_importance_rounds > 0 && self.n_importance_per_round == 0 {
            return Err("n_importance_per_round must be positive".into());
        }
        if !(self.interior_step_offset >= 0.0) || !(self.opacity_threshold >= 0.0) {
            return Err("offsets and thresholds must be non-negative".into());
        }
        if self.occlusion_samples == 0 {
            return Err("occlusion_samples must be positive".into());
        }
        Ok(())
    }

    /// Samples per traced ray.
    pub fn samples_per_ray(&self) -> usize {
        self.n_coarse + self.n_importance_rounds * self.n_importance_per_round
    }
}

/// Sharpness used by importance round `r`.
pub fn importance_sharpness(round: usize) -> f64 {
    64.0 * 2f64.powi(round as i32 + 1)
}

/// Lower corner and upper corner of the scene bound.
pub fn scene_bound() -> (Vec3, Vec3) {
    (Vec3::repeat(-SCENE_HALF_EXTENT), Vec3::repeat(SCENE_HALF_EXTENT))
}

/// `ln(sigmoid(x))`, stable for large |x|.
fn log_sigmoid(x: f64) -> f64 {
    -((-x).max(0.0) + (-x.abs()).exp().ln_1p())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const WEIGHT_EPS: f64 = 1e-10;

/// Result of rendering one ray from its sorted samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RayRender {
    /// Sorted sample parameters along the ray.
    pub ts: Vec<f64>,
    /// Field values at the samples (not sign flipped).
    pub values: Vec<f64>,
    /// Per-interval weights, `ts.len() - 1` of them.
    pub weights: Vec<f64>,
    pub alphas: Vec<f64>,
    pub opacity: f64,
    /// Opacity-normalized expected depth over interval midpoints.
    pub t_hat: f64,
    pub sharpness: f64,
    pub flip: bool,
}

impl RayRender {
    /// Renders sorted samples with sharpness `s`.
    pub fn new(ts: Vec<f64>, values: Vec<f64>, s: f64, flip: bool) -> Self {
        let (alphas, weights) = interval_weights(&values, s, flip);
        let opacity: f64 = weights.iter().sum();
        let num: f64 = weights.iter().enumerate().map(|(i, w)| w * 0.5 * (ts[i] + ts[i + 1])).sum();
        let t_hat = num / opacity.max(WEIGHT_EPS);
        Self { ts, values, weights, alphas, opacity, t_hat, sharpness: s, flip }
    }

    /// Empty render for rays that never enter the scene bound.
    pub fn empty(s: f64, flip: bool) -> Self {
        Self {
            ts: Vec::new(),
            values: Vec::new(),
            weights: Vec::new(),
            alphas: Vec::new(),
            opacity: 0.0,
            t_hat: 0.0,
            sharpness: s,
            flip,
        }
    }

    /// Reverse mode: given adjoints of `t_hat` and `opacity`, returns the
    /// adjoints of the sample values and of the sharpness.
    pub fn vjp(&self, t_hat_bar: f64, opacity_bar: f64) -> (Vec<f64>, f64) {
        let n = self.values.len();
        let mut g_bar = vec![0.0; n];
        if n < 2 {
            return (g_bar, 0.0);
        }
        let m = n - 1;
        let sign = if self.flip { -1.0 } else { 1.0 };
        let s = self.sharpness;
        let w_tot = self.opacity;
        let w_bar: Vec<f64> = (0..m)
            .map(|i| {
                let mid = 0.5 * (self.ts[i] + self.ts[i + 1]);
                let dt = if w_tot > WEIGHT_EPS { (mid - self.t_hat) / w_tot } else { mid / WEIGHT_EPS };
                opacity_bar + t_hat_bar * dt
            })
            .collect();
        // suffix[i] = sum_{k>i} w_bar_k alpha_k prod_{i<j<k} (1 - alpha_j)
        let mut suffix = vec![0.0; m];
        for i in (0..m.saturating_sub(1)).rev() {
            suffix[i] = w_bar[i + 1] * self.alphas[i + 1] + (1.0 - self.alphas[i + 1]) * suffix[i + 1];
        }
        let mut a_bar = vec![0.0; n];
        let mut trans = 1.0;
        for i in 0..m {
            let alpha_bar = trans * (w_bar[i] - suffix[i]);
            let a = s * sign * self.values[i];
            let b = s * sign * self.values[i + 1];
            let r = (log_sigmoid(b) - log_sigmoid(a)).exp();
            if 1.0 - r > 0.0 {
                a_bar[i] += alpha_bar * r * sigmoid(-a);
                a_bar[i + 1] -= alpha_bar * r * sigmoid(-b);
            }
            trans *= 1.0 - self.alphas[i];
        }
        let mut s_bar = 0.0;
        for i in 0..n {
            g_bar[i] = a_bar[i] * s * sign;
            s_bar += a_bar[i] * sign * self.values[i];
        }
        (g_bar, s_bar)
    }
}

/// Per-interval opacity and weights for sorted samples.
pub fn interval_weights(values: &[f64], s: f64, flip: bool) -> (Vec<f64>, Vec<f64>) {
    let n = values.len();
    if n < 2 {
        return (Vec::new(), Vec::new());
    }
    let sign = if flip { -1.0 } else { 1.0 };
    let mut alphas = Vec::with_capacity(n - 1);
    let mut weights = Vec::with_capacity(n - 1);
    let mut trans = 1.0;
    let mut la = log_sigmoid(s * sign * values[0]);
    for i in 0..n - 1 {
        let lb = log_sigmoid(s * sign * values[i + 1]);
        let alpha = (1.0 - (lb - la).exp()).max(0.0);
        alphas.push(alpha);
        weights.push(alpha * trans);
        trans *= 1.0 - alpha;
        la = lb;
    }
    (alphas, weights)
}

/// A surface crossing found by root finding in [`IntersectMode::Surface`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Root {
    pub t: f64,
    /// Index of the bracketing sample interval.
    pub interval: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceHit {
    pub t_hat: f64,
    pub point: Vec3,
    /// Normalized field gradient at `point`.
    pub normal: Vec3,
    /// Raw field gradient at `point`.
    pub gradient: Vec3,
    pub render: RayRender,
    pub root: Option<Root>,
}

impl SurfaceHit {
    pub fn opacity(&self) -> f64 {
        self.render.opacity
    }
}

/// No surface along the ray; the render is kept for the mask term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoSurface {
    pub render: RayRender,
}

pub type Intersection = Result<SurfaceHit, NoSurface>;

pub fn render_of(x: &Intersection) -> &RayRender {
    match x {
        Ok(h) => &h.render,
        Err(n) => &n.render,
    }
}

/// Sorted sample parameters and values of each ray, coarse then importance.
fn sample_rays<F: ScalarField + ?Sized>(
    field: &F,
    rays: &[Ray],
    ranges: &[Option<(f64, f64)>],
    cfg: &SamplingConfig,
    flip: bool,
) -> Vec<(Vec<f64>, Vec<f64>)> {
    let mut samples: Vec<(Vec<f64>, Vec<f64>)> = vec![(Vec::new(), Vec::new()); rays.len()];
    let mut pts = Vec::new();
    let mut owners = Vec::new();
    for (k, (ray, range)) in rays.iter().zip(ranges).enumerate() {
        if let Some((near, far)) = range {
            let n = cfg.n_coarse;
            for j in 0..n {
                let t = near + (far - near) * j as f64 / (n - 1) as f64;
                samples[k].0.push(t);
                pts.push(ray.at(t));
                owners.push(k);
            }
        }
    }
    let vals = field.values(&pts);
    for (k, v) in owners.iter().zip(vals) {
        samples[*k].1.push(v);
    }
    for round in 0..cfg.n_importance_rounds {
        let s = importance_sharpness(round);
        let mut new_t: Vec<Vec<f64>> = vec![Vec::new(); rays.len()];
        pts.clear();
        owners.clear();
        for (k, (ts, vs)) in samples.iter().enumerate() {
            if ts.len() < 2 {
                continue;
            }
            let (_, w) = interval_weights(vs, s, flip);
            new_t[k] = inverse_cdf(ts, &w, cfg.n_importance_per_round);
            for &t in &new_t[k] {
                pts.push(rays[k].at(t));
                owners.push(k);
            }
        }
        let vals = field.values(&pts);
        let mut cursor = 0;
        for (k, ts_new) in new_t.into_iter().enumerate() {
            if ts_new.is_empty() {
                continue;
            }
            let vs_new = &vals[cursor..cursor + ts_new.len()];
            cursor += ts_new.len();
            let (ts, vs) = &mut samples[k];
            let mut merged: Vec<(f64, f64)> = ts.iter().copied().zip(vs.iter().copied()).collect();
            merged.extend(ts_new.iter().copied().zip(vs_new.iter().copied()));
            merged.sort_by(|a, b| a.0.total_cmp(&b.0));
            *ts = merged.iter().map(|p| p.0).collect();
            *vs = merged.iter().map(|p| p.1).collect();
        }
    }
    samples
}

/// Deterministic inverse-CDF draws at the `count` stratum centers.
fn inverse_cdf(ts: &[f64], weights: &[f64], count: usize) -> Vec<f64> {
    let pdf: Vec<f64> = weights.iter().map(|w| w + 1e-5).collect();
    let total: f64 = pdf.iter().sum();
    let mut out = Vec::with_capacity(count);
    let mut i = 0;
    let mut acc = 0.0;
    for j in 0..count {
        let u = (j as f64 + 0.5) / count as f64 * total;
        while i + 1 < pdf.len() && acc + pdf[i] < u {
            acc += pdf[i];
            i += 1;
        }
        let frac = ((u - acc) / pdf[i]).clamp(0.0, 1.0);
        out.push(ts[i] + frac * (ts[i + 1] - ts[i]));
    }
    out
}

/// Regula falsi (Illinois variant) on the brackets, all rays in lockstep.
/// Each bracket is `(ta, fa, tb, fb)` with the signed values `fa > 0 >= fb`.
pub(crate) fn refine_roots<F: ScalarField + ?Sized>(
    field: &F,
    rays: &[Ray],
    brackets: &mut [Option<(f64, f64, f64, f64)>],
    sign: f64,
) -> Vec<Option<f64>> {
    let mut result: Vec<Option<f64>> = brackets.iter().map(|b| b.map(|b| b.2)).collect();
    let mut side = vec![0i8; rays.len()];
    for _ in 0..80 {
        let active: Vec<usize> = (0..rays.len())
            .filter(|&k| matches!(brackets[k], Some((ta, _, tb, _)) if tb - ta > 1e-13))
            .collect();
        if active.is_empty() {
            break;
        }
        let mids: Vec<f64> = active
            .iter()
            .map(|&k| {
                let (ta, fa, tb, fb) = brackets[k].unwrap();
                let t = (ta * fb - tb * fa) / (fb - fa);
                if t > ta && t < tb {
                    t
                } else {
                    0.5 * (ta + tb)
                }
            })
            .collect();
        let pts: Vec<Vec3> = active.iter().zip(&mids).map(|(&k, t)| rays[k].at(*t)).collect();
        let vals = field.values(&pts);
        for ((&k, &t), v) in active.iter().zip(&mids).zip(vals) {
            let f = sign * v;
            let (ta, fa, tb, fb) = brackets[k].unwrap();
            result[k] = Some(t);
            if f == 0.0 {
                brackets[k] = Some((t, 0.0, t, 0.0));
            } else if f > 0.0 {
                let fb = if side[k] == 1 { fb * 0.5 } else { fb };
                side[k] = 1;
                brackets[k] = Some((t, f, tb, fb));
            } else {
                let fa = if side[k] == -1 { fa * 0.5 } else { fa };
                side[k] = -1;
                brackets[k] = Some((ta, fa, t, f));
            }
        }
    }
    result
}

/// Ray parameter range inside the scene bound, optionally capped at `t_max`.
fn ray_range(ray: &Ray, t_max: Option<f64>) -> Option<(f64, f64)> {
    let (lo, hi) = scene_bound();
    let (near, far) = ray.box_interval(&lo, &hi)?;
    let far = t_max.map_or(far, |m| far.min(m));
    (far > near).then_some((near, far))
}

/// Volume-rendered first-surface intersection for a batch of rays.
///
/// `sharpness` is the `s` of the logistic density used by the final weights.
/// With `flip_sign` the field is negated, so a ray leaving the solid from the
/// inside sees an outside-to-inside profile.
pub fn volume_intersect_batch<F: ScalarField + ?Sized>(
    field: &F,
    sharpness: f64,
    rays: &[Ray],
    cfg: &SamplingConfig,
    flip_sign: bool,
) -> Vec<Intersection> {
    volume_intersect_capped(field, sharpness, rays, &vec![None; rays.len()], cfg, flip_sign)
}

fn volume_intersect_capped<F: ScalarField + ?Sized>(
    field: &F,
    sharpness: f64,
    rays: &[Ray],
    caps: &[Option<f64>],
    cfg: &SamplingConfig,
    flip_sign: bool,
) -> Vec<Intersection> {
    let ranges: Vec<Option<(f64, f64)>> = rays.iter().zip(caps).map(|(r, c)| ray_range(r, *c)).collect();
    let samples = sample_rays(field, rays, &ranges, cfg, flip_sign);
    let renders: Vec<RayRender> = samples
        .into_iter()
        .map(|(ts, vs)| {
            if ts.len() < 2 {
                RayRender::empty(sharpness, flip_sign)
            } else {
                RayRender::new(ts, vs, sharpness, flip_sign)
            }
        })
        .collect();
    finish_hits(field, rays, renders, cfg)
}

/// Turns renders into hits: picks the surface parameter and queries the
/// gradient there.
fn finish_hits<F: ScalarField + ?Sized>(
    field: &F,
    rays: &[Ray],
    renders: Vec<RayRender>,
    cfg: &SamplingConfig,
) -> Vec<Intersection> {
    let roots = match cfg.mode {
        IntersectMode::Volume => vec![None; rays.len()],
        IntersectMode::Surface => {
            let mut brackets: Vec<Option<(f64, f64, f64, f64)>> = renders.iter().map(first_crossing).collect();
            let intervals: Vec<Option<usize>> = renders.iter().map(first_crossing_index).collect();
            let sign = if renders.first().is_some_and(|r| r.flip) { -1.0 } else { 1.0 };
            let ts = refine_roots(field, rays, &mut brackets, sign);
            ts.into_iter()
                .zip(intervals)
                .map(|(t, i)| Some(Root { t: t?, interval: i? }))
                .collect()
        }
    };
    let mut surface_t = Vec::with_capacity(rays.len());
    for (r, root) in renders.iter().zip(&roots) {
        let found = match cfg.mode {
            IntersectMode::Volume => r.opacity >= cfg.opacity_threshold && r.opacity > 0.0,
            IntersectMode::Surface => root.is_some(),
        };
        surface_t.push(found.then(|| root.map_or(r.t_hat, |x| x.t)));
    }
    let pts: Vec<Vec3> = surface_t.iter().zip(rays).filter_map(|(t, ray)| t.map(|t| ray.at(t))).collect();
    let mut grads = field.evaluate_batch(&pts).into_iter();
    renders
        .into_iter()
        .zip(surface_t)
        .zip(roots)
        .zip(rays)
        .map(|(((render, t), root), ray)| match t {
            None => Err(NoSurface { render }),
            Some(t) => {
                let (_, g) = grads.next().unwrap();
                let len = g.norm();
                if !(len > 1e-12) || !len.is_finite() {
                    return Err(NoSurface { render });
                }
                Ok(SurfaceHit { t_hat: t, point: ray.at(t), normal: g / len, gradient: g, render, root })
            }
        })
        .collect()
}

fn first_crossing_index(r: &RayRender) -> Option<usize> {
    let sign = if r.flip { -1.0 } else { 1.0 };
    (0..r.values.len().saturating_sub(1)).find(|&i| sign * r.values[i] > 0.0 && sign * r.values[i + 1] <= 0.0)
}

fn first_crossing(r: &RayRender) -> Option<(f64, f64, f64, f64)> {
    let sign = if r.flip { -1.0 } else { 1.0 };
    first_crossing_index(r).map(|i| (r.ts[i], sign * r.values[i], r.ts[i + 1], sign * r.values[i + 1]))
}

/// Single-ray form of [`volume_intersect_batch`].
pub fn volume_intersect<F: ScalarField + ?Sized>(
    field: &F,
    sharpness: f64,
    ray: &Ray,
    cfg: &SamplingConfig,
    flip_sign: bool,
) -> Intersection {
    volume_intersect_batch(field, sharpness, std::slice::from_ref(ray), cfg, flip_sign).pop().unwrap()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PathStatus {
    ValidTwoBounce,
    Miss,
    #[serde(rename = "TIRExit")]
    TirExit,
    SelfOccluded,
    LowOpacity,
}

impl PathStatus {
    pub fn tag(&self) -> &'static str {
        match self {
            Self::ValidTwoBounce => "ValidTwoBounce",
            Self::Miss => "Miss",
            Self::TirExit => "TIRExit",
            Self::SelfOccluded => "SelfOccluded",
            Self::LowOpacity => "LowOpacity",
        }
    }
}

/// Simulated path camera -> entry -> exit -> monitor.
#[derive(Debug, Clone, PartialEq)]
pub struct RefractionPath {
    pub ray: Ray,
    pub entry: Intersection,
    pub dir_interior: Option<Vec3>,
    /// Interior ray: starts just past the entry point.
    pub interior: Option<Ray>,
    pub exit: Option<Intersection>,
    pub dir_out: Option<Vec3>,
    /// Parameter of the monitor hit along the outgoing ray.
    pub plane_t: Option<f64>,
    pub q_virtual: Option<Vec3>,
    pub status: PathStatus,
}

impl RefractionPath {
    pub fn entry_hit(&self) -> Option<&SurfaceHit> {
        self.entry.as_ref().ok()
    }

    pub fn exit_hit(&self) -> Option<&SurfaceHit> {
        self.exit.as_ref().and_then(|e| e.as_ref().ok())
    }

    /// Text dump, one event per line.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        let v = |p: &Vec3| format!("{:.9} {:.9} {:.9}", p.x, p.y, p.z);
        if let Some(h) = self.entry_hit() {
            let _ = writeln!(s, "ENTRY {} {}", v(&h.point), v(&h.normal));
        }
        if let Some(h) = self.exit_hit() {
            let _ = writeln!(s, "EXIT {} {}", v(&h.point), v(&h.normal));
        }
        if let Some(q) = &self.q_virtual {
            let _ = writeln!(s, "Q {}", v(q));
        }
        let _ = writeln!(s, "STATUS {}", self.status.tag());
        s
    }
}

/// Traces camera rays through two refractions and onto the monitor.
/// `SelfOccluded` is never set here; see [`check_self_occlusion_batch`].
pub fn trace_two_bounce_batch<F: ScalarField + ?Sized>(
    field: &F,
    sharpness: f64,
    rays: &[Ray],
    plane: &MonitorPlane,
    constants: &OpticalConstants,
    cfg: &SamplingConfig,
) -> Vec<RefractionPath> {
    trace_two_bounce_multi(field, sharpness, rays, &vec![*plane; rays.len()], constants, cfg)
}

/// Like [`trace_two_bounce_batch`] with one monitor plane per ray.
pub fn trace_two_bounce_multi<F: ScalarField + ?Sized>(
    field: &F,
    sharpness: f64,
    rays: &[Ray],
    planes: &[MonitorPlane],
    constants: &OpticalConstants,
    cfg: &SamplingConfig,
) -> Vec<RefractionPath> {
    assert_eq!(rays.len(), planes.len());
    let entries = volume_intersect_batch(field, sharpness, rays, cfg, false);
    let mut paths: Vec<RefractionPath> = rays
        .iter()
        .zip(entries)
        .map(|(ray, entry)| RefractionPath {
            ray: *ray,
            status: if entry.is_ok() { PathStatus::ValidTwoBounce } else { PathStatus::Miss },
            entry,
            dir_interior: None,
            interior: None,
            exit: None,
            dir_out: None,
            plane_t: None,
            q_virtual: None,
        })
        .collect();

    let mut interior_idx = Vec::new();
    let mut interior_rays = Vec::new();
    for (k, p) in paths.iter_mut().enumerate() {
        let Ok(hit) = &p.entry else { continue };
        match refract(&p.ray.direction, &hit.normal, constants.eta_in()) {
            Ok(Refraction::Transmitted(d)) => {
                let r = Ray { origin: hit.point + cfg.interior_step_offset * d, direction: d };
                p.dir_interior = Some(d);
                p.interior = Some(r);
                interior_idx.push(k);
                interior_rays.push(r);
            }
            // grazing or back-facing normal: no usable interior ray
            _ => p.status = PathStatus::LowOpacity,
        }
    }
    let exits = volume_intersect_batch(field, sharpness, &interior_rays, cfg, true);
    for (k, exit) in interior_idx.into_iter().zip(exits) {
        let p = &mut paths[k];
        let d = p.dir_interior.unwrap();
        if let Ok(hit) = &exit {
            match refract(&d, &(-hit.normal), constants.eta_out()) {
                Ok(Refraction::Transmitted(out)) => {
                    p.dir_out = Some(out);
                    match intersect_plane(&Ray { origin: hit.point, direction: out }, &planes[k]) {
                        Some(ph) => {
                            p.plane_t = Some(ph.t);
                            p.q_virtual = Some(ph.point);
                        }
                        None => p.status = PathStatus::LowOpacity,
                    }
                }
                Ok(Refraction::TotalInternalReflection) => p.status = PathStatus::TirExit,
                Err(_) => p.status = PathStatus::LowOpacity,
            }
        } else {
            p.status = PathStatus::LowOpacity;
        }
        p.exit = Some(exit);
    }
    paths
}

pub fn trace_two_bounce<F: ScalarField + ?Sized>(
    field: &F,
    sharpness: f64,
    ray: &Ray,
    plane: &MonitorPlane,
    constants: &OpticalConstants,
    cfg: &SamplingConfig,
) -> RefractionPath {
    trace_two_bounce_batch(field, sharpness, std::slice::from_ref(ray), plane, constants, cfg).pop().unwrap()
}

/// Outcome of the reversed-ray test for one path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OcclusionCheck {
    pub occluded: bool,
    /// Surface point seen from the far point looking back, if any.
    pub back_point: Option<Vec3>,
}

/// Distance to the stand-in for the point at infinity.
pub fn far_distance() -> f64 {
    2.0 * (2.0 * SCENE_HALF_EXTENT) * 3f64.sqrt()
}

/// Reversed-ray self-occlusion test. For each `(entry point, interior
/// direction)` a far point is placed along the interior direction and traced
/// back towards the entry point; if the segment between the entry point and
/// the first surface seen from the far side leaves the solid anywhere, the
/// light crosses the surface more than twice.
pub fn check_self_occlusion_batch<F: ScalarField + ?Sized>(
    field: &F,
    sharpness: f64,
    starts: &[(Vec3, Vec3)],
    cfg: &SamplingConfig,
) -> Vec<OcclusionCheck> {
    let far = far_distance();
    let rays: Vec<Ray> = starts.iter().map(|(p, d)| Ray { origin: p + far * d, direction: -d }).collect();
    let caps = vec![Some(far); rays.len()];
    let mut back_cfg = *cfg;
    back_cfg.mode = IntersectMode::Volume;
    let s_back = sharpness.max(cfg.occlusion_sharpness);
    let backs = volume_intersect_capped(field, s_back, &rays, &caps, &back_cfg, false);
    let n_seg = cfg.occlusion_samples;
    let mut pts = Vec::with_capacity(starts.len() * n_seg);
    let mut back_points = Vec::with_capacity(starts.len());
    for ((pf, _), back) in starts.iter().zip(&backs) {
        match back {
            Ok(h) => {
                for j in 0..n_seg {
                    let u = (j + 1) as f64 / (n_seg + 1) as f64;
                    pts.push(pf + u * (h.point - pf));
                }
                back_points.push(Some(h.point));
            }
            Err(_) => back_points.push(None),
        }
    }
    let vals = field.values(&pts);
    let mut chunks = vals.chunks(n_seg);
    back_points
        .into_iter()
        .map(|bp| match bp {
            None => OcclusionCheck { occluded: true, back_point: None },
            Some(p) => {
                let seg = chunks.next().unwrap();
                OcclusionCheck { occluded: seg.iter().any(|v| *v > cfg.occlusion_threshold), back_point: Some(p) }
            }
        })
        .collect()
}

pub fn check_self_occlusion<F: ScalarField + ?Sized>(
    field: &F,
    sharpness: f64,
    entry: &SurfaceHit,
    dir_interior: &Vec3,
    cfg: &SamplingConfig,
) -> bool {
    check_self_occlusion_batch(field, sharpness, &[(entry.point, *dir_interior)], cfg)[0].occluded
}

/// Runs the occlusion check on every path that has an interior ray and marks
/// occluded ones. Returns the per-path checks (`None` where not applicable).
pub fn apply_occlusion_check<F: ScalarField + ?Sized>(
    field: &F,
    sharpness: f64,
    paths: &mut [RefractionPath],
    cfg: &SamplingConfig,
) -> Vec<Option<OcclusionCheck>> {
    let idx: Vec<usize> = (0..paths.len()).filter(|&k| paths[k].dir_interior.is_some()).collect();
    let starts: Vec<(Vec3, Vec3)> =
        idx.iter().map(|&k| (paths[k].entry_hit().unwrap().point, paths[k].dir_interior.unwrap())).collect();
    let checks = check_self_occlusion_batch(field, sharpness, &starts, cfg);
    let mut out = vec![None; paths.len()];
    for (k, c) in idx.into_iter().zip(checks) {
        if c.occluded {
            paths[k].status = PathStatus::SelfOccluded;
        }
        out[k] = Some(c);
    }
    out
}

// ---------------------------------------------------------------------------
// Exact multi-bounce reference on analytic shapes.

/// Surface tolerance of the sphere tracer.
pub const EXACT_SURFACE_TOL: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct ExactPath {
    /// Number of refractions performed.
    pub refractions: usize,
    pub tir: bool,
    /// Crossing points in order.
    pub crossings: Vec<Vec3>,
    /// Final ray after the last refraction (outside the solid), or the
    /// camera ray on a miss.
    pub final_ray: Ray,
    /// Stopped because `max_bounces` was reached while still inside.
    pub truncated: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BounceCount {
    Count(usize),
    Tir,
}

/// Marches from `x` along `d` until the signed value `sign * g` drops below the
/// tolerance. Returns the stopping parameter, or `None` on leaving the bound.
fn sphere_march(shape: &AnalyticShape, x: &Vec3, d: &Vec3, sign: f64) -> Option<f64> {
    let (lo, hi) = scene_bound();
    let ray = Ray { origin: *x, direction: *d };
    let (_, far) = ray.box_interval(&(lo.add_scalar(-0.01)), &(hi.add_scalar(0.01)))?;
    let mut t = 0.0;
    for _ in 0..100_000 {
        let g = sign * shape.value(&ray.at(t));
        if g < EXACT_SURFACE_TOL {
            return Some(t);
        }
        t += g;
        if t > far {
            return None;
        }
    }
    None
}

/// Follows a camera ray through every refraction by sphere tracing the
/// analytic SDF.
pub fn trace_exact(shape: &AnalyticShape, ray: &Ray, constants: &OpticalConstants, max_bounces: usize) -> ExactPath {
    let mut d = ray.direction;
    let (lo, hi) = scene_bound();
    let mut crossings = Vec::new();
    let Some((near, _)) = ray.box_interval(&lo.add_scalar(-0.01), &hi.add_scalar(0.01)) else {
        return ExactPath { refractions: 0, tir: false, crossings, final_ray: *ray, truncated: false };
    };
    let mut x = ray.at(near);
    let mut inside = false;
    loop {
        let sign = if inside { -1.0 } else { 1.0 };
        let Some(t) = sphere_march(shape, &x, &d, sign) else {
            return ExactPath {
                refractions: crossings.len(),
                tir: false,
                final_ray: Ray { origin: x, direction: d },
                crossings,
                truncated: inside,
            };
        };
        x += t * d;
        let (_, g) = shape.evaluate(&x);
        let n_out = g.normalize();
        // normal facing the incoming ray
        let (n, eta) = if inside { (-n_out, constants.eta_out()) } else { (n_out, constants.eta_in()) };
        let refr = if d.dot(&n) < 0.0 { refract(&d, &n, eta) } else { refract(&d, &(-n), eta) };
        match refr {
            Ok(Refraction::Transmitted(nd)) => {
                d = nd;
                inside = !inside;
                crossings.push(x);
            }
            Ok(Refraction::TotalInternalReflection) => {
                return ExactPath {
                    refractions: crossings.len(),
                    tir: true,
                    final_ray: Ray { origin: x, direction: d },
                    crossings,
                    truncated: false,
                };
            }
            Err(_) => unreachable!("normal orientation chosen to oppose the ray"),
        }
        if crossings.len() >= max_bounces {
            return ExactPath {
                refractions: crossings.len(),
                tir: false,
                final_ray: Ray { origin: x, direction: d },
                crossings,
                truncated: inside,
            };
        }
        // step clear of the surface just crossed
        let cos = d.dot(&n_out).abs().max(1e-3);
        let step = (4.0 * EXACT_SURFACE_TOL / cos).max(1e-6).min(1e-3);
        x += step * d;
    }
}

/// Number of refractions along the exact light path, or TIR.
pub fn brute_force_bounce_count(
    shape: &AnalyticShape,
    ray: &Ray,
    constants: &OpticalConstants,
    max_bounces: usize,
) -> BounceCount {
    let p = trace_exact(shape, ray, constants, max_bounces);
    if p.tir {
        BounceCount::Tir
    } else {
        BounceCount::Count(p.refractions)
    }
}
