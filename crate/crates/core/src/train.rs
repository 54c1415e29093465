//! Loss assembly over ray batches, the reverse pass through the traced light
//! paths, and the optimization loop.
//!
//! The reverse pass treats sample parameters, path statuses and root brackets
//! as constants of the step. [`replay_loss`] recomputes the loss under the
//! same frozen choices, which is what the gradients are exact for.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::capture::{CorrespondenceRecord, Dataset};
use crate::field::checkpoint;
use crate::field::mlp::SHARPNESS_SCALE;
use crate::field::mlp::INITIAL_SHARPNESS;
use crate::field::{init_sphere_with, AdamState, Architecture, BackwardBatch, FieldError, NeuralField, PrefitConfig, ScalarField};
use crate::geometry::{
    intersect_plane, intersect_plane_vjp, normalize_vjp, refract, refract_vjp, MonitorPlane, OpticalConstants, Ray,
    Refraction, Vec3,
};
use crate::tracer::{
    check_self_occlusion_batch, refine_roots, render_of, trace_two_bounce_multi, IntersectMode, PathStatus, RayRender,
    RefractionPath, SamplingConfig,
};

/// Opacity clamp of the mask cross entropy.
pub const MASK_EPS: f64 = 1e-4;

pub const LOG_HEADER: &str = "iter,total,refraction,eikonal,mask,n_valid,n_occluded,n_tir,n_miss,wallclock_s";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config: {0}")]
    Config(String),
    #[error("dataset has no records")]
    EmptyDataset,
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub refraction: f64,
    pub eikonal: f64,
    pub mask: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { refraction: 1e-4, eikonal: 0.1, mask: 0.1 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), TrainError> {
        if [self.refraction, self.eikonal, self.mask].iter().all(|w| *w >= 0.0 && w.is_finite()) {
            Ok(())
        } else {
            Err(TrainError::Config("loss weights must be finite and non-negative".into()))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub iterations: usize,
    pub seed: u64,
    pub learning_rate: f64,
    /// Checkpoint every this many iterations (0: only the final one).
    pub checkpoint_every: usize,
    pub enable_refraction: bool,
    pub enable_mask: bool,
    pub enable_eikonal: bool,
    pub enable_occlusion_check: bool,
    /// Fraction of each batch drawn from outside the silhouette.
    pub mask_only_fraction: f64,
    /// Eikonal points drawn per ray from its own samples; 0 uses all of them.
    pub eikonal_points_per_ray: usize,
    pub weights: LossWeights,
    pub sampling: SamplingConfig,
    pub architecture: Architecture,
    /// Radius of the sphere the network is pre-fitted to.
    pub init_radius: f64,
    /// Sharpness the field starts from.
    pub init_sharpness: f64,
    pub prefit: PrefitConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 512,
            iterations: 5000,
            seed: 1,
            learning_rate: 5e-4,
            checkpoint_every: 1000,
            enable_refraction: true,
            enable_mask: true,
            enable_eikonal: true,
            enable_occlusion_check: true,
            mask_only_fraction: 0.25,
            eikonal_points_per_ray: 8,
            weights: LossWeights::default(),
            sampling: SamplingConfig::default(),
            architecture: Architecture::default(),
            init_radius: 0.5,
            init_sharpness: INITIAL_SHARPNESS,
            prefit: PrefitConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be at least 1".into()));
        }
        if self.iterations == 0 {
            return Err(TrainError::Config("iterations must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.mask_only_fraction) {
            return Err(TrainError::Config("mask_only_fraction must lie in [0, 1]".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(TrainError::Config("learning_rate must be positive".into()));
        }
        if !(self.init_radius > 0.0 && self.init_radius < 1.0) {
            return Err(TrainError::Config("init_radius must lie in (0, 1)".into()));
        }
        if !(self.init_sharpness > 0.0 && self.init_sharpness.is_finite()) {
            return Err(TrainError::Config("init_sharpness must be positive".into()));
        }
        if self.architecture.depth == 0 || self.architecture.width == 0 {
            return Err(TrainError::Config("network depth and width must be positive".into()));
        }
        self.weights.validate()?;
        self.sampling.validate().map_err(TrainError::Config)
    }
}

/// Rays of a batch by final status.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatusCounts {
    /// Rays in the refraction set.
    pub valid: usize,
    pub miss: usize,
    pub tir: usize,
    pub occluded: usize,
    pub low_opacity: usize,
}

/// Unweighted loss terms and their weighted sum.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    pub refraction: f64,
    pub eikonal: f64,
    pub mask: f64,
}

impl LossTerms {
    fn new(w: &LossWeights, refraction: f64, eikonal: f64, mask: f64) -> Self {
        Self { total: w.refraction * refraction + w.eikonal * eikonal + w.mask * mask, refraction, eikonal, mask }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchResult {
    pub iteration: usize,
    pub loss: LossTerms,
    pub counts: StatusCounts,
    /// True if the update was skipped for non-finite values.
    pub skipped: bool,
    pub bad_rays: Vec<usize>,
}

/// Sum of squared monitor offsets.
pub fn refraction_loss(pairs: &[(Vec3, Vec3)]) -> f64 {
    pairs.iter().map(|(q, q_obs)| (q - q_obs).norm_squared()).sum()
}

/// Clamped cross entropy of one ray and its derivative in the opacity.
pub fn mask_bce(opacity: f64, mask: bool) -> (f64, f64) {
    let clamped = !(MASK_EPS..=1.0 - MASK_EPS).contains(&opacity);
    let o = opacity.clamp(MASK_EPS, 1.0 - MASK_EPS);
    let (l, d) = if mask { (-o.ln(), -1.0 / o) } else { (-(1.0 - o).ln(), 1.0 / (1.0 - o)) };
    (l, if clamped { 0.0 } else { d })
}

/// Mean clamped cross entropy.
pub fn mask_loss(opacities: &[f64], masks: &[bool]) -> f64 {
    if opacities.is_empty() {
        return 0.0;
    }
    opacities.iter().zip(masks).map(|(o, m)| mask_bce(*o, *m).0).sum::<f64>() / opacities.len() as f64
}

/// Mean of `(|grad| - 1)^2`.
pub fn eikonal_loss(gradients: &[Vec3]) -> f64 {
    if gradients.is_empty() {
        return 0.0;
    }
    gradients.iter().map(|g| (g.norm() - 1.0).powi(2)).sum::<f64>() / gradients.len() as f64
}

/// Record indices split by mask.
#[derive(Debug, Clone)]
pub struct RayPools {
    pub outside: Vec<(usize, usize)>,
    pub inside: Vec<(usize, usize)>,
}

impl RayPools {
    pub fn new(ds: &Dataset) -> Self {
        let mut outside = Vec::new();
        let mut inside = Vec::new();
        for (v, recs) in ds.records.iter().enumerate() {
            for (i, r) in recs.iter().enumerate() {
                if r.mask {
                    inside.push((v, i));
                } else {
                    outside.push((v, i));
                }
            }
        }
        Self { outside, inside }
    }
}

/// Draws `m` records with replacement: `round(m * mix)` from outside the
/// silhouette, the rest from inside it.
pub fn sample_batch(
    ds: &Dataset,
    pools: &RayPools,
    m: usize,
    rng: &mut impl Rng,
    mix: f64,
) -> Result<Vec<CorrespondenceRecord>, TrainError> {
    if pools.outside.is_empty() && pools.inside.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut n_out = (m as f64 * mix).round() as usize;
    if pools.inside.is_empty() {
        n_out = m;
    } else if pools.outside.is_empty() {
        n_out = 0;
    }
    let mut out = Vec::with_capacity(m);
    for k in 0..m {
        let pool = if k < n_out { &pools.outside } else { &pools.inside };
        let (v, i) = pool[rng.gen_range(0..pool.len())];
        out.push(ds.records[v][i]);
    }
    Ok(out)
}

/// Which trace an eikonal point comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Leg {
    Entry,
    Interior,
}

/// One ray of a traced batch with everything the reverse pass freezes.
#[derive(Debug, Clone)]
pub struct TracedRay {
    pub record: CorrespondenceRecord,
    pub path: RefractionPath,
    pub plane: MonitorPlane,
    /// Normalization length for this ray's monitor offset.
    pub occluded: bool,
    /// Member of the refraction set.
    pub in_refraction: bool,
    pub eikonal: Vec<(Leg, usize)>,
}

impl TracedRay {
    pub fn status(&self) -> PathStatus {
        self.path.status
    }
}

/// Traces a batch through the current field and fixes the refraction set and
/// the eikonal points.
pub fn trace_batch(
    field: &NeuralField,
    ds: &Dataset,
    records: &[CorrespondenceRecord],
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Vec<TracedRay> {
    let s = field.sharpness();
    let constants = ds.manifest.rig.constants;
    let rays: Vec<Ray> = records.iter().map(|r| ds.ray(r)).collect();
    let planes: Vec<MonitorPlane> = records.iter().map(|r| ds.manifest.views[r.view].monitor).collect();
    let mut paths = trace_two_bounce_multi(field, s, &rays, &planes, &constants, &cfg.sampling);

    let candidates: Vec<usize> = (0..paths.len())
        .filter(|&k| paths[k].status == PathStatus::ValidTwoBounce && records[k].q.is_some())
        .collect();
    let mut occluded = vec![false; paths.len()];
    if cfg.enable_occlusion_check && !candidates.is_empty() {
        let starts: Vec<(Vec3, Vec3)> = candidates
            .iter()
            .map(|&k| (paths[k].entry_hit().unwrap().point, paths[k].dir_interior.unwrap()))
            .collect();
        let checks = check_self_occlusion_batch(field, s, &starts, &cfg.sampling);
        for (&k, c) in candidates.iter().zip(checks) {
            if c.occluded {
                occluded[k] = true;
                paths[k].status = PathStatus::SelfOccluded;
            }
        }
    }

    paths
        .into_iter()
        .zip(records)
        .zip(planes)
        .zip(occluded)
        .map(|(((path, rec), plane), occ)| {
            let n1 = render_of(&path.entry).ts.len();
            let n2 = path.exit.as_ref().map_or(0, |e| render_of(e).ts.len());
            let total = n1 + n2;
            let pick: Vec<usize> = if !cfg.enable_eikonal || total == 0 {
                Vec::new()
            } else if cfg.eikonal_points_per_ray == 0 || cfg.eikonal_points_per_ray >= total {
                (0..total).collect()
            } else {
                let mut v = sample_indices(rng, total, cfg.eikonal_points_per_ray).into_vec();
                v.sort_unstable();
                v
            };
            let eikonal = pick.into_iter().map(|i| if i < n1 { (Leg::Entry, i) } else { (Leg::Interior, i - n1) }).collect();
            let in_refraction =
                cfg.enable_refraction && path.status == PathStatus::ValidTwoBounce && rec.q.is_some() && path.q_virtual.is_some();
            TracedRay { record: *rec, path, plane, occluded: occ, in_refraction, eikonal }
        })
        .collect()
}

pub fn status_counts(batch: &[TracedRay]) -> StatusCounts {
    let mut c = StatusCounts::default();
    for r in batch {
        if r.in_refraction {
            c.valid += 1;
        }
        match r.path.status {
            PathStatus::Miss => c.miss += 1,
            PathStatus::TirExit => c.tir += 1,
            PathStatus::SelfOccluded => c.occluded += 1,
            PathStatus::LowOpacity => c.low_opacity += 1,
            PathStatus::ValidTwoBounce => {}
        }
    }
    c
}

/// Result of the reverse pass.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub loss: LossTerms,
    /// dLoss/dparams, sharpness slot included.
    pub params: Vec<f64>,
    /// Rays whose adjoints went non-finite.
    pub bad_rays: Vec<usize>,
}

/// Drops render adjoints too small to matter relative to the ray's largest.
const PRUNE_REL: f64 = 1e-9;

fn push_samples(batch: &mut BackwardBatch, tags: &mut Vec<(usize, f64)>, k: usize, ray: &Ray, render: &RayRender, g_bar: &[f64]) {
    let gmax = g_bar.iter().fold(0.0_f64, |a, g| a.max(g.abs()));
    if gmax == 0.0 {
        return;
    }
    for (t, g) in render.ts.iter().zip(g_bar) {
        if g.abs() > PRUNE_REL * gmax {
            batch.push(ray.at(*t), *g, Vec3::zeros(), 0.0);
            tags.push((k, *t));
        }
    }
}

fn finite3(v: &Vec3) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Loss of a traced batch and its exact gradient with respect to every
/// network parameter and the sharpness.
pub fn loss_and_gradients(
    field: &NeuralField,
    batch: &[TracedRay],
    cfg: &TrainConfig,
    constants: &OpticalConstants,
) -> Gradients {
    let w = &cfg.weights;
    let m = batch.len();
    let s = field.sharpness();
    let off = cfg.sampling.interior_step_offset;
    let surface = cfg.sampling.mode == IntersectMode::Surface;
    let mut grads = vec![0.0; field.num_params()];
    let mut bad = vec![false; m];
    let mut s_bar = 0.0;

    // adjoints of the entry point, the interior direction and origin
    let mut p1_bar = vec![Vec3::zeros(); m];
    let mut dint_bar = vec![Vec3::zeros(); m];
    let mut o2_bar = vec![Vec3::zeros(); m];
    let mut p2_bar = vec![Vec3::zeros(); m];

    // refraction term, down to the exit normal
    let mut refraction = 0.0;
    let mut stage1 = BackwardBatch::with_capacity(m);
    let mut stage1_exit = Vec::new();
    for (k, r) in batch.iter().enumerate() {
        if !r.in_refraction {
            continue;
        }
        let p = &r.path;
        let exit = p.exit_hit().unwrap();
        let q = p.q_virtual.unwrap();
        let diff = q - r.record.q.unwrap();
        refraction += diff.norm_squared();
        let q_bar = diff * (2.0 * w.refraction);
        let d_int = p.dir_interior.unwrap();
        let d_out = p.dir_out.unwrap();
        let out_ray = Ray { origin: exit.point, direction: d_out };
        let (pb, dout_bar) = intersect_plane_vjp(&out_ray, &r.plane, p.plane_t.unwrap(), &q_bar);
        let (di_bar, m_bar) = refract_vjp(&d_int, &(-exit.normal), constants.eta_out(), &dout_bar);
        let g_bar = normalize_vjp(&exit.gradient, &(-m_bar));
        p2_bar[k] = pb;
        dint_bar[k] += di_bar;
        stage1.push(exit.point, 0.0, g_bar, 0.0);
        stage1_exit.push(k);
    }

    // eikonal points share the tangent pass
    let n_eik: usize = batch.iter().map(|r| r.eikonal.len()).sum();
    let eik_w = if n_eik > 0 { w.eikonal / n_eik as f64 } else { 0.0 };
    let mut eik_tags = Vec::with_capacity(n_eik);
    for (k, r) in batch.iter().enumerate() {
        for &(leg, i) in &r.eikonal {
            match leg {
                Leg::Entry => {
                    let render = render_of(&r.path.entry);
                    stage1.push(r.path.ray.at(render.ts[i]), 0.0, Vec3::zeros(), eik_w);
                    eik_tags.push(None);
                }
                Leg::Interior => {
                    let t = render_of(r.path.exit.as_ref().unwrap()).ts[i];
                    stage1.push(r.path.interior.unwrap().at(t), 0.0, Vec3::zeros(), eik_w);
                    eik_tags.push(Some((k, t)));
                }
            }
        }
    }
    let out1 = field.backward(&stage1, &mut grads, true);
    let eikonal = if out1.eikonal_count > 0 { out1.eikonal_raw_sum / out1.eikonal_count as f64 } else { 0.0 };
    for (j, &k) in stage1_exit.iter().enumerate() {
        p2_bar[k] += out1.input_bar[j];
    }
    for (j, tag) in eik_tags.iter().enumerate() {
        if let Some((k, t)) = tag {
            let xb = out1.input_bar[stage1_exit.len() + j];
            o2_bar[*k] += xb;
            dint_bar[*k] += *t * xb;
        }
    }

    // exit point back onto the interior samples
    let mut stage2 = BackwardBatch::with_capacity(m * 16);
    let mut stage2_tags = Vec::new();
    for &k in &stage1_exit {
        let r = &batch[k];
        let exit = r.path.exit_hit().unwrap();
        let interior = r.path.interior.unwrap();
        let pb = p2_bar[k];
        o2_bar[k] += pb;
        dint_bar[k] += exit.t_hat * pb;
        let t_bar = pb.dot(&interior.direction);
        if surface {
            let denom = exit.gradient.dot(&interior.direction);
            stage2.push(exit.point, -t_bar / denom, Vec3::zeros(), 0.0);
            stage2_tags.push((k, exit.t_hat));
        } else {
            let (g_bar, sb) = exit.render.vjp(t_bar, 0.0);
            s_bar += sb;
            push_samples(&mut stage2, &mut stage2_tags, k, &interior, &exit.render, &g_bar);
        }
    }
    let out2 = field.backward(&stage2, &mut grads, true);
    for ((k, t), xb) in stage2_tags.iter().zip(&out2.input_bar) {
        o2_bar[*k] += xb;
        dint_bar[*k] += *t * xb;
    }

    // interior ray back onto the entry normal
    let mut stage3 = BackwardBatch::with_capacity(m);
    let mut stage3_idx = Vec::new();
    for (k, r) in batch.iter().enumerate() {
        let (Some(_), Ok(entry)) = (r.path.dir_interior, &r.path.entry) else { continue };
        if o2_bar[k] == Vec3::zeros() && dint_bar[k] == Vec3::zeros() {
            continue;
        }
        p1_bar[k] += o2_bar[k];
        let db = dint_bar[k] + off * o2_bar[k];
        let (_, n_bar) = refract_vjp(&r.path.ray.direction, &entry.normal, constants.eta_in(), &db);
        stage3.push(entry.point, 0.0, normalize_vjp(&entry.gradient, &n_bar), 0.0);
        stage3_idx.push(k);
    }
    let out3 = field.backward(&stage3, &mut grads, true);
    for (&k, xb) in stage3_idx.iter().zip(&out3.input_bar) {
        p1_bar[k] += xb;
    }

    // entry samples: depth and opacity
    let mut mask = 0.0;
    let mut stage4 = BackwardBatch::with_capacity(m * 16);
    let mut stage4_tags = Vec::new();
    for (k, r) in batch.iter().enumerate() {
        let render = render_of(&r.path.entry);
        let mut o_bar = 0.0;
        if cfg.enable_mask {
            let (l, d) = mask_bce(render.opacity, r.record.mask);
            mask += l;
            o_bar = w.mask * d / m as f64;
        }
        let mut t_bar = 0.0;
        if let Ok(entry) = &r.path.entry {
            t_bar = p1_bar[k].dot(&r.path.ray.direction);
            if surface && t_bar != 0.0 {
                let denom = entry.gradient.dot(&r.path.ray.direction);
                stage4.push(entry.point, -t_bar / denom, Vec3::zeros(), 0.0);
                stage4_tags.push((k, entry.t_hat));
                t_bar = 0.0;
            }
        }
        if t_bar == 0.0 && o_bar == 0.0 {
            continue;
        }
        if ![t_bar, o_bar].iter().all(|x| x.is_finite()) || !finite3(&p1_bar[k]) || !finite3(&dint_bar[k]) {
            bad[k] = true;
            continue;
        }
        let (g_bar, sb) = render.vjp(t_bar, o_bar);
        s_bar += sb;
        push_samples(&mut stage4, &mut stage4_tags, k, &r.path.ray, render, &g_bar);
    }
    let mask = if m > 0 && cfg.enable_mask { mask / m as f64 } else { 0.0 };
    field.backward(&stage4, &mut grads, false);
    grads[field.sharpness_index()] += s_bar * SHARPNESS_SCALE * s;

    for (k, r) in batch.iter().enumerate() {
        let fin = finite3(&p1_bar[k]) && finite3(&dint_bar[k]) && finite3(&o2_bar[k]) && finite3(&p2_bar[k]);
        if !fin || (r.in_refraction && !r.path.q_virtual.is_some_and(|q| finite3(&q))) {
            bad[k] = true;
        }
    }
    let eikonal = if cfg.enable_eikonal { eikonal } else { 0.0 };
    let refraction = if cfg.enable_refraction { refraction } else { 0.0 };
    Gradients {
        loss: LossTerms::new(w, refraction, eikonal, mask),
        params: grads,
        bad_rays: (0..m).filter(|&k| bad[k]).collect(),
    }
}

/// Re-finds a root of the signed field inside a frozen bracket.
fn root_in(field: &NeuralField, ray: &Ray, ta: f64, tb: f64, sign: f64) -> f64 {
    let fa = sign * field.value(&ray.at(ta));
    let fb = sign * field.value(&ray.at(tb));
    if !(fa > 0.0 && fb <= 0.0) {
        return if fa.abs() < fb.abs() { ta } else { tb };
    }
    let mut br = [Some((ta, fa, tb, fb))];
    refine_roots(field, std::slice::from_ref(ray), &mut br, sign)[0].unwrap_or(tb)
}

fn surface_t(field: &NeuralField, ray: &Ray, render: &RayRender, frozen: &crate::tracer::SurfaceHit, mode: IntersectMode) -> f64 {
    match (mode, frozen.root) {
        (IntersectMode::Surface, Some(root)) => {
            let sign = if render.flip { -1.0 } else { 1.0 };
            root_in(field, ray, render.ts[root.interval], render.ts[root.interval + 1], sign)
        }
        _ => render.t_hat,
    }
}

/// Loss of a traced batch recomputed from scratch under the current
/// parameters, with the batch's samples, statuses and brackets held fixed.
pub fn replay_loss(field: &NeuralField, batch: &[TracedRay], cfg: &TrainConfig, constants: &OpticalConstants) -> LossTerms {
    let s = field.sharpness();
    let off = cfg.sampling.interior_step_offset;
    let mode = cfg.sampling.mode;
    let mut refraction = 0.0;
    let mut mask = 0.0;
    let mut eik_pts = Vec::new();
    for r in batch {
        let p = &r.path;
        let frozen1 = render_of(&p.entry);
        let v1 = field.values(&frozen1.ts.iter().map(|t| p.ray.at(*t)).collect::<Vec<_>>());
        let r1 = if frozen1.ts.len() < 2 { RayRender::empty(s, false) } else { RayRender::new(frozen1.ts.clone(), v1, s, false) };
        if cfg.enable_mask {
            mask += mask_bce(r1.opacity, r.record.mask).0;
        }
        let mut interior: Option<Ray> = None;
        let mut r2: Option<RayRender> = None;
        if let (Ok(h1), Some(_)) = (&p.entry, p.dir_interior) {
            let t1 = surface_t(field, &p.ray, &r1, h1, mode);
            let p1 = p.ray.at(t1);
            let (_, g1) = field.evaluate(&p1);
            if let Ok(Refraction::Transmitted(d_int)) = refract(&p.ray.direction, &g1.normalize(), constants.eta_in()) {
                let ray2 = Ray { origin: p1 + off * d_int, direction: d_int };
                let frozen2 = render_of(p.exit.as_ref().unwrap());
                let v2 = field.values(&frozen2.ts.iter().map(|t| ray2.at(*t)).collect::<Vec<_>>());
                let rr2 = if frozen2.ts.len() < 2 { RayRender::empty(s, true) } else { RayRender::new(frozen2.ts.clone(), v2, s, true) };
                if r.in_refraction {
                    let h2 = p.exit_hit().unwrap();
                    let t2 = surface_t(field, &ray2, &rr2, h2, mode);
                    let p2 = ray2.at(t2);
                    let (_, g2) = field.evaluate(&p2);
                    if let Ok(Refraction::Transmitted(d_out)) = refract(&d_int, &(-g2.normalize()), constants.eta_out()) {
                        if let Some(hit) = intersect_plane(&Ray { origin: p2, direction: d_out }, &r.plane) {
                            refraction += (hit.point - r.record.q.unwrap()).norm_squared();
                        }
                    }
                }
                interior = Some(ray2);
                r2 = Some(rr2);
            }
        }
        for &(leg, i) in &r.eikonal {
            match leg {
                Leg::Entry => eik_pts.push(p.ray.at(frozen1.ts[i])),
                Leg::Interior => {
                    if let (Some(ray2), Some(rr2)) = (&interior, &r2) {
                        eik_pts.push(ray2.at(rr2.ts[i]));
                    }
                }
            }
        }
    }
    let grads: Vec<Vec3> = field.evaluate_batch(&eik_pts).into_iter().map(|(_, g)| g).collect();
    let eikonal = if cfg.enable_eikonal { eikonal_loss(&grads) } else { 0.0 };
    let mask = if cfg.enable_mask && !batch.is_empty() { mask / batch.len() as f64 } else { 0.0 };
    let refraction = if cfg.enable_refraction { refraction } else { 0.0 };
    LossTerms::new(&cfg.weights, refraction, eikonal, mask)
}

/// Per-iteration generator: a function of the seed and the iteration only.
pub fn iteration_rng(seed: u64, iteration: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7a11_5eed);
    rng.set_stream(iteration as u64);
    rng
}

/// Optimization state over one dataset.
pub struct Trainer<'a> {
    pub dataset: &'a Dataset,
    pub cfg: TrainConfig,
    pub field: NeuralField,
    pub adam: AdamState,
    /// Iterations completed.
    pub iteration: usize,
    pools: RayPools,
}

impl<'a> Trainer<'a> {
    /// Fresh state: a network pre-fitted to a sphere.
    pub fn new(dataset: &'a Dataset, cfg: TrainConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        let mut field = init_sphere_with(cfg.architecture, cfg.seed, cfg.init_radius, cfg.prefit);
        field.set_sharpness(cfg.init_sharpness);
        let adam = AdamState::new(field.num_params(), cfg.learning_rate);
        Self::from_state(dataset, cfg, field, adam, 0)
    }

    pub fn from_state(
        dataset: &'a Dataset,
        cfg: TrainConfig,
        field: NeuralField,
        adam: AdamState,
        iteration: usize,
    ) -> Result<Self, TrainError> {
        cfg.validate()?;
        if field.architecture() != cfg.architecture {
            return Err(TrainError::Config("checkpoint architecture differs from the config".into()));
        }
        let pools = RayPools::new(dataset);
        if pools.inside.is_empty() && pools.outside.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        Ok(Self { dataset, cfg, field, adam, iteration, pools })
    }

    /// Batch drawn for the next iteration.
    pub fn next_batch(&self) -> Vec<CorrespondenceRecord> {
        let mut rng = iteration_rng(self.cfg.seed, self.iteration);
        sample_batch(self.dataset, &self.pools, self.cfg.batch_size, &mut rng, self.cfg.mask_only_fraction)
            .expect("pools checked non-empty")
    }

    /// One optimization step.
    pub fn step(&mut self) -> BatchResult {
        let mut rng = iteration_rng(self.cfg.seed, self.iteration);
        let records =
            sample_batch(self.dataset, &self.pools, self.cfg.batch_size, &mut rng, self.cfg.mask_only_fraction)
                .expect("pools checked non-empty");
        let constants = self.dataset.manifest.rig.constants;
        let traced = trace_batch(&self.field, self.dataset, &records, &self.cfg, &mut rng);
        let counts = status_counts(&traced);
        let g = loss_and_gradients(&self.field, &traced, &self.cfg, &constants);
        let finite = g.loss.total.is_finite() && g.params.iter().all(|x| x.is_finite());
        let iteration = self.iteration;
        self.iteration += 1;
        let mut bad_rays = g.bad_rays;
        let skipped = if !finite || !bad_rays.is_empty() {
            if bad_rays.is_empty() {
                bad_rays = (0..traced.len()).collect();
            }
            warn!("iteration {iteration}: non-finite loss or gradient, update skipped (rays {bad_rays:?})");
            true
        } else if let Err(e) = self.adam.step(self.field.params_mut(), &g.params) {
            warn!("iteration {iteration}: {e}, update skipped");
            true
        } else {
            false
        };
        BatchResult { iteration, loss: g.loss, counts, skipped, bad_rays }
    }
}

fn checkpoint_paths(dir: &Path, iteration: usize) -> (PathBuf, PathBuf) {
    (dir.join(format!("ckpt_{iteration:07}.neto")), dir.join(format!("ckpt_{iteration:07}.adam")))
}

/// Latest complete checkpoint pair in `dir`, by iteration.
pub fn latest_checkpoint(dir: &Path) -> Option<(usize, PathBuf, PathBuf)> {
    let mut best: Option<usize> = None;
    for e in fs::read_dir(dir).ok()?.flatten() {
        let name = e.file_name().to_string_lossy().into_owned();
        let Some(num) = name.strip_prefix("ckpt_").and_then(|n| n.strip_suffix(".neto")) else { continue };
        let Ok(it) = num.parse::<usize>() else { continue };
        if checkpoint_paths(dir, it).1.exists() && best.is_none_or(|b| it > b) {
            best = Some(it);
        }
    }
    best.map(|it| {
        let (a, b) = checkpoint_paths(dir, it);
        (it, a, b)
    })
}

/// Outcome of [`run`].
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub final_checkpoint: PathBuf,
    pub iterations: usize,
    pub skipped_steps: usize,
    pub last: Option<BatchResult>,
}

fn log_line(r: &BatchResult, wall: f64) -> String {
    format!(
        "{},{:.9e},{:.9e},{:.9e},{:.9e},{},{},{},{},{:.3}",
        r.iteration,
        r.loss.total,
        r.loss.refraction,
        r.loss.eikonal,
        r.loss.mask,
        r.counts.valid,
        r.counts.occluded,
        r.counts.tir,
        r.counts.miss,
        wall
    )
}

/// Keeps the header and rows with iteration below `keep`.
fn truncate_log(path: &Path, keep: usize) -> Result<(), TrainError> {
    let text = fs::read_to_string(path).unwrap_or_default();
    let mut out = String::from(LOG_HEADER);
    out.push('\n');
    for line in text.lines().skip(1) {
        if line.split(',').next().and_then(|x| x.parse::<usize>().ok()).is_some_and(|it| it < keep) {
            out.push_str(line);
            out.push('\n');
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Runs the loop to `cfg.iterations`, writing `log.csv`, periodic
/// checkpoints and `final.neto` into `out_dir`. With `resume` the latest
/// checkpoint there is picked up. `on_step` sees every result.
pub fn run(
    dataset: &Dataset,
    cfg: TrainConfig,
    out_dir: &Path,
    resume: bool,
    mut on_step: impl FnMut(&BatchResult),
) -> Result<RunSummary, TrainError> {
    cfg.validate()?;
    fs::create_dir_all(out_dir)?;
    let log_path = out_dir.join("log.csv");
    let mut trainer = match latest_checkpoint(out_dir).filter(|_| resume) {
        Some((it, f, a)) => {
            info!("resuming from iteration {it}");
            let field = checkpoint::load(&f)?;
            let adam = checkpoint::load_adam(&a)?;
            truncate_log(&log_path, it)?;
            Trainer::from_state(dataset, cfg, field, adam, it)?
        }
        None => {
            fs::write(&log_path, format!("{LOG_HEADER}\n"))?;
            Trainer::new(dataset, cfg)?
        }
    };
    let mut log = fs::OpenOptions::new().append(true).open(&log_path)?;
    let start = Instant::now();
    let mut skipped = 0;
    let mut last = None;
    while trainer.iteration < cfg.iterations {
        let r = trainer.step();
        skipped += r.skipped as usize;
        writeln!(log, "{}", log_line(&r, start.elapsed().as_secs_f64()))?;
        on_step(&r);
        if cfg.checkpoint_every > 0 && trainer.iteration % cfg.checkpoint_every == 0 {
            let (f, a) = checkpoint_paths(out_dir, trainer.iteration);
            checkpoint::save(&trainer.field, &f)?;
            checkpoint::save_adam(&trainer.adam, &a)?;
        }
        last = Some(r);
    }
    log.flush()?;
    let final_checkpoint = out_dir.join("final.neto");
    checkpoint::save(&trainer.field, &final_checkpoint)?;
    Ok(RunSummary { final_checkpoint, iterations: trainer.iteration, skipped_steps: skipped, last })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::capture::{simulate, RigSpec};
    use crate::field::AnalyticShape;

    fn tiny_dataset() -> Dataset {
        let rig = RigSpec { n_views: 2, width: 24, height: 24, ..RigSpec::default() };
        simulate(&AnalyticShape::sphere(0.4), &rig, 1).unwrap()
    }

    fn tiny_config(mode: IntersectMode) -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            architecture: Architecture::small(16),
            init_radius: 0.4,
            prefit: PrefitConfig { steps: 300, batch: 128, lr: 3e-3 },
            eikonal_points_per_ray: 6,
            weights: LossWeights { refraction: 1.0, eikonal: 0.1, mask: 0.1 },
            sampling: SamplingConfig {
                n_coarse: 24,
                n_importance_rounds: 2,
                n_importance_per_round: 8,
                mode,
                ..SamplingConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    fn gradient_check(mode: IntersectMode) {
        let ds = tiny_dataset();
        let cfg = tiny_config(mode);
        let mut field = init_sphere_with(cfg.architecture, 3, cfg.init_radius, cfg.prefit);
        field.set_sharpness(30.0);
        let pools = RayPools::new(&ds);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut recs: Vec<CorrespondenceRecord> = pools
            .inside
            .iter()
            .map(|&(v, i)| ds.records[v][i])
            .filter(|r| r.q.is_some())
            .step_by(7)
            .take(3)
            .collect();
        recs.push(ds.records[pools.outside[40].0][pools.outside[40].1]);
        let traced = trace_batch(&field, &ds, &recs, &cfg, &mut rng);
        assert!(traced.iter().filter(|r| r.in_refraction).count() >= 2);
        let c = ds.manifest.rig.constants;
        let g = loss_and_gradients(&field, &traced, &cfg, &c);
        let replay = replay_loss(&field, &traced, &cfg, &c);
        assert!((replay.total - g.loss.total).abs() < 1e-9 * (1.0 + g.loss.total.abs()), "{replay:?} {:?}", g.loss);

        let n = field.num_params();
        let mut idx: Vec<usize> = (0..n).step_by(n / 40).collect();
        idx.push(field.sharpness_index());
        let h = 1e-6;
        let (mut num, mut den) = (0.0, 0.0);
        for &i in &idx {
            let mut fp = field.clone();
            fp.params_mut()[i] += h;
            let mut fm = field.clone();
            fm.params_mut()[i] -= h;
            let fd = (replay_loss(&fp, &traced, &cfg, &c).total - replay_loss(&fm, &traced, &cfg, &c).total) / (2.0 * h);
            let a = g.params[i];
            num += (a - fd).powi(2);
            den += fd * fd;
            assert!((a - fd).abs() <= 1e-2 * fd.abs().max(a.abs()) + 1e-6, "param {i}: analytic {a} fd {fd}");
        }
        assert!((num / den).sqrt() < 1e-3, "relative error {}", (num / den).sqrt());
    }

    #[test]
    fn volume_mode_gradients_match_finite_differences() {
        gradient_check(IntersectMode::Volume);
    }

    #[test]
    fn surface_mode_gradients_match_finite_differences() {
        gradient_check(IntersectMode::Surface);
    }

    #[test]
    fn loss_term_examples() {
        assert_eq!(refraction_loss(&[(Vec3::new(1.1, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0))]), 0.010000000000000018);
        assert!((mask_bce(0.5, true).0 - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((mask_bce(1.0 - MASK_EPS, true).0 - 1.00005e-4).abs() < 1e-8);
        assert!((mask_bce(1.0 - MASK_EPS, false).0 - 9.2103).abs() < 1e-3);
        assert_eq!(eikonal_loss(&[Vec3::zeros(); 5]), 1.0);
        assert_eq!(mask_loss(&[], &[]), 0.0);
    }

    #[test]
    fn batch_sampling() {
        let ds = tiny_dataset();
        let pools = RayPools::new(&ds);
        let a = sample_batch(&ds, &pools, 512, &mut iteration_rng(5, 3), 0.25).unwrap();
        let b = sample_batch(&ds, &pools, 512, &mut iteration_rng(5, 3), 0.25).unwrap();
        assert_eq!(a.len(), 512);
        assert_eq!(a, b);
        assert_eq!(a.iter().filter(|r| !r.mask).count(), 128);
        let all_in = sample_batch(&ds, &pools, 64, &mut iteration_rng(5, 4), 0.0).unwrap();
        assert!(all_in.iter().all(|r| r.mask));
    }

    #[test]
    fn all_outside_batch_pushes_opacity_down() {
        let ds = tiny_dataset();
        let mut cfg = tiny_config(IntersectMode::Volume);
        cfg.mask_only_fraction = 1.0;
        cfg.batch_size = 16;
        cfg.learning_rate = 1e-2;
        let mut t = Trainer::new(&ds, cfg).unwrap();
        let recs = t.next_batch();
        let before = replay_loss(&t.field, &trace_batch(&t.field, &ds, &recs, &cfg, &mut iteration_rng(0, 0)), &cfg, &ds.manifest.rig.constants);
        let r = t.step();
        assert_eq!(r.loss.refraction, 0.0);
        assert_eq!(r.counts.valid, 0);
        let after = replay_loss(&t.field, &trace_batch(&t.field, &ds, &recs, &cfg, &mut iteration_rng(0, 0)), &cfg, &ds.manifest.rig.constants);
        assert!(after.mask <= before.mask, "{} -> {}", before.mask, after.mask);
    }
}
