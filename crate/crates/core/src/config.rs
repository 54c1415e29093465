//! Flat `key = value` run configuration covering the rig, sampling, loss
//! weights, training schedule and evaluation settings.
//!
//! Later sources override earlier ones: defaults, then a file, then
//! individual `set` calls (command-line flags). [`RunConfig::to_text`] writes
//! every key, so a resolved file reproduces the run on its own.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::capture::RigSpec;
use crate::field::AnalyticShape;
use crate::mesh::{DEFAULT_EVAL_SAMPLES, DEFAULT_TAU};
use crate::train::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown config key '{0}'")]
    UnknownKey(String),
    #[error("bad value '{value}' for '{key}': {msg}")]
    Value { key: String, value: String, msg: String },
    #[error("{path}:{line}: {msg}")]
    Syntax { path: String, line: usize, msg: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Preset name of the analytic shape.
    pub shape: String,
    pub seed: u64,
    pub rig: RigSpec,
    pub train: TrainConfig,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Marching-cubes resolution for extraction.
    pub resolution: usize,
    pub tau: f64,
    pub eval_samples: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            shape: "sphere".into(),
            seed: 1,
            rig: RigSpec::default(),
            train: TrainConfig::default(),
            data: None,
            out: None,
            resolution: 128,
            tau: DEFAULT_TAU,
            eval_samples: DEFAULT_EVAL_SAMPLES,
        }
    }
}

/// Every key, in output order.
pub const KEYS: &[&str] = &[
    "shape",
    "seed",
    "data",
    "out",
    "views",
    "image_width",
    "image_height",
    "camera_distance",
    "elevation_deg",
    "fov_deg",
    "monitor_distance",
    "monitor_half_extent",
    "ior_outside",
    "ior_inside",
    "corrupt_multibounce_q",
    "max_bounces",
    "gt_resolution",
    "n_coarse",
    "n_importance_rounds",
    "n_importance_per_round",
    "interior_step_offset",
    "opacity_threshold",
    "intersect_mode",
    "occlusion_samples",
    "occlusion_threshold",
    "occlusion_sharpness",
    "w_refraction",
    "w_eikonal",
    "w_mask",
    "batch_size",
    "iterations",
    "learning_rate",
    "checkpoint_every",
    "enable_refraction",
    "enable_mask",
    "enable_eikonal",
    "enable_occlusion_check",
    "mask_only_fraction",
    "eikonal_points_per_ray",
    "net_depth",
    "net_width",
    "net_freqs",
    "init_radius",
    "init_sharpness",
    "prefit_steps",
    "prefit_batch",
    "prefit_lr",
    "resolution",
    "tau",
    "eval_samples",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse::<T>().map_err(|e| ConfigError::Value { key: key.into(), value: value.into(), msg: e.to_string() })
}

/// `auto` or a number.
fn parse_auto(key: &str, value: &str) -> Result<Option<f64>, ConfigError> {
    if value == "auto" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn parse_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty() && value != "none").then(|| PathBuf::from(value))
}

fn show_auto(v: Option<f64>) -> String {
    v.map_or("auto".into(), |x| x.to_string())
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map_or("none".into(), |p| p.display().to_string())
}

impl RunConfig {
    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let value = value.trim();
        let (r, t) = (&mut self.rig, &mut self.train);
        match key {
            "shape" => {
                if AnalyticShape::preset(value).is_none() {
                    return Err(ConfigError::Value {
                        key: key.into(),
                        value: value.into(),
                        msg: format!("expected one of {}", crate::field::analytic::PRESET_NAMES.join(", ")),
                    });
                }
                self.shape = value.into();
            }
            "seed" => {
                self.seed = parse(key, value)?;
                t.seed = self.seed;
            }
            "data" => self.data = parse_path(value),
            "out" => self.out = parse_path(value),
            "views" => r.n_views = parse(key, value)?,
            "image_width" => r.width = parse(key, value)?,
            "image_height" => r.height = parse(key, value)?,
            "camera_distance" => r.distance = parse(key, value)?,
            "elevation_deg" => r.elevation_deg = parse(key, value)?,
            "fov_deg" => r.fov_deg = parse(key, value)?,
            "monitor_distance" => r.monitor_distance = parse(key, value)?,
            "monitor_half_extent" => r.monitor_half_extent = parse_auto(key, value)?,
            "ior_outside" => r.constants.ior_outside = parse(key, value)?,
            "ior_inside" => r.constants.ior_inside = parse(key, value)?,
            "corrupt_multibounce_q" => r.corrupt_multibounce_q = parse(key, value)?,
            "max_bounces" => r.max_bounces = parse(key, value)?,
            "gt_resolution" => r.gt_resolution = parse(key, value)?,
            "n_coarse" => t.sampling.n_coarse = parse(key, value)?,
            "n_importance_rounds" => t.sampling.n_importance_rounds = parse(key, value)?,
            "n_importance_per_round" => t.sampling.n_importance_per_round = parse(key, value)?,
            "interior_step_offset" => t.sampling.interior_step_offset = parse(key, value)?,
            "opacity_threshold" => t.sampling.opacity_threshold = parse(key, value)?,
            "intersect_mode" => t.sampling.mode = parse(key, value)?,
            "occlusion_samples" => t.sampling.occlusion_samples = parse(key, value)?,
            "occlusion_threshold" => t.sampling.occlusion_threshold = parse(key, value)?,
            "occlusion_sharpness" => t.sampling.occlusion_sharpness = parse(key, value)?,
            "w_refraction" => t.weights.refraction = parse(key, value)?,
            "w_eikonal" => t.weights.eikonal = parse(key, value)?,
            "w_mask" => t.weights.mask = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "iterations" => t.iterations = parse(key, value)?,
            "learning_rate" => t.learning_rate = parse(key, value)?,
            "checkpoint_every" => t.checkpoint_every = parse(key, value)?,
            "enable_refraction" => t.enable_refraction = parse(key, value)?,
            "enable_mask" => t.enable_mask = parse(key, value)?,
            "enable_eikonal" => t.enable_eikonal = parse(key, value)?,
            "enable_occlusion_check" => t.enable_occlusion_check = parse(key, value)?,
            "mask_only_fraction" => t.mask_only_fraction = parse(key, value)?,
            "eikonal_points_per_ray" => t.eikonal_points_per_ray = parse(key, value)?,
            "net_depth" => t.architecture.depth = parse(key, value)?,
            "net_width" => t.architecture.width = parse(key, value)?,
            "net_freqs" => t.architecture.freqs = parse(key, value)?,
            "init_radius" => t.init_radius = parse(key, value)?,
            "init_sharpness" => t.init_sharpness = parse(key, value)?,
            "prefit_steps" => t.prefit.steps = parse(key, value)?,
            "prefit_batch" => t.prefit.batch = parse(key, value)?,
            "prefit_lr" => t.prefit.lr = parse(key, value)?,
            "resolution" => self.resolution = parse(key, value)?,
            "tau" => self.tau = parse(key, value)?,
            "eval_samples" => self.eval_samples = parse(key, value)?,
            _ => return Err(ConfigError::UnknownKey(key.into())),
        }
        Ok(())
    }

    /// Text form of one key.
    pub fn get(&self, key: &str) -> Option<String> {
        let (r, t) = (&self.rig, &self.train);
        Some(match key {
            "shape" => self.shape.clone(),
            "seed" => self.seed.to_string(),
            "data" => show_path(&self.data),
            "out" => show_path(&self.out),
            "views" => r.n_views.to_string(),
            "image_width" => r.width.to_string(),
            "image_height" => r.height.to_string(),
            "camera_distance" => r.distance.to_string(),
            "elevation_deg" => r.elevation_deg.to_string(),
            "fov_deg" => r.fov_deg.to_string(),
            "monitor_distance" => r.monitor_distance.to_string(),
            "monitor_half_extent" => show_auto(r.monitor_half_extent),
            "ior_outside" => r.constants.ior_outside.to_string(),
            "ior_inside" => r.constants.ior_inside.to_string(),
            "corrupt_multibounce_q" => r.corrupt_multibounce_q.to_string(),
            "max_bounces" => r.max_bounces.to_string(),
            "gt_resolution" => r.gt_resolution.to_string(),
            "n_coarse" => t.sampling.n_coarse.to_string(),
            "n_importance_rounds" => t.sampling.n_importance_rounds.to_string(),
            "n_importance_per_round" => t.sampling.n_importance_per_round.to_string(),
            "interior_step_offset" => t.sampling.interior_step_offset.to_string(),
            "opacity_threshold" => t.sampling.opacity_threshold.to_string(),
            "intersect_mode" => t.sampling.mode.to_string(),
            "occlusion_samples" => t.sampling.occlusion_samples.to_string(),
            "occlusion_threshold" => t.sampling.occlusion_threshold.to_string(),
            "occlusion_sharpness" => t.sampling.occlusion_sharpness.to_string(),
            "w_refraction" => t.weights.refraction.to_string(),
            "w_eikonal" => t.weights.eikonal.to_string(),
            "w_mask" => t.weights.mask.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "iterations" => t.iterations.to_string(),
            "learning_rate" => t.learning_rate.to_string(),
            "checkpoint_every" => t.checkpoint_every.to_string(),
            "enable_refraction" => t.enable_refraction.to_string(),
            "enable_mask" => t.enable_mask.to_string(),
            "enable_eikonal" => t.enable_eikonal.to_string(),
            "enable_occlusion_check" => t.enable_occlusion_check.to_string(),
            "mask_only_fraction" => t.mask_only_fraction.to_string(),
            "eikonal_points_per_ray" => t.eikonal_points_per_ray.to_string(),
            "net_depth" => t.architecture.depth.to_string(),
            "net_width" => t.architecture.width.to_string(),
            "net_freqs" => t.architecture.freqs.to_string(),
            "init_radius" => t.init_radius.to_string(),
            "init_sharpness" => t.init_sharpness.to_string(),
            "prefit_steps" => t.prefit.steps.to_string(),
            "prefit_batch" => t.prefit.batch.to_string(),
            "prefit_lr" => t.prefit.lr.to_string(),
            "resolution" => self.resolution.to_string(),
            "tau" => self.tau.to_string(),
            "eval_samples" => self.eval_samples.to_string(),
            _ => return None,
        })
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), ConfigError> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(ConfigError::Syntax { path: origin.into(), line: n + 1, msg: "expected key = value".into() });
            };
            self.set(k.trim(), v).map_err(|e| ConfigError::Syntax { path: origin.into(), line: n + 1, msg: e.to_string() })?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path)?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// Every key with its resolved value.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for k in KEYS {
            let _ = writeln!(s, "{k} = {}", self.get(k).unwrap());
        }
        s
    }

    pub fn shape(&self) -> AnalyticShape {
        AnalyticShape::preset(&self.shape).expect("shape validated on set")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.rig.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.train.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.resolution < crate::mesh::MIN_RESOLUTION {
            return Err(ConfigError::Invalid(format!("resolution must be at least {}", crate::mesh::MIN_RESOLUTION)));
        }
        if !(self.tau > 0.0) || self.eval_samples == 0 {
            return Err(ConfigError::Invalid("tau and eval_samples must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolved_text_round_trips() {
        let mut c = RunConfig::default();
        c.set("shape", "torus").unwrap();
        c.set("init_sharpness", "150").unwrap();
        c.set("intersect_mode", "surface").unwrap();
        c.set("learning_rate", "0.0001234").unwrap();
        let mut back = RunConfig::default();
        back.apply_text(&c.to_text(), "resolved").unwrap();
        assert_eq!(back, c);
        for k in KEYS {
            assert!(c.get(k).is_some(), "{k}");
        }
    }

    #[test]
    fn later_sources_win() {
        let mut c = RunConfig::default();
        c.apply_text("iterations = 10\nseed = 4 # comment\n", "f").unwrap();
        c.set("iterations", "20").unwrap();
        assert_eq!(c.train.iterations, 20);
        assert_eq!(c.train.seed, 4);
    }

    #[test]
    fn errors_name_the_line() {
        let mut c = RunConfig::default();
        let e = c.apply_text("seed = 1\nbogus = 3\n", "run.cfg").unwrap_err().to_string();
        assert!(e.starts_with("run.cfg:2:"), "{e}");
        assert!(c.set("shape", "teapot").is_err());
        assert!(c.set("batch_size", "-1").is_err());
    }
}
