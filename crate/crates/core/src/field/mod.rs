//! Signed-distance fields: the trainable network, its optimizer, analytic
//! reference shapes and the checkpoint format.

pub mod activation;
pub mod adam;
pub mod analytic;
pub mod checkpoint;
pub mod encoding;
pub mod mlp;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

pub use adam::AdamState;
pub use analytic::AnalyticShape;
pub use encoding::positional_encode;
pub use mlp::{Architecture, BackwardBatch, BackwardOutput, NeuralField};

use crate::geometry::Vec3;

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("parameter shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },
    #[error("checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A signed distance function: negative inside, positive outside.
pub trait ScalarField: Sync {
    /// Value and spatial gradient at `x`.
    fn evaluate(&self, x: &Vec3) -> (f64, Vec3);

    fn value(&self, x: &Vec3) -> f64 {
        self.evaluate(x).0
    }

    fn values(&self, xs: &[Vec3]) -> Vec<f64> {
        xs.par_iter().map(|x| self.value(x)).collect()
    }

    fn evaluate_batch(&self, xs: &[Vec3]) -> Vec<(f64, Vec3)> {
        xs.par_iter().map(|x| self.evaluate(x)).collect()
    }
}

impl<T: ScalarField + ?Sized> ScalarField for &T {
    fn evaluate(&self, x: &Vec3) -> (f64, Vec3) {
        (**self).evaluate(x)
    }
    fn value(&self, x: &Vec3) -> f64 {
        (**self).value(x)
    }
    fn values(&self, xs: &[Vec3]) -> Vec<f64> {
        (**self).values(xs)
    }
    fn evaluate_batch(&self, xs: &[Vec3]) -> Vec<(f64, Vec3)> {
        (**self).evaluate_batch(xs)
    }
}

/// Half-width of the scene bound `[-1, 1]^3`.
pub const SCENE_HALF_EXTENT: f64 = 1.0;

/// Supervised pre-fit schedule used to initialize a field.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PrefitConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for PrefitConfig {
    fn default() -> Self {
        Self { steps: 2000, batch: 256, lr: 3e-3 }
    }
}

/// Fits a freshly seeded network to `target` by Adam on mean squared error,
/// drawing points uniformly in the scene bound, in a shell around
/// `|x| = shell_radius` and inside the ball of that radius.
pub fn prefit<F: Fn(&Vec3) -> f64>(
    field: &mut NeuralField,
    target: F,
    shell_radius: f64,
    cfg: PrefitConfig,
    seed: u64,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f17);
    let mut adam = AdamState::new(field.num_params(), cfg.lr);
    let s_idx = field.sharpness_index();
    for _ in 0..cfg.steps {
        let mut batch = BackwardBatch::with_capacity(cfg.batch);
        let pts: Vec<Vec3> = (0..cfg.batch)
            .map(|k| {
                let cube = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
                match k % 3 {
                    0 => cube,
                    1 => {
                        let dir = loop {
                            let v =
                                Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
                            let n = v.norm();
                            if n > 1e-3 && n <= 1.0 {
                                break v / n;
                            }
                        };
                        dir * (shell_radius + rng.gen_range(-0.15..0.15))
                    }
                    _ => loop {
                        let v = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
                        if v.norm() <= 1.0 {
                            break v * shell_radius;
                        }
                    },
                }
            })
            .collect();
        let vals = field.eval_values(&pts);
        let scale = 2.0 / cfg.batch as f64;
        for (p, v) in pts.iter().zip(&vals) {
            batch.push(*p, scale * (v - target(p)), Vec3::zeros(), 0.0);
        }
        let mut grads = vec![0.0; field.num_params()];
        field.backward(&batch, &mut grads, false);
        grads[s_idx] = 0.0;
        adam.step(field.params_mut(), &grads).expect("finite prefit gradients");
    }
}

/// Fits a fresh network to an analytic shape on values and gradients. Half of
/// each batch is uniform in the scene bound, half lies near the surface
/// (cube points projected onto the zero set, then jittered).
pub fn fit_shape(arch: Architecture, seed: u64, shape: &AnalyticShape, cfg: PrefitConfig) -> NeuralField {
    let mut field = NeuralField::new_random(arch, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xf17_5a9e);
    let mut adam = AdamState::new(field.num_params(), cfg.lr);
    let s_idx = field.sharpness_index();
    let scale = 2.0 / cfg.batch as f64;
    for _ in 0..cfg.steps {
        let mut pts: Vec<Vec3> = (0..cfg.batch)
            .map(|_| Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        let exact = shape.evaluate_batch(&pts);
        for (k, (p, (v, g))) in pts.iter_mut().zip(&exact).enumerate() {
            if k % 2 == 1 {
                let jitter = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
                *p = *p - *v * g + 0.03 * jitter;
            }
        }
        let target = shape.evaluate_batch(&pts);
        let pred = field.eval_with_grad(&pts);
        let mut batch = BackwardBatch::with_capacity(cfg.batch);
        for ((p, (v, g)), (tv, tg)) in pts.iter().zip(&pred).zip(&target) {
            batch.push(*p, scale * (v - tv), scale * 0.1 * (g - tg), 0.0);
        }
        let mut grads = vec![0.0; field.num_params()];
        field.backward(&batch, &mut grads, false);
        grads[s_idx] = 0.0;
        adam.step(field.params_mut(), &grads).expect("finite fit gradients");
    }
    field
}

/// Network initialized to approximate the sphere SDF `|x| - radius`.
pub fn init_sphere(arch: Architecture, seed: u64, radius: f64) -> NeuralField {
    init_sphere_with(arch, seed, radius, PrefitConfig::default())
}

pub fn init_sphere_with(arch: Architecture, seed: u64, radius: f64, cfg: PrefitConfig) -> NeuralField {
    let mut field = NeuralField::new_random(arch, seed);
    prefit(&mut field, |x| x.norm() - radius, radius, cfg, seed);
    field
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sphere_initialization_quality() {
        let f = init_sphere(Architecture::default(), 7, 0.5);
        assert!(f.value(&Vec3::zeros()) < 0.0);
        assert!((f.value(&Vec3::zeros()) + 0.5).abs() < 0.05);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut sq = 0.0;
        let mut eik = 0.0;
        let pts: Vec<Vec3> = (0..1000)
            .map(|_| Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        for (p, (v, g)) in pts.iter().zip(f.eval_with_grad(&pts)) {
            sq += (v - (p.norm() - 0.5)).powi(2);
            eik += (g.norm() - 1.0).powi(2);
        }
        let rms = (sq / 1000.0).sqrt();
        assert!(rms < 0.1, "rms {rms}");
        assert!(eik / 1000.0 < 0.05, "eikonal {}", eik / 1000.0);
        for k in 0..20 {
            let th = k as f64 * 0.7;
            let dir = Vec3::new(th.cos() * 0.6, th.sin() * 0.6, 0.8 * (th * 0.3).cos()).normalize();
            assert!(f.value(&(dir * 1.0)) > 0.0);
            assert!(f.value(&(dir * 0.5)).abs() < 0.05);
        }
    }
}
