//! Coordinate MLP with exact input gradients and a backward pass that also
//! differentiates through the input gradient.
//!
//! All evaluation is batched: a chunk of points is pushed through the
//! network as a row-major matrix, together with three "tangent" copies
//! carrying d(activation)/dx for each input axis. Stacking value and tangent
//! rows lets every layer use a single GEMM for both.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::activation::softplus_slice;
use super::encoding::{encode_into, encoded_len, source_axis};
use super::{FieldError, ScalarField};
use crate::geometry::Vec3;

/// Softplus sharpness of the hidden activations.
pub const SOFTPLUS_BETA: f64 = 100.0;

/// The trainable sharpness is stored as `v` with `s = exp(SHARPNESS_SCALE * v)`.
pub const SHARPNESS_SCALE: f64 = 10.0;

/// Sharpness of a fresh network.
pub const INITIAL_SHARPNESS: f64 = 64.0;

/// Points per evaluation chunk. Fixed so that gradient reduction order does
/// not depend on the thread count.
const CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    /// Number of hidden layers.
    pub depth: usize,
    /// Hidden width.
    pub width: usize,
    /// Positional-encoding frequency bands.
    pub freqs: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self { depth: 4, width: 128, freqs: 5 }
    }
}

impl Architecture {
    /// 8 x 256, the GPU-scale network.
    pub fn full_scale() -> Self {
        Self { depth: 8, width: 256, freqs: 5 }
    }

    pub fn small(width: usize) -> Self {
        Self { depth: 2, width, freqs: 2 }
    }
}

#[derive(Debug, Clone, Copy)]
struct Slot {
    inputs: usize,
    outputs: usize,
    w: usize,
    b: usize,
}

/// Trainable signed-distance network plus the volume-rendering sharpness.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuralField {
    arch: Architecture,
    params: Vec<f64>,
}

fn layout(arch: &Architecture) -> (Vec<Slot>, usize) {
    let mut slots = Vec::with_capacity(arch.depth + 1);
    let mut off = 0;
    let mut inputs = encoded_len(arch.freqs);
    for l in 0..=arch.depth {
        let outputs = if l == arch.depth { 1 } else { arch.width };
        slots.push(Slot { inputs, outputs, w: off, b: off + inputs * outputs });
        off += inputs * outputs + outputs;
        inputs = outputs;
    }
    // trailing slot holds the sharpness variable
    (slots, off + 1)
}

/// `c = a * b + beta * c` on strided row-major views.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.len() > (m - 1) * rsa + k.saturating_sub(1) * csa);
    assert!(b.len() > k.saturating_sub(1) * rsb + (n - 1) * csb);
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above keep every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Activations of one chunk.
struct Pass {
    n: usize,
    tangents: bool,
    /// Stacked encoding rows (value rows, then 3 tangent blocks).
    enc: Vec<f64>,
    enc_d1: Vec<f64>,
    enc_d2: Vec<f64>,
    /// Per hidden layer: stacked post-activation rows.
    act: Vec<Vec<f64>>,
    /// Per hidden layer: pre-activation rows (stacked, tangent rows are dz).
    pre: Vec<Vec<f64>>,
    /// Per hidden layer: softplus' at the value rows.
    sig: Vec<Vec<f64>>,
    value: Vec<f64>,
    grad: Vec<Vec3>,
}

impl Pass {
    fn rows(&self) -> usize {
        if self.tangents {
            4 * self.n
        } else {
            self.n
        }
    }
}

/// Per-point upstream gradients for [`NeuralField::backward`].
#[derive(Debug, Clone, Default)]
pub struct BackwardBatch {
    pub points: Vec<Vec3>,
    /// dLoss/d(sdf value).
    pub value_bar: Vec<f64>,
    /// dLoss/d(spatial gradient).
    pub grad_bar: Vec<Vec3>,
    /// Weight of the eikonal penalty `(|grad| - 1)^2` at each point.
    pub eikonal_weight: Vec<f64>,
}

impl BackwardBatch {
    pub fn with_capacity(n: usize) -> Self {
        Self {
            points: Vec::with_capacity(n),
            value_bar: Vec::with_capacity(n),
            grad_bar: Vec::with_capacity(n),
            eikonal_weight: Vec::with_capacity(n),
        }
    }

    pub fn push(&mut self, x: Vec3, value_bar: f64, grad_bar: Vec3, eikonal_weight: f64) {
        self.points.push(x);
        self.value_bar.push(value_bar);
        self.grad_bar.push(grad_bar);
        self.eikonal_weight.push(eikonal_weight);
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Debug, Clone, Default)]
pub struct BackwardOutput {
    /// dLoss/dx per point (empty unless requested).
    pub input_bar: Vec<Vec3>,
    /// Sum over points of `eikonal_weight * (|grad| - 1)^2`.
    pub eikonal_loss: f64,
    /// Sum over points of `(|grad| - 1)^2` where the weight is nonzero, and the count.
    pub eikonal_raw_sum: f64,
    pub eikonal_count: usize,
}

impl NeuralField {
    /// Randomly initialized network (uniform +-1/sqrt(fan_in)) with
    /// [`INITIAL_SHARPNESS`].
    pub fn new_random(arch: Architecture, seed: u64) -> Self {
        let (slots, count) = layout(&arch);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0; count];
        for s in &slots {
            let bound = 1.0 / (s.inputs as f64).sqrt();
            for p in &mut params[s.w..s.b + s.outputs] {
                *p = rng.gen_range(-bound..bound);
            }
        }
        let mut f = Self { arch, params };
        f.set_sharpness(INITIAL_SHARPNESS);
        f
    }

    /// Builds a field from a raw parameter vector in layer order; the last
    /// entry is the sharpness `s` itself (not its log).
    pub fn from_parts(arch: Architecture, weights: Vec<f64>, sharpness: f64) -> Result<Self, FieldError> {
        let (_, count) = layout(&arch);
        if weights.len() + 1 != count {
            return Err(FieldError::Shape { expected: count - 1, got: weights.len() });
        }
        if !(sharpness > 0.0) || weights.iter().any(|w| !w.is_finite()) {
            return Err(FieldError::NonFinite("field parameters".into()));
        }
        let mut params = weights;
        params.push(0.0);
        let mut f = Self { arch, params };
        f.set_sharpness(sharpness);
        Ok(f)
    }

    pub fn architecture(&self) -> Architecture {
        self.arch
    }

    /// All trainable values, sharpness variable last.
    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Network weights and biases without the sharpness variable.
    pub fn weights(&self) -> &[f64] {
        &self.params[..self.params.len() - 1]
    }

    pub fn sharpness(&self) -> f64 {
        (SHARPNESS_SCALE * self.params[self.params.len() - 1]).exp()
    }

    pub fn set_sharpness(&mut self, s: f64) {
        let n = self.params.len();
        self.params[n - 1] = s.ln() / SHARPNESS_SCALE;
    }

    /// Index of the sharpness variable in [`Self::params`].
    pub fn sharpness_index(&self) -> usize {
        self.params.len() - 1
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    fn slots(&self) -> Vec<Slot> {
        layout(&self.arch).0
    }

    fn forward(&self, points: &[Vec3], tangents: bool, input_jacobian: bool) -> Pass {
        let n = points.len();
        let e_len = encoded_len(self.arch.freqs);
        let rows = if tangents { 4 * n } else { n };
        let mut enc = vec![0.0; rows * e_len];
        let mut enc_d1 = Vec::new();
        let mut enc_d2 = Vec::new();
        if tangents || input_jacobian {
            enc_d1 = vec![0.0; n * e_len];
            enc_d2 = vec![0.0; n * e_len];
            for (i, x) in points.iter().enumerate() {
                let r = i * e_len..(i + 1) * e_len;
                encode_into(x, self.arch.freqs, &mut enc[r.clone()], Some(&mut enc_d1[r.clone()]), Some(&mut enc_d2[r]));
            }
            for a in 0..3 {
                if !tangents {
                    break;
                }
                for i in 0..n {
                    let row = (n * (a + 1) + i) * e_len;
                    for e in 0..e_len {
                        if source_axis(e) == a {
                            enc[row + e] = enc_d1[i * e_len + e];
                        }
                    }
                }
            }
        } else {
            for (i, x) in points.iter().enumerate() {
                encode_into(x, self.arch.freqs, &mut enc[i * e_len..(i + 1) * e_len], None, None);
            }
        }

        let slots = self.slots();
        let width = self.arch.width;
        let mut act: Vec<Vec<f64>> = Vec::with_capacity(self.arch.depth);
        let mut pre: Vec<Vec<f64>> = Vec::with_capacity(self.arch.depth);
        let mut sig: Vec<Vec<f64>> = Vec::with_capacity(self.arch.depth);
        for (l, s) in slots[..self.arch.depth].iter().enumerate() {
            let input: &[f64] = if l == 0 { &enc } else { &act[l - 1] };
            let mut z = vec![0.0; rows * width];
            gemm(rows, s.inputs, width, input, s.inputs, 1, &self.params[s.w..], width, 1, 0.0, &mut z);
            let bias = &self.params[s.b..s.b + width];
            for i in 0..n {
                for (zz, b) in z[i * width..(i + 1) * width].iter_mut().zip(bias) {
                    *zz += b;
                }
            }
            let mut a = vec![0.0; rows * width];
            let mut sg = vec![0.0; n * width];
            softplus_slice(SOFTPLUS_BETA, &z[..n * width], &mut a[..n * width], &mut sg);
            if tangents {
                for blk in 1..4 {
                    for i in 0..n {
                        let r = (blk * n + i) * width;
                        let rs = i * width;
                        for j in 0..width {
                            a[r + j] = sg[rs + j] * z[r + j];
                        }
                    }
                }
            }
            pre.push(z);
            act.push(a);
            sig.push(sg);
        }

        let out = slots[self.arch.depth];
        let last = &act[self.arch.depth - 1];
        let w_out = &self.params[out.w..out.w + width];
        let b_out = self.params[out.b];
        let dot = |row: usize| -> f64 {
            let r = &last[row * width..(row + 1) * width];
            r.iter().zip(w_out).map(|(a, w)| a * w).sum()
        };
        let value: Vec<f64> = (0..n).map(|i| dot(i) + b_out).collect();
        let grad = if tangents {
            (0..n).map(|i| Vec3::new(dot(n + i), dot(2 * n + i), dot(3 * n + i))).collect()
        } else {
            Vec::new()
        };
        Pass { n, tangents, enc, enc_d1, enc_d2, act, pre, sig, value, grad }
    }

    /// SDF values only.
    pub fn eval_values(&self, points: &[Vec3]) -> Vec<f64> {
        let chunks: Vec<Vec<f64>> =
            points.par_chunks(CHUNK).map(|c| self.forward(c, false, false).value).collect();
        chunks.concat()
    }

    /// SDF values and exact spatial gradients.
    pub fn eval_with_grad(&self, points: &[Vec3]) -> Vec<(f64, Vec3)> {
        let chunks: Vec<Vec<(f64, Vec3)>> = points
            .par_chunks(CHUNK)
            .map(|c| {
                let p = self.forward(c, true, false);
                p.value.into_iter().zip(p.grad).collect()
            })
            .collect();
        chunks.concat()
    }

    /// Accumulates dLoss/dparams into `grads` (same layout as [`Self::params`];
    /// the sharpness slot is left untouched). Differentiates through the
    /// spatial gradient, so `grad_bar` and the eikonal penalty are handled
    /// exactly.
    pub fn backward(&self, batch: &BackwardBatch, grads: &mut [f64], want_input_bar: bool) -> BackwardOutput {
        assert_eq!(grads.len(), self.params.len());
        let n = batch.len();
        assert!(batch.value_bar.len() == n && batch.grad_bar.len() == n && batch.eikonal_weight.len() == n);
        let starts: Vec<usize> = (0..n).step_by(CHUNK).collect();
        let parts: Vec<(Vec<f64>, BackwardOutput)> = starts
            .par_iter()
            .map(|&s| {
                let e = (s + CHUNK).min(n);
                let mut g = vec![0.0; self.params.len()];
                let out = self.backward_chunk(
                    &batch.points[s..e],
                    &batch.value_bar[s..e],
                    &batch.grad_bar[s..e],
                    &batch.eikonal_weight[s..e],
                    &mut g,
                    want_input_bar,
                );
                (g, out)
            })
            .collect();
        let mut total = BackwardOutput::default();
        for (g, out) in parts {
            for (acc, v) in grads.iter_mut().zip(&g) {
                *acc += v;
            }
            total.input_bar.extend(out.input_bar);
            total.eikonal_loss += out.eikonal_loss;
            total.eikonal_raw_sum += out.eikonal_raw_sum;
            total.eikonal_count += out.eikonal_count;
        }
        total
    }

    fn backward_chunk(
        &self,
        points: &[Vec3],
        value_bar: &[f64],
        grad_bar: &[Vec3],
        eik_w: &[f64],
        grads: &mut [f64],
        want_input_bar: bool,
    ) -> BackwardOutput {
        let n = points.len();
        let needs_tangents = grad_bar.iter().any(|g| *g != Vec3::zeros()) || eik_w.iter().any(|w| *w != 0.0);
        let pass = self.forward(points, needs_tangents, want_input_bar);
        let rows = pass.rows();
        let width = self.arch.width;
        let depth = self.arch.depth;
        let slots = self.slots();

        let mut out = BackwardOutput::default();
        let mut gbar: Vec<Vec3> = grad_bar.to_vec();
        if pass.tangents {
            for i in 0..n {
                if eik_w[i] == 0.0 {
                    continue;
                }
                let g = pass.grad[i];
                let len = g.norm();
                let dev = len - 1.0;
                out.eikonal_loss += eik_w[i] * dev * dev;
                out.eikonal_raw_sum += dev * dev;
                out.eikonal_count += 1;
                if len > 0.0 {
                    gbar[i] += eik_w[i] * 2.0 * dev * g / len;
                }
            }
        }

        // Adjoint of the output coefficient per stacked row.
        let mut row_bar = vec![0.0; rows];
        row_bar[..n].copy_from_slice(value_bar);
        if pass.tangents {
            for a in 0..3 {
                for i in 0..n {
                    row_bar[(a + 1) * n + i] = gbar[i][a];
                }
            }
        }
        let out_slot = slots[depth];
        let last = &pass.act[depth - 1];
        for (r, rb) in row_bar.iter().enumerate() {
            if *rb == 0.0 {
                continue;
            }
            let src = &last[r * width..(r + 1) * width];
            for (g, a) in grads[out_slot.w..out_slot.w + width].iter_mut().zip(src) {
                *g += rb * a;
            }
        }
        grads[out_slot.b] += value_bar.iter().sum::<f64>();

        let w_out = &self.params[out_slot.w..out_slot.w + width];
        let mut abar = vec![0.0; rows * width];
        for (r, rb) in row_bar.iter().enumerate() {
            if *rb != 0.0 {
                for (dst, w) in abar[r * width..(r + 1) * width].iter_mut().zip(w_out) {
                    *dst = rb * w;
                }
            }
        }

        let mut enc_bar: Vec<f64> = Vec::new();
        for l in (0..depth).rev() {
            let s = slots[l];
            let sg = &pass.sig[l];
            let z = &pass.pre[l];
            let mut zbar = vec![0.0; rows * width];
            for i in 0..n {
                let r = i * width;
                for j in 0..width {
                    zbar[r + j] = abar[r + j] * sg[r + j];
                }
            }
            if pass.tangents {
                for blk in 1..4 {
                    for i in 0..n {
                        let r = (blk * n + i) * width;
                        let rs = i * width;
                        for j in 0..width {
                            let sgj = sg[rs + j];
                            let d2 = SOFTPLUS_BETA * sgj * (1.0 - sgj);
                            let dab = abar[r + j];
                            zbar[rs + j] += dab * z[r + j] * d2;
                            zbar[r + j] = dab * sgj;
                        }
                    }
                }
            }
            let input: &[f64] = if l == 0 { &pass.enc } else { &pass.act[l - 1] };
            // dW += input^T zbar
            gemm(s.inputs, rows, width, input, 1, s.inputs, &zbar, width, 1, 1.0, &mut grads[s.w..s.w + s.inputs * width]);
            for i in 0..n {
                for (g, v) in grads[s.b..s.b + width].iter_mut().zip(&zbar[i * width..(i + 1) * width]) {
                    *g += v;
                }
            }
            if l > 0 || want_input_bar {
                let mut prev_bar = vec![0.0; rows * s.inputs];
                // prev_bar = zbar W^T
                gemm(rows, width, s.inputs, &zbar, width, 1, &self.params[s.w..], 1, width, 0.0, &mut prev_bar);
                if l == 0 {
                    enc_bar = prev_bar;
                } else {
                    abar = prev_bar;
                }
            }
        }

        if want_input_bar {
            let e_len = encoded_len(self.arch.freqs);
            out.input_bar = vec![Vec3::zeros(); n];
            for i in 0..n {
                let mut xb = Vec3::zeros();
                for e in 0..e_len {
                    let c = source_axis(e);
                    xb[c] += enc_bar[i * e_len + e] * pass.enc_d1[i * e_len + e];
                    if pass.tangents {
                        xb[c] += enc_bar[((c + 1) * n + i) * e_len + e] * pass.enc_d2[i * e_len + e];
                    }
                }
                out.input_bar[i] = xb;
            }
        }
        out
    }
}

impl ScalarField for NeuralField {
    fn evaluate(&self, x: &Vec3) -> (f64, Vec3) {
        let p = self.forward(std::slice::from_ref(x), true, false);
        (p.value[0], p.grad[0])
    }

    fn value(&self, x: &Vec3) -> f64 {
        self.forward(std::slice::from_ref(x), false, false).value[0]
    }

    fn values(&self, xs: &[Vec3]) -> Vec<f64> {
        self.eval_values(xs)
    }

    fn evaluate_batch(&self, xs: &[Vec3]) -> Vec<(f64, Vec3)> {
        self.eval_with_grad(xs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_points(n: usize, seed: u64) -> Vec<Vec3> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect()
    }

    #[test]
    fn layout_counts() {
        let f = NeuralField::new_random(Architecture::default(), 0);
        assert_eq!(f.num_params(), 33 * 128 + 128 + 3 * (128 * 128 + 128) + 128 + 1 + 1);
        assert!((f.sharpness() - INITIAL_SHARPNESS).abs() < 1e-9);
    }

    #[test]
    fn batched_and_single_agree() {
        let f = NeuralField::new_random(Architecture::small(16), 3);
        let pts = rand_points(300, 1);
        let batch = f.eval_with_grad(&pts);
        let vals = f.eval_values(&pts);
        for (i, x) in pts.iter().enumerate() {
            let (v, g) = f.evaluate(x);
            assert!((v - batch[i].0).abs() < 1e-12);
            assert!((g - batch[i].1).norm() < 1e-12);
            assert!((v - vals[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn deterministic_evaluation() {
        let f = NeuralField::new_random(Architecture::default(), 9);
        let x = Vec3::new(0.1, 0.2, -0.3);
        let a = f.evaluate(&x);
        let b = f.evaluate(&x);
        assert_eq!(a.0.to_bits(), b.0.to_bits());
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn spatial_gradient_matches_finite_differences() {
        let f = NeuralField::new_random(Architecture { depth: 3, width: 32, freqs: 5 }, 5);
        let h = 1e-4;
        for x in rand_points(200, 2) {
            let (_, g) = f.evaluate(&x);
            for k in 0..3 {
                let mut e = Vec3::zeros();
                e[k] = h;
                let fd = (f.value(&(x + e)) - f.value(&(x - e))) / (2.0 * h);
                assert!((fd - g[k]).abs() <= 1e-3 * g.norm().max(1e-3), "{fd} vs {}", g[k]);
            }
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let f = NeuralField::new_random(Architecture::small(16), 1);
        let pts = rand_points(10, 3);
        let mut b = BackwardBatch::with_capacity(10);
        for p in &pts {
            b.push(*p, 0.0, Vec3::zeros(), 0.0);
        }
        let mut g = vec![0.0; f.num_params()];
        let out = f.backward(&b, &mut g, true);
        assert!(g.iter().all(|v| *v == 0.0));
        assert!(out.input_bar.iter().all(|v| *v == Vec3::zeros()));
    }

    /// Composite loss: sum_i a_i g(x_i) + b_i . grad g(x_i) + w_i (|grad g(x_i)| - 1)^2.
    fn composite_loss(f: &NeuralField, b: &BackwardBatch) -> f64 {
        let eg = f.eval_with_grad(&b.points);
        eg.iter()
            .enumerate()
            .map(|(i, (v, g))| {
                let dev = g.norm() - 1.0;
                b.value_bar[i] * v + b.grad_bar[i].dot(g) + b.eikonal_weight[i] * dev * dev
            })
            .sum()
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let f = NeuralField::new_random(Architecture { depth: 2, width: 16, freqs: 3 }, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts = rand_points(6, 8);
        let mut b = BackwardBatch::with_capacity(6);
        for p in pts {
            let gb = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            b.push(p, rng.gen_range(-1.0..1.0), gb, rng.gen_range(0.0..1.0));
        }
        let mut g = vec![0.0; f.num_params()];
        let out = f.backward(&b, &mut g, true);
        let h = 1e-6;
        let mut checked = 0;
        for k in (0..f.num_params() - 1).step_by(7) {
            let mut fp = f.clone();
            fp.params_mut()[k] += h;
            let mut fm = f.clone();
            fm.params_mut()[k] -= h;
            let fd = (composite_loss(&fp, &b) - composite_loss(&fm, &b)) / (2.0 * h);
            let denom = fd.abs().max(g[k].abs()).max(1e-6);
            assert!((fd - g[k]).abs() / denom < 1e-2, "param {k}: fd {fd} analytic {}", g[k]);
            checked += 1;
        }
        assert!(checked >= 50);
        // input adjoints
        for (i, p) in b.points.clone().iter().enumerate() {
            for c in 0..3 {
                let mut bp = b.clone();
                bp.points[i][c] += h;
                let mut bm = b.clone();
                bm.points[i][c] -= h;
                let fd = (composite_loss(&f, &bp) - composite_loss(&f, &bm)) / (2.0 * h);
                let a = out.input_bar[i][c];
                assert!((fd - a).abs() <= 1e-2 * fd.abs().max(a.abs()).max(1e-4), "x {p} axis {c}: {fd} vs {a}");
            }
        }
    }

    #[test]
    fn input_adjoint_without_tangents_is_value_times_gradient() {
        let f = NeuralField::new_random(Architecture::small(16), 6);
        let pts = rand_points(30, 4);
        let mut b = BackwardBatch::with_capacity(30);
        for (i, p) in pts.iter().enumerate() {
            b.push(*p, 0.5 + (i as f64).cos(), Vec3::zeros(), 0.0);
        }
        let mut g = vec![0.0; f.num_params()];
        let out = f.backward(&b, &mut g, true);
        for (i, (_, grad)) in f.eval_with_grad(&pts).iter().enumerate() {
            assert!((out.input_bar[i] - b.value_bar[i] * grad).norm() < 1e-12);
        }
    }

    #[test]
    fn value_only_backward_matches_tangent_path() {
        let f = NeuralField::new_random(Architecture::small(16), 2);
        let pts = rand_points(40, 9);
        let mut b = BackwardBatch::with_capacity(40);
        for (i, p) in pts.iter().enumerate() {
            b.push(*p, (i as f64 * 0.37).sin(), Vec3::zeros(), 0.0);
        }
        let mut g1 = vec![0.0; f.num_params()];
        f.backward(&b, &mut g1, false);
        let mut g2 = vec![0.0; f.num_params()];
        f.backward(&b, &mut g2, true);
        for (a, c) in g1.iter().zip(&g2) {
            assert!((a - c).abs() < 1e-12);
        }
    }
}
