//! Vectorizable softplus kernel.
//!
//! `softplus_beta(z) = ln(1 + exp(beta z)) / beta`, evaluated as
//! `(max(t, 0) + ln1p(exp(-|t|))) / beta` with `t = beta z`. The `exp` and
//! `ln1p` below are branch-free polynomial evaluations accurate to a few ulp
//! on the ranges used here, so the loop auto-vectorizes.

use std::f64::consts::{LN_2, LOG2_E, SQRT_2};

const LN2_HI: f64 = 6.931_471_803_691_238_164_9e-1;
const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
const ROUND_MAGIC: f64 = 6_755_399_441_055_744.0;

/// `exp(x)` for `x` in `[-700, 0]`.
#[inline(always)]
fn exp_neg(x: f64) -> f64 {
    let x = x.max(-700.0);
    // The low mantissa bits of `kb` hold round(x / ln2) as an integer.
    let kb = x * LOG2_E + ROUND_MAGIC;
    let k = kb - ROUND_MAGIC;
    let r = (x - k * LN2_HI) - k * LN2_LO;
    // Taylor series to degree 13 on |r| <= ln2/2.
    let mut p = 1.0 / 6_227_020_800.0;
    p = p * r + 1.0 / 479_001_600.0;
    p = p * r + 1.0 / 39_916_800.0;
    p = p * r + 1.0 / 3_628_800.0;
    p = p * r + 1.0 / 362_880.0;
    p = p * r + 1.0 / 40_320.0;
    p = p * r + 1.0 / 5_040.0;
    p = p * r + 1.0 / 720.0;
    p = p * r + 1.0 / 120.0;
    p = p * r + 1.0 / 24.0;
    p = p * r + 1.0 / 6.0;
    p = p * r + 0.5;
    p = p * r + 1.0;
    p = p * r + 1.0;
    let scale = f64::from_bits(kb.to_bits().wrapping_add(1023) << 52);
    p * scale
}

/// `ln(1 + e)` for `e` in `[0, 1]`.
#[inline(always)]
fn ln1p_unit(e: f64) -> f64 {
    // Halve 1 + e when it exceeds sqrt(2) so the atanh argument stays small.
    let big = (1.0 + e) > SQRT_2;
    let m = if big { 1.0 } else { 0.0 };
    let num = if big { 0.5 * (e - 1.0) } else { e };
    let den = if big { 0.5 * (e + 3.0) } else { 2.0 + e };
    let s = num / den;
    let s2 = s * s;
    let mut p = 1.0 / 21.0;
    p = p * s2 + 1.0 / 19.0;
    p = p * s2 + 1.0 / 17.0;
    p = p * s2 + 1.0 / 15.0;
    p = p * s2 + 1.0 / 13.0;
    p = p * s2 + 1.0 / 11.0;
    p = p * s2 + 1.0 / 9.0;
    p = p * s2 + 1.0 / 7.0;
    p = p * s2 + 1.0 / 5.0;
    p = p * s2 + 1.0 / 3.0;
    p = p * s2 + 1.0;
    2.0 * s * p + m * LN_2
}

#[inline(always)]
fn kernel(beta: f64, z: &[f64], value: &mut [f64], slope: &mut [f64]) {
    let inv_beta = 1.0 / beta;
    let n = z.len();
    let (value, slope) = (&mut value[..n], &mut slope[..n]);
    for i in 0..n {
        let t = beta * z[i];
        let e = exp_neg(-t.abs());
        value[i] = (t.max(0.0) + ln1p_unit(e)) * inv_beta;
        let top = if t >= 0.0 { 1.0 } else { e };
        slope[i] = top / (1.0 + e);
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn kernel_avx2(beta: f64, z: &[f64], value: &mut [f64], slope: &mut [f64]) {
    kernel(beta, z, value, slope)
}

/// Writes `softplus_beta(z)` into `value` and its derivative
/// `sigmoid(beta z)` into `slope`.
pub fn softplus_slice(beta: f64, z: &[f64], value: &mut [f64], slope: &mut [f64]) {
    assert!(z.len() == value.len() && z.len() == slope.len());
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the feature was detected at runtime.
            unsafe { kernel_avx2(beta, z, value, slope) };
            return;
        }
    }
    kernel(beta, z, value, slope)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exp_matches_std() {
        for i in 0..19900 {
            let x = -(i as f64) * 0.0351;
            let a = exp_neg(x);
            let b = x.exp();
            assert!((a - b).abs() <= 4.0 * f64::EPSILON * b, "{x}: {a} vs {b}");
        }
    }

    #[test]
    fn ln1p_matches_std() {
        for i in 0..=10000 {
            let e = i as f64 / 10000.0;
            let a = ln1p_unit(e);
            let b = e.ln_1p();
            assert!((a - b).abs() <= 4.0 * f64::EPSILON * b.max(f64::MIN_POSITIVE), "{e}: {a} vs {b}");
        }
        assert!((ln1p_unit(1e-300) - 1e-300).abs() < 1e-310);
    }

    #[test]
    fn softplus_matches_reference() {
        let beta = 100.0;
        let z: Vec<f64> = (-400..400).map(|i| i as f64 * 0.0173).collect();
        let mut v = vec![0.0; z.len()];
        let mut d = vec![0.0; z.len()];
        softplus_slice(beta, &z, &mut v, &mut d);
        for i in 0..z.len() {
            let t = beta * z[i];
            let rv = (t.max(0.0) + (-t.abs()).exp().ln_1p()) / beta;
            let rd = 1.0 / (1.0 + (-t).exp());
            assert!((v[i] - rv).abs() <= 1e-15 * (1.0 + rv.abs()));
            assert!((d[i] - rd).abs() <= 1e-15);
        }
    }
}
