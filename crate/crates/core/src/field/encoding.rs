use std::f64::consts::PI;

use crate::geometry::Vec3;

/// Length of the encoded vector for `freqs` frequency bands.
pub fn encoded_len(freqs: usize) -> usize {
    3 + 6 * freqs
}

/// Sinusoidal encoding `[x, sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^(L-1) pi x), cos(2^(L-1) pi x)]`,
/// each band applied to all three coordinates.
pub fn positional_encode(x: &Vec3, freqs: usize) -> Vec<f64> {
    let mut out = vec![0.0; encoded_len(freqs)];
    encode_into(x, freqs, &mut out, None, None);
    out
}

/// Coordinate that encoded entry `e` depends on.
#[inline]
pub(crate) fn source_axis(e: usize) -> usize {
    e % 3
}

/// Writes the encoding into `out` and, optionally, the per-entry first and
/// second derivative w.r.t. its source coordinate. Every entry depends on
/// exactly one input coordinate, so the Jacobian is stored as one scalar
/// per entry.
pub(crate) fn encode_into(
    x: &Vec3,
    freqs: usize,
    out: &mut [f64],
    mut d1: Option<&mut [f64]>,
    mut d2: Option<&mut [f64]>,
) {
    for c in 0..3 {
        out[c] = x[c];
        if let Some(d) = d1.as_deref_mut() {
            d[c] = 1.0;
        }
        if let Some(d) = d2.as_deref_mut() {
            d[c] = 0.0;
        }
    }
    for k in 0..freqs {
        let w = (1u64 << k) as f64 * PI;
        let base = 3 + 6 * k;
        for c in 0..3 {
            let (s, co) = (w * x[c]).sin_cos();
            out[base + c] = s;
            out[base + 3 + c] = co;
            if let Some(d) = d1.as_deref_mut() {
                d[base + c] = w * co;
                d[base + 3 + c] = -w * s;
            }
            if let Some(d) = d2.as_deref_mut() {
                d[base + c] = -w * w * s;
                d[base + 3 + c] = -w * w * co;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn origin_encoding() {
        let e = positional_encode(&Vec3::zeros(), 5);
        assert_eq!(e.len(), 33);
        for k in 0..5 {
            for c in 0..3 {
                assert_eq!(e[3 + 6 * k + c], 0.0);
                assert_eq!(e[3 + 6 * k + 3 + c], 1.0);
            }
        }
        assert_eq!(&e[..3], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn zero_bands_is_identity() {
        let x = Vec3::new(0.3, -0.7, 0.11);
        assert_eq!(positional_encode(&x, 0), vec![0.3, -0.7, 0.11]);
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let x = Vec3::new(0.31, -0.42, 0.77);
        let n = encoded_len(4);
        let (mut v, mut d1, mut d2) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        encode_into(&x, 4, &mut v, Some(&mut d1), Some(&mut d2));
        let h = 1e-5;
        for e in 0..n {
            let c = source_axis(e);
            let mut xp = x;
            xp[c] += h;
            let mut xm = x;
            xm[c] -= h;
            let (p, m) = (positional_encode(&xp, 4)[e], positional_encode(&xm, 4)[e]);
            assert!(((p - m) / (2.0 * h) - d1[e]).abs() < 1e-5 * (1.0 + d1[e].abs()));
            assert!(((p - 2.0 * v[e] + m) / (h * h) - d2[e]).abs() < 1e-2 * (1.0 + d2[e].abs()));
        }
    }
}
