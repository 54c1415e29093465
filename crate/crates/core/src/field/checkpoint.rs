//! Binary checkpoint container.
//!
//! Layout (little-endian): `b"NETO"`, `u32` format version, `u32` depth,
//! `u32` width, `u32` frequency bands, then every weight and bias as `f64` in
//! layer order (each layer: weights row-major `[in][out]`, then biases),
//! followed by the sharpness `s` as `f64`.
//!
//! Optimizer state for resuming lives in a sibling file with magic
//! `b"NETA"`: version, step `u64`, learning rate, parameter count `u64`,
//! then the first and second moments.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{AdamState, Architecture, FieldError, NeuralField};

pub const MAGIC: &[u8; 4] = b"NETO";
pub const ADAM_MAGIC: &[u8; 4] = b"NETA";
pub const FORMAT_VERSION: u32 = 1;

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], FieldError> {
        if self.pos + n > self.buf.len() {
            return Err(FieldError::Format(format!(
                "truncated while reading {what} at byte {} ({} bytes total)",
                self.pos,
                self.buf.len()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self, what: &str) -> Result<u32, FieldError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
    fn u64(&mut self, what: &str) -> Result<u64, FieldError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn f64(&mut self, what: &str) -> Result<f64, FieldError> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn encode(field: &NeuralField) -> Vec<u8> {
    let arch = field.architecture();
    let mut out = Vec::with_capacity(20 + 8 * field.num_params());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for d in [arch.depth, arch.width, arch.freqs] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for w in field.weights() {
        out.extend_from_slice(&w.to_le_bytes());
    }
    out.extend_from_slice(&field.sharpness().to_le_bytes());
    out
}

pub fn decode(buf: &[u8]) -> Result<NeuralField, FieldError> {
    let mut c = Cursor { buf, pos: 0 };
    let magic = c.take(4, "magic")?;
    if magic != MAGIC {
        return Err(FieldError::Format(format!("bad magic {magic:?}, expected {MAGIC:?}")));
    }
    let version = c.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(FieldError::Format(format!(
            "unsupported checkpoint version {version} (this build reads version {FORMAT_VERSION})"
        )));
    }
    let depth = c.u32("depth")? as usize;
    let width = c.u32("width")? as usize;
    let freqs = c.u32("frequency count")? as usize;
    if depth == 0 || width == 0 || depth > 64 || width > 8192 || freqs > 32 {
        return Err(FieldError::Format(format!("implausible architecture {depth}x{width}, L={freqs}")));
    }
    let arch = Architecture { depth, width, freqs };
    let n = NeuralField::new_random(arch, 0).num_params() - 1;
    let mut weights = Vec::with_capacity(n);
    for i in 0..n {
        weights.push(c.f64(&format!("parameter {i}"))?);
    }
    let s = c.f64("sharpness")?;
    if c.pos != buf.len() {
        return Err(FieldError::Format(format!("{} trailing bytes", buf.len() - c.pos)));
    }
    NeuralField::from_parts(arch, weights, s)
}

pub fn save(field: &NeuralField, path: &Path) -> Result<(), FieldError> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode(field))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<NeuralField, FieldError> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    decode(&buf)
}

pub fn save_adam(state: &AdamState, path: &Path) -> Result<(), FieldError> {
    let mut out = Vec::with_capacity(32 + 16 * state.m.len());
    out.extend_from_slice(ADAM_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&state.step.to_le_bytes());
    out.extend_from_slice(&state.lr.to_le_bytes());
    out.extend_from_slice(&(state.m.len() as u64).to_le_bytes());
    for x in state.m.iter().chain(&state.v) {
        out.extend_from_slice(&x.to_le_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_adam(path: &Path) -> Result<AdamState, FieldError> {
    let buf = fs::read(path)?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    if c.take(4, "magic")? != ADAM_MAGIC {
        return Err(FieldError::Format("bad optimizer-state magic".into()));
    }
    let version = c.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(FieldError::Format(format!(
            "unsupported optimizer-state version {version} (this build reads version {FORMAT_VERSION})"
        )));
    }
    let step = c.u64("step")?;
    let lr = c.f64("learning rate")?;
    let n = c.u64("length")? as usize;
    let mut state = AdamState::new(n, lr);
    state.step = step;
    for i in 0..n {
        state.m[i] = c.f64("first moment")?;
    }
    for i in 0..n {
        state.v[i] = c.f64("second moment")?;
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bit_exact() {
        let mut f = NeuralField::new_random(Architecture::small(8), 4);
        f.set_sharpness(123.25);
        let g = decode(&encode(&f)).unwrap();
        assert_eq!(f.architecture(), g.architecture());
        for (a, b) in f.weights().iter().zip(g.weights()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert!((g.sharpness() - 123.25).abs() < 1e-9);
        assert_eq!(&encode(&f)[..4], b"NETO");
    }

    #[test]
    fn rejects_bad_headers() {
        let f = NeuralField::new_random(Architecture::small(8), 4);
        let mut buf = encode(&f);
        buf[4] = 9;
        let err = decode(&buf).unwrap_err().to_string();
        assert!(err.contains("version 9") && err.contains("version 1"), "{err}");
        let buf = encode(&f);
        assert!(decode(&buf[..buf.len() - 3]).unwrap_err().to_string().contains("truncated"));
        assert!(decode(b"XXXX0000").is_err());
    }

    #[test]
    fn adam_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = AdamState::new(5, 5e-4);
        a.step = 17;
        a.m[2] = 0.25;
        a.v[4] = 1e-9;
        let p = dir.path().join("x.adam");
        save_adam(&a, &p).unwrap();
        assert_eq!(load_adam(&p).unwrap(), a);
    }
}
