use super::FieldError;

/// Adam with bias correction over a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n: usize, lr: f64) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], step: 0, lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    /// One update. Rejects non-finite gradients without touching anything.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<(), FieldError> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(FieldError::Shape { expected: self.m.len(), got: grads.len().min(params.len()) });
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(FieldError::NonFinite(format!("gradient entry {i}")));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
        Ok(())
    }
}
