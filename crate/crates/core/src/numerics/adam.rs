use crate::error::{Error, Result};

use super::mlp::{Mlp, MlpGrad};

/// Adam moment accumulators for a fixed-size parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(num_params: usize) -> Self {
        Self {
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn for_mlp(net: &Mlp) -> Self {
        Self::new(net.num_params())
    }

    fn begin(&mut self, lr: f64) -> Result<(f64, f64)> {
        if !(lr > 0.0) || !lr.is_finite() {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {lr}"
            )));
        }
        self.t += 1;
        let t = self.t as i32;
        Ok((1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t)))
    }

    fn update(
        &mut self,
        offset: usize,
        params: &mut [f64],
        grads: &[f64],
        lr: f64,
        bc1: f64,
        bc2: f64,
    ) {
        let m = &mut self.m[offset..offset + params.len()];
        let v = &mut self.v[offset..offset + params.len()];
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(m).zip(v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }

    /// One bias-corrected Adam step on a flat parameter slice. Non-finite
    /// gradients reject the step and leave both params and state untouched.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::dim(
                "adam parameters",
                self.m.len(),
                params.len().max(grads.len()),
            ));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numerical(
                "non-finite gradient rejected by adam".into(),
            ));
        }
        let (bc1, bc2) = self.begin(lr)?;
        self.update(0, params, grads, lr, bc1, bc2);
        Ok(())
    }

    pub fn step_mlp(&mut self, net: &mut Mlp, grad: &MlpGrad, lr: f64) -> Result<()> {
        if net.num_params() != self.m.len() || grad.layers.len() != net.layers.len() {
            return Err(Error::dim(
                "adam parameters",
                self.m.len(),
                net.num_params(),
            ));
        }
        if !grad.is_finite() {
            return Err(Error::Numerical(
                "non-finite gradient rejected by adam".into(),
            ));
        }
        let (bc1, bc2) = self.begin(lr)?;
        let mut offset = 0;
        for (p, g) in net.param_chunks_mut(grad) {
            let n = p.len();
            self.update(offset, p, g, lr, bc1, bc2);
            offset += n;
        }
        Ok(())
    }
}
