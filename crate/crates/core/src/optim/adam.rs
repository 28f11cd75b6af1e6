use crate::error::{Error, Result};
use crate::flow::ParamBlock;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Sgd,
    Adam,
}

/// Optimizer hyperparameters plus per-parameter moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub method: Method,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
    step_count: u64,
}

impl OptimizerState {
    pub fn adam(lr: f64, len: usize) -> Self {
        OptimizerState {
            method: Method::Adam,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
            step_count: 0,
        }
    }

    pub fn sgd(lr: f64, len: usize) -> Self {
        OptimizerState {
            method: Method::Sgd,
            ..Self::adam(lr, len)
        }
    }

    pub fn len(&self) -> usize {
        self.first_moment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.first_moment.is_empty()
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Advances the moment estimates by one step and returns the update to
    /// subtract from the parameters. `blocks` is only used to name the
    /// offending block in error messages; pass `&[]` for unnamed vectors.
    pub fn direction(&mut self, grads: &[f64], blocks: &[ParamBlock]) -> Result<Vec<f64>> {
        if grads.len() != self.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} gradients for an optimizer over {} parameters",
                grads.len(),
                self.len()
            )));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {}", describe(i, blocks))));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::invalid("lr", format!("learning rate must be positive, got {}", self.lr)));
        }
        self.step_count += 1;
        match self.method {
            Method::Sgd => Ok(grads.iter().map(|g| self.lr * g).collect()),
            Method::Adam => {
                let t = self.step_count as i32;
                let c1 = 1.0 - self.beta1.powi(t);
                let c2 = 1.0 - self.beta2.powi(t);
                let mut out = Vec::with_capacity(grads.len());
                for ((g, m), v) in grads.iter().zip(&mut self.first_moment).zip(&mut self.second_moment) {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let m_hat = *m / c1;
                    let v_hat = *v / c2;
                    out.push(self.lr * m_hat / (v_hat.sqrt() + self.eps));
                }
                Ok(out)
            }
        }
    }
}

fn describe(index: usize, blocks: &[ParamBlock]) -> String {
    match blocks.iter().find(|b| b.range().contains(&index)) {
        Some(b) => format!("parameter block `{}` (element {})", b.name, index - b.offset),
        None => format!("parameter {index}"),
    }
}

/// One optimizer step in place. Fails without touching `params` if the
/// gradient or the resulting parameters are not finite.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut OptimizerState, blocks: &[ParamBlock]) -> Result<()> {
    if params.len() != state.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} parameters for an optimizer over {}",
            params.len(),
            state.len()
        )));
    }
    let update = state.direction(grads, blocks)?;
    if let Some(i) = params.iter().zip(&update).position(|(p, u)| !(p - u).is_finite()) {
        return Err(Error::NonFinite(format!("update of {}", describe(i, blocks))));
    }
    params.iter_mut().zip(&update).for_each(|(p, u)| *p -= u);
    Ok(())
}
