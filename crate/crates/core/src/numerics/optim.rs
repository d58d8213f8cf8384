use super::{NumericsError, ParamSet, Result, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm bound applied before each update.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(1.0),
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
}

/// Adaptive-moment optimizer state for one [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamSet) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one bias-corrected update. Gradients are clipped in place.
    pub fn step(&mut self, params: &mut ParamSet, grads: &mut [Tensor]) -> Result<StepStats> {
        if params.len() != grads.len() || self.m.len() != grads.len() {
            return Err(NumericsError::ParamCount {
                params: params.len(),
                grads: grads.len(),
            });
        }
        for (i, (p, g)) in params.tensors().iter().zip(grads.iter()).enumerate() {
            if p.shape() != g.shape() || self.m[i].len() != g.len() {
                return Err(NumericsError::Shape {
                    op: "Adam::step",
                    detail: format!("param {i}: {:?} vs grad {:?}", p.shape(), g.shape()),
                });
            }
            if !g.is_finite() {
                return Err(NumericsError::NonFiniteGradient(i));
            }
        }
        let grad_norm = match self.config.clip_norm {
            Some(c) => clip_global_norm(grads, c),
            None => grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt(),
        };
        let clipped = self.config.clip_norm.is_some_and(|c| grad_norm > c);

        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            ..
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, (p, g)) in params.tensors_mut().iter_mut().zip(grads.iter()).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(StepStats { grad_norm, clipped })
    }
}

/// Rescale `grads` so their joint L2 norm is at most `max_norm`.
/// Returns the norm before rescaling.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}
