use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Polynomial decay, reaching zero at `step == total`.
pub fn poly_lr(base_lr: f64, step: usize, total: usize, power: f64) -> f64 {
    if total == 0 {
        return base_lr;
    }
    let frac = (step.min(total) as f64) / total as f64;
    base_lr * (1.0 - frac).powf(power)
}

/// One momentum step on a flat slice: `v ← m·v + g + wd·θ`, `θ ← θ − lr·v`.
pub fn sgd_update(theta: &mut [f64], velocity: &mut [f64], grad: &[f64], lr: f64, momentum: f64, weight_decay: f64) {
    for ((t, v), g) in theta.iter_mut().zip(velocity.iter_mut()).zip(grad) {
        *v = momentum * *v + g + weight_decay * *t;
        *t -= lr * *v;
    }
}

/// Scales all gradients by a common factor so their joint L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

/// SGD with momentum over the learnable entries of a store.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    ids: Vec<ParamId>,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(store: &ParamStore, momentum: f64, weight_decay: f64) -> Self {
        let ids: Vec<ParamId> = store.learnable_ids().collect();
        let velocity = ids.iter().map(|&id| vec![0.0; store.value(id).len()]).collect();
        Sgd {
            momentum,
            weight_decay,
            ids,
            velocity,
        }
    }

    pub fn ids(&self) -> &[ParamId] {
        &self.ids
    }

    /// `grads[i]` belongs to `self.ids()[i]`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != self.ids.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} gradients, got {}",
                self.ids.len(),
                grads.len()
            )));
        }
        for ((&id, v), g) in self.ids.iter().zip(&mut self.velocity).zip(grads) {
            let theta = store.value_mut(id).data_mut();
            if g.len() != theta.len() {
                return Err(Error::shape("sgd_step", format!("gradient {} vs param {}", g.len(), theta.len())));
            }
            sgd_update(theta, v, g.data(), lr, self.momentum, self.weight_decay);
        }
        Ok(())
    }
}
