use super::{NumericsError, ParameterStore};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One Adam update with bias correction over every parameter in `store`.
///
/// The step is refused, leaving the store untouched, if any gradient entry
/// is non-finite.
pub fn adam_step(store: &mut ParameterStore, cfg: &AdamConfig) -> Result<(), NumericsError> {
    for id in store.ids() {
        if !store.grad(id).is_finite() {
            return Err(NumericsError::NonFinite(store.name(id).to_string()));
        }
    }
    store.adam_steps += 1;
    let t = store.adam_steps as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let grad = store.grad(id).data().to_vec();
        let (value, m, v) = store.moments_mut(id);
        for i in 0..grad.len() {
            let g = grad[i];
            let mi = cfg.beta1 * m.data()[i] + (1.0 - cfg.beta1) * g;
            let vi = cfg.beta2 * v.data()[i] + (1.0 - cfg.beta2) * g * g;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            value.data_mut()[i] -= cfg.lr * (mi / c1) / ((vi / c2).sqrt() + cfg.eps);
        }
    }
    Ok(())
}
