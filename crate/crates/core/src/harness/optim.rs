use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

/// Linear warm-up from 0 to `base` over `warmup` steps, then cosine decay to
/// 0 at `total`.
pub fn lr_schedule(step: usize, warmup: usize, total: usize, base: f64) -> f64 {
    if step < warmup {
        return base * step as f64 / warmup as f64;
    }
    if total <= warmup {
        return base;
    }
    let t = (step.min(total) - warmup) as f64 / (total - warmup) as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-5 }
    }
}

/// First and second moments per parameter, plus the update count.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Real> OptimState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = || store.ids().map(|id| Tensor::zeros(store.get(id).dims())).collect();
        Self { m: zeros(), v: zeros(), step: 0 }
    }
}

/// One decoupled-weight-decay Adam update at learning rate `lr`:
/// `p ← p·(1 − lr·λ) − lr·m̂/(√v̂ + ε)`. Parameters without a gradient are
/// left untouched.
pub fn adamw_step<T: Real>(
    store: &mut ParamStore<T>,
    grads: &[Option<Tensor<T>>],
    state: &mut OptimState<T>,
    hyper: &AdamW,
    lr: f64,
) -> Result<()> {
    if grads.len() != store.len() || state.m.len() != store.len() {
        return Err(Error::Shape(format!(
            "{} gradients and {} moment slots for {} parameters",
            grads.len(),
            state.m.len(),
            store.len()
        )));
    }
    let ids: Vec<_> = store.ids().collect();
    for (&id, g) in ids.iter().zip(grads) {
        if let Some(g) = g {
            if g.dims() != store.get(id).dims() {
                return Err(Error::Shape(format!("gradient of {} has dims {:?}", store.name(id), g.dims())));
            }
            if !g.all_finite() {
                return Err(Error::Numeric(format!("non-finite gradient for {}", store.name(id))));
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::lit(hyper.beta1), T::lit(hyper.beta2));
    let (one, eps, lr_t) = (T::one(), T::lit(hyper.eps), T::lit(lr));
    let decay = one - T::lit(lr * hyper.weight_decay);
    let bc1 = one - T::lit(hyper.beta1.powi(t));
    let bc2 = one - T::lit(hyper.beta2.powi(t));
    for (&id, g) in ids.iter().zip(grads) {
        let Some(g) = g else { continue };
        let i = id.index();
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        let p = store.get_mut(id).data_mut();
        for (((p, m), v), &g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let update = (*m / bc1) / ((*v / bc2).sqrt() + eps);
            *p = *p * decay - lr_t * update;
        }
    }
    Ok(())
}
