//! AdamW with decoupled weight decay and global-norm gradient clipping.
//!
//! Both operate on the `grad` slots of a [`Module`]'s parameters.

use crate::error::TrainError;
use crate::module::Module;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 5e-6,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First and second moments per parameter, in visit order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState<T> {
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamWState<T> {
    pub fn new<M: Module<T>>(model: &M) -> Self {
        let mut m = Vec::new();
        model.visit("", &mut |_, t| m.push(vec![T::zero(); t.numel()]));
        Self {
            step: 0,
            v: m.clone(),
            m,
        }
    }
}

/// Fails on the first parameter whose gradient holds a NaN or infinity.
pub fn check_finite_grads<T: Scalar, M: Module<T>>(model: &M) -> Result<(), TrainError> {
    let mut bad = None;
    model.visit("", &mut |name, t| {
        if bad.is_none()
            && t.grad
                .as_ref()
                .is_some_and(|g| g.iter().any(|x| !x.is_finite()))
        {
            bad = Some(name.to_string());
        }
    });
    match bad {
        Some(name) => Err(TrainError::NonFiniteGradient(name)),
        None => Ok(()),
    }
}

/// Global L2 norm of all gradients.
pub fn grad_norm<T: Scalar, M: Module<T>>(model: &M) -> f64 {
    let mut sq = 0.0;
    model.visit("", &mut |_, t| {
        if let Some(g) = &t.grad {
            sq += g.iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>();
        }
    });
    sq.sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm<T: Scalar, M: Module<T>>(model: &mut M, max_norm: f64) -> f64 {
    let norm = grad_norm(model);
    if norm > max_norm && norm > 0.0 {
        let s = T::of(max_norm / norm);
        model.for_each_param_mut(&mut |t| {
            if let Some(g) = &mut t.grad {
                g.iter_mut().for_each(|x| *x *= s);
            }
        });
    }
    norm
}

/// One AdamW update from the current gradient slots. Parameters without a
/// gradient are treated as having gradient zero (decay still applies).
pub fn adamw_step<T: Scalar, M: Module<T>>(
    model: &mut M,
    state: &mut AdamWState<T>,
    cfg: &AdamWConfig,
) -> Result<(), TrainError> {
    check_finite_grads(model)?;
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let one = T::one();
    let bc1 = one - b1.powi(t);
    let bc2 = one - b2.powi(t);
    let lr = T::of(cfg.lr);
    let eps = T::of(cfg.eps);
    let decay = one - lr * T::of(cfg.weight_decay);

    let mut k = 0;
    let mut shape_err = None;
    model.visit_mut("", &mut |name, p| {
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        k += 1;
        if m.len() != p.numel() {
            shape_err.get_or_insert_with(|| name.to_string());
            return;
        }
        let grad = p.grad.take();
        let data = p.data_mut();
        for i in 0..data.len() {
            let g = grad.as_ref().map_or(T::zero(), |g| g[i]);
            m[i] = b1 * m[i] + (one - b1) * g;
            v[i] = b2 * v[i] + (one - b2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            data[i] = data[i] * decay - lr * m_hat / (v_hat.sqrt() + eps);
        }
        p.grad = grad;
    });
    match shape_err {
        Some(name) => Err(TrainError::Config(format!(
            "optimizer state does not match parameter `{name}`"
        ))),
        None => Ok(()),
    }
}
