use serde::{Deserialize, Serialize};

use super::tensor::{Real, Tensor2};

/// Feasible set for a trainable tensor.
#[derive(Clone, Debug, PartialEq)]
pub enum Constraint {
    Free,
    /// Every entry is kept in `[0, inf)`.
    NonNeg,
    /// Entries marked `true` are kept in `[0, inf)`; the rest are structural
    /// zeros and never move.
    Support(Vec<bool>),
}

impl Constraint {
    #[inline]
    pub fn is_structural_zero(&self, idx: usize) -> bool {
        matches!(self, Constraint::Support(mask) if !mask[idx])
    }

    #[inline]
    pub fn is_nonneg(&self, idx: usize) -> bool {
        match self {
            Constraint::Free => false,
            Constraint::NonNeg => true,
            Constraint::Support(mask) => mask[idx],
        }
    }
}

/// A trainable tensor together with its gradient buffer and feasible set.
#[derive(Clone, Debug)]
pub struct ParamTensor<T = f32> {
    pub value: Tensor2<T>,
    pub grad: Tensor2<T>,
    pub constraint: Constraint,
}

impl<T: Real> ParamTensor<T> {
    pub fn new(value: Tensor2<T>, constraint: Constraint) -> Self {
        if let Constraint::Support(mask) = &constraint {
            assert_eq!(
                mask.len(),
                value.len(),
                "support mask does not match tensor"
            );
        }
        let grad = Tensor2::zeros(value.rows(), value.cols());
        let mut p = Self {
            value,
            grad,
            constraint,
        };
        p.project();
        p
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    /// Clamp constrained entries to zero from below and re-zero structural zeros.
    pub fn project(&mut self) {
        match &self.constraint {
            Constraint::Free => {}
            Constraint::NonNeg => {
                for v in self.value.data_mut() {
                    *v = v.max(T::zero());
                }
            }
            Constraint::Support(mask) => {
                for (v, &on) in self.value.data_mut().iter_mut().zip(mask) {
                    *v = if on { v.max(T::zero()) } else { T::zero() };
                }
            }
        }
    }

    /// Smallest value over entries that must be non-negative.
    pub fn min_constrained(&self) -> Option<T> {
        self.value
            .data()
            .iter()
            .enumerate()
            .filter(|(i, _)| self.constraint.is_nonneg(*i))
            .map(|(_, &v)| v)
            .reduce(T::min)
    }

    pub fn cast<U: Real>(&self) -> ParamTensor<U> {
        ParamTensor {
            value: self.value.cast(),
            grad: self.grad.cast(),
            constraint: self.constraint.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamState<T = f32> {
    pub m: Tensor2<T>,
    pub v: Tensor2<T>,
    pub t: u64,
}

impl<T: Real> AdamState<T> {
    pub fn for_param(p: &ParamTensor<T>) -> Self {
        let (r, c) = p.value.shape();
        Self {
            m: Tensor2::zeros(r, c),
            v: Tensor2::zeros(r, c),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update followed by projection onto the feasible set.
pub fn adam_step<T: Real>(p: &mut ParamTensor<T>, s: &mut AdamState<T>, cfg: &AdamConfig) {
    assert_eq!(
        s.m.shape(),
        p.value.shape(),
        "adam state does not match parameter"
    );
    s.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(s.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(s.t as i32);
    let value = p.value.data_mut();
    let grad = p.grad.data();
    let m = s.m.data_mut();
    let v = s.v.data_mut();
    for i in 0..value.len() {
        if p.constraint.is_structural_zero(i) {
            value[i] = T::zero();
            continue;
        }
        let g = grad[i].wide();
        let mi = cfg.beta1 * m[i].wide() + (1.0 - cfg.beta1) * g;
        let vi = cfg.beta2 * v[i].wide() + (1.0 - cfg.beta2) * g * g;
        m[i] = T::of(mi);
        v[i] = T::of(vi);
        let step = cfg.lr * (mi / bc1) / ((vi / bc2).sqrt() + cfg.eps);
        let mut next = value[i].wide() - step;
        if p.constraint.is_nonneg(i) {
            next = next.max(0.0);
        }
        value[i] = T::of(next);
    }
}
