//! SGD with momentum.

use crate::tensor::{Element, Result, Tensor, TensorError};

/// Momentum SGD state. Velocity buffers are created on the first step and
/// keyed by the position of each parameter in the slice passed to
/// [`sgd_step`], so callers must pass parameters in a stable order.
#[derive(Clone, Debug)]
pub struct SgdState<E: Element = f32> {
    pub learning_rate: E,
    pub momentum: E,
    /// L2 penalty added to every gradient as `weight_decay * p`; zero by
    /// default.
    pub weight_decay: E,
    /// When set, gradients are rescaled so their joint L2 norm does not
    /// exceed this value.
    pub max_grad_norm: Option<E>,
    velocity: Vec<Vec<E>>,
}

impl<E: Element> SgdState<E> {
    pub fn new(learning_rate: E, momentum: E) -> Result<Self> {
        if !(learning_rate >= E::zero()) || !learning_rate.is_finite() {
            return Err(TensorError::InvalidArgument {
                op: "SgdState::new",
                detail: format!("learning rate must be finite and non-negative, got {learning_rate:?}"),
            });
        }
        if !(momentum >= E::zero() && momentum < E::one()) {
            return Err(TensorError::InvalidArgument {
                op: "SgdState::new",
                detail: format!("momentum must lie in [0, 1), got {momentum:?}"),
            });
        }
        Ok(Self {
            learning_rate,
            momentum,
            weight_decay: E::zero(),
            max_grad_norm: None,
            velocity: Vec::new(),
        })
    }

    pub fn with_weight_decay(mut self, weight_decay: E) -> Result<Self> {
        if !(weight_decay >= E::zero()) || !weight_decay.is_finite() {
            return Err(TensorError::InvalidArgument {
                op: "SgdState::with_weight_decay",
                detail: format!("weight decay must be finite and non-negative, got {weight_decay:?}"),
            });
        }
        self.weight_decay = weight_decay;
        Ok(self)
    }

    pub fn with_max_grad_norm(mut self, max_norm: E) -> Result<Self> {
        if !(max_norm > E::zero()) || !max_norm.is_finite() {
            return Err(TensorError::InvalidArgument {
                op: "SgdState::with_max_grad_norm",
                detail: format!("norm bound must be finite and positive, got {max_norm:?}"),
            });
        }
        self.max_grad_norm = Some(max_norm);
        Ok(self)
    }

    pub fn velocity(&self) -> &[Vec<E>] {
        &self.velocity
    }
}

/// `v <- momentum * v + grad + weight_decay * p; p <- p - lr * v`, then
/// clears every gradient. With a norm bound, `grad` is first scaled by
/// `min(1, bound / ||grad||)` over all parameters jointly.
///
/// Fails without touching any parameter if one of them has no gradient.
pub fn sgd_step<E: Element>(params: &mut [(&str, &mut Tensor<E>)], state: &mut SgdState<E>) -> Result<()> {
    if let Some((name, _)) = params.iter().find(|(_, p)| p.grad().is_none()) {
        return Err(TensorError::MissingGrad((*name).to_string()));
    }
    if state.velocity.is_empty() {
        state.velocity = params.iter().map(|(_, p)| vec![E::zero(); p.numel()]).collect();
    }
    if state.velocity.len() != params.len()
        || state.velocity.iter().zip(params.iter()).any(|(v, (_, p))| v.len() != p.numel())
    {
        return Err(TensorError::InvalidArgument {
            op: "sgd_step",
            detail: "parameter set does not match the optimizer's velocity buffers".into(),
        });
    }
    let scale = match state.max_grad_norm {
        None => E::one(),
        Some(bound) => {
            let sq = params
                .iter()
                .flat_map(|(_, p)| p.grad().expect("checked above").iter())
                .fold(E::zero(), |acc, &g| acc + g * g);
            let norm = sq.sqrt();
            if norm > bound {
                bound / norm
            } else {
                E::one()
            }
        }
    };
    for ((_, param), vel) in params.iter_mut().zip(state.velocity.iter_mut()) {
        let grad = param.grad().expect("checked above").to_vec();
        let (lr, wd) = (state.learning_rate, state.weight_decay);
        for ((v, g), p) in vel.iter_mut().zip(&grad).zip(param.data_mut()) {
            *v = state.momentum * *v + scale * *g + wd * *p;
            *p = *p - lr * *v;
        }
        param.zero_grad();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(value: f64, grad: f64) -> Tensor<f64> {
        let mut t = Tensor::full([1], value);
        t.accumulate_grad(&[grad]).unwrap();
        t
    }

    #[test]
    fn plain_step() {
        let mut p = param(1.0, 1.0);
        let mut s = SgdState::new(0.1, 0.0).unwrap();
        sgd_step(&mut [("p", &mut p)], &mut s).unwrap();
        assert!((p.data()[0] - 0.9).abs() < 1e-15);
        assert!(p.grad().is_none());
    }

    #[test]
    fn clipping_rescales_the_joint_gradient() {
        let mut a = param(0.0, 3.0);
        let mut b = param(0.0, 4.0);
        let mut s = SgdState::new(1.0, 0.0).unwrap().with_max_grad_norm(1.0).unwrap();
        sgd_step(&mut [("a", &mut a), ("b", &mut b)], &mut s).unwrap();
        assert!((a.data()[0] + 0.6).abs() < 1e-12);
        assert!((b.data()[0] + 0.8).abs() < 1e-12);

        let mut c = param(0.0, 0.5);
        sgd_step(&mut [("a", &mut c)], &mut SgdState::new(1.0, 0.0).unwrap().with_max_grad_norm(1.0).unwrap()).unwrap();
        assert_eq!(c.data()[0], -0.5);
        assert!(SgdState::<f64>::new(1.0, 0.0).unwrap().with_max_grad_norm(0.0).is_err());
    }

    #[test]
    fn zero_lr_is_a_no_op() {
        let mut p = param(0.25, 3.0);
        let mut s = SgdState::new(0.0, 0.9).unwrap();
        sgd_step(&mut [("p", &mut p)], &mut s).unwrap();
        assert_eq!(p.data()[0], 0.25);
    }

    #[test]
    fn momentum_recurrence() {
        let (lr, g) = (0.1, 2.0);
        let mut p = param(5.0, g);
        let mut s = SgdState::new(lr, 0.9).unwrap();
        sgd_step(&mut [("p", &mut p)], &mut s).unwrap();
        let after_one = p.data()[0];
        assert!((5.0 - after_one - lr * g).abs() < 1e-12);
        p.accumulate_grad(&[g]).unwrap();
        sgd_step(&mut [("p", &mut p)], &mut s).unwrap();
        assert!((after_one - p.data()[0] - lr * 1.9 * g).abs() < 1e-12);
    }

    #[test]
    fn missing_grad_is_rejected_before_any_update() {
        let mut a = param(1.0, 1.0);
        let mut b = Tensor::<f64>::full([1], 1.0);
        let mut s = SgdState::new(0.1, 0.0).unwrap();
        let err = sgd_step(&mut [("a", &mut a), ("b", &mut b)], &mut s).unwrap_err();
        assert_eq!(err, TensorError::MissingGrad("b".into()));
        assert_eq!(a.data()[0], 1.0);
    }

    #[test]
    fn weight_decay_shrinks_towards_zero() {
        let mut p = param(2.0, 0.0);
        let mut s = SgdState::new(0.1, 0.0).unwrap().with_weight_decay(0.5).unwrap();
        sgd_step(&mut [("p", &mut p)], &mut s).unwrap();
        assert!((p.data()[0] - 1.9).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        assert!(SgdState::<f32>::new(-0.1, 0.0).is_err());
        assert!(SgdState::<f32>::new(0.1, 1.0).is_err());
        assert!(SgdState::<f32>::new(0.1, 0.0).unwrap().with_weight_decay(-1.0).is_err());
    }
}
