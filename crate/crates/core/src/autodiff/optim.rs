use super::{AutodiffError, Tensor};
use crate::scalar::Scalar;

/// Stochastic gradient descent with heavy-ball momentum and L2 weight decay.
///
/// Each step applies `g' = g + wd·θ`, `v ← μ·v + g'`, `θ ← θ − lr·v`.
#[derive(Debug, Clone)]
pub struct Sgd<S> {
    pub learning_rate: S,
    pub momentum: S,
    pub weight_decay: S,
    velocity: Vec<Tensor<S>>,
}

impl<S: Scalar> Sgd<S> {
    /// Velocities start at zero, one per parameter tensor.
    pub fn new(params: &[&Tensor<S>], learning_rate: S, momentum: S, weight_decay: S) -> Self {
        assert!(learning_rate > S::zero(), "learning rate must be positive");
        assert!(
            momentum >= S::zero() && momentum < S::one(),
            "momentum must lie in [0, 1)"
        );
        assert!(weight_decay >= S::zero(), "weight decay must be non-negative");
        Self {
            learning_rate,
            momentum,
            weight_decay,
            velocity: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn velocity(&self) -> &[Tensor<S>] {
        &self.velocity
    }

    pub fn reset_velocity(&mut self) {
        self.velocity.iter_mut().for_each(Tensor::fill_zero);
    }

    /// Updates `params` in place from `grads`, which the caller then discards.
    ///
    /// Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, params: &mut [&mut Tensor<S>], grads: &[Tensor<S>]) -> Result<(), AutodiffError> {
        if params.len() != grads.len() || params.len() != self.velocity.len() {
            return Err(AutodiffError::ParamCount(params.len(), grads.len()));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if !p.same_shape(g) || !p.same_shape(&self.velocity[i]) {
                return Err(AutodiffError::ShapeMismatch(format!(
                    "parameter {i} has shape {:?}, gradient {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
            if !g.is_finite() {
                return Err(AutodiffError::NonFiniteGradient(i));
            }
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            for ((theta, &grad), vel) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                let decayed = grad + self.weight_decay * *theta;
                *vel = self.momentum * *vel + decayed;
                *theta -= self.learning_rate * *vel;
            }
        }
        Ok(())
    }
}
