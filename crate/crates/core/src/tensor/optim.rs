use super::Tensor;
use crate::error::{ensure, Result};

/// SGD with classical momentum and L2 weight decay for one parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(learning_rate: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        ensure!(
            (0.0..1.0).contains(&momentum),
            "momentum {momentum} outside [0, 1)"
        );
        ensure!(weight_decay >= 0.0, "weight decay {weight_decay} is negative");
        ensure!(
            learning_rate.is_finite() && learning_rate >= 0.0,
            "learning rate {learning_rate} is invalid"
        );
        Ok(Self {
            learning_rate,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        })
    }

    /// Momentum 0.9 and weight decay 5e-4.
    pub fn with_defaults(learning_rate: f64) -> Result<Self> {
        Self::new(learning_rate, 0.9, 5e-4)
    }

    pub fn velocity(&self) -> &[Vec<f64>] {
        &self.velocity
    }
}

/// `g' = g + wd * w; v = momentum * v + g'; w -= lr * v`, then clears grads.
/// Velocities are created as zeros on the first step.
pub fn sgd_step(params: &mut [Tensor], state: &mut OptimizerState) -> Result<()> {
    if state.velocity.is_empty() {
        state.velocity = params.iter().map(|p| vec![0.0; p.numel()]).collect();
    }
    ensure!(
        state.velocity.len() == params.len(),
        "optimizer tracks {} parameters, got {}",
        state.velocity.len(),
        params.len()
    );
    for (i, (p, v)) in params.iter().zip(&state.velocity).enumerate() {
        ensure!(p.grad().is_some(), "parameter {i} has no gradient");
        ensure!(v.len() == p.numel(), "velocity {i} does not match its parameter");
    }
    let (lr, mu, wd) = (state.learning_rate, state.momentum, state.weight_decay);
    for (p, v) in params.iter_mut().zip(&mut state.velocity) {
        let g = p.grad.take().expect("checked above");
        for ((w, vel), g) in p.data.iter_mut().zip(v.iter_mut()).zip(g) {
            let g = g + wd * *w;
            *vel = mu * *vel + g;
            *w -= lr * *vel;
        }
    }
    Ok(())
}
