use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{contract, Error, Result};

/// Momentum buffers for plain SGD with momentum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimState {
    pub learning_rate: f32,
    pub momentum: f32,
    velocity: Vec<Tensor<f32>>,
}

impl OptimState {
    /// Zero velocity for parameters with the given shapes.
    pub fn new<'a>(
        learning_rate: f32,
        momentum: f32,
        shapes: impl IntoIterator<Item = &'a [usize]>,
    ) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {learning_rate}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {momentum}")));
        }
        let velocity = shapes.into_iter().map(Tensor::zeros).collect();
        Ok(Self { learning_rate, momentum, velocity })
    }

    /// Rebuilds a state from stored velocity buffers.
    pub fn from_velocity(learning_rate: f32, momentum: f32, velocity: Vec<Tensor<f32>>) -> Result<Self> {
        let mut state = Self::new(learning_rate, momentum, std::iter::empty())?;
        state.velocity = velocity;
        Ok(state)
    }

    pub fn velocity(&self) -> &[Tensor<f32>] {
        &self.velocity
    }
}

/// One update: `v <- momentum * v + g`, then `p <- p - lr * v`.
pub fn sgd_momentum_step(
    params: &mut [&mut Tensor<f32>],
    grads: &[Tensor<f32>],
    state: &mut OptimState,
) -> Result<()> {
    contract!(
        params.len() == grads.len() && params.len() == state.velocity.len(),
        "optimizer got {} parameters, {} gradients and {} velocity buffers",
        params.len(),
        grads.len(),
        state.velocity.len()
    );
    for (i, ((p, g), v)) in params.iter().zip(grads).zip(&state.velocity).enumerate() {
        contract!(
            p.shape() == g.shape() && p.shape() == v.shape(),
            "parameter {i}: shape {:?}, gradient {:?}, velocity {:?}",
            p.shape(),
            g.shape(),
            v.shape()
        );
    }
    let (lr, mu) = (state.learning_rate, state.momentum);
    for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut state.velocity) {
        for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vv = mu * *vv + gv;
            *pv -= lr * *vv;
        }
    }
    Ok(())
}
