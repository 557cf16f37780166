//! SGD with momentum and weight decay:
//! v = momentum * v + g + wd * p; p -= lr * v.

use crate::error::{Error, Result};
use crate::nn::layers::Params;

/// One velocity buffer per parameter block, in visit order.
pub struct SgdState {
    velocities: Vec<Vec<f64>>,
}

impl SgdState {
    pub fn new(model: &dyn Params) -> Self {
        let mut velocities = Vec::new();
        model.visit(&mut |_, p| velocities.push(vec![0.0; p.data.len()]));
        SgdState { velocities }
    }

    /// Apply one update from the accumulated gradients, then clear them.
    /// Non-finite gradients abort before any parameter is touched.
    pub fn step(
        &mut self,
        model: &mut dyn Params,
        lr: f64,
        momentum: f64,
        weight_decay: f64,
    ) -> Result<()> {
        let mut bad: Option<String> = None;
        model.visit(&mut |name, p| {
            if bad.is_none() && p.grad.iter().any(|g| !g.is_finite()) {
                bad = Some(name.to_string());
            }
        });
        if let Some(name) = bad {
            return Err(Error::NonFinite(format!(
                "non-finite gradient in parameter {name}"
            )));
        }
        let mut i = 0;
        model.visit_mut(&mut |_, p| {
            let vel = &mut self.velocities[i];
            for ((v, d), g) in vel.iter_mut().zip(p.data.iter_mut()).zip(p.grad.iter_mut()) {
                *v = momentum * *v + *g + weight_decay * *d;
                *d -= lr * *v;
                *g = 0.0;
            }
            i += 1;
        });
        Ok(())
    }
}
