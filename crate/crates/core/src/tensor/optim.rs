use serde::{Deserialize, Serialize};

use super::{ParamVector, Result, TensorError};

pub const ADAM_BETAS: (f64, f64) = (0.9, 0.999);
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// First-order optimizer over one [`ParamVector`]. Moments are allocated
/// lazily on the first step so they always mirror the vector they update.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub betas: (f64, f64),
    pub epsilon: f64,
    pub step_count: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn adam(learning_rate: f64) -> Self {
        Self::new(OptimizerKind::Adam, learning_rate)
    }

    pub fn sgd(learning_rate: f64) -> Self {
        Self::new(OptimizerKind::Sgd, learning_rate)
    }

    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Self {
        OptimizerState {
            kind,
            learning_rate,
            betas: ADAM_BETAS,
            epsilon: ADAM_EPS,
            step_count: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.m, &self.v)
    }

    /// Applies one update using the accumulated grads. Grads are left in
    /// place; call [`ParamVector::zero_grad`] separately.
    pub fn step(&mut self, params: &mut ParamVector) -> Result<()> {
        let grads = params
            .iter()
            .map(|(name, t)| {
                t.grad().ok_or_else(|| {
                    TensorError::Contract(format!("parameter `{name}` has no gradient"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        } else if self.m.len() != grads.len()
            || self.m.iter().zip(&grads).any(|(m, g)| m.len() != g.len())
        {
            return Err(TensorError::Contract(
                "optimizer moments do not mirror the parameter vector".into(),
            ));
        }
        self.step_count += 1;
        let lr = self.learning_rate;
        match self.kind {
            OptimizerKind::Sgd => {
                for ((_, t), g) in params.iter_mut().zip(&grads) {
                    t.assign(|d| d.iter_mut().zip(g).for_each(|(p, g)| *p -= lr * g))?;
                }
            }
            OptimizerKind::Adam => {
                let (b1, b2) = self.betas;
                let eps = self.epsilon;
                let t = self.step_count as i32;
                let c1 = 1.0 - b1.powi(t);
                let c2 = 1.0 - b2.powi(t);
                for (((_, p), g), (m, v)) in params
                    .iter_mut()
                    .zip(&grads)
                    .zip(self.m.iter_mut().zip(self.v.iter_mut()))
                {
                    for ((m, v), g) in m.iter_mut().zip(v.iter_mut()).zip(g) {
                        *m = b1 * *m + (1.0 - b1) * g;
                        *v = b2 * *v + (1.0 - b2) * g * g;
                    }
                    p.assign(|d| {
                        for ((p, m), v) in d.iter_mut().zip(m.iter()).zip(v.iter()) {
                            let mh = m / c1;
                            let vh = v / c2;
                            *p -= lr * mh / (vh.sqrt() + eps);
                        }
                    })?;
                }
            }
        }
        Ok(())
    }
}
