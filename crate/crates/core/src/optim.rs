//! First-order optimizers over a flat parameter vector.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Rmsprop,
    Sgd,
}

impl OptimizerKind {
    pub const ALL: [OptimizerKind; 3] = [OptimizerKind::Adam, OptimizerKind::Rmsprop, OptimizerKind::Sgd];

    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Rmsprop => "rmsprop",
            OptimizerKind::Sgd => "sgd",
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "adam" => Ok(OptimizerKind::Adam),
            "rmsprop" => Ok(OptimizerKind::Rmsprop),
            "sgd" => Ok(OptimizerKind::Sgd),
            other => Err(Error::Config(format!("unknown optimizer `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub dropout_rate: f64,
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout rate must lie in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Constants {
    pub beta1: f64,
    pub beta2: f64,
    pub rho: f64,
    pub epsilon: f64,
}

impl Default for Constants {
    fn default() -> Self {
        Constants {
            beta1: 0.9,
            beta2: 0.999,
            rho: 0.9,
            epsilon: 1e-7,
        }
    }
}

/// Running state of one optimizer over one parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub constants: Constants,
    pub step: u64,
    /// Adam only.
    pub first_moment: Vec<f64>,
    /// Adam and RMSprop.
    pub second_moment: Vec<f64>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind) -> Self {
        Self::with_constants(kind, Constants::default())
    }

    pub fn with_constants(kind: OptimizerKind, constants: Constants) -> Self {
        OptimizerState {
            kind,
            constants,
            step: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        }
    }

    fn ensure_moments(&mut self, len: usize) -> Result<()> {
        let (first, second) = match self.kind {
            OptimizerKind::Adam => (true, true),
            OptimizerKind::Rmsprop => (false, true),
            OptimizerKind::Sgd => (false, false),
        };
        for (wanted, moment) in [(first, &mut self.first_moment), (second, &mut self.second_moment)] {
            if !wanted {
                continue;
            }
            if moment.is_empty() {
                moment.resize(len, 0.0);
            } else if moment.len() != len {
                return Err(Error::Length {
                    left: moment.len(),
                    right: len,
                });
            }
        }
        Ok(())
    }

    /// One update of `params` against `grads` with learning rate `lr`.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Length {
                left: params.len(),
                right: grads.len(),
            });
        }
        let t = self.step + 1;
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient { step: t });
        }
        self.ensure_moments(params.len())?;
        let Constants {
            beta1,
            beta2,
            rho,
            epsilon,
        } = self.constants;

        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    *p -= lr * g;
                }
            }
            OptimizerKind::Rmsprop => {
                for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.second_moment) {
                    *v = rho * *v + (1.0 - rho) * g * g;
                    *p -= lr * g / (v.sqrt() + epsilon);
                }
            }
            OptimizerKind::Adam => {
                let correct1 = 1.0 - beta1.powi(t as i32);
                let correct2 = 1.0 - beta2.powi(t as i32);
                let moments = self.first_moment.iter_mut().zip(&mut self.second_moment);
                for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(moments) {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let m_hat = *m / correct1;
                    let v_hat = *v / correct2;
                    *p -= lr * m_hat / (v_hat.sqrt() + epsilon);
                }
            }
        }
        self.step = t;
        Ok(())
    }
}
