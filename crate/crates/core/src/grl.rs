//! Gradient reversal: identity forward, `-lambda * grad` backward.
//!
//! Placing the layer between the feature extractor and the domain classifier
//! lets one backward pass minimize the domain loss in the classifier's
//! parameters while maximizing it in the extractor's.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrlConfig {
    /// Scale on the reversed gradient.
    pub lambda: f64,
    /// Ramp `lambda` with `2 / (1 + exp(-10 r)) - 1` over training progress `r`.
    pub warmup: bool,
}

impl Default for GrlConfig {
    fn default() -> Self {
        GrlConfig {
            lambda: 1.0,
            warmup: false,
        }
    }
}

impl GrlConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("grl_lambda", format!("{} must be finite and >= 0", self.lambda)));
        }
        Ok(())
    }

    /// Coefficient at training progress `progress` in `[0, 1]`.
    pub fn lambda_at(&self, progress: f64) -> f64 {
        if self.warmup {
            self.lambda * warmup_factor(progress)
        } else {
            self.lambda
        }
    }
}

pub fn warmup_factor(progress: f64) -> f64 {
    let r = progress.clamp(0.0, 1.0);
    2.0 / (1.0 + (-10.0 * r).exp()) - 1.0
}

/// Applies the reversal with the constant coefficient `cfg.lambda`.
pub fn grl_apply(g: &mut Graph, t: Var, cfg: &GrlConfig) -> Result<Var> {
    cfg.validate()?;
    Ok(g.grl(t, cfg.lambda))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::scalar;

    #[test]
    fn square_chain_example() {
        let mut g = Graph::new();
        let x = g.param(scalar(3.0));
        let r = grl_apply(&mut g, x, &GrlConfig::default()).unwrap();
        let y = g.mul(r, r);
        assert_eq!(g.scalar(y), 9.0);
        let grads = g.backward(y);
        let gx = grads.get(x).unwrap().sum();
        // d/dx x^2 = 6 at x = 3, reversed
        let eps = 1e-6;
        let fd = ((3.0f64 + eps).powi(2) - (3.0f64 - eps).powi(2)) / (2.0 * eps);
        assert!((gx + fd).abs() < 1e-6);
        assert!((gx + 6.0).abs() < 1e-12);
    }

    #[test]
    fn zero_lambda_blocks_gradient() {
        let mut g = Graph::new();
        let x = g.param(scalar(-2.5));
        let r = grl_apply(&mut g, x, &GrlConfig { lambda: 0.0, warmup: false }).unwrap();
        let y = g.mul(r, r);
        let gx = g.backward(y).get(x).unwrap().sum();
        assert_eq!(gx, 0.0);
    }

    #[test]
    fn negative_lambda_rejected() {
        let mut g = Graph::new();
        let x = g.param(scalar(1.0));
        let err = grl_apply(&mut g, x, &GrlConfig { lambda: -0.1, warmup: false }).unwrap_err();
        assert!(matches!(err, Error::Config { field: "grl_lambda", .. }));
    }

    #[test]
    fn warmup_ramps_from_zero_to_lambda() {
        let cfg = GrlConfig { lambda: 2.0, warmup: true };
        assert_eq!(cfg.lambda_at(0.0), 0.0);
        assert!((cfg.lambda_at(1.0) - 2.0 * (2.0 / (1.0 + (-10.0f64).exp()) - 1.0)).abs() < 1e-15);
        assert!(cfg.lambda_at(0.3) < cfg.lambda_at(0.6));
        assert_eq!(GrlConfig { warmup: false, ..cfg }.lambda_at(0.0), 2.0);
    }
}
