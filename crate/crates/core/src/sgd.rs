//! Momentum SGD with weight decay, as a fixed sequence of scale/axpy
//! passes. The threaded runtime issues the same passes as engine ops, so a
//! slice update here is its bitwise reference.

use crate::shape::Element;

#[derive(Clone, Copy, Debug, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("learning rate must be positive and finite, got {0}")]
    Eta(f64),
    #[error("momentum must lie in [0, 1), got {0}")]
    Momentum(f64),
    #[error("weight decay must be non-negative and finite, got {0}")]
    WeightDecay(f64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub eta: f64,
    pub momentum: f64,
    pub wd: f64,
}

impl OptimizerConfig {
    /// `eta = 0` is accepted for frozen-weight runs.
    pub fn new(eta: f64, momentum: f64, wd: f64) -> Result<Self, ConfigError> {
        if !(eta >= 0.0 && eta.is_finite()) {
            return Err(ConfigError::Eta(eta));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(ConfigError::Momentum(momentum));
        }
        if !(wd >= 0.0 && wd.is_finite()) {
            return Err(ConfigError::WeightDecay(wd));
        }
        Ok(OptimizerConfig { eta, momentum, wd })
    }

    /// Per-pass coefficients `(momentum, -eta, -eta * wd)`.
    pub fn coefficients<T: Element>(&self) -> (T, T, T) {
        (T::from_f64(self.momentum), T::from_f64(-self.eta), T::from_f64(-self.eta * self.wd))
    }
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig { eta: 0.05, momentum: 0.9, wd: 1e-4 }
    }
}

/// `y[i] = y[i] + alpha * x[i]`.
#[inline]
pub fn axpy<T: Element>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * xi;
    }
}

/// `y[i] = y[i] * c`.
#[inline]
pub fn scale<T: Element>(c: T, y: &mut [T]) {
    for yi in y.iter_mut() {
        *yi = *yi * c;
    }
}

/// One step: `v = m*v; v += -eta*g; v += -eta*wd*w; w += v`.
pub fn sgd_update<T: Element>(cfg: &OptimizerConfig, w: &mut [T], g: &[T], v: &mut [T]) {
    let (m, neg_eta, neg_decay) = cfg.coefficients::<T>();
    scale(m, v);
    axpy(neg_eta, g, v);
    axpy(neg_decay, w, v);
    axpy(T::one(), v, w);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_step() {
        let cfg = OptimizerConfig::new(0.1, 0.0, 0.0).unwrap();
        let (mut w, mut v) = ([1.0f64], [0.0]);
        sgd_update(&cfg, &mut w, &[0.5], &mut v);
        assert_eq!(w, [0.95]);
    }

    #[test]
    fn zero_gradient_decays_velocity_only() {
        let cfg = OptimizerConfig::new(0.1, 0.5, 0.0).unwrap();
        let (mut w, mut v) = ([2.0f64], [0.25]);
        sgd_update(&cfg, &mut w, &[0.0], &mut v);
        assert_eq!(v, [0.125]);
        assert_eq!(w, [2.125]);
    }

    #[test]
    fn two_momentum_steps_follow_the_scalar_recursion() {
        let (eta, mu, wd) = (0.05, 0.9, 1e-4);
        let cfg = OptimizerConfig::new(eta, mu, wd).unwrap();
        let (mut w, mut v) = ([1.0f64], [0.0]);
        let grads = [0.3, -0.7];
        let (mut ws, mut vs) = (1.0f64, 0.0f64);
        for g in grads {
            sgd_update(&cfg, &mut w, &[g], &mut v);
            vs = mu * vs - eta * (g + wd * ws);
            ws += vs;
        }
        assert!((w[0] - ws).abs() < 1e-15, "{} vs {ws}", w[0]);
        assert!((v[0] - vs).abs() < 1e-15);
    }

    #[test]
    fn rejects_out_of_range_settings() {
        assert_eq!(OptimizerConfig::new(-1.0, 0.0, 0.0), Err(ConfigError::Eta(-1.0)));
        assert_eq!(OptimizerConfig::new(0.1, 1.0, 0.0), Err(ConfigError::Momentum(1.0)));
        assert_eq!(OptimizerConfig::new(0.1, 0.0, -1e-3), Err(ConfigError::WeightDecay(-1e-3)));
        assert!(OptimizerConfig::new(f64::NAN, 0.0, 0.0).is_err());
    }
}
