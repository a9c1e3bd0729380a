use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr0: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Per-epoch learning-rate multiplier.
    pub decay_gamma: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self::paper_faithful()
    }
}

impl AdamConfig {
    /// lr 1e-5 with exponential decay 0.9 per epoch.
    pub fn paper_faithful() -> Self {
        Self { lr0: 1e-5, beta1: 0.9, beta2: 0.999, eps: 1e-8, decay_gamma: 0.9 }
    }

    pub fn with_lr(lr0: f64, decay_gamma: f64) -> Self {
        Self { lr0, decay_gamma, ..Self::paper_faithful() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub epoch: u32,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
}

impl AdamState {
    pub fn new(parameter_count: usize, config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            epoch: 0,
            first_moment: vec![0.0; parameter_count],
            second_moment: vec![0.0; parameter_count],
        }
    }

    /// `lr0 · γ^epoch`
    pub fn learning_rate(&self) -> f64 {
        self.config.lr0 * self.config.decay_gamma.powi(self.epoch as i32)
    }

    pub fn next_epoch(&mut self) {
        self.epoch += 1;
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(Error::invalid(format!(
            "adam length mismatch: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.first_moment.len()
        )));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::numeric(format!("non-finite gradient at index {i}")));
    }
    state.step += 1;
    let AdamConfig { beta1, beta2, eps, .. } = state.config;
    let lr = state.learning_rate();
    let bc1 = 1.0 - beta1.powi(state.step as i32);
    let bc2 = 1.0 - beta2.powi(state.step as i32);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.first_moment.iter_mut())
        .zip(state.second_moment.iter_mut())
    {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_identity() {
        let mut p = vec![0.3, -1.2, 4.0];
        let before = p.clone();
        let mut st = AdamState::new(3, AdamConfig::with_lr(0.1, 1.0));
        adam_step(&mut p, &[0.0; 3], &mut st).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn minimizes_a_parabola() {
        let mut theta = vec![1.0];
        let mut st = AdamState::new(1, AdamConfig::with_lr(0.1, 1.0));
        let mut reached = None;
        for step in 0..500 {
            let g = [2.0 * theta[0]];
            adam_step(&mut theta, &g, &mut st).unwrap();
            if theta[0].abs() < 1e-3 {
                reached = Some(step);
                break;
            }
        }
        assert!(reached.is_some(), "theta = {}", theta[0]);
    }

    #[test]
    fn learning_rate_decays_per_epoch() {
        let mut st = AdamState::new(1, AdamConfig::with_lr(0.5, 0.9));
        st.next_epoch();
        st.next_epoch();
        assert!((st.learning_rate() - 0.81 * 0.5).abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradient_is_numeric_error() {
        let mut p = vec![0.0; 2];
        let mut st = AdamState::new(2, AdamConfig::default());
        let r = adam_step(&mut p, &[1.0, f64::NAN], &mut st);
        assert!(matches!(r, Err(Error::Numeric { .. })));
        assert!(adam_step(&mut p, &[1.0], &mut st).is_err());
    }

    #[test]
    fn paper_preset() {
        let c = AdamConfig::paper_faithful();
        assert_eq!(c.lr0, 1e-5);
        assert_eq!(c.decay_gamma, 0.9);
    }
}
