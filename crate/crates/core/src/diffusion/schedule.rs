//! Noise schedule, forward noising, the guided combination and one ancestral
//! reverse step. Tables and chain state are kept in `f64`.

use serde::{Deserialize, Serialize};

use crate::error::{LadError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceKind {
    /// `σ_t² = β_t`.
    Beta,
    /// `σ_t² = β_t (1 − ᾱ_{t−1}) / (1 − ᾱ_t)`.
    Posterior,
}

pub const BETA_START: f64 = 1e-4;
pub const BETA_END: f64 = 2e-2;

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

pub fn make_schedule(t: usize, kind: ScheduleKind) -> Result<NoiseSchedule> {
    if t < 2 {
        return Err(LadError::Config(format!("schedule needs T >= 2, got {t}")));
    }
    let beta: Vec<f64> = match kind {
        ScheduleKind::Linear => (0..t)
            .map(|i| {
                let f = i as f64 / (t - 1) as f64;
                BETA_START * (1.0 - f) + BETA_END * f
            })
            .collect(),
    };
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(t);
    let mut acc = 1.0;
    for a in &alpha {
        acc *= a;
        alpha_bar.push(acc);
    }
    Ok(NoiseSchedule { beta, alpha, alpha_bar })
}

impl NoiseSchedule {
    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.len() {
            return Err(LadError::Config(format!("timestep {t} outside [0, {})", self.len())));
        }
        Ok(())
    }

    /// `√ᾱ_t · z0 + √(1 − ᾱ_t) · ε`.
    pub fn q_sample(&self, z0: &[f32], t: usize, eps: &[f32]) -> Result<Vec<f32>> {
        self.check_t(t)?;
        if z0.len() != eps.len() {
            return Err(LadError::Shape(format!("q_sample: {} vs {} values", z0.len(), eps.len())));
        }
        let (a, b) = (self.alpha_bar[t].sqrt(), (1.0 - self.alpha_bar[t]).sqrt());
        Ok(z0
            .iter()
            .zip(eps)
            .map(|(z, e)| (a * *z as f64 + b * *e as f64) as f32)
            .collect())
    }

    pub fn sigma(&self, t: usize, kind: VarianceKind) -> f64 {
        match kind {
            VarianceKind::Beta => self.beta[t].sqrt(),
            VarianceKind::Posterior if t == 0 => 0.0,
            VarianceKind::Posterior => {
                (self.beta[t] * (1.0 - self.alpha_bar[t - 1]) / (1.0 - self.alpha_bar[t])).sqrt()
            }
        }
    }

    /// `z_{t−1} = (z_t − β_t/√(1−ᾱ_t) · ε̃) / √α_t + σ_t ξ`, with no noise at
    /// `t = 0`.
    pub fn reverse_step(&self, z_t: &[f64], eps: &[f64], t: usize, noise: &[f64], kind: VarianceKind) -> Result<Vec<f64>> {
        self.check_t(t)?;
        if z_t.len() != eps.len() || z_t.len() != noise.len() {
            return Err(LadError::Shape("reverse step: length mismatch".into()));
        }
        let coef = self.beta[t] / (1.0 - self.alpha_bar[t]).sqrt();
        let inv = 1.0 / self.alpha[t].sqrt();
        let sigma = if t == 0 { 0.0 } else { self.sigma(t, kind) };
        Ok(z_t
            .iter()
            .zip(eps)
            .zip(noise)
            .map(|((z, e), n)| inv * (z - coef * e) + sigma * n)
            .collect())
    }
}

/// `(1 + w) ε_c − w ε_u`.
pub fn combine_cfg(eps_c: &[f32], eps_u: &[f32], w: f64) -> Vec<f32> {
    if w == 0.0 {
        return eps_c.to_vec();
    }
    eps_c
        .iter()
        .zip(eps_u)
        .map(|(c, u)| ((1.0 + w) * *c as f64 - w * *u as f64) as f32)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_and_monotonicity() {
        let s = make_schedule(2, ScheduleKind::Linear).unwrap();
        assert_eq!(s.beta, vec![1e-4, 2e-2]);
        let s = make_schedule(300, ScheduleKind::Linear).unwrap();
        assert_eq!(s.len(), 300);
        assert!(s.beta.windows(2).all(|w| w[0] < w[1]));
        assert!(s.alpha_bar.windows(2).all(|w| w[0] > w[1]));
        assert!(make_schedule(1, ScheduleKind::Linear).is_err());
    }

    #[test]
    fn q_sample_branches() {
        let s = make_schedule(10, ScheduleKind::Linear).unwrap();
        let z = s.q_sample(&[2.0], 5, &[0.0]).unwrap();
        assert!((z[0] as f64 - 2.0 * s.alpha_bar[5].sqrt()).abs() < 1e-6);
        let z = s.q_sample(&[0.0], 5, &[1.0]).unwrap();
        assert!((z[0] as f64 - (1.0 - s.alpha_bar[5]).sqrt()).abs() < 1e-6);
        assert!(s.q_sample(&[0.0], 10, &[1.0]).is_err());
    }

    #[test]
    fn cfg_probe() {
        assert_eq!(combine_cfg(&[2.0], &[1.0], 1.0), vec![3.0]);
        assert_eq!(combine_cfg(&[0.7], &[0.7], 1.5), vec![0.7]);
    }

    #[test]
    fn posterior_variance_vanishes_at_zero() {
        let s = make_schedule(10, ScheduleKind::Linear).unwrap();
        assert_eq!(s.sigma(0, VarianceKind::Posterior), 0.0);
        assert!(s.sigma(5, VarianceKind::Posterior) < s.sigma(5, VarianceKind::Beta));
    }
}
