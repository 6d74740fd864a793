use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Linear β schedule. Steps are 1-indexed: `beta(1)` is the first step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaSchedule {
    pub beta_start: f64,
    pub beta_end: f64,
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

pub fn make_beta_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<BetaSchedule> {
    if steps == 0 {
        return Err(Error::Config("schedule needs at least one step".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let beta: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    let alpha_bar = beta
        .iter()
        .scan(1.0, |acc, b| {
            *acc *= 1.0 - b;
            Some(*acc)
        })
        .collect();
    Ok(BetaSchedule {
        beta_start,
        beta_end,
        beta,
        alpha_bar,
    })
}

impl BetaSchedule {
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.beta[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    /// Rebuilds derived arrays; used after deserialization.
    pub fn rebuild(&self) -> Result<Self> {
        make_beta_schedule(self.steps(), self.beta_start, self.beta_end)
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Config(format!("step {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }

    /// `x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) noise`.
    pub fn forward_diffuse(&self, x0: &[f64], t: usize, noise: &[f64]) -> Result<Vec<f64>> {
        self.check_step(t)?;
        if x0.len() != noise.len() {
            return Err(Error::Shape(format!(
                "image has {} values, noise has {}",
                x0.len(),
                noise.len()
            )));
        }
        let (a, b) = (self.alpha_bar(t).sqrt(), (1.0 - self.alpha_bar(t)).sqrt());
        Ok(x0.iter().zip(noise).map(|(x, e)| a * x + b * e).collect())
    }

    /// Variance of `x_0` produced by ancestral sampling when the model always
    /// predicts zero noise, starting from unit-variance `x_T`.
    pub fn zero_model_variance(&self) -> f64 {
        let mut var = 1.0;
        for t in (1..=self.steps()).rev() {
            var /= self.alpha(t);
            if t > 1 {
                var += self.beta(t);
            }
        }
        var
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_step_product() {
        let s = make_beta_schedule(2, 0.1, 0.2).unwrap();
        assert!((s.alpha_bar(1) - 0.9).abs() < 1e-15);
        assert!((s.alpha_bar(2) - 0.72).abs() < 1e-15);
    }

    #[test]
    fn long_schedule_reaches_noise() {
        let s = make_beta_schedule(1000, 1e-4, 0.02).unwrap();
        assert!(s.alpha_bar(1000) < 1e-4);
        assert!((s.beta(1) - 1e-4).abs() < 1e-18);
        assert!((s.beta(1000) - 0.02).abs() < 1e-15);
        let desk = make_beta_schedule(200, 5e-4, 0.1).unwrap();
        assert!(desk.alpha_bar(200) < 1e-4);
    }

    #[test]
    fn constant_schedule() {
        let s = make_beta_schedule(5, 0.1, 0.1).unwrap();
        for t in 1..=5 {
            assert!((s.alpha_bar(t) - 0.9f64.powi(t as i32)).abs() < 1e-14);
        }
    }

    #[test]
    fn invariants_and_errors() {
        let s = make_beta_schedule(50, 1e-3, 0.05).unwrap();
        for t in 2..=50 {
            assert!(s.beta(t) >= s.beta(t - 1));
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        }
        assert!(make_beta_schedule(0, 0.1, 0.2).is_err());
        assert!(make_beta_schedule(10, 0.0, 0.2).is_err());
        assert!(make_beta_schedule(10, 0.3, 0.2).is_err());
        assert!(make_beta_schedule(10, 0.1, 1.0).is_err());
        assert!(s.forward_diffuse(&[1.0], 0, &[0.0]).is_err());
        assert!(s.forward_diffuse(&[1.0], 51, &[0.0]).is_err());
        assert!(s.forward_diffuse(&[1.0, 2.0], 1, &[0.0]).is_err());
    }

    #[test]
    fn forward_limits() {
        let s = make_beta_schedule(1000, 1e-6, 0.5).unwrap();
        let x = s.forward_diffuse(&[3.0], 1, &[1.0]).unwrap();
        assert!((x[0] - 3.0).abs() < 1e-2);
        let x = s.forward_diffuse(&[3.0], 1000, &[1.0]).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn zero_model_variance_single_step() {
        // one step, no noise added: x0 = xT / sqrt(alpha)
        let s = make_beta_schedule(1, 0.2, 0.2).unwrap();
        assert!((s.zero_model_variance() - 1.0 / 0.8).abs() < 1e-15);
    }
}
