use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Linear beta schedule and derived quantities. Index `t` runs `1..=steps`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
    delta: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 6,
            beta_start: 1e-4,
            beta_end: 0.35,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_linear_schedule(self.steps, self.beta_start, self.beta_end)
    }
}

pub fn make_linear_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(Error::invalid(format!("schedule needs at least 2 steps, got {steps}")));
    }
    if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::invalid(format!(
            "betas must satisfy 0 < start <= end < 1, got {beta_start}..{beta_end}"
        )));
    }
    let span = (beta_end - beta_start) / (steps - 1) as f64;
    NoiseSchedule::from_betas((0..steps).map(|i| beta_start + span * i as f64).collect())
}

impl NoiseSchedule {
    /// Any sequence of betas in `(0, 1)`.
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() || beta.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::invalid(format!("betas must lie in (0, 1): {beta:?}")));
        }
        let mut alpha_bar = Vec::with_capacity(beta.len());
        let mut acc = 1.0;
        for b in &beta {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        let delta = (0..beta.len())
            .map(|i| {
                if i == 0 {
                    0.0
                } else {
                    ((1.0 - alpha_bar[i - 1]) / (1.0 - alpha_bar[i]) * beta[i]).sqrt()
                }
            })
            .collect();
        Ok(Self { beta, alpha_bar, delta })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn index(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            return Err(Error::invalid(format!("step {t} outside 1..={}", self.steps())));
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.beta[self.index(t)?])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(1.0 - self.beta[self.index(t)?])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        Ok(self.alpha_bar[self.index(t)?])
    }

    /// Posterior noise std; zero at `t = 1`.
    pub fn delta(&self, t: usize) -> Result<f64> {
        Ok(self.delta[self.index(t)?])
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }
}

/// `sqrt(abar_t) * s0 + sqrt(1 - abar_t) * eps`.
pub fn q_sample(s0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    if s0.shape() != eps.shape() {
        return Err(Error::shape("q_sample", format!("{:?} vs {:?}", s0.shape(), eps.shape())));
    }
    let ab = sched.alpha_bar(t)?;
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = s0.data().iter().zip(eps.data()).map(|(x, e)| a * x + b * e).collect();
    Tensor::new(s0.shape().to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Rng;
    use proptest::prelude::*;

    #[test]
    fn hand_cumulative_product() {
        let s = NoiseSchedule::from_betas(vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        for (got, want) in s.alpha_bars().iter().zip([0.9, 0.72, 0.504, 0.3024]) {
            assert!((got - want).abs() < 1e-12);
        }
        assert_eq!(s.delta(1).unwrap(), 0.0);
        let d2 = ((1.0 - 0.9) / (1.0 - 0.72) * 0.2f64).sqrt();
        assert!((s.delta(2).unwrap() - d2).abs() < 1e-15);
    }

    #[test]
    fn linear_spacing_and_ranges() {
        let s = make_linear_schedule(4, 0.1, 0.4).unwrap();
        for (t, b) in (1..=4).zip([0.1, 0.2, 0.3, 0.4]) {
            assert!((s.beta(t).unwrap() - b).abs() < 1e-15);
        }
        assert!(make_linear_schedule(1, 0.1, 0.2).is_err());
        assert!(make_linear_schedule(4, 0.0, 0.2).is_err());
        assert!(make_linear_schedule(4, 0.3, 0.2).is_err());
        assert!(make_linear_schedule(4, 0.1, 1.0).is_err());
        assert!(s.alpha_bar(0).is_err());
        assert!(s.alpha_bar(5).is_err());
    }

    #[test]
    fn desk_schedule_end_value() {
        // Product of (1 - beta) for the 6-step linear desk schedule.
        let s = ScheduleConfig::default().build().unwrap();
        let want: f64 = (0..6).map(|i| 1.0 - (1e-4 + (0.35 - 1e-4) / 5.0 * i as f64)).product();
        assert!((s.alpha_bar(6).unwrap() - want).abs() < 1e-15);
    }

    #[test]
    fn q_sample_special_cases() {
        let s = make_linear_schedule(4, 0.1, 0.4).unwrap();
        let x = Tensor::from_vec(vec![1.0, -2.0, 0.5]);
        let z = Tensor::zeros([3]);
        let e = Tensor::from_vec(vec![0.3, 0.1, -0.7]);
        let ab = s.alpha_bar(3).unwrap();
        let y = q_sample(&x, 3, &z, &s).unwrap();
        assert_eq!(y.data(), x.map(|v| ab.sqrt() * v).data());
        let y = q_sample(&z, 3, &e, &s).unwrap();
        assert_eq!(y.data(), e.map(|v| (1.0 - ab).sqrt() * v).data());
        assert!(q_sample(&x, 0, &e, &s).is_err());
        assert!(q_sample(&x, 1, &Tensor::zeros([2]), &s).is_err());
    }

    #[test]
    fn mean_propagation_matches_closed_form() {
        let s = ScheduleConfig::default().build().unwrap();
        let mut rng = Rng::new(3);
        let x = Tensor::from_vec(rng.normal_vec(16));
        let mut mean = x.clone();
        for t in 1..=s.steps() {
            let f = (1.0 - s.beta(t).unwrap()).sqrt();
            mean = mean.map(|v| v * f);
            let closed = q_sample(&x, t, &Tensor::zeros([16]), &s).unwrap();
            assert!(mean.max_abs_diff(&closed) < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn alpha_bar_strictly_decreasing(steps in 2usize..40, b0 in 1e-5f64..0.5, extra in 0.0f64..0.49) {
            let s = make_linear_schedule(steps, b0, b0 + extra).unwrap();
            prop_assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
            prop_assert_eq!(s.delta(1).unwrap(), 0.0);
            for t in 2..=steps {
                prop_assert!(s.delta(t).unwrap() > 0.0);
            }
        }
    }
}
